#pragma once

// RGB images are (1, 3, h, w) float tensors holding raw [0, 255] values.

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "acffnet/error.hpp"
#include "acffnet/tensor.hpp"

namespace acff {

using Image = Tensor<float>;

// Bilinear resampling with half-pixel centres and edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, std::size_t out_h, std::size_t out_w) {
  const Shape s = src.shape();
  if (out_h == 0 || out_w == 0) throw ShapeError("resize target has a zero dimension");
  if (s.h == out_h && s.w == out_w) return src;
  Tensor<T> dst(Shape{s.n, s.c, out_h, out_w});
  const double sy = static_cast<double>(s.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(s.w) / static_cast<double>(out_w);

  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t out, std::size_t in, double scale) {
    std::vector<Tap> t(out);
    for (std::size_t o = 0; o < out; ++o) {
      double pos = (static_cast<double>(o) + 0.5) * scale - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(pos));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, pos - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(out_h, s.h, sy);
  const auto tx = taps(out_w, s.w, sx);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = src.plane(n, c);
      T* q = dst.plane(n, c);
      for (std::size_t y = 0; y < out_h; ++y) {
        const T* r0 = p + ty[y].i0 * s.w;
        const T* r1 = p + ty[y].i1 * s.w;
        const double fy = ty[y].f;
        for (std::size_t x = 0; x < out_w; ++x) {
          const double fx = tx[x].f;
          const double top = r0[tx[x].i0] + (r0[tx[x].i1] - static_cast<double>(r0[tx[x].i0])) * fx;
          const double bot = r1[tx[x].i0] + (r1[tx[x].i1] - static_cast<double>(r1[tx[x].i0])) * fx;
          q[y * out_w + x] = static_cast<T>(top + (bot - top) * fy);
        }
      }
    }
  return dst;
}

template <typename T>
void clip_inplace(Tensor<T>& t, T lo = T(0), T hi = T(255)) {
  for (auto& v : t.data()) v = std::clamp(v, lo, hi);
}

template <typename T>
Tensor<T> mirror_horizontal(const Tensor<T>& src) {
  Tensor<T> out(src.shape());
  const Shape s = src.shape();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* a = src.raw() + p * s.plane();
    T* b = out.raw() + p * s.plane();
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) b[y * s.w + x] = a[y * s.w + (s.w - 1 - x)];
  }
  return out;
}

// Crop rows [y, y+h) and columns [x, x+w).
template <typename T>
Tensor<T> crop(const Tensor<T>& src, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  const Shape s = src.shape();
  if (y + h > s.h || x + w > s.w) throw ShapeError("crop window outside image " + s.str());
  Tensor<T> out(Shape{s.n, s.c, h, w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t r = 0; r < h; ++r)
        std::copy_n(src.plane(n, c) + (y + r) * s.w + x, w, out.plane(n, c) + r * w);
  return out;
}

// ---------------------------------------------------------------------------
// Codecs
// ---------------------------------------------------------------------------

struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> rgb;  // interleaved 8-bit RGB
};

inline Image to_tensor(const RawImage& raw) {
  Image img(Shape{1, 3, raw.height, raw.width});
  const std::size_t plane = raw.width * raw.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] = raw.rgb[i * 3 + c];
  return img;
}

// Rounds and clamps to 8 bits. One-channel tensors become gray RGB.
template <typename T>
RawImage to_raw(const Tensor<T>& img) {
  const Shape s = img.shape();
  if (s.n != 1 || (s.c != 3 && s.c != 1)) throw ShapeError("image tensor must be (1, 3|1, h, w), got " + s.str());
  RawImage raw{s.w, s.h, std::vector<unsigned char>(s.plane() * 3)};
  for (std::size_t i = 0; i < s.plane(); ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = static_cast<double>(img[(s.c == 3 ? c : 0) * s.plane() + i]);
      raw.rgb[i * 3 + c] = static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
    }
  return raw;
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline bool is_png(const std::vector<unsigned char>& d) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return d.size() >= 8 && std::memcmp(d.data(), sig, 8) == 0;
}
inline bool is_jpeg(const std::vector<unsigned char>& d) {
  return d.size() >= 3 && d[0] == 0xFF && d[1] == 0xD8 && d[2] == 0xFF;
}

inline RawImage decode_png(const std::vector<unsigned char>& data, const std::string& what) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, data.data(), data.size()))
    throw IoError("corrupt PNG '" + what + "': " + image.message);
  image.format = PNG_FORMAT_RGB;
  RawImage raw{image.width, image.height, std::vector<unsigned char>(PNG_IMAGE_SIZE(image))};
  if (!png_image_finish_read(&image, nullptr, raw.rgb.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("corrupt PNG '" + what + "': " + msg);
  }
  return raw;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// No objects with destructors live in this frame across setjmp.
inline bool decode_jpeg_raw(const unsigned char* data, std::size_t len, RawImage* out, char* message) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::strncpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(len));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out->width = cinfo.output_width;
  out->height = cinfo.output_height;
  out->rgb.resize(out->width * out->height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out->rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * out->width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

inline bool encode_jpeg_raw(const RawImage* raw, int quality, unsigned char** buf, unsigned long* size,
                            char* message) {
  jpeg_compress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::strncpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, buf, size);
  cinfo.image_width = static_cast<JDIMENSION>(raw->width);
  cinfo.image_height = static_cast<JDIMENSION>(raw->height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<unsigned char*>(raw->rgb.data()) +
                   static_cast<std::size_t>(cinfo.next_scanline) * raw->width * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

// Writes next to the destination, then renames over it.
inline void write_atomically(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename onto '" + path.string() + "': " + ec.message());
  }
}

}  // namespace detail

// True when the file starts with a PNG or JPEG signature.
inline bool looks_like_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::vector<unsigned char> head(8, 0);
  in.read(reinterpret_cast<char*>(head.data()), 8);
  head.resize(static_cast<std::size_t>(in.gcount()));
  return detail::is_png(head) || detail::is_jpeg(head);
}

inline RawImage decode_raw(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  if (detail::is_png(data)) return detail::decode_png(data, path.string());
  if (detail::is_jpeg(data)) {
    RawImage raw;
    char message[JMSG_LENGTH_MAX] = {0};
    if (!detail::decode_jpeg_raw(data.data(), data.size(), &raw, message))
      throw IoError("corrupt JPEG '" + path.string() + "': " + message);
    return raw;
  }
  throw IoError("'" + path.string() + "' is not a PNG or JPEG image");
}

inline Image decode_image(const std::filesystem::path& path) { return to_tensor(decode_raw(path)); }

// (1, 3, target, target) RGB tensor in [0, 255].
inline Image decode_resize(const std::filesystem::path& path, std::size_t target = 240) {
  Image img = resize_bilinear(decode_image(path), target, target);
  clip_inplace(img);
  return img;
}

template <typename T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img) {
  RawImage raw = to_raw(img);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raw.width);
  image.height = static_cast<png_uint_32>(raw.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.rgb.data(), 0, nullptr))
    throw IoError("PNG encode failed: " + std::string(image.message));
  std::vector<unsigned char> buf(size);
  if (!png_image_write_to_memory(&image, buf.data(), &size, 0, raw.rgb.data(), 0, nullptr))
    throw IoError("PNG encode failed: " + std::string(image.message));
  detail::write_atomically(path, buf.data(), size);
}

template <typename T>
void write_jpeg(const std::filesystem::path& path, const Tensor<T>& img, int quality = 95) {
  RawImage raw = to_raw(img);
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  char message[JMSG_LENGTH_MAX] = {0};
  const bool ok = detail::encode_jpeg_raw(&raw, quality, &buf, &size, message);
  if (!ok) {
    std::free(buf);
    throw IoError("JPEG encode failed: " + std::string(message));
  }
  try {
    detail::write_atomically(path, buf, size);
  } catch (...) {
    std::free(buf);
    throw;
  }
  std::free(buf);
}

// Jet colour map of a [0, 1] map, alpha-blended over an RGB image.
inline Image colorize(const Tensor<float>& map, const Image* base = nullptr, float alpha = 0.5f) {
  const Shape s = map.shape();
  Image out(Shape{1, 3, s.h, s.w});
  const std::size_t plane = s.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    const float v = std::clamp(map[i], 0.0f, 1.0f);
    const float r = std::clamp(1.5f - std::abs(4.0f * v - 3.0f), 0.0f, 1.0f);
    const float g = std::clamp(1.5f - std::abs(4.0f * v - 2.0f), 0.0f, 1.0f);
    const float b = std::clamp(1.5f - std::abs(4.0f * v - 1.0f), 0.0f, 1.0f);
    const float rgb[3] = {r * 255.0f, g * 255.0f, b * 255.0f};
    for (std::size_t c = 0; c < 3; ++c) {
      const float under = base ? (*base)[c * plane + i] : rgb[c];
      out[c * plane + i] = alpha * rgb[c] + (1.0f - alpha) * under;
    }
  }
  return out;
}

}  // namespace acff

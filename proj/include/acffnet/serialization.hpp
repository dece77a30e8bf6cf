#pragma once

// Weight file layout, all integers little-endian u32:
//   "ACFF" | version | config length | config bytes (key=value lines)
//   | record count | records... | CRC-32 of everything before it
// record: name length | name | dtype | rank | dims... | f32 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "acffnet/error.hpp"
#include "acffnet/graph.hpp"
#include "acffnet/image.hpp"
#include "acffnet/model_zoo.hpp"

namespace acff {

inline constexpr std::uint32_t weights_version = 1;
inline constexpr std::uint32_t dtype_f32 = 1;

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw FormatError("weight file ends inside a record");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

template <typename V>
std::string join(const std::vector<V>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = s.find(',', start);
    out.push_back(s.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw FormatError("config key '" + key + "' has a bad integer '" + v + "'");
  return static_cast<std::size_t>(x);
}

}  // namespace detail

inline std::string encode_recipe(const ModelRecipe& r) {
  for (const auto& l : r.labels)
    if (l.find_first_of(",\n=") != std::string::npos) throw ConfigError("class label '" + l + "' has a reserved character");
  std::ostringstream os;
  char dropout[32];
  std::snprintf(dropout, sizeof dropout, "%.17g", r.dropout);
  os << "arch=" << r.arch << '\n'
     << "fusion=" << to_string(r.fusion) << '\n'
     << "classes=" << r.classes << '\n'
     << "input=" << r.input << '\n'
     << "channels=" << detail::join(r.channels) << '\n'
     << "dilations=" << detail::join(r.dilations) << '\n'
     << "reduction=" << r.reduction << '\n'
     << "skip=" << (r.skip ? 1 : 0) << '\n'
     << "dropout=" << dropout << '\n'
     << "labels=" << detail::join(r.labels) << '\n';
  return os.str();
}

inline ModelRecipe decode_recipe(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line '" + line + "' is not key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("config block lacks '") + key + "'");
    return it->second;
  };
  auto sizes = [&](const char* key) {
    std::vector<std::size_t> out;
    for (const auto& s : detail::split_list(get(key))) out.push_back(detail::parse_size(key, s));
    return out;
  };
  ModelRecipe r;
  r.arch = get("arch");
  try {
    r.fusion = parse_fusion(get("fusion"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  r.classes = detail::parse_size("classes", get("classes"));
  r.input = detail::parse_size("input", get("input"));
  r.channels = sizes("channels");
  r.dilations = sizes("dilations");
  r.reduction = detail::parse_size("reduction", get("reduction"));
  r.skip = detail::parse_size("skip", get("skip")) != 0;
  try {
    r.dropout = std::stod(get("dropout"));
  } catch (const std::exception&) {
    throw FormatError("config key 'dropout' is not a number");
  }
  r.labels = detail::split_list(get("labels"));
  return r;
}

// Serialized bytes of a graph's parameters (as f32) and build recipe.
template <typename T>
std::vector<unsigned char> encode_weights(const ModelGraph<T>& g) {
  if (!g.recipe()) throw ConfigError("only graphs built from a recipe can be saved");
  detail::ByteWriter w;
  w.raw("ACFF", 4);
  w.u32(weights_version);
  w.str(encode_recipe(*g.recipe()));
  w.u32(static_cast<std::uint32_t>(g.params().size()));
  for (const auto& p : g.params()) {
    w.str(p.name);
    w.u32(dtype_f32);
    w.u32(static_cast<std::uint32_t>(p.dims.size()));
    for (auto d : p.dims) w.u32(d);
    for (T v : p.value.data()) w.f32(static_cast<float>(v));
  }
  auto& bytes = w.bytes();
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size());
  w.u32(crc);
  return std::move(bytes);
}

// Validates magic, CRC, version and every record before returning a graph.
template <typename T = float>
ModelGraph<T> decode_weights(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ACFF", 4) != 0) throw FormatError("not an ACFF weight file");
  if (bytes.size() < 20) throw FormatError("CRC mismatch: weight file is truncated");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  if (tail.u32() != crc32_of(bytes.data(), body)) throw FormatError("CRC mismatch: weight file is corrupt or truncated");

  detail::ByteReader r(bytes.data() + 4, body - 4);
  const std::uint32_t version = r.u32();
  if (version != weights_version) throw FormatError("unsupported weight file version " + std::to_string(version));
  const ModelRecipe recipe = decode_recipe(r.str());
  ModelGraph<T> g;
  try {
    g = build_from_recipe<T>(recipe);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("config block does not describe a valid model: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  if (count != g.params().size())
    throw FormatError("file has " + std::to_string(count) + " records, model expects " +
                      std::to_string(g.params().size()));
  std::set<std::size_t> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::size_t id = g.params().find(name);
    if (id == npos) throw FormatError("record '" + name + "' does not belong to the model");
    if (!seen.insert(id).second) throw FormatError("record '" + name + "' appears twice");
    auto& p = g.params()[id];
    if (r.u32() != dtype_f32) throw FormatError("record '" + name + "' has an unsupported dtype");
    const std::uint32_t rank = r.u32();
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) d = r.u32();
    if (dims != p.dims) throw FormatError("record '" + name + "' shape does not match the model");
    for (auto& v : p.value.data()) v = static_cast<T>(r.f32());
  }
  if (!r.done()) throw FormatError("trailing bytes after the last record");
  g.mark_initialized();
  return g;
}

template <typename T>
void save_weights(const ModelGraph<T>& g, const std::filesystem::path& path) {
  const auto bytes = encode_weights(g);
  detail::write_atomically(path, bytes.data(), bytes.size());
}

template <typename T = float>
ModelGraph<T> load_weights(const std::filesystem::path& path) {
  return decode_weights<T>(detail::read_file(path));
}

}  // namespace acff

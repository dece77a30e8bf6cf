#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "acffnet/error.hpp"

namespace acff {

// (batch, channels, rows, columns)
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t count() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr std::size_t sample() const { return c * h * w; }
  constexpr bool live() const { return n > 0 && c > 0 && h > 0 && w > 0; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

enum class Phase { train, infer };

// Dense NCHW tensor, row-major, owning its storage.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(shape) {
    if (!shape.live()) throw ShapeError("tensor shape has a zero dimension: " + shape.str());
    data_.assign(shape.count(), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (!shape.live()) throw ShapeError("tensor shape has a zero dimension: " + shape.str());
    if (data_.size() != shape.count())
      throw ShapeError("tensor data length does not match shape " + shape.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[offset(n, c, y, x)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  // Start of the (n, c) spatial plane.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.raw(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

template <typename T>
Tensor<T> tensor_new(Shape shape, T fill) {
  return Tensor<T>(shape, fill);
}

enum class Combine { add, max, average };

// Precision of the running sum in add/average combination.
enum class Accumulate { native, wide };

// Pointwise sum/max/mean of equally shaped tensors, accumulated in list order.
template <typename T>
Tensor<T> elementwise_combine(std::span<const Tensor<T>* const> inputs, Combine mode,
                              Accumulate acc = Accumulate::native) {
  if (inputs.size() < 2) throw ShapeError("elementwise_combine needs at least two tensors");
  const Shape shape = inputs[0]->shape();
  for (const auto* t : inputs)
    if (t->shape() != shape)
      throw ShapeError("elementwise_combine shape mismatch: " + shape.str() + " vs " + t->shape().str());

  Tensor<T> out(shape);
  const std::size_t count = shape.count();
  const T* first = inputs[0]->raw();
  T* dst = out.raw();
  if (mode == Combine::max) {
    std::copy(first, first + count, dst);
    for (std::size_t k = 1; k < inputs.size(); ++k) {
      const T* src = inputs[k]->raw();
      for (std::size_t i = 0; i < count; ++i) dst[i] = src[i] > dst[i] ? src[i] : dst[i];
    }
    return out;
  }
  const std::size_t k_count = inputs.size();
  if (acc == Accumulate::wide) {
    std::vector<double> sum(first, first + count);
    for (std::size_t k = 1; k < k_count; ++k) {
      const T* src = inputs[k]->raw();
      for (std::size_t i = 0; i < count; ++i) sum[i] += static_cast<double>(src[i]);
    }
    const double scale = mode == Combine::average ? 1.0 / static_cast<double>(k_count) : 1.0;
    for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<T>(sum[i] * scale);
    return out;
  }
  std::copy(first, first + count, dst);
  for (std::size_t k = 1; k < k_count; ++k) {
    const T* src = inputs[k]->raw();
    for (std::size_t i = 0; i < count; ++i) dst[i] += src[i];
  }
  if (mode == Combine::average) {
    const T scale = T(1) / static_cast<T>(k_count);
    for (std::size_t i = 0; i < count; ++i) dst[i] *= scale;
  }
  return out;
}

template <typename T>
Tensor<T> elementwise_combine(std::initializer_list<const Tensor<T>*> inputs, Combine mode,
                              Accumulate acc = Accumulate::native) {
  return elementwise_combine<T>(std::span<const Tensor<T>* const>(inputs.begin(), inputs.size()), mode, acc);
}

// Stacks tensors along the channel axis, preserving input order.
template <typename T>
Tensor<T> channel_concat(std::span<const Tensor<T>* const> inputs) {
  if (inputs.empty()) throw ShapeError("channel_concat needs at least one tensor");
  const Shape first = inputs[0]->shape();
  std::size_t channels = 0;
  for (const auto* t : inputs) {
    const Shape& s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeError("channel_concat spatial mismatch: " + first.str() + " vs " + s.str());
    channels += s.c;
  }
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t c0 = 0;
    for (const auto* t : inputs) {
      const std::size_t len = t->shape().c * plane;
      std::copy_n(t->plane(n, 0), len, out.plane(n, c0));
      c0 += t->shape().c;
    }
  }
  return out;
}

template <typename T>
Tensor<T> channel_concat(std::initializer_list<const Tensor<T>*> inputs) {
  return channel_concat<T>(std::span<const Tensor<T>* const>(inputs.begin(), inputs.size()));
}

// Channels [begin, begin + count) of every sample.
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  const Shape s = input.shape();
  if (count == 0 || begin + count > s.c)
    throw ShapeError("channel_slice out of range for " + s.str());
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) std::copy_n(input.plane(n, begin), count * s.plane(), out.plane(n, 0));
  return out;
}

// Sample n as a batch-1 tensor.
template <typename T>
Tensor<T> sample_of(const Tensor<T>& batch, std::size_t n) {
  const Shape s = batch.shape();
  if (n >= s.n) throw ShapeError("sample index out of range");
  Tensor<T> out(Shape{1, s.c, s.h, s.w});
  std::copy_n(batch.plane(n, 0), s.sample(), out.raw());
  return out;
}

template <typename T>
Tensor<T> stack_samples(std::span<const Tensor<T>> samples) {
  if (samples.empty()) throw ShapeError("stack_samples needs at least one tensor");
  const Shape s = samples[0].shape();
  Tensor<T> out(Shape{samples.size(), s.c, s.h, s.w});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Shape& si = samples[i].shape();
    if (si.n != 1 || si.c != s.c || si.h != s.h || si.w != s.w)
      throw ShapeError("stack_samples shape mismatch");
    std::copy_n(samples[i].raw(), s.sample(), out.plane(i, 0));
  }
  return out;
}

}  // namespace acff

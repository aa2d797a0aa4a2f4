// Dense row-major tensors backed by Eigen arrays.
//
// Tensors are plain values: copyable, immutable-by-convention once handed to a
// Graph, and always finite (ops reject NaN/Inf instead of propagating it).
// Scalar type is a template parameter: float for training, double for
// gradient-check mode.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pgrd {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
class Tensor {
 public:
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Storage>;
  using ConstArrayMap = Eigen::Map<const Storage>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Storage::Zero(numel(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = Eigen::Map<const Storage>(values.data(),
                                        static_cast<Eigen::Index>(values.size()));
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<S> values) {
    return from(std::move(shape), std::vector<S>(values));
  }

  static Tensor scalar(S value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return data_.size(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  ArrayMap array() { return ArrayMap(data_.data(), data_.size()); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), data_.size()); }

  S& operator[](std::int64_t i) { return data_[i]; }
  S operator[](std::int64_t i) const { return data_[i]; }

  // 4-D accessor for [B,C,H,W] tensors.
  S& at4(int b, int c, int h, int w) { return data_[index4(b, c, h, w)]; }
  S at4(int b, int c, int h, int w) const { return data_[index4(b, c, h, w)]; }

  std::int64_t index4(int b, int c, int h, int w) const {
    const auto& s = shape_;
    return ((static_cast<std::int64_t>(b) * s[1] + c) * s[2] + h) * s[3] + w;
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) {
    requires_grad_ = flag;
    return *this;
  }

  bool all_finite() const { return data_.isFinite().all(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out = Tensor<T>::zeros(shape_);
    out.array() = data_.template cast<T>();
    out.set_requires_grad(requires_grad_);
    return out;
  }

  bool bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(),
                       sizeof(S) * static_cast<std::size_t>(data_.size())) == 0;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
    for (int d : shape) {
      if (d <= 0) {
        throw std::invalid_argument("tensor extents must be positive, got " +
                                    shape_str(shape));
      }
    }
  }

  Shape shape_;
  Storage data_;
  bool requires_grad_ = false;
};

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return (a.array().template cast<double>() - b.array().template cast<double>())
      .abs()
      .maxCoeff();
}

}  // namespace pgrd

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dedn/errors.hpp"

namespace dedn {

inline std::string shape_string(std::span<const std::size_t> shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

/// Dense row-major array of a floating-point type. A tensor may carry a
/// handle (tape id + node id) linking it to the tape that produced it;
/// tensors without a handle are plain values. Treat the payload as immutable
/// once the tensor has been handed to a tape or shared across threads.
template <typename T>
class TensorT {
  static_assert(std::is_floating_point_v<T>);

 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), T{}) {}

  TensorT(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape_) + " expects " +
                       std::to_string(count(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static TensorT scalar(T value) { return TensorT({}, {value}); }

  static TensorT full(std::vector<std::size_t> shape, T value) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const {
    if (rank() != 2) {
      throw ContractError("tensor: cols() requires rank 2, have " +
                          shape_string(shape_));
    }
    return shape_[1];
  }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  T operator()(std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i) { return data_[i]; }
  T operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }

  /// Value of a single-element tensor.
  T item() const {
    if (size() != 1) {
      throw ContractError("tensor: item() requires a single element, have " +
                          shape_string(shape_));
    }
    return data_[0];
  }

  bool all_finite() const {
    for (T x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  // Tape handle. node < 0 means the tensor is not attached to any tape.
  int node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }
  bool on_tape() const { return node_ >= 0; }
  void attach(std::uint64_t tape_id, int node) {
    tape_id_ = tape_id;
    node_ = node;
  }
  void detach() {
    tape_id_ = 0;
    node_ = -1;
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
  std::uint64_t tape_id_ = 0;
  int node_ = -1;
};

using Tensor = TensorT<float>;

/// Convert payload between precisions (handle is dropped).
template <typename To, typename From>
TensorT<To> cast(const TensorT<From>& t) {
  std::vector<To> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    out[i] = static_cast<To>(t.data()[i]);
  }
  return TensorT<To>(t.shape(), std::move(out));
}

}  // namespace dedn

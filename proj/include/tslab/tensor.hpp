#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace tslab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor. Rank-0 and rank-1 tensors are viewed as a single
// row when matrix semantics are needed.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0));
  Tensor(Shape s, std::vector<T> values);

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  T item() const;

  bool all_finite() const;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;

}  // namespace tslab

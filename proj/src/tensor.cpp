#include "tslab/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <type_traits>

namespace tslab {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                     shape_string(shape));
  }
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  if (shape.size() <= 1) return 1;
  if (shape.size() == 2) return shape[0];
  throw ShapeError("rows(): tensor of rank " + std::to_string(shape.size()) + " is not a matrix");
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  if (shape.size() == 2) return shape[1];
  throw ShapeError("cols(): tensor of rank " + std::to_string(shape.size()) + " is not a matrix");
}

template <typename T>
T Tensor<T>::item() const {
  if (data.size() != 1) throw ShapeError("item(): tensor has shape " + shape_string(shape));
  return data[0];
}

namespace {

// Exponent-all-ones test on the raw bits; vectorises where isfinite() does not.
template <typename T, typename Bits>
bool finite_bits(const std::vector<T>& data, Bits exp_mask) {
  Bits bad = 0;
  for (T v : data) {
    Bits b;
    std::memcpy(&b, &v, sizeof(b));
    bad |= static_cast<Bits>((b & exp_mask) == exp_mask);
  }
  return bad == 0;
}

}  // namespace

template <typename T>
bool Tensor<T>::all_finite() const {
  if constexpr (std::is_same_v<T, float>) {
    return finite_bits<float, std::uint32_t>(data, 0x7f800000u);
  } else {
    return finite_bits<double, std::uint64_t>(data, 0x7ff0000000000000ull);
  }
}

template struct Tensor<float>;
template struct Tensor<double>;

}  // namespace tslab

#pragma once

// Reverse-mode differentiation over a per-thread tape.
//
// A Tape owns every value produced during a forward pass. Var is a cheap
// handle (tape pointer + node index). Nodes are appended in evaluation order,
// so the tape is topologically sorted by construction and backward() simply
// walks it in reverse. Results of operations whose inputs carry no gradient
// are stored as constant leaves and never visited by backward().

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "tslab/tensor.hpp"

namespace tslab::ad {

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  matmul_nt,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  softmax,
  log_softmax,
  weighted_softmax,
  sigmoid,
  gelu,
  relu,
  square,
  exp,
  log,
  layernorm,
  transpose,
  gather_rows,
  gather_cols,
  gather_elements,
  slice_cols,
  concat_rows,
  concat_cols,
  sum,
  mean,
  sum_axis,
  l2_norm_rows,
  reshape,
  clamp,
  straight_through,
};

std::string_view op_name(OpKind kind);

class UnsupportedOpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool defined() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  T item() const { return value().item(); }
  bool requires_grad() const;
  // Accumulated gradient; zero-filled when nothing has flowed in yet.
  std::vector<T> grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Seeds d(root)/d(root) = 1 and propagates to every node in reverse
  // insertion order. Intermediate gradients are reset first, leaf gradients
  // accumulate across calls until zero_grad().
  void backward(const Var<T>& root);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  // Drops every node recorded after the first `n`. Vars pointing past the
  // mark become dangling.
  void truncate(std::size_t n) {
    if (n < nodes_.size()) nodes_.resize(n);
  }

  // Used by operation implementations.
  Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::uint32_t> inputs, BackwardFn fn);
  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  // Leaves only; used by optimizers to update parameters in place.
  Tensor<T>& mutable_value(std::uint32_t id);
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  OpKind kind(std::uint32_t id) const { return nodes_[id].kind; }
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_[id].inputs; }
  std::vector<T>& grad(std::uint32_t id);
  bool has_grad(std::uint32_t id) const { return !nodes_[id].grad.empty(); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------
// Matrix operations treat rank-0/1 tensors as a single row. Binary
// elementwise operations broadcast along matrix dimensions of size one.

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// a * b^T
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);
// axis 0 normalises columns, axis 1 (default) normalises rows.
template <typename T> Var<T> softmax(const Var<T>& a, int axis = 1);
template <typename T> Var<T> log_softmax(const Var<T>& a);
// Row softmax where key j is weighted by key_weights[j] >= 0. A zero weight
// gives the key exactly zero attention; weights are differentiable.
template <typename T> Var<T> weighted_softmax(const Var<T>& logits, const Var<T>& key_weights);
template <typename T> Var<T> sigmoid(const Var<T>& a);
// tanh approximation
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> gather_rows(const Var<T>& a, std::span<const int> rows);
template <typename T> Var<T> gather_cols(const Var<T>& a, std::span<const int> cols);
// out.flat[i] = a.flat[index[i]], or 0 where index[i] < 0.
template <typename T>
Var<T> gather_elements(const Var<T>& a, std::span<const std::int64_t> index, Shape out_shape);
template <typename T> Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// axis 0 -> 1 x cols, axis 1 -> rows x 1
template <typename T> Var<T> sum_axis(const Var<T>& a, int axis);
template <typename T> Var<T> l2_norm_rows(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
// Gradient passes where lo <= x <= hi.
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
// Forward value of `hard`, gradient routed to `soft` unchanged.
template <typename T> Var<T> straight_through(const Tensor<T>& hard, const Var<T>& soft);

// Uniform dispatch for the parameter-free kinds (softmax over the last axis).
template <typename T> Var<T> op_forward(OpKind kind, std::span<const Var<T>> inputs);

// Gumbel-Softmax along the last axis. `noise` holds pre-drawn Gumbel samples
// of the logits' shape; absent noise means zero noise. Hard mode emits the
// one-hot argmax in the forward pass with the soft sample's gradient.
template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, T temperature, bool hard, const Tensor<T>* noise = nullptr);

template <typename T> Tensor<T> sample_gumbel(const Shape& shape, std::mt19937_64& rng);

// Elementwise -1 / 0 / +1 with sign(0) = 0.
template <typename T> Tensor<T> sign(const Tensor<T>& t);

}  // namespace tslab::ad

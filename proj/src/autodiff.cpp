#include "tslab/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tslab::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::weighted_softmax: return "weighted_softmax";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::gelu: return "gelu";
    case OpKind::relu: return "relu";
    case OpKind::square: return "square";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::layernorm: return "layernorm";
    case OpKind::transpose: return "transpose";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::gather_cols: return "gather_cols";
    case OpKind::gather_elements: return "gather_elements";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::l2_norm_rows: return "l2_norm_rows";
    case OpKind::reshape: return "reshape";
    case OpKind::clamp: return "clamp";
    case OpKind::straight_through: return "straight_through";
  }
  return "unknown";
}

// ---- Var / Tape -------------------------------------------------------------

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
std::vector<T> Var<T>::grad() const {
  if (tape_->has_grad(id_)) return tape_->grad(id_);
  return std::vector<T>(size(), T(0));
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (!value.all_finite()) throw NonFiniteError("leaf: non-finite value");
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, Tensor<T> value, std::vector<std::uint32_t> inputs,
                       BackwardFn fn) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(op_name(kind)) + ": non-finite output");
  }
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <typename T>
std::vector<T>& Tape<T>::grad(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
  if (&root.tape() != this) throw std::logic_error("backward: root belongs to another tape");
  if (root.size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_string(root.shape()));
  }
  for (auto& n : nodes_) {
    if (n.backward) n.grad.clear();
  }
  grad(root.id())[0] += T(1);
  for (std::int64_t i = root.id(); i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, static_cast<std::uint32_t>(i));
  }
}

template <typename T>
Tensor<T>& Tape<T>::mutable_value(std::uint32_t id) {
  if (nodes_[id].kind != OpKind::leaf) throw std::logic_error("mutable_value: node is not a leaf");
  return nodes_[id].value;
}

template <typename T>
void Tape<T>::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

// ---- helpers ------------------------------------------------------------------

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (!a.defined() || !b.defined()) throw std::invalid_argument("operation on undefined Var");
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
  return a.tape();
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a) {
  if (!a.defined()) throw std::invalid_argument("operation on undefined Var");
  return a.tape();
}

std::size_t mrows(const Shape& s) { return s.size() <= 1 ? 1 : s[0]; }
std::size_t mcols(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require_matrix(const Shape& s, std::string_view op) {
  if (s.size() > 2) {
    throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_string(s));
  }
}

struct Broadcast {
  bool flat = false;
  std::size_t rows = 0, cols = 0;
  std::size_t ra = 0, ca = 0, rb = 0, cb = 0;
  Shape out;
};

Broadcast make_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  Broadcast bc;
  if (a == b) {
    bc.flat = true;
    bc.out = a;
    return bc;
  }
  require_matrix(a, op);
  require_matrix(b, op);
  bc.ra = mrows(a);
  bc.ca = mcols(a);
  bc.rb = mrows(b);
  bc.cb = mcols(b);
  auto merge = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                     shape_string(b));
  };
  bc.rows = merge(bc.ra, bc.rb);
  bc.cols = merge(bc.ca, bc.cb);
  bc.out = Shape{bc.rows, bc.cols};
  return bc;
}

// Row loop with compile-time column strides (0 = broadcast, 1 = contiguous)
// so the inner loop vectorises.
template <std::size_t SA, std::size_t SB, typename Fn>
void for_cols(std::size_t cols, std::size_t oa, std::size_t ob, std::size_t oo, Fn fn) {
  for (std::size_t j = 0; j < cols; ++j) fn(oa + j * SA, ob + j * SB, oo + j);
}

template <typename Fn>
void for_broadcast(const Broadcast& bc, Fn fn) {
  const bool sa = bc.ca != 1, sb = bc.cb != 1;
  for (std::size_t i = 0; i < bc.rows; ++i) {
    const std::size_t oa = (bc.ra == 1 ? 0 : i) * bc.ca;
    const std::size_t ob = (bc.rb == 1 ? 0 : i) * bc.cb;
    const std::size_t oo = i * bc.cols;
    if (sa && sb) for_cols<1, 1>(bc.cols, oa, ob, oo, fn);
    else if (sa) for_cols<1, 0>(bc.cols, oa, ob, oo, fn);
    else if (sb) for_cols<0, 1>(bc.cols, oa, ob, oo, fn);
    else for_cols<0, 0>(bc.cols, oa, ob, oo, fn);
  }
}

template <typename T, typename F, typename DA, typename DB>
Var<T> binary(OpKind kind, const Var<T>& a, const Var<T>& b, F f, DA dfa, DB dfb) {
  Tape<T>& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Broadcast bc = make_broadcast(av.shape, bv.shape, op_name(kind));
  Tensor<T> out(bc.out);
  {
    const T* x = av.data.data();
    const T* y = bv.data.data();
    T* o = out.data.data();
    if (bc.flat) {
      for (std::size_t i = 0; i < out.size(); ++i) o[i] = f(x[i], y[i]);
    } else {
      for_broadcast(bc, [&](std::size_t pa, std::size_t pb, std::size_t po) { o[po] = f(x[pa], y[pb]); });
    }
  }
  const std::uint32_t ida = a.id(), idb = b.id();
  return tape.record(kind, std::move(out), {ida, idb},
                     [bc, ida, idb, dfa, dfb](Tape<T>& t, std::uint32_t self) {
                       const T* g = t.grad(self).data();
                       const T* x = t.value(ida).data.data();
                       const T* y = t.value(idb).data.data();
                       const std::size_t n = t.value(self).size();
                       if (t.requires_grad(ida)) {
                         T* ga = t.grad(ida).data();
                         if (bc.flat) {
                           for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * dfa(x[i], y[i]);
                         } else {
                           for_broadcast(bc, [&](std::size_t pa, std::size_t pb, std::size_t po) {
                             ga[pa] += g[po] * dfa(x[pa], y[pb]);
                           });
                         }
                       }
                       if (t.requires_grad(idb)) {
                         T* gb = t.grad(idb).data();
                         if (bc.flat) {
                           for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * dfb(x[i], y[i]);
                         } else {
                           for_broadcast(bc, [&](std::size_t pa, std::size_t pb, std::size_t po) {
                             gb[pb] += g[po] * dfb(x[pa], y[pb]);
                           });
                         }
                       }
                     });
}

// Elementwise op whose derivative is expressed through input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(OpKind kind, const Var<T>& a, F f, D df) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(av.data[i]);
  const std::uint32_t ida = a.id();
  return tape.record(kind, std::move(out), {ida}, [ida, df](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ida).data;
    const auto& y = t.value(self).data;
    auto& ga = t.grad(ida);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

// ---- linear algebra -----------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av.shape, "matmul");
  require_matrix(bv.shape, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  }
  Tensor<T> out(Shape{m, n});
  MMap<T>(out.data.data(), m, n).noalias() =
      CMap<T>(av.data.data(), m, k) * CMap<T>(bv.data.data(), k, n);
  const std::uint32_t ida = a.id(), idb = b.id();
  return tape.record(OpKind::matmul, std::move(out), {ida, idb},
                     [ida, idb, m, k, n](Tape<T>& t, std::uint32_t self) {
                       CMap<T> g(t.grad(self).data(), m, n);
                       if (t.requires_grad(ida)) {
                         MMap<T>(t.grad(ida).data(), m, k).noalias() +=
                             g * CMap<T>(t.value(idb).data.data(), k, n).transpose();
                       }
                       if (t.requires_grad(idb)) {
                         MMap<T>(t.grad(idb).data(), k, n).noalias() +=
                             CMap<T>(t.value(ida).data.data(), m, k).transpose() * g;
                       }
                     });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av.shape, "matmul_nt");
  require_matrix(bv.shape, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_string(av.shape) + " x " + shape_string(bv.shape) +
                     "^T");
  }
  Tensor<T> out(Shape{m, n});
  MMap<T>(out.data.data(), m, n).noalias() =
      CMap<T>(av.data.data(), m, k) * CMap<T>(bv.data.data(), n, k).transpose();
  const std::uint32_t ida = a.id(), idb = b.id();
  return tape.record(OpKind::matmul_nt, std::move(out), {ida, idb},
                     [ida, idb, m, k, n](Tape<T>& t, std::uint32_t self) {
                       CMap<T> g(t.grad(self).data(), m, n);
                       if (t.requires_grad(ida)) {
                         MMap<T>(t.grad(ida).data(), m, k).noalias() +=
                             g * CMap<T>(t.value(idb).data.data(), n, k);
                       }
                       if (t.requires_grad(idb)) {
                         MMap<T>(t.grad(idb).data(), n, k).noalias() +=
                             g.transpose() * CMap<T>(t.value(ida).data.data(), m, k);
                       }
                     });
}

// ---- elementwise ----------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(
      OpKind::add, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(
      OpKind::sub, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(
      OpKind::mul, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(
      OpKind::div, a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(
      OpKind::scale, a, [factor](T x) { return x * factor; },
      [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  return unary(
      OpKind::add_scalar, a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      OpKind::sigmoid, a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

namespace {
template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = T(0.044715);
}  // namespace

template <typename T>
Var<T> gelu(const Var<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  const Eigen::Index n = static_cast<Eigen::Index>(av.size());
  Eigen::Map<const Arr> x(av.data.data(), n);
  Arr th = (kGeluC<T> * (x + kGeluA<T> * x.cube())).tanh();
  Tensor<T> out(av.shape);
  Eigen::Map<Arr>(out.data.data(), n) = T(0.5) * x * (T(1) + th);
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::gelu, std::move(out), {ida},
                     [ida, th = std::move(th)](Tape<T>& t, std::uint32_t self) {
                       const Eigen::Index n = th.size();
                       Eigen::Map<const Arr> x(t.value(ida).data.data(), n);
                       Eigen::Map<const Arr> g(t.grad(self).data(), n);
                       Eigen::Map<Arr> ga(t.grad(ida).data(), n);
                       const Arr du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * x.square());
                       ga += g * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * du);
                     });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary(
      OpKind::relu, a, [](T x) { return x > 0 ? x : T(0); },
      [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(
      OpKind::square, a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(
      OpKind::exp, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary(
      OpKind::log, a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      OpKind::clamp, a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> straight_through(const Tensor<T>& hard, const Var<T>& soft) {
  Tape<T>& tape = tape_of(soft);
  if (hard.shape != soft.shape()) {
    throw ShapeError("straight_through: " + shape_string(hard.shape) + " vs " +
                     shape_string(soft.shape()));
  }
  const std::uint32_t ids = soft.id();
  return tape.record(OpKind::straight_through, hard, {ids}, [ids](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    auto& gs = t.grad(ids);
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
}

// ---- normalisations -------------------------------------------------------------

template <typename T>
Var<T> softmax(const Var<T>& a, int axis) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "softmax");
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  const std::size_t lines = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  auto offset = [=](std::size_t l) { return axis == 1 ? l * c : l; };
  Tensor<T> out(av.shape);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t o = offset(l);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, av.data[o + k * stride]);
    T z = 0;
    for (std::size_t k = 0; k < len; ++k) {
      const T e = std::exp(av.data[o + k * stride] - mx);
      out.data[o + k * stride] = e;
      z += e;
    }
    for (std::size_t k = 0; k < len; ++k) out.data[o + k * stride] /= z;
  }
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::softmax, std::move(out), {ida},
                     [=](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       const auto& y = t.value(self).data;
                       auto& ga = t.grad(ida);
                       for (std::size_t l = 0; l < lines; ++l) {
                         const std::size_t o = offset(l);
                         T dot = 0;
                         for (std::size_t k = 0; k < len; ++k)
                           dot += g[o + k * stride] * y[o + k * stride];
                         for (std::size_t k = 0; k < len; ++k) {
                           const std::size_t p = o + k * stride;
                           ga[p] += y[p] * (g[p] - dot);
                         }
                       }
                     });
}

template <typename T>
Var<T> log_softmax(const Var<T>& a) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "log_softmax");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = av.data.data() + i * c;
    T mx = *std::max_element(x, x + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = x[j] - lse;
  }
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::log_softmax, std::move(out), {ida},
                     [ida, r, c](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       const auto& y = t.value(self).data;
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < r; ++i) {
                         T gs = 0;
                         for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           ga[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gs;
                       }
                     });
}

template <typename T>
Var<T> weighted_softmax(const Var<T>& logits, const Var<T>& key_weights) {
  Tape<T>& tape = same_tape(logits, key_weights);
  const auto& sv = logits.value();
  const auto& wv = key_weights.value();
  require_matrix(sv.shape, "weighted_softmax");
  const std::size_t r = sv.rows(), c = sv.cols();
  if (wv.size() != c) {
    throw ShapeError("weighted_softmax: " + std::to_string(wv.size()) + " key weights for " +
                     std::to_string(c) + " keys");
  }
  bool any = false;
  for (T w : wv.data) {
    if (w < 0) throw std::invalid_argument("weighted_softmax: negative key weight");
    any = any || w > 0;
  }
  if (!any) throw std::invalid_argument("weighted_softmax: every key is masked");
  Tensor<T> out(sv.shape);
  // u = exp(s - rowmax over live keys), clipped for dead keys; z = sum w*u.
  std::vector<T> u(sv.size());
  std::vector<T> z(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* s = sv.data.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (wv.data[j] > 0) mx = std::max(mx, s[j]);
    T zi = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T e = std::exp(std::min(s[j] - mx, T(60)));
      u[i * c + j] = e;
      zi += wv.data[j] * e;
    }
    z[i] = zi;
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = wv.data[j] * u[i * c + j] / zi;
  }
  const std::uint32_t ids = logits.id(), idw = key_weights.id();
  return tape.record(
      OpKind::weighted_softmax, std::move(out), {ids, idw},
      [ids, idw, r, c, u = std::move(u), z = std::move(z)](Tape<T>& t, std::uint32_t self) {
        const auto& g = t.grad(self);
        const auto& a = t.value(self).data;
        std::vector<T>* gs = t.requires_grad(ids) ? &t.grad(ids) : nullptr;
        std::vector<T>* gw = t.requires_grad(idw) ? &t.grad(idw) : nullptr;
        for (std::size_t i = 0; i < r; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * a[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t p = i * c + j;
            if (gs) (*gs)[p] += a[p] * (g[p] - dot);
            if (gw) (*gw)[j] += u[p] / z[i] * (g[p] - dot);
          }
        }
      });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  Tape<T>& tape = same_tape(x, gamma);
  same_tape(x, beta);
  const auto& xv = x.value();
  require_matrix(xv.shape, "layernorm");
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layernorm: affine parameters do not match width " + std::to_string(c));
  }
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  Tensor<T> out(xv.shape);
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[i * c + j] = h;
      out.data[i * c + j] = h * gv[j] + bv[j];
    }
  }
  const std::uint32_t idx = x.id(), idg = gamma.id(), idb = beta.id();
  return tape.record(
      OpKind::layernorm, std::move(out), {idx, idg, idb},
      [idx, idg, idb, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t,
                                                                            std::uint32_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(idg).data;
        if (t.requires_grad(idg) || t.requires_grad(idb)) {
          std::vector<T>* gg = t.requires_grad(idg) ? &t.grad(idg) : nullptr;
          std::vector<T>* gb = t.requires_grad(idb) ? &t.grad(idb) : nullptr;
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              if (gg) (*gg)[j] += g[i * c + j] * xhat[i * c + j];
              if (gb) (*gb)[j] += g[i * c + j];
            }
        }
        if (!t.requires_grad(idx)) return;
        auto& gx = t.grad(idx);
        for (std::size_t i = 0; i < r; ++i) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T dh = g[i * c + j] * gv[j];
            m1 += dh;
            m2 += dh * xhat[i * c + j];
          }
          m1 /= T(c);
          m2 /= T(c);
          for (std::size_t j = 0; j < c; ++j) {
            const T dh = g[i * c + j] * gv[j];
            gx[i * c + j] += rstd[i] * (dh - m1 - xhat[i * c + j] * m2);
          }
        }
      });
}

// ---- structural ----------------------------------------------------------------

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = av.data[i * c + j];
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::transpose, std::move(out), {ida},
                     [ida, r, c](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                     });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const int> rows) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "gather_rows");
  const std::size_t r = av.rows(), c = av.cols();
  std::vector<int> idx(rows.begin(), rows.end());
  Tensor<T> out(Shape{idx.size(), c});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || static_cast<std::size_t>(idx[k]) >= r) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[k]) + " out of range");
    }
    std::copy_n(av.data.begin() + idx[k] * c, c, out.data.begin() + k * c);
  }
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::gather_rows, std::move(out), {ida},
                     [ida, c, idx = std::move(idx)](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ida);
                       for (std::size_t k = 0; k < idx.size(); ++k)
                         for (std::size_t j = 0; j < c; ++j) ga[idx[k] * c + j] += g[k * c + j];
                     });
}

template <typename T>
Var<T> gather_cols(const Var<T>& a, std::span<const int> cols) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "gather_cols");
  const std::size_t r = av.rows(), c = av.cols();
  std::vector<int> idx(cols.begin(), cols.end());
  const std::size_t k = idx.size();
  Tensor<T> out(Shape{r, k});
  for (std::size_t q = 0; q < k; ++q) {
    if (idx[q] < 0 || static_cast<std::size_t>(idx[q]) >= c) {
      throw ShapeError("gather_cols: column " + std::to_string(idx[q]) + " out of range");
    }
  }
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t q = 0; q < k; ++q) out.data[i * k + q] = av.data[i * c + idx[q]];
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::gather_cols, std::move(out), {ida},
                     [ida, r, c, k, idx = std::move(idx)](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t q = 0; q < k; ++q) ga[i * c + idx[q]] += g[i * k + q];
                     });
}

template <typename T>
Var<T> gather_elements(const Var<T>& a, std::span<const std::int64_t> index, Shape out_shape) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  if (shape_size(out_shape) != index.size()) {
    throw ShapeError("gather_elements: index count does not match " + shape_string(out_shape));
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= static_cast<std::int64_t>(av.size())) {
      throw ShapeError("gather_elements: index out of range");
    }
    out.data[i] = idx[i] < 0 ? T(0) : av.data[static_cast<std::size_t>(idx[i])];
  }
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::gather_elements, std::move(out), {ida},
                     [ida, idx = std::move(idx)](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         if (idx[i] >= 0) ga[static_cast<std::size_t>(idx[i])] += g[i];
                     });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t end) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "slice_cols");
  const std::size_t r = av.rows(), c = av.cols();
  if (begin > end || end > c) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_string(av.shape));
  }
  const std::size_t k = end - begin;
  Tensor<T> out(Shape{r, k});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.data.begin() + i * c + begin, k, out.data.begin() + i * k);
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::slice_cols, std::move(out), {ida},
                     [ida, r, c, k, begin](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < k; ++j) ga[i * c + begin + j] += g[i * k + j];
                     });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Tape<T>& tape = tape_of(parts[0]);
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    require_matrix(p.shape(), "concat_rows");
    if (p.cols() != c) throw ShapeError("concat_rows: column count mismatch");
    ids.push_back(p.id());
    offsets.push_back(total);
    total += p.rows();
  }
  Tensor<T> out(Shape{total, c});
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto& v = parts[q].value().data;
    std::copy(v.begin(), v.end(), out.data.begin() + offsets[q] * c);
  }
  return tape.record(OpKind::concat_rows, std::move(out), ids,
                     [ids, offsets, c](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       for (std::size_t q = 0; q < ids.size(); ++q) {
                         if (!t.requires_grad(ids[q])) continue;
                         auto& gq = t.grad(ids[q]);
                         for (std::size_t i = 0; i < gq.size(); ++i)
                           gq[i] += g[offsets[q] * c + i];
                       }
                     });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  Tape<T>& tape = tape_of(parts[0]);
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    require_matrix(p.shape(), "concat_cols");
    if (p.rows() != r) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id());
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor<T> out(Shape{r, total});
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto& v = parts[q].value().data;
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.begin() + i * widths[q], widths[q],
                  out.data.begin() + i * total + offsets[q]);
  }
  return tape.record(OpKind::concat_cols, std::move(out), ids,
                     [ids, offsets, widths, r, total](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       for (std::size_t q = 0; q < ids.size(); ++q) {
                         if (!t.requires_grad(ids[q])) continue;
                         auto& gq = t.grad(ids[q]);
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < widths[q]; ++j)
                             gq[i * widths[q] + j] += g[i * total + offsets[q] + j];
                       }
                     });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tape<T>& tape = tape_of(a);
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  Tensor<T> out(std::move(shape), a.value().data);
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::reshape, std::move(out), {ida}, [ida](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ida);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---- reductions ----------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& tape = tape_of(a);
  T s = 0;
  for (T v : a.value().data) s += v;
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::sum, Tensor<T>::scalar(s), {ida},
                     [ida](Tape<T>& t, std::uint32_t self) {
                       const T g = t.grad(self)[0];
                       for (auto& v : t.grad(ida)) v += g;
                     });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  Tape<T>& tape = tape_of(a);
  const std::size_t n = a.size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  T s = 0;
  for (T v : a.value().data) s += v;
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::mean, Tensor<T>::scalar(s / T(n)), {ida},
                     [ida, n](Tape<T>& t, std::uint32_t self) {
                       const T g = t.grad(self)[0] / T(n);
                       for (auto& v : t.grad(ida)) v += g;
                     });
}

template <typename T>
Var<T> sum_axis(const Var<T>& a, int axis) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "sum_axis");
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<T> out(axis == 0 ? Shape{1, c} : Shape{r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[axis == 0 ? j : i] += av.data[i * c + j];
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::sum_axis, std::move(out), {ida},
                     [ida, r, c, axis](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           ga[i * c + j] += g[axis == 0 ? j : i];
                     });
}

template <typename T>
Var<T> l2_norm_rows(const Var<T>& a) {
  Tape<T>& tape = tape_of(a);
  const auto& av = a.value();
  require_matrix(av.shape, "l2_norm_rows");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<T> out(Shape{r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += av.data[i * c + j] * av.data[i * c + j];
    out.data[i] = std::sqrt(s);
  }
  const std::uint32_t ida = a.id();
  return tape.record(OpKind::l2_norm_rows, std::move(out), {ida},
                     [ida, r, c](Tape<T>& t, std::uint32_t self) {
                       const auto& g = t.grad(self);
                       const auto& x = t.value(ida).data;
                       const auto& y = t.value(self).data;
                       auto& ga = t.grad(ida);
                       for (std::size_t i = 0; i < r; ++i) {
                         if (y[i] == T(0)) continue;
                         for (std::size_t j = 0; j < c; ++j)
                           ga[i * c + j] += g[i] * x[i * c + j] / y[i];
                       }
                     });
}

// ---- dispatch ------------------------------------------------------------------

template <typename T>
Var<T> op_forward(OpKind kind, std::span<const Var<T>> in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::matmul_nt: need(2); return matmul_nt(in[0], in[1]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::div: need(2); return div(in[0], in[1]);
    case OpKind::softmax: need(1); return softmax(in[0], 1);
    case OpKind::log_softmax: need(1); return log_softmax(in[0]);
    case OpKind::weighted_softmax: need(2); return weighted_softmax(in[0], in[1]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::gelu: need(1); return gelu(in[0]);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::square: need(1); return square(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::layernorm: need(3); return layernorm(in[0], in[1], in[2]);
    case OpKind::transpose: need(1); return transpose(in[0]);
    case OpKind::concat_rows: return concat_rows(in);
    case OpKind::concat_cols: return concat_cols(in);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::l2_norm_rows: need(1); return l2_norm_rows(in[0]);
    default:
      throw UnsupportedOpError("op_forward: '" + std::string(op_name(kind)) +
                               "' needs parameters; call its dedicated function");
  }
}

// ---- gumbel / sign ---------------------------------------------------------------

template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, T temperature, bool hard, const Tensor<T>* noise) {
  if (!(temperature > 0)) throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
  if (logits.cols() < 2) throw ShapeError("gumbel_softmax: need at least two categories");
  Tape<T>& tape = tape_of(logits);
  Var<T> z = logits;
  if (noise) {
    if (noise->shape != logits.shape()) throw ShapeError("gumbel_softmax: noise shape mismatch");
    z = add(z, tape.constant(*noise));
  }
  if (temperature != T(1)) z = scale(z, T(1) / temperature);
  Var<T> soft = softmax(z, 1);
  if (!hard) return soft;
  const auto& sv = soft.value();
  const std::size_t r = sv.rows(), c = sv.cols();
  Tensor<T> onehot(sv.shape);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = sv.data.data() + i * c;
    onehot.data[i * c + static_cast<std::size_t>(std::max_element(row, row + c) - row)] = T(1);
  }
  return straight_through(onehot, soft);
}

template <typename T>
Tensor<T> sample_gumbel(const Shape& shape, std::mt19937_64& rng) {
  Tensor<T> out(shape);
  std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
  for (auto& v : out.data) v = static_cast<T>(-std::log(-std::log(u(rng))));
  return out;
}

template <typename T>
Tensor<T> sign(const Tensor<T>& t) {
  Tensor<T> out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const T v = t.data[i];
    out.data[i] = v > 0 ? T(1) : (v < 0 ? T(-1) : T(0));
  }
  return out;
}

// ---- instantiations ------------------------------------------------------------

#define TSLAB_INSTANTIATE(T)                                                                   \
  template class Var<T>;                                                                       \
  template class Tape<T>;                                                                      \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> div(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, T);                                                     \
  template Var<T> add_scalar(const Var<T>&, T);                                                \
  template Var<T> softmax(const Var<T>&, int);                                                 \
  template Var<T> log_softmax(const Var<T>&);                                                  \
  template Var<T> weighted_softmax(const Var<T>&, const Var<T>&);                              \
  template Var<T> sigmoid(const Var<T>&);                                                      \
  template Var<T> gelu(const Var<T>&);                                                         \
  template Var<T> relu(const Var<T>&);                                                         \
  template Var<T> square(const Var<T>&);                                                       \
  template Var<T> exp(const Var<T>&);                                                          \
  template Var<T> log(const Var<T>&);                                                          \
  template Var<T> layernorm(const Var<T>&, const Var<T>&, const Var<T>&, T);                   \
  template Var<T> transpose(const Var<T>&);                                                    \
  template Var<T> gather_rows(const Var<T>&, std::span<const int>);                            \
  template Var<T> gather_cols(const Var<T>&, std::span<const int>);                            \
  template Var<T> gather_elements(const Var<T>&, std::span<const std::int64_t>, Shape);        \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                         \
  template Var<T> concat_rows(std::span<const Var<T>>);                                        \
  template Var<T> concat_cols(std::span<const Var<T>>);                                        \
  template Var<T> sum(const Var<T>&);                                                          \
  template Var<T> mean(const Var<T>&);                                                         \
  template Var<T> sum_axis(const Var<T>&, int);                                                \
  template Var<T> l2_norm_rows(const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                               \
  template Var<T> clamp(const Var<T>&, T, T);                                                  \
  template Var<T> straight_through(const Tensor<T>&, const Var<T>&);                           \
  template Var<T> op_forward(OpKind, std::span<const Var<T>>);                                 \
  template Var<T> gumbel_softmax(const Var<T>&, T, bool, const Tensor<T>*);                    \
  template Tensor<T> sample_gumbel(const Shape&, std::mt19937_64&);                            \
  template Tensor<T> sign(const Tensor<T>&);

TSLAB_INSTANTIATE(float)
TSLAB_INSTANTIATE(double)

#undef TSLAB_INSTANTIATE

}  // namespace tslab::ad

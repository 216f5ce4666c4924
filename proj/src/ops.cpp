#include "picn/ops.hpp"

// Small products would otherwise take Eigen's coefficient-wise path, whose
// vectorised reductions start at the first aligned address; results would
// then depend on where the heap placed each buffer.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace picn::ops {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool tracks(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape::current().recording()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

#ifdef NDEBUG
constexpr bool kFiniteChecks = false;
#else
constexpr bool kFiniteChecks = true;
#endif

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, bool requires_grad, const char* op) {
  if constexpr (kFiniteChecks) {
    for (const T v : values)
      if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
  }
  Tensor<T> out(std::move(shape), std::move(values));
  out.set_requires_grad(requires_grad);
  return out;
}

// Accumulates into an input's gradient when that input wants one.
template <typename T>
std::vector<T>* sink(const NodePtr<T>& node) {
  return (node && node->requires_grad) ? &node->grad_buffer() : nullptr;
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// For every flat index of `shape`, the flat index in `target` obtained by
// pinning each axis where `target` has extent 1 (or the axis is in `collapse`)
// to coordinate 0. `target` has the same rank as `shape`.
std::vector<std::size_t> collapse_index(const Shape& shape, const Shape& target) {
  const auto n = numel_of(shape);
  const auto tstr = strides_of(target);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> coord(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = 0;
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (target[d] != 1) j += coord[d] * tstr[d];
    map[i] = j;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++coord[d] < shape[d]) break;
      coord[d] = 0;
    }
  }
  return map;
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(a.shape(), std::move(out), rg, name);
  if (rg) {
    Tape::current().record([o = result.node(), x = a.node(), deriv] {
      if (o->grad.empty()) return;
      T* g = x->grad_buffer().data();
      const T* go = o->grad.data();
      const T* xd = x->data.data();
      const T* od = o->data.data();
      const auto n = x->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * deriv(xd[i], od[i]);
    });
  }
  return result;
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  require_same(a.shape(), b.shape(), name);
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  const bool rg = tracks<T>({&a, &b});
  auto result = make_output<T>(a.shape(), std::move(out), rg, name);
  if (rg) {
    Tape::current().record([o = result.node(), an = a.node(), bn = b.node(), da, db] {
      if (o->grad.empty()) return;
      const T* go = o->grad.data();
      const T* x = an->data.data();
      const T* y = bn->data.data();
      const auto n = an->data.size();
      if (auto* g = sink(an)) {
        T* gd = g->data();
        for (std::size_t i = 0; i < n; ++i) gd[i] += go[i] * da(x[i], y[i]);
      }
      if (auto* g = sink(bn)) {
        T* gd = g->data();
        for (std::size_t i = 0; i < n; ++i) gd[i] += go[i] * db(x[i], y[i]);
      }
    });
  }
  return result;
}

struct ReducePlan {
  Shape out_shape;    // honouring keepdim
  Shape keep_shape;   // reduced axes set to 1
  std::vector<std::size_t> index;  // input flat index -> output flat index
  std::size_t group = 1;           // number of inputs per output
};

ReducePlan plan_reduce(const Shape& shape, const std::vector<std::size_t>& axes, bool keepdim) {
  if (axes.empty()) throw ShapeError("reduction over an empty axis list");
  ReducePlan p;
  p.keep_shape = shape;
  std::vector<bool> reduced(shape.size(), false);
  for (auto ax : axes) {
    if (ax >= shape.size()) throw ShapeError("reduction axis " + std::to_string(ax) + " invalid for " + shape_str(shape));
    if (reduced[ax]) throw ShapeError("reduction axis repeated");
    reduced[ax] = true;
    p.group *= shape[ax];
    p.keep_shape[ax] = 1;
  }
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (!reduced[d] || keepdim) p.out_shape.push_back(reduced[d] ? 1 : shape[d]);
  // Axes that are non-reduced but have extent 1 are harmless for collapse_index.
  p.index = collapse_index(shape, p.keep_shape);
  return p;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary(a, "add_scalar", [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary(
      a, "leaky_relu", [slope](T x) { return x >= T(0) ? x : slope * x; },
      [slope](T x, T) { return x >= T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary(
      a, "sqrt", [](T x) { return std::sqrt(x); }, [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary(
      a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<std::size_t>& axes, bool keepdim) {
  auto plan = plan_reduce(a.shape(), axes, keepdim);
  std::vector<T> out(numel_of(plan.out_shape), T(0));
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[plan.index[i]] += x[i];
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(plan.out_shape, std::move(out), rg, "sum");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), idx = std::move(plan.index)] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[idx[i]];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<std::size_t>& axes, bool keepdim) {
  auto plan = plan_reduce(a.shape(), axes, keepdim);
  const T inv = T(1) / static_cast<T>(plan.group);
  std::vector<T> out(numel_of(plan.out_shape), T(0));
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[plan.index[i]] += x[i];
  for (auto& v : out) v *= inv;
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(plan.out_shape, std::move(out), rg, "mean");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), idx = std::move(plan.index), inv] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[idx[i]] * inv;
    });
  }
  return result;
}

template <typename T>
Tensor<T> max(const Tensor<T>& a, const std::vector<std::size_t>& axes, bool keepdim) {
  auto plan = plan_reduce(a.shape(), axes, keepdim);
  const auto n_out = numel_of(plan.out_shape);
  std::vector<T> out(n_out, T(0));
  std::vector<std::size_t> arg(n_out, a.numel());
  const auto x = a.data();
  // Input indices are visited in increasing order, so strict '>' keeps the first maximum.
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto j = plan.index[i];
    if (arg[j] == a.numel() || x[i] > out[j]) {
      out[j] = x[i];
      arg[j] = i;
    }
  }
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(plan.out_shape, std::move(out), rg, "max");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), arg = std::move(arg)] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t j = 0; j < arg.size(); ++j) g[arg[j]] += o->grad[j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  if (a.rank() == 0) return reshape(a, Shape{});
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(a, axes, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.rank() == 0) return reshape(a, Shape{});
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return mean(a, axes, false);
}

namespace {

template <typename T>
void gemm_forward(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool ta, bool tb) {
  CMapM<T> A(a, ta ? k : m, ta ? m : k);
  CMapM<T> B(b, tb ? n : k, tb ? k : n);
  MapM<T> C(c, m, n);
  if (ta && tb) C.noalias() = A.transpose() * B.transpose();
  else if (ta) C.noalias() = A.transpose() * B;
  else if (tb) C.noalias() = A * B.transpose();
  else C.noalias() = A * B;
}

// Accumulates the gradients of C = op(A) op(B) into ga / gb (either may be null).
template <typename T>
void gemm_backward(const T* a, const T* b, const T* gc, T* ga, T* gb, std::size_t m, std::size_t k, std::size_t n,
                   bool ta, bool tb) {
  CMapM<T> A(a, ta ? k : m, ta ? m : k);
  CMapM<T> B(b, tb ? n : k, tb ? k : n);
  CMapM<T> G(gc, m, n);
  if (ga) {
    MapM<T> GA(ga, ta ? k : m, ta ? m : k);
    // d op(A) = G op(B)^T
    if (!ta && !tb) GA.noalias() += G * B.transpose();
    else if (!ta && tb) GA.noalias() += G * B;
    else if (ta && !tb) GA.noalias() += B * G.transpose();
    else GA.noalias() += B.transpose() * G.transpose();
  }
  if (gb) {
    MapM<T> GB(gb, tb ? n : k, tb ? k : n);
    // d op(B) = op(A)^T G
    if (!ta && !tb) GB.noalias() += A.transpose() * G;
    else if (ta && !tb) GB.noalias() += A * G;
    else if (!ta && tb) GB.noalias() += G.transpose() * A;
    else GB.noalias() += G.transpose() * A.transpose();
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
  const auto m = ta ? a.dim(1) : a.dim(0);
  const auto k = ta ? a.dim(0) : a.dim(1);
  const auto kb = tb ? b.dim(1) : b.dim(0);
  const auto n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  gemm_forward(a.data().data(), b.data().data(), out.data(), m, k, n, ta, tb);
  const bool rg = tracks<T>({&a, &b});
  auto result = make_output<T>({m, n}, std::move(out), rg, "matmul");
  if (rg) {
    Tape::current().record([o = result.node(), an = a.node(), bn = b.node(), m, k, n, ta, tb] {
      if (o->grad.empty()) return;
      auto* ga = sink(an);
      auto* gb = sink(bn);
      gemm_backward(an->data.data(), bn->data.data(), o->grad.data(), ga ? ga->data() : nullptr,
                    gb ? gb->data() : nullptr, m, k, n, ta, tb);
    });
  }
  return result;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  if (a.rank() != 3 || b.rank() != 3) throw ShapeError("bmm expects rank-3 operands");
  if (a.dim(0) != b.dim(0)) throw ShapeError("bmm batch extents differ");
  const auto batch = a.dim(0);
  const auto m = ta ? a.dim(2) : a.dim(1);
  const auto k = ta ? a.dim(1) : a.dim(2);
  const auto kb = tb ? b.dim(2) : b.dim(1);
  const auto n = tb ? b.dim(1) : b.dim(2);
  if (k != kb) throw ShapeError("bmm inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(batch * m * n);
  const auto sa = m * k, sb = k * n, sc = m * n;
  for (std::size_t i = 0; i < batch; ++i)
    gemm_forward(a.data().data() + i * sa, b.data().data() + i * sb, out.data() + i * sc, m, k, n, ta, tb);
  const bool rg = tracks<T>({&a, &b});
  auto result = make_output<T>({batch, m, n}, std::move(out), rg, "bmm");
  if (rg) {
    Tape::current().record([o = result.node(), an = a.node(), bn = b.node(), batch, m, k, n, ta, tb] {
      if (o->grad.empty()) return;
      auto* ga = sink(an);
      auto* gb = sink(bn);
      const auto sa = m * k, sb = k * n, sc = m * n;
      for (std::size_t i = 0; i < batch; ++i)
        gemm_backward(an->data.data() + i * sa, bn->data.data() + i * sb, o->grad.data() + i * sc,
                      ga ? ga->data() + i * sa : nullptr, gb ? gb->data() + i * sb : nullptr, m, k, n, ta, tb);
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("softmax axis out of range for " + shape_str(a.shape()));
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const auto n = s[axis];
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      T total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(x[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(s, std::move(out), rg, "softmax");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), outer, inner, n] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t ou = 0; ou < outer; ++ou)
        for (std::size_t in = 0; in < inner; ++in) {
          const auto base = ou * n * inner + in;
          T dot = 0;
          for (std::size_t i = 0; i < n; ++i) dot += o->grad[base + i * inner] * o->data[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const auto j = base + i * inner;
            g[j] += o->data[j] * (o->grad[j] - dot);
          }
        }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<T> out(a.data().begin(), a.data().end());
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(shape, std::move(out), rg, "reshape");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node()] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  if (a.rank() != shape.size()) throw ShapeError("broadcast_to needs equal ranks");
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (a.shape()[d] != shape[d] && a.shape()[d] != 1)
      throw ShapeError("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto idx = collapse_index(shape, a.shape());
  std::vector<T> out(idx.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[idx[i]];
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(shape, std::move(out), rg, "broadcast_to");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), idx = std::move(idx)] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const auto& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range");
  std::size_t outer = 1, inner = 1, total_axis = 0;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != ref.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != ref[d])
        throw ShapeError("concat extent mismatch " + shape_str(s) + " vs " + shape_str(ref));
    total_axis += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total_axis;
  std::vector<T> out(numel_of(out_shape));
  const auto row = total_axis * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto chunk = p.shape()[axis] * inner;
    const auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * chunk, chunk, out.data() + o * row + offset);
    offset += chunk;
  }
  bool rg = false;
  if (Tape::current().recording())
    for (const auto& p : parts) rg = rg || p.requires_grad();
  auto result = make_output<T>(out_shape, std::move(out), rg, "concat");
  if (rg) {
    std::vector<NodePtr<T>> nodes;
    std::vector<std::size_t> chunks;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      chunks.push_back(p.shape()[axis] * inner);
    }
    Tape::current().record([o = result.node(), nodes = std::move(nodes), chunks = std::move(chunks), outer, row] {
      if (o->grad.empty()) return;
      std::size_t offset = 0;
      for (std::size_t p = 0; p < nodes.size(); ++p) {
        if (auto* g = sink(nodes[p]))
          for (std::size_t ou = 0; ou < outer; ++ou)
            for (std::size_t i = 0; i < chunks[p]; ++i) (*g)[ou * chunks[p] + i] += o->grad[ou * row + offset + i];
        offset += chunks[p];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& s = a.shape();
  if (axis >= s.size()) throw ShapeError("slice axis out of range");
  if (start + length > s[axis] || length == 0)
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") outside " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = length;
  const auto row = s[axis] * inner;
  const auto chunk = length * inner;
  const auto off = start * inner;
  std::vector<T> out(outer * chunk);
  const auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * row + off, chunk, out.data() + o * chunk);
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>(out_shape, std::move(out), rg, "slice");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), outer, row, chunk, off] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t ou = 0; ou < outer; ++ou)
        for (std::size_t i = 0; i < chunk; ++i) g[ou * row + off + i] += o->grad[ou * chunk + i];
    });
  }
  return result;
}

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  bool direct() const { return k == 1 && stride == 1 && pad == 0; }
  std::size_t col_rows() const { return cin * k * k; }
  std::size_t col_cols() const { return ho * wo; }
};

// Column matrix layout: row (c, ky, kx), column b * ho * wo + oy * wo + ox,
// with `ld` = batch * ho * wo columns in total; one batch entry at a time.
template <typename T>
void im2col(const T* in, T* col, std::size_t ld, const ConvGeom& g) {
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* dst = col + ((c * g.k + ky) * g.k + kx) * ld;
        const T* plane = in + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          T* row = dst + oy * g.wo;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          if (g.stride == 1) {
            // ix = ox + kx - pad must lie in [0, w).
            const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
            const auto lo = std::clamp<std::ptrdiff_t>(-off, 0, static_cast<std::ptrdiff_t>(g.wo));
            const auto hi = std::clamp<std::ptrdiff_t>(w - off, lo, static_cast<std::ptrdiff_t>(g.wo));
            std::fill(row, row + lo, T(0));
            std::copy(plane + iy * w + lo + off, plane + iy * w + hi + off, row + lo);
            std::fill(row + hi, row + g.wo, T(0));
            continue;
          }
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            row[ox] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t ld, T* in, const ConvGeom& g) {
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* src = col + ((c * g.k + ky) * g.k + kx) * ld;
        T* plane = in + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= h) continue;
          const T* row = src + oy * g.wo;
          if (g.stride == 1) {
            const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
            const auto lo = std::clamp<std::ptrdiff_t>(-off, 0, static_cast<std::ptrdiff_t>(g.wo));
            const auto hi = std::clamp<std::ptrdiff_t>(w - off, lo, static_cast<std::ptrdiff_t>(g.wo));
            T* dst = plane + iy * w + off;
            for (auto ox = lo; ox < hi; ++ox) dst[ox] += row[ox];
            continue;
          }
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= w) continue;
            plane[iy * w + ix] += row[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  if (input.rank() != 4 || weight.rank() != 4) throw ShapeError("conv2d expects rank-4 input and weight");
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (ws[2] != ws[3] || ws[2] < 1) throw ShapeError("conv2d expects a square kernel, got " + shape_str(ws));
  if (ws[1] != is[1])
    throw ShapeError("conv2d channel mismatch: input " + shape_str(is) + ", weight " + shape_str(ws));
  ConvGeom g{is[0], is[1], is[2], is[3], ws[0], ws[2], stride, pad, 0, 0};
  const auto span_h = g.h + 2 * pad;
  const auto span_w = g.w + 2 * pad;
  if (span_h < g.k || span_w < g.k || (span_h - g.k) % stride || (span_w - g.k) % stride)
    throw ShapeError("conv2d output extent is not integral for input " + shape_str(is));
  g.ho = (span_h - g.k) / stride + 1;
  g.wo = (span_w - g.k) / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout))
    throw ShapeError("conv2d bias shape " + shape_str(bias.shape()));

  // One GEMM over the whole batch: [cout, rows] x [rows, B*HW].
  const auto hw = g.col_cols();
  const auto ld = g.batch * hw;
  const auto in_plane = g.cin * g.h * g.w;
  const auto out_plane = g.cout * hw;
  // Scratch buffers are fully overwritten, so they skip zero-initialisation.
  std::shared_ptr<T[]> col(new T[g.col_rows() * ld]);
  for (std::size_t b = 0; b < g.batch; ++b) im2col(input.data().data() + b * in_plane, col.get() + b * hw, ld, g);
  CMapM<T> W(weight.data().data(), g.cout, g.col_rows());
  auto prod = std::make_unique_for_overwrite<T[]>(g.cout * ld);
  MapM<T>(prod.get(), g.cout, ld).noalias() = W * CMapM<T>(col.get(), g.col_rows(), ld);
  std::vector<T> out(g.batch * out_plane);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.cout; ++c) {
      const T shift = bias.defined() ? bias.data()[c] : T(0);
      const T* src = prod.get() + c * ld + b * hw;
      T* dst = out.data() + b * out_plane + c * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + shift;
    }
  const bool rg = tracks<T>({&input, &weight, &bias});
  auto result = make_output<T>({g.batch, g.cout, g.ho, g.wo}, std::move(out), rg, "conv2d");
  if (rg) {
    if (!weight.requires_grad()) col.reset();
    Tape::current().record([o = result.node(), xn = input.node(), wn = weight.node(),
                            bn = bias.defined() ? bias.node() : NodePtr<T>{}, g, col, hw, ld, in_plane,
                            out_plane] {
      if (o->grad.empty()) return;
      auto* gx = sink(xn);
      auto* gw = sink(wn);
      auto* gb = sink(bn);
      auto gall = std::make_unique_for_overwrite<T[]>(g.cout * ld);
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t c = 0; c < g.cout; ++c)
          std::copy_n(o->grad.data() + b * out_plane + c * hw, hw, gall.get() + c * ld + b * hw);
      CMapM<T> G(gall.get(), g.cout, ld);
      if (gb) {
        for (std::size_t c = 0; c < g.cout; ++c) {
          const T* row = gall.get() + c * ld;
          T acc = T(0);
          for (std::size_t i = 0; i < ld; ++i) acc += row[i];
          (*gb)[c] += acc;
        }
      }
      if (gw) {
        MapM<T> GW(gw->data(), g.cout, g.col_rows());
        GW.noalias() += G * CMapM<T>(col.get(), g.col_rows(), ld).transpose();
      }
      if (gx) {
        CMapM<T> W(wn->data.data(), g.cout, g.col_rows());
        auto dcol = std::make_unique_for_overwrite<T[]>(g.col_rows() * ld);
        MapM<T>(dcol.get(), g.col_rows(), ld).noalias() = W.transpose() * G;
        for (std::size_t b = 0; b < g.batch; ++b) col2im_add(dcol.get() + b * hw, ld, gx->data() + b * in_plane, g);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("avg_pool2 expects rank 4");
  const auto& s = a.shape();
  if (s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2 needs even extents, got " + shape_str(s));
  const auto planes = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  std::vector<T> out(planes * ho * wo);
  const auto x = a.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const T* r0 = x.data() + (p * h + 2 * y) * w + 2 * xx;
        const T* r1 = r0 + w;
        out[(p * ho + y) * wo + xx] = T(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>({s[0], s[1], ho, wo}, std::move(out), rg, "avg_pool2");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), planes, h, w, ho, wo] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            g[(p * h + y) * w + xx] += T(0.25) * o->grad[(p * ho + y / 2) * wo + xx / 2];
    });
  }
  return result;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("upsample_nearest2 expects rank 4");
  const auto& s = a.shape();
  const auto planes = s[0] * s[1], h = s[2], w = s[3], ho = 2 * h, wo = 2 * w;
  std::vector<T> out(planes * ho * wo);
  const auto x = a.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) out[(p * ho + y) * wo + xx] = x[(p * h + y / 2) * w + xx / 2];
  const bool rg = tracks<T>({&a});
  auto result = make_output<T>({s[0], s[1], ho, wo}, std::move(out), rg, "upsample_nearest2");
  if (rg) {
    Tape::current().record([o = result.node(), xn = a.node(), planes, h, w, ho, wo] {
      if (o->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < ho; ++y)
          for (std::size_t xx = 0; xx < wo; ++xx) g[(p * h + y / 2) * w + xx / 2] += o->grad[(p * ho + y) * wo + xx];
    });
  }
  return result;
}

#define PICN_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                  \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                  \
  template Tensor<T> tanh(const Tensor<T>&);                                                           \
  template Tensor<T> exp(const Tensor<T>&);                                                            \
  template Tensor<T> log(const Tensor<T>&);                                                            \
  template Tensor<T> abs(const Tensor<T>&);                                                            \
  template Tensor<T> square(const Tensor<T>&);                                                         \
  template Tensor<T> sqrt(const Tensor<T>&);                                                           \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                    \
  template Tensor<T> sum(const Tensor<T>&, const std::vector<std::size_t>&, bool);                     \
  template Tensor<T> mean(const Tensor<T>&, const std::vector<std::size_t>&, bool);                    \
  template Tensor<T> max(const Tensor<T>&, const std::vector<std::size_t>&, bool);                     \
  template Tensor<T> sum_all(const Tensor<T>&);                                                        \
  template Tensor<T> mean_all(const Tensor<T>&);                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                           \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool, bool);                              \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                          \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                               \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                      \
  template Tensor<T> upsample_nearest2(const Tensor<T>&);

PICN_INSTANTIATE_OPS(float)
PICN_INSTANTIATE_OPS(double)

}  // namespace picn::ops

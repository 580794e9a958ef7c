#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hct {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Plain value type; the tape wraps it.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not hold " + std::to_string(data_.size()) +
                       " values");
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }
  static Tensor row(std::vector<double> data) {
    const auto n = data.size();
    return Tensor({1, n}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    return data_[0];
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class OpKind {
  Leaf,
  Constant,
  MatMul,
  Add,
  Mul,
  Concat,
  MeanPool,
  Softmax,
  Relu,
  Affine,
  LayerNorm,
  CrossEntropy,
  GradReverse,
  Transpose,
  Scale,
  Sum,
  GatherRows,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "elementwise-multiply";
    case OpKind::Concat: return "concat";
    case OpKind::MeanPool: return "mean-pool";
    case OpKind::Softmax: return "softmax";
    case OpKind::Relu: return "relu";
    case OpKind::Affine: return "affine";
    case OpKind::LayerNorm: return "layer-norm";
    case OpKind::CrossEntropy: return "cross-entropy-with-logits";
    case OpKind::GradReverse: return "gradient-reversal";
    case OpKind::Transpose: return "transpose";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::GatherRows: return "gather-rows";
  }
  return "?";
}

inline constexpr double kLayerNormEps = 1e-5;

class Tape;

/// Handle to a value recorded on a tape (the differentiable array).
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Define-by-run reverse-mode tape. Not thread-safe; one tape per thread.
class Tape {
 public:
  struct Node {
    OpKind kind;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that receives a gradient.
  Var leaf(Tensor value) { return push(OpKind::Leaf, std::move(value), true); }
  /// Input that never receives a gradient.
  Var constant(Tensor value) { return push(OpKind::Constant, std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Adds `g` into the gradient slot of node `id`.
  void accumulate(int id, const Tensor& g) { accumulate(id, g.data()); }
  void accumulate(int id, std::span<const double> g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    auto dst = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  /// Gradient flowing into node `id`; empty span when none arrived.
  std::span<const double> grad_of(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) return {};
    return n.grad.data();
  }

  /// Gradient of the last backward pass w.r.t. `v`, zeros if unreached.
  Tensor grad(const Var& v) const {
    const auto& n = nodes_.at(static_cast<std::size_t>(v.id()));
    if (!n.has_grad) return Tensor(n.value.shape());
    return n.grad;
  }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw TapeError("backward: loss is not on this tape");
    if (loss.value().size() != 1)
      throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    if (!requires_grad(loss.id())) return;
    accumulate(loss.id(), Tensor::scalar(1.0));
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this);
    }
  }

  Var push(OpKind kind, Tensor value, bool requires_grad, std::function<void(Tape&)> backward = {}) {
    if (!value.all_finite())
      throw NumericError(std::string("non-finite value produced by ") + op_name(kind) + " (shape " +
                         shape_str(value.shape()) + ")");
    nodes_.push_back(Node{kind, std::move(value), Tensor(), requires_grad, false,
                          requires_grad ? std::move(backward) : std::function<void(Tape&)>{}});
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw TapeError("use of an unbound variable");
  return tape_->value(id_);
}
inline bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

/// Reverse-mode gradient of a scalar w.r.t. the tape.
inline void backward(const Var& loss) {
  if (!loss.valid()) throw TapeError("backward: no tape");
  loss.tape()->backward(loss);
}

namespace detail {

inline Tape& same_tape(const char* op, std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw TapeError(std::string(op) + ": unbound input");
    if (t && v.tape() != t) throw TapeError(std::string(op) + ": inputs live on different tapes");
    t = v.tape();
  }
  return *t;
}

inline bool any_grad(std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [](const Var& v) { return v.requires_grad(); });
}

inline void require_rank2(const char* op, const Var& v) {
  if (v.shape().size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
}

// out(n x m) += a(n x k) * b(k x m), with optional transposes of the stored operands.
inline void gemm(bool ta, bool tb, std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                 double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * n + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = b + p * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * b[j * k + p];
      }
    }
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("matmul", {a, b});
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({n, m});
  detail::gemm(false, false, n, k, m, a.value().data().data(), b.value().data().data(), out.data().data());
  const int ia = a.id(), ib = b.id();
  int self = static_cast<int>(t.size());
  return t.push(OpKind::MatMul, std::move(out), detail::any_grad({a, b}), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    if (tp.requires_grad(ia)) {
      Tensor ga({n, k});
      detail::gemm(false, true, n, m, k, g.data(), tp.value(ib).data().data(), ga.data().data());
      tp.accumulate(ia, ga);
    }
    if (tp.requires_grad(ib)) {
      Tensor gb({k, m});
      detail::gemm(true, false, k, n, m, tp.value(ia).data().data(), g.data(), gb.data().data());
      tp.accumulate(ib, gb);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("add", {a, b});
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Add, std::move(out), detail::any_grad({a, b}), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape("elementwise-multiply", {a, b});
  if (a.shape() != b.shape())
    throw ShapeError("elementwise-multiply: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Mul, std::move(out), detail::any_grad({a, b}), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    const auto av = tp.value(ia).data(), bv2 = tp.value(ib).data();
    std::vector<double> tmp(g.size());
    if (tp.requires_grad(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * bv2[i];
      tp.accumulate(ia, tmp);
    }
    if (tp.requires_grad(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * av[i];
      tp.accumulate(ib, tmp);
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tape& t = detail::same_tape("scale", {a});
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Scale, std::move(out), a.requires_grad(), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    std::vector<double> tmp(g.begin(), g.end());
    for (auto& v : tmp) v *= c;
    tp.accumulate(ia, tmp);
  });
}

inline Var sum(const Var& a) {
  Tape& t = detail::same_tape("sum", {a});
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const int ia = a.id(), self = static_cast<int>(t.size());
  const std::size_t n = a.value().size();
  return t.push(OpKind::Sum, Tensor::scalar(s), a.requires_grad(), [=](Tape& tp) {
    const double g = tp.grad_of(self)[0];
    tp.accumulate(ia, std::vector<double>(n, g));
  });
}

namespace detail {
// Splits a shape around `axis` into (outer, axis length, inner) for strided loops.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}
}  // namespace detail

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw TapeError("concat: inputs live on different tapes");
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat: dimension " + std::to_string(i) + " differs, " + shape_str(s) + " vs " + shape_str(first));
    out_shape[axis] += s[axis];
    needs_grad = needs_grad || p.requires_grad();
  }
  auto [outer, total_axis, inner] = detail::split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::vector<int> ids;
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto src = p.value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * total_axis + offset) * inner));
    offset += len;
    ids.push_back(p.id());
    lens.push_back(len);
  }
  const int self = static_cast<int>(t.size());
  return t.push(OpKind::Concat, std::move(out), needs_grad,
                [=, outer = outer, total_axis = total_axis, inner = inner](Tape& tp) {
                  auto g = tp.grad_of(self);
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    const std::size_t len = lens[p];
                    if (tp.requires_grad(ids[p])) {
                      std::vector<double> part(outer * len * inner);
                      for (std::size_t o = 0; o < outer; ++o)
                        std::copy_n(g.begin() + static_cast<std::ptrdiff_t>((o * total_axis + off) * inner), len * inner,
                                    part.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
                      tp.accumulate(ids[p], part);
                    }
                    off += len;
                  }
                });
}

/// Mean over `axis`, keeping it as a length-1 dimension.
inline Var mean(const Var& a, std::size_t axis) {
  Tape& t = detail::same_tape("mean-pool", {a});
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("mean-pool: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  if (s[axis] == 0) throw ShapeError("mean-pool: empty axis in " + shape_str(s));
  auto [outer, len, inner] = detail::split_axis(s, axis);
  Shape os = s;
  os[axis] = 1;
  Tensor out(os);
  const auto src = a.value().data();
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::size_t l = 0; l < len; ++l) acc += src[(o * len + l) * inner + i];
      out[o * inner + i] = acc * inv;
    }
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::MeanPool, std::move(out), a.requires_grad(),
                [=, outer = outer, len = len, inner = inner](Tape& tp) {
                  auto g = tp.grad_of(self);
                  std::vector<double> ga(outer * len * inner);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t l = 0; l < len; ++l)
                      for (std::size_t i = 0; i < inner; ++i) ga[(o * len + l) * inner + i] = g[o * inner + i] * inv;
                  tp.accumulate(ia, ga);
                });
}

inline Var softmax(const Var& a) {
  Tape& t = detail::same_tape("softmax", {a});
  const Shape& s = a.shape();
  const std::size_t c = s.back();
  if (c == 0) throw ShapeError("softmax: empty last axis");
  const std::size_t rows = a.value().size() / c;
  Tensor out(s);
  const auto src = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = src.data() + r * c;
    double* y = out.data().data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Softmax, std::move(out), a.requires_grad(), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    const auto y = tp.value(self).data();
    std::vector<double> ga(g.size());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] = y[r * c + j] * (g[r * c + j] - dot);
    }
    tp.accumulate(ia, ga);
  });
}

inline Var relu(const Var& a) {
  Tape& t = detail::same_tape("relu", {a});
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Relu, std::move(out), a.requires_grad(), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    const auto x = tp.value(ia).data();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = x[i] > 0.0 ? g[i] : 0.0;
    tp.accumulate(ia, ga);
  });
}

/// x (n x in) * w (in x out) + b (out), bias broadcast over rows.
inline Var affine(const Var& x, const Var& w, const Var& b) {
  Tape& t = detail::same_tape("affine", {x, w, b});
  detail::require_rank2("affine", x);
  detail::require_rank2("affine", w);
  const std::size_t n = x.rows(), in = x.cols(), outd = w.cols();
  if (w.rows() != in)
    throw ShapeError("affine: input width " + std::to_string(in) + " does not match weight " + shape_str(w.shape()));
  if (b.value().size() != outd)
    throw ShapeError("affine: bias " + shape_str(b.shape()) + " does not match output width " + std::to_string(outd));
  Tensor out({n, outd});
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * outd));
  detail::gemm(false, false, n, in, outd, x.value().data().data(), w.value().data().data(), out.data().data());
  const int ix = x.id(), iw = w.id(), ib = b.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Affine, std::move(out), detail::any_grad({x, w, b}), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    if (tp.requires_grad(ix)) {
      Tensor gx({n, in});
      detail::gemm(false, true, n, outd, in, g.data(), tp.value(iw).data().data(), gx.data().data());
      tp.accumulate(ix, gx);
    }
    if (tp.requires_grad(iw)) {
      Tensor gw({in, outd});
      detail::gemm(true, false, in, n, outd, tp.value(ix).data().data(), g.data(), gw.data().data());
      tp.accumulate(iw, gw);
    }
    if (tp.requires_grad(ib)) {
      std::vector<double> gb(outd, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < outd; ++j) gb[j] += g[i * outd + j];
      tp.accumulate(ib, gb);
    }
  });
}

/// Normalizes each last-axis slice, then applies gain and bias (both of the last-axis width).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  Tape& t = detail::same_tape("layer-norm", {x, gain, bias});
  const std::size_t d = x.shape().back();
  if (gain.value().size() != d || bias.value().size() != d)
    throw ShapeError("layer-norm: gain/bias width does not match " + shape_str(x.shape()));
  const std::size_t rows = x.value().size() / d;
  Tensor out(x.shape());
  std::vector<double> xhat(x.value().size()), rstd(rows);
  const auto src = x.value().data();
  const auto gv = gain.value().data(), bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += src[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[r * d + j] - mu) * (src[r * d + j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (src[r * d + j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  const int ix = x.id(), ig = gain.id(), ibias = bias.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::LayerNorm, std::move(out), detail::any_grad({x, gain, bias}),
                [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tp) {
                  auto g = tp.grad_of(self);
                  const auto gv2 = tp.value(ig).data();
                  if (tp.requires_grad(ix)) {
                    std::vector<double> gx(g.size());
                    for (std::size_t r = 0; r < rows; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double gh = g[r * d + j] * gv2[j];
                        m1 += gh;
                        m2 += gh * xhat[r * d + j];
                      }
                      m1 /= static_cast<double>(d);
                      m2 /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const double gh = g[r * d + j] * gv2[j];
                        gx[r * d + j] = rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                      }
                    }
                    tp.accumulate(ix, gx);
                  }
                  if (tp.requires_grad(ig) || tp.requires_grad(ibias)) {
                    std::vector<double> gg(d, 0.0), gb(d, 0.0);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                      }
                    tp.accumulate(ig, gg);
                    tp.accumulate(ibias, gb);
                  }
                });
}

/// Mean softmax cross-entropy of logits (n x C) against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  Tape& t = detail::same_tape("cross-entropy-with-logits", {logits});
  detail::require_rank2("cross-entropy-with-logits", logits);
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n)
    throw ShapeError("cross-entropy-with-logits: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  std::vector<double> probs(n * c);
  double loss = 0.0;
  const auto x = logits.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw ShapeError("cross-entropy-with-logits: label " + std::to_string(labels[r]) + " out of range for " +
                       std::to_string(c) + " classes");
    const double* row = x.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    loss += -(row[static_cast<std::size_t>(labels[r])] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  const int il = logits.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::CrossEntropy, Tensor::scalar(loss), logits.requires_grad(),
                [=, probs = std::move(probs)](Tape& tp) {
                  const double g = tp.grad_of(self)[0] / static_cast<double>(n);
                  std::vector<double> gl(n * c);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < c; ++j)
                      gl[r * c + j] = g * (probs[r * c + j] - (static_cast<int>(j) == labels[r] ? 1.0 : 0.0));
                  tp.accumulate(il, gl);
                });
}

/// Identity forward; backward multiplies the incoming gradient by -coefficient.
inline Var grad_reverse(const Var& a, double coefficient) {
  Tape& t = detail::same_tape("gradient-reversal", {a});
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::GradReverse, a.value(), a.requires_grad(), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    std::vector<double> ga(g.begin(), g.end());
    for (auto& v : ga) v *= -coefficient;
    tp.accumulate(ia, ga);
  });
}

inline Var transpose(const Var& a) {
  Tape& t = detail::same_tape("transpose", {a});
  detail::require_rank2("transpose", a);
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out({m, n});
  const auto src = a.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = src[i * m + j];
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::Transpose, std::move(out), a.requires_grad(), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    std::vector<double> ga(n * m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] = g[j * n + i];
    tp.accumulate(ia, ga);
  });
}

/// Selects rows of a matrix; indices may repeat.
inline Var gather_rows(const Var& a, const std::vector<std::size_t>& rows) {
  Tape& t = detail::same_tape("gather-rows", {a});
  detail::require_rank2("gather-rows", a);
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out({rows.size(), d});
  const auto src = a.value().data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("gather-rows: row " + std::to_string(rows[r]) + " out of range " + std::to_string(n));
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const int ia = a.id(), self = static_cast<int>(t.size());
  return t.push(OpKind::GatherRows, std::move(out), a.requires_grad(), [=](Tape& tp) {
    auto g = tp.grad_of(self);
    std::vector<double> ga(n * d, 0.0);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) ga[rows[r] * d + j] += g[r * d + j];
    tp.accumulate(ia, ga);
  });
}

/// Result of single-head scaled dot-product attention.
struct AttentionResult {
  Var output;   // n x d_v
  Var weights;  // n x m, rows sum to one
};

/// softmax(q k^T * logit_scale / sqrt(d)) v, composed from primitive ops so
/// its adjoint comes from theirs. logit_scale = 0 forces uniform weights.
inline AttentionResult scaled_dot_product_attention(const Var& q, const Var& k, const Var& v, double logit_scale = 1.0) {
  if (q.cols() != k.cols())
    throw ShapeError("scaled-dot-product-attention: query width " + std::to_string(q.cols()) + " vs key width " +
                     std::to_string(k.cols()));
  if (k.rows() != v.rows())
    throw ShapeError("scaled-dot-product-attention: " + std::to_string(k.rows()) + " keys but " +
                     std::to_string(v.rows()) + " values");
  const double s = logit_scale / std::sqrt(static_cast<double>(q.cols()));
  Var logits = scale(matmul(q, transpose(k)), s);
  Var w = softmax(logits);
  return {matmul(w, v), w};
}

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const std::function<Var(Tape&, const Var&)>& fn, const Tensor& point, double step = 1e-5) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var y = fn(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.constant(p);
    return fn(tape, x).value().item();
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite central difference at coordinate " + std::to_string(i));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace hct

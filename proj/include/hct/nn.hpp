#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hct/diffcore.hpp"
#include "hct/rng.hpp"

namespace hct {

/// Named learnable tensors. Ordered so iteration (and serialization) is stable.
class ParamStore {
 public:
  void set(const std::string& name, Tensor value) { params_[name] = std::move(value); }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  Tensor& get_mut(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

using Gradients = std::map<std::string, Tensor>;

/// Binds stored parameters onto one tape. Parameters rejected by the
/// trainable predicate enter as constants and receive no gradient.
class Binder {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  Binder(Tape& tape, const ParamStore& store, Predicate trainable = {})
      : tape_(tape), store_(store), trainable_(std::move(trainable)) {}

  Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor& value = store_.get(name);
    const bool train = !trainable_ || trainable_(name);
    Var v = train ? tape_.leaf(value) : tape_.constant(value);
    bound_.emplace(name, v);
    return v;
  }

  Var constant(Tensor t) { return tape_.constant(std::move(t)); }

  /// Gradients of every bound trainable parameter after tape.backward().
  Gradients gradients() const {
    Gradients out;
    for (const auto& [name, v] : bound_)
      if (v.requires_grad()) out.emplace(name, tape_.grad(v));
    return out;
  }

 private:
  Tape& tape_;
  const ParamStore& store_;
  Predicate trainable_;
  std::unordered_map<std::string, Var> bound_;
};

namespace nn {

/// Weights uniform in +-1/sqrt(fan_in), bias zero.
inline void init_affine(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Stream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w({in, out});
  for (auto& v : w.data()) v = rng.uniform(-bound, bound);
  ps.set(name + ".w", std::move(w));
  ps.set(name + ".b", Tensor({out}));
}

inline Var affine(Binder& b, const std::string& name, const Var& x) { return hct::affine(x, b(name + ".w"), b(name + ".b")); }

inline void init_layer_norm(ParamStore& ps, const std::string& name, std::size_t d) {
  ps.set(name + ".g", Tensor({d}, 1.0));
  ps.set(name + ".b", Tensor({d}));
}

inline Var layer_norm(Binder& b, const std::string& name, const Var& x) {
  return hct::layer_norm(x, b(name + ".g"), b(name + ".b"));
}

/// Single-head attention projections (no biases).
inline void init_attention(ParamStore& ps, const std::string& name, std::size_t d, Stream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (const char* p : {".q", ".k", ".v"}) {
    Tensor w({d, d});
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    ps.set(name + p, std::move(w));
  }
}

inline AttentionResult attention(Binder& b, const std::string& name, const Var& query_in, const Var& kv_in,
                                 double logit_scale = 1.0) {
  Var q = matmul(query_in, b(name + ".q"));
  Var k = matmul(kv_in, b(name + ".k"));
  Var v = matmul(kv_in, b(name + ".v"));
  return scaled_dot_product_attention(q, k, v, logit_scale);
}

/// Position-wise feedforward: affine, relu, affine.
inline void init_ffn(ParamStore& ps, const std::string& name, std::size_t d, std::size_t hidden, Stream& rng) {
  init_affine(ps, name + ".fc1", d, hidden, rng);
  init_affine(ps, name + ".fc2", hidden, d, rng);
}

inline Var ffn(Binder& b, const std::string& name, const Var& x) {
  return affine(b, name + ".fc2", relu(affine(b, name + ".fc1", x)));
}

/// Domain discriminator: two-layer perceptron emitting 2-class logits.
inline void init_discriminator(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, Stream& rng) {
  init_affine(ps, name + ".fc1", in, hidden, rng);
  init_affine(ps, name + ".fc2", hidden, 2, rng);
}

/// Gradient reversal, then the discriminator.
inline Var discriminate(Binder& b, const std::string& name, const Var& features, double grl_coefficient) {
  Var x = grad_reverse(features, grl_coefficient);
  return affine(b, name + ".fc2", relu(affine(b, name + ".fc1", x)));
}

/// Cross-entropy of every row of `features` against one domain tag.
inline Var domain_loss(Binder& b, const std::string& name, const Var& features, int domain, double grl_coefficient) {
  Var logits = discriminate(b, name, features, grl_coefficient);
  return cross_entropy(logits, std::vector<int>(logits.rows(), domain));
}

}  // namespace nn

/// Zero-valued scalar constant, for absent loss terms.
inline Var zero_scalar(Tape& t) { return t.constant(Tensor::scalar(0.0)); }

}  // namespace hct

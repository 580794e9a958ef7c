#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "hct/nn.hpp"

namespace hct {

/// Gradient-reversal coefficient 2/(1+exp(-gamma p)) - 1 for progress p in [0,1].
inline double grl_coefficient(double progress, double gamma = 10.0) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw std::invalid_argument("grl_coefficient: progress outside [0,1]");
  return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0;
}

/// Annealed learning rate lr0 / (1 + alpha p)^beta.
inline double annealed_lr(double lr0, double progress, double alpha = 10.0, double beta = 0.75) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw std::invalid_argument("annealed_lr: progress outside [0,1]");
  return lr0 / std::pow(1.0 + alpha * progress, beta);
}

/// SGD with momentum and L2 weight decay. Only parameters present in the
/// gradient map move.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParamStore& ps, const Gradients& grads, double lr) {
    for (const auto& [name, g] : grads) {
      Tensor& p = ps.get_mut(name);
      auto& vel = velocity_.try_emplace(name, Tensor(p.shape())).first->second;
      auto pv = p.data();
      auto vv = vel.data();
      const auto gv = g.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = gv[i] + weight_decay_ * pv[i];
        vv[i] = momentum_ * vv[i] + d;
        pv[i] -= lr * vv[i];
      }
    }
  }

 private:
  double momentum_, weight_decay_;
  std::map<std::string, Tensor> velocity_;
};

class Adam {
 public:
  explicit Adam(double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& ps, const Gradients& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = ps.get_mut(name);
      auto& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
      auto& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
      auto pv = p.data();
      auto mv = m.data();
      auto vv = v.data();
      const auto gv = g.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = gv[i] + wd_ * pv[i];
        mv[i] = b1_ * mv[i] + (1.0 - b1_) * d;
        vv[i] = b2_ * vv[i] + (1.0 - b2_) * d * d;
        pv[i] -= lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + eps_);
      }
    }
  }

 private:
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Adds `src` into `dst` name by name, in map order.
inline void accumulate(Gradients& dst, const Gradients& src) {
  for (const auto& [name, g] : src) {
    auto [it, inserted] = dst.try_emplace(name, g);
    if (inserted) continue;
    auto d = it->second.data();
    const auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }
}

}  // namespace hct

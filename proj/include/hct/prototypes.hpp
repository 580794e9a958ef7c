#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "hct/diffcore.hpp"
#include "hct/nn.hpp"
#include "hct/optim.hpp"
#include "hct/rng.hpp"
#include "hct/synthbench.hpp"

namespace hct {

/// K context prototypes of one domain.
struct PrototypeBank {
  Tensor prototypes;  // K x D
  Domain domain = Domain::Source;
  double kept_fraction = 1.0;
  std::vector<double> inertia_trace;

  std::size_t K() const { return prototypes.rows(); }

  friend bool operator==(const PrototypeBank&, const PrototypeBank&) = default;
};

namespace prototypes {

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;
};

struct KMeansResult {
  Tensor centroids;                     // K x D
  std::vector<std::size_t> assignment;  // per feature
  std::vector<double> inertia_trace;    // objective at each assignment step
  std::size_t iterations = 0;
};

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

/// Lloyd's K-means with k-means++ seeding. Ties go to the lowest centroid index;
/// a cluster left empty is re-seeded at the point farthest from its centroid.
inline KMeansResult kmeans(const Tensor& features, std::size_t K, Stream& rng, const KMeansOptions& opt = {}) {
  if (features.rank() != 2) throw ShapeError("kmeans: expected an n x D matrix");
  const std::size_t n = features.rows(), d = features.cols();
  if (K == 0) throw std::invalid_argument("kmeans: K must be positive");
  if (n < K) throw std::invalid_argument("kmeans: " + std::to_string(n) + " features for K=" + std::to_string(K));
  const double* x = features.data().data();

  KMeansResult r;
  r.centroids = Tensor({K, d});
  double* c = r.centroids.data().data();
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  std::copy_n(x + first * d, d, c);
  for (std::size_t k = 1; k < K; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sq_dist(x + i * d, c + (k - 1) * d, d));
      total += best[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        u -= best[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng.below(n));
    }
    std::copy_n(x + pick * d, d, c + k * d);
  }

  r.assignment.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<double> sums(K * d);
  std::vector<std::size_t> counts(K);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        const double dd = sq_dist(x + i * d, c + k * d, d);
        if (dd < bd) {
          bd = dd;
          arg = k;
        }
      }
      r.assignment[i] = arg;
      dist[i] = bd;
      inertia += bd;
    }
    r.inertia_trace.push_back(inertia);
    ++r.iterations;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.assignment[i]];
      for (std::size_t k = 0; k < d; ++k) sums[r.assignment[i] * d + k] += x[i * d + k];
    }
    double shift = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (counts[k] == 0) continue;
      std::vector<double> next(d);
      for (std::size_t j = 0; j < d; ++j) next[j] = sums[k * d + j] / static_cast<double>(counts[k]);
      shift = std::max(shift, std::sqrt(sq_dist(next.data(), c + k * d, d)));
      std::copy(next.begin(), next.end(), c + k * d);
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (counts[k] != 0) continue;
      const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
      std::copy_n(x + far * d, d, c + k * d);
      dist[far] = 0.0;
      shift = std::numeric_limits<double>::infinity();
    }
    if (shift < opt.tol) break;
  }
  return r;
}

/// Predictive entropy -sum p log p of each row of logits.
inline std::vector<double> entropies(const Tensor& logits) {
  const std::size_t n = logits.rows(), c = logits.cols();
  std::vector<double> h(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data().data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    double e = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(row[j] - mx) / z;
      if (p > 0.0) e -= p * std::log(p);
    }
    h[r] = e;
  }
  return h;
}

/// Indices (ascending) of the ceil(keep_fraction * n) lowest-entropy rows;
/// ties keep the earlier row.
inline std::vector<std::size_t> entropy_filter(const std::vector<double>& entropy, double keep_fraction) {
  if (entropy.empty()) throw std::invalid_argument("entropy_filter: empty feature list");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw std::invalid_argument("entropy_filter: keep fraction outside (0,1]");
  const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(entropy.size()) - 1e-12));
  std::vector<std::size_t> order(entropy.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return entropy[a] < entropy[b]; });
  order.resize(std::max<std::size_t>(keep, 1));
  std::sort(order.begin(), order.end());
  return order;
}

/// Affine context classifier used only to rank features by confidence.
struct ContextClassifier {
  Tensor weight;  // D x N_cls
  Tensor bias;    // N_cls

  Tensor logits(const Tensor& features) const {
    Tape t;
    return affine(t.constant(features), t.constant(weight), t.constant(bias)).value();
  }
};

inline ContextClassifier train_context_classifier(const Tensor& features, const std::vector<int>& labels, std::size_t n_cls,
                                                  std::size_t epochs, Stream& rng, std::size_t batch = 256,
                                                  double lr = 0.01) {
  if (features.rows() == 0) throw std::invalid_argument("context classifier: no source context features");
  const std::size_t n = features.rows(), d = features.cols();
  ParamStore ps;
  nn::init_affine(ps, "ctxcls", d, n_cls, rng);
  Adam opt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t s = 0; s < n; s += batch) {
      const std::size_t m = std::min(batch, n - s);
      Tensor xb({m, d});
      std::vector<int> yb(m);
      for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(features.data().begin() + static_cast<std::ptrdiff_t>(order[s + i] * d), d,
                    xb.data().begin() + static_cast<std::ptrdiff_t>(i * d));
        yb[i] = labels[order[s + i]];
      }
      Tape t;
      Binder b(t, ps);
      Var loss = cross_entropy(nn::affine(b, "ctxcls", t.constant(std::move(xb))), yb);
      t.backward(loss);
      opt.step(ps, b.gradients(), lr);
    }
  }
  return {ps.get("ctxcls.w"), ps.get("ctxcls.b")};
}

inline Tensor select_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  const std::size_t d = m.cols();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  return out;
}

/// Entropy filter, then K-means, over one domain's context features.
inline PrototypeBank build_bank(const Tensor& features, const ContextClassifier& clf, Domain domain, std::size_t K,
                                double keep_fraction, Stream& rng, const KMeansOptions& opt = {}) {
  const auto kept = entropy_filter(entropies(clf.logits(features)), keep_fraction);
  Tensor survivors = select_rows(features, kept);
  auto km = kmeans(survivors, K, rng, opt);
  PrototypeBank bank;
  bank.prototypes = std::move(km.centroids);
  bank.domain = domain;
  bank.kept_fraction = static_cast<double>(kept.size()) / static_cast<double>(features.rows());
  bank.inertia_trace = std::move(km.inertia_trace);
  return bank;
}

}  // namespace prototypes
}  // namespace hct

#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hct/model_config.hpp"
#include "hct/nn.hpp"

namespace hct::human_encoder {

inline std::string trn_name(std::size_t g) { return "hm.trn" + std::to_string(g); }
inline std::string trn_disc_name(std::size_t g) { return "disc.hm.trn" + std::to_string(g); }
inline std::string proj_disc_name(std::size_t i) { return "disc.hm.proj" + std::to_string(i); }

inline void init(ParamStore& ps, const ModelConfig& cfg, Stream& rng) {
  nn::init_layer_norm(ps, "hm.ln", cfg.D);
  nn::init_attention(ps, "hm.attn", cfg.D, rng);
  nn::init_affine(ps, "hm.proj", cfg.D, cfg.Dv, rng);
  for (std::size_t g = 1; g < cfg.M; ++g) {
    nn::init_affine(ps, trn_name(g) + ".fc1", (g + 1) * cfg.Dv, cfg.Dv, rng);
    nn::init_affine(ps, trn_name(g) + ".fc2", cfg.Dv, cfg.Dv, rng);
  }
  nn::init_affine(ps, "hm.cls", cfg.Dv, cfg.n_cls, rng);
  for (std::size_t g = 1; g < cfg.M; ++g) nn::init_discriminator(ps, trn_disc_name(g), cfg.Dv, cfg.Dv, rng);
  for (std::size_t i = 1; i < cfg.M; ++i) nn::init_discriminator(ps, proj_disc_name(i), cfg.Dv, cfg.Dv, rng);
}

struct Aggregation {
  Var feature;  // 1 x D
  Var weights;  // n x n self-attention weights
};

/// Residual pre-norm self-attention over the unordered human tokens, then the token mean.
inline Aggregation aggregate_with_weights(Binder& b, const Var& tokens) {
  if (tokens.rows() == 0) throw std::logic_error("aggregate_human: empty human set (masking fallback failed)");
  Var normed = nn::layer_norm(b, "hm.ln", tokens);
  auto att = nn::attention(b, "hm.attn", normed, normed);
  Var mixed = add(tokens, att.output);
  return {mean(mixed, 0), att.weights};
}

inline Var aggregate(Binder& b, const Var& tokens) { return aggregate_with_weights(b, tokens).feature; }

inline Var project(Binder& b, const Var& aggregated) { return nn::affine(b, "hm.proj", aggregated); }

/// Temporally ordered clip subsets of size g+1: all of them when there are at
/// most `max_subsets`, else `max_subsets` distinct ones drawn from `rng`.
inline std::vector<std::vector<std::size_t>> sample_subsets(std::size_t M, std::size_t g, std::size_t max_subsets, Stream& rng) {
  if (g == 0 || g >= M) throw std::invalid_argument("sample_subsets: granularity out of range");
  const std::size_t k = g + 1;
  std::vector<std::vector<std::size_t>> all;
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  for (;;) {
    all.push_back(idx);
    std::size_t pos = k;
    while (pos > 0 && idx[pos - 1] == M - k + pos - 1) --pos;
    if (pos == 0) break;
    ++idx[pos - 1];
    for (std::size_t j = pos; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
  if (all.size() <= max_subsets) return all;
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Partial Fisher-Yates: the first max_subsets slots are a uniform draw.
  for (std::size_t i = 0; i < max_subsets; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(order.size() - i));
    std::swap(order[i], order[j]);
  }
  order.resize(max_subsets);
  std::sort(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t o : order) out.push_back(all[o]);
  return out;
}

/// TRN at granularity g: per subset concatenate the clips in order, two-layer
/// perceptron to D_v, then average over subsets.
inline Var trn(Binder& b, std::size_t g, const std::vector<Var>& projected,
               const std::vector<std::vector<std::size_t>>& subsets) {
  std::vector<Var> outs;
  for (const auto& s : subsets) {
    std::vector<Var> parts;
    for (std::size_t i : s) parts.push_back(projected.at(i));
    Var cat = concat(parts, 1);
    outs.push_back(nn::affine(b, trn_name(g) + ".fc2", relu(nn::affine(b, trn_name(g) + ".fc1", cat))));
  }
  return mean(concat(outs, 0), 0);
}

/// z (M-1) x D_v, row g-1 is the (g+1)-order dynamics feature.
inline Var trn_forward(Binder& b, const ModelConfig& cfg, const std::vector<Var>& projected, Stream& rng) {
  if (projected.size() < 2) throw std::invalid_argument("trn_forward: need at least 2 clips");
  if (projected.size() != cfg.M)
    throw std::invalid_argument("trn_forward: expected " + std::to_string(cfg.M) + " clips, got " +
                                std::to_string(projected.size()));
  std::vector<Var> rows;
  for (std::size_t g = 1; g < projected.size(); ++g)
    rows.push_back(trn(b, g, projected, sample_subsets(projected.size(), g, cfg.trn_subsets, rng)));
  return concat(rows, 0);
}

struct Output {
  std::vector<Var> projected;  // M rows of 1 x D_v
  Var z;                       // (M-1) x D_v
};

/// Runs the encoder over per-clip human token matrices.
inline Output forward(Binder& b, const ModelConfig& cfg, const std::vector<Var>& human_tokens, Stream& rng) {
  Output out;
  for (const auto& t : human_tokens) out.projected.push_back(project(b, aggregate(b, t)));
  out.z = trn_forward(b, cfg, out.projected, rng);
  return out;
}

/// Video-level human feature: average over the granularity rows.
inline Var video_feature(const Output& o) { return mean(o.z, 0); }

inline Var classify(Binder& b, const Output& o) { return nn::affine(b, "hm.cls", video_feature(o)); }

struct Loss {
  std::optional<Var> classification;  // source only
  Var align_trn;                      // lambda/(M-1) * sum over granularities
  Var align_proj;                     // lambda/(M-1) * sum over clips 1..M-1
  Var total;
};

inline Loss loss(Binder& b, const ModelConfig& cfg, const Output& o, std::optional<int> label, Domain domain,
                 double lambda, double grl) {
  if (domain == Domain::Target && label)
    throw std::invalid_argument("human_encoder_loss: label supplied for a target video");
  if (domain == Domain::Source && !label) throw std::invalid_argument("human_encoder_loss: source video without label");
  Tape& t = b.tape();
  Loss l;
  const int dom = static_cast<int>(domain);
  const double w = lambda / static_cast<double>(cfg.M - 1);
  if (label) l.classification = cross_entropy(classify(b, o), {*label});
  if (lambda == 0.0) {
    l.align_trn = zero_scalar(t);
    l.align_proj = zero_scalar(t);
  } else {
    std::vector<Var> trn_terms, proj_terms;
    for (std::size_t g = 1; g < cfg.M; ++g)
      trn_terms.push_back(nn::domain_loss(b, trn_disc_name(g), gather_rows(o.z, {g - 1}), dom, grl));
    // Clips 1..M-1 as written in the loss; the last clip has no discriminator.
    for (std::size_t i = 1; i < cfg.M; ++i)
      proj_terms.push_back(nn::domain_loss(b, proj_disc_name(i), o.projected[i - 1], dom, grl));
    l.align_trn = scale(sum(concat(trn_terms, 0)), w);
    l.align_proj = scale(sum(concat(proj_terms, 0)), w);
  }
  l.total = add(l.align_trn, l.align_proj);
  if (l.classification) l.total = add(*l.classification, l.total);
  return l;
}

}  // namespace hct::human_encoder

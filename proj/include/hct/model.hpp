#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hct/context_encoder.hpp"
#include "hct/hc_decoder.hpp"
#include "hct/human_encoder.hpp"
#include "hct/masking.hpp"
#include "hct/model_config.hpp"
#include "hct/nn.hpp"
#include "hct/synthbench.hpp"

namespace hct {

/// A video with its effective clip partitions resolved once.
struct PreparedVideo {
  const VideoRecord* video = nullptr;
  std::vector<ClipPartition> parts;
  std::vector<MaskSource> sources;
};

/// Dataset-average mask of one split (the training split of that domain).
inline HumanMask dataset_average_mask(const Dataset& ds) {
  std::vector<HumanMask> all;
  for (const auto& v : ds.videos)
    for (const auto& m : v.masks) all.push_back(m);
  return masking::average(all);
}

inline PreparedVideo prepare_video(const VideoRecord& v, const ModelConfig& cfg, const HumanMask& dataset_average) {
  PreparedVideo p;
  p.video = &v;
  if (v.num_clips() != cfg.M)
    throw ShapeError("video has " + std::to_string(v.num_clips()) + " clips, model expects " + std::to_string(cfg.M));
  if (v.feature_dim() != cfg.D)
    throw ShapeError("video feature width " + std::to_string(v.feature_dim()) + ", model expects " + std::to_string(cfg.D));
  if (cfg.ablation.no_masking) {
    for (std::size_t i = 0; i < v.num_clips(); ++i) {
      p.parts.push_back(masking::unmasked(v.positions()));
      p.sources.push_back(MaskSource::Provided);
    }
    return p;
  }
  const auto effective = masking::fallback_masks(v.masks, dataset_average, cfg.mask_threshold);
  for (std::size_t i = 0; i < effective.size(); ++i) {
    p.parts.push_back(masking::partition(v.clips[i], effective[i], cfg.mask_threshold));
    p.sources.push_back(effective[i].source);
  }
  return p;
}

inline std::vector<PreparedVideo> prepare_dataset(const Dataset& ds, const ModelConfig& cfg) {
  const HumanMask avg = dataset_average_mask(ds);
  std::vector<PreparedVideo> out;
  out.reserve(ds.videos.size());
  for (const auto& v : ds.videos) out.push_back(prepare_video(v, cfg, avg));
  return out;
}

namespace model {

inline void init_params(ParamStore& ps, const ModelConfig& cfg, Stream& rng) {
  cfg.validate();
  const Variant v = cfg.variant();
  if (v == Variant::Backbone) {
    nn::init_affine(ps, "bb.cls", cfg.D, cfg.n_cls, rng);
    nn::init_discriminator(ps, "disc.bb", cfg.D, cfg.Dv, rng);
    return;
  }
  if (cfg.uses_hm()) human_encoder::init(ps, cfg, rng);
  if (cfg.uses_ctx_stream()) context_encoder::init(ps, cfg, rng);
  if (v == Variant::Full) {
    hc_decoder::init(ps, cfg, rng);
    nn::init_affine(ps, "video.cls", cfg.Dv, cfg.n_cls, rng);
    nn::init_discriminator(ps, "disc.video", cfg.Dv, cfg.Dv, rng);
  } else if (v == Variant::CtxEnc || v == Variant::LateFusion) {
    nn::init_affine(ps, "ctxhead.cls", cfg.Dv, cfg.n_cls, rng);
    nn::init_discriminator(ps, "disc.ctxhead", cfg.Dv, cfg.Dv, rng);
  }
}

inline std::size_t discriminator_count(const ParamStore& ps) {
  std::size_t n = 0;
  for (const auto& [name, _] : ps.all())
    if (name.rfind("disc.", 0) == 0 && name.ends_with(".fc1.w")) ++n;
  return n;
}

/// Parameters optimized in the first stage (human encoder, or the backbone head).
inline bool is_stage1_param(const std::string& name) {
  for (const char* p : {"hm.", "disc.hm.", "bb.", "disc.bb"})
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

enum class Stage {
  Human,    // human encoder objective
  Context,  // context encoder, decoder and video heads; human encoder frozen
  Backbone, // baseline head
};

struct ForwardOptions {
  double grl = 0.0;
  double decoder_logit_scale = 1.0;
  bool run_context = true;  // false in the human stage
};

/// Every intermediate a caller may inspect.
struct Graph {
  std::vector<Var> clips;
  std::optional<human_encoder::Output> hm;
  std::optional<context_encoder::Tokens> ctx_tokens;
  std::optional<context_encoder::Output> ctx;
  std::optional<hc_decoder::Output> hc;
  std::optional<Var> hm_logits;
  std::optional<Var> head_logits;  // video.cls, ctxhead.cls or bb.cls
  Var feature;                     // video-level feature before the classifier
  Var score_logits;                // logits used for prediction and attribution
};

inline Graph forward(Binder& b, const ModelConfig& cfg, const PreparedVideo& pv, const Tensor* bank, Stream& subset_rng,
                     const ForwardOptions& opt = {}, bool clip_leaves = false) {
  const VideoRecord& video = *pv.video;
  Graph g;
  for (const auto& c : video.clips) g.clips.push_back(clip_leaves ? b.tape().leaf(c) : b.constant(c));
  const Variant v = cfg.variant();

  if (v == Variant::Backbone) {
    g.feature = mean(concat(g.clips, 0), 0);
    g.head_logits = nn::affine(b, "bb.cls", g.feature);
    g.score_logits = *g.head_logits;
    return g;
  }

  if (cfg.uses_hm()) {
    std::vector<Var> human;
    for (std::size_t i = 0; i < g.clips.size(); ++i) human.push_back(gather_rows(g.clips[i], pv.parts[i].human));
    g.hm = human_encoder::forward(b, cfg, human, subset_rng);
    g.hm_logits = human_encoder::classify(b, *g.hm);
    g.feature = human_encoder::video_feature(*g.hm);
    g.score_logits = *g.hm_logits;
  }
  if (!opt.run_context || !cfg.uses_ctx_stream()) return g;

  std::vector<std::optional<Var>> context;
  for (std::size_t i = 0; i < g.clips.size(); ++i) {
    if (pv.parts[i].context.empty())
      context.emplace_back();
    else
      context.emplace_back(gather_rows(g.clips[i], pv.parts[i].context));
  }
  g.ctx_tokens = context_encoder::inputs(b, cfg, context, bank);
  g.ctx = context_encoder::encode(b, cfg, *g.ctx_tokens);

  if (v == Variant::Full) {
    g.hc = hc_decoder::decode(b, cfg, g.hm->z, g.ctx->final, opt.decoder_logit_scale);
    g.feature = mean(g.hc->final, 0);
    g.head_logits = nn::affine(b, "video.cls", g.feature);
    g.score_logits = *g.head_logits;
  } else {
    Var ctx_feature = mean(g.ctx->final, 0);
    g.head_logits = nn::affine(b, "ctxhead.cls", ctx_feature);
    if (v == Variant::CtxEnc) {
      g.feature = ctx_feature;
      g.score_logits = *g.head_logits;
    } else {
      g.feature = concat({g.feature, ctx_feature}, 1);
      g.score_logits = scale(add(*g.hm_logits, *g.head_logits), 0.5);
    }
  }
  return g;
}

struct Lambdas {
  double hm = 0.5;
  double ctx = 0.5;
  double hc = 0.25;
  double H = 0.25;
};

/// Batch normalization of one video's terms: classification is averaged over
/// the source videos of the batch, alignment over all videos.
struct BatchWeights {
  double cls = 1.0;
  double dom = 1.0;
};

struct LossTerms {
  Var hm, ctx, hc, video, total;
};

/// One video's weighted contribution to the overall loss of `stage`.
inline LossTerms objective(Binder& b, const ModelConfig& cfg, const PreparedVideo& pv, const Tensor* bank, Stage stage,
                           const Lambdas& lam, double grl, const BatchWeights& w, Stream& subset_rng,
                           bool clip_leaves = false, Graph* graph_out = nullptr) {
  Tape& t = b.tape();
  const VideoRecord& video = *pv.video;
  const Domain dom = video.domain;
  std::optional<int> label;
  if (video.label >= 0) label = video.label;
  if (dom == Domain::Target && label) throw std::invalid_argument("objective: target video carries a label");
  if (dom == Domain::Source && !label) throw std::invalid_argument("objective: source video without label");

  ForwardOptions opt;
  opt.grl = grl;
  opt.run_context = stage == Stage::Context;
  Graph g = forward(b, cfg, pv, bank, subset_rng, opt, clip_leaves);
  LossTerms l{zero_scalar(t), zero_scalar(t), zero_scalar(t), zero_scalar(t), {}};
  const Variant v = cfg.variant();

  auto weighted = [&](std::optional<Var> cls, const Var& align) {
    Var out = scale(align, w.dom);
    if (cls) out = add(scale(*cls, w.cls), out);
    return out;
  };
  // Head loss: source classification plus lambda_H domain alignment.
  auto head_loss = [&](const std::string& cls_name, const std::string& disc_name, const Var& feature) {
    std::optional<Var> cls;
    if (label) cls = cross_entropy(nn::affine(b, cls_name, feature), {*label});
    Var align = lam.H == 0.0 ? zero_scalar(t)
                             : scale(nn::domain_loss(b, disc_name, feature, static_cast<int>(dom), grl), lam.H);
    return weighted(cls, align);
  };

  if (v == Variant::Backbone) {
    l.video = head_loss("bb.cls", "disc.bb", g.feature);
  } else {
    if (g.hm) {
      auto hl = human_encoder::loss(b, cfg, *g.hm, label, dom, lam.hm, grl);
      l.hm = weighted(hl.classification, add(hl.align_trn, hl.align_proj));
    }
    if (stage == Stage::Context && g.ctx) {
      l.ctx = scale(context_encoder::alignment_loss(b, *g.ctx, dom, lam.ctx, grl), w.dom);
      if (v == Variant::Full) {
        l.hc = scale(hc_decoder::alignment_loss(b, *g.hc, dom, lam.hc, grl), w.dom);
        l.video = head_loss("video.cls", "disc.video", g.feature);
      } else {
        l.video = head_loss("ctxhead.cls", "disc.ctxhead", mean(g.ctx->final, 0));
      }
    }
  }
  l.total = add(add(l.hm, l.ctx), add(l.hc, l.video));
  if (graph_out) *graph_out = std::move(g);
  return l;
}

inline std::vector<double> softmax_row(const Tensor& logits) {
  std::vector<double> p(logits.values());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& x : p) z += (x = std::exp(x - mx));
  for (auto& x : p) x /= z;
  return p;
}

inline constexpr std::uint64_t kEvalSubsetSeed = 0x5EED0E7A1ULL;

/// Deterministic inference-time subset stream, identical for every call.
inline Stream eval_stream() { return Stream(kEvalSubsetSeed, 0); }

struct Prediction {
  int label = -1;
  std::vector<double> scores;  // class probabilities
  std::vector<double> feature;
};

inline Prediction predict(const ParamStore& ps, const ModelConfig& cfg, const PreparedVideo& pv, const Tensor* bank) {
  Tape t;
  Binder b(t, ps, [](const std::string&) { return false; });
  Stream rng = eval_stream();
  Graph g = forward(b, cfg, pv, bank, rng);
  Prediction p;
  if (cfg.variant() == Variant::LateFusion) {
    auto a = softmax_row(g.hm_logits->value());
    auto c = softmax_row(g.head_logits->value());
    for (std::size_t k = 0; k < a.size(); ++k) p.scores.push_back(0.5 * (a[k] + c[k]));
  } else {
    p.scores = softmax_row(g.score_logits.value());
  }
  p.label = static_cast<int>(std::max_element(p.scores.begin(), p.scores.end()) - p.scores.begin());
  p.feature = g.feature.value().values();
  return p;
}

}  // namespace model
}  // namespace hct

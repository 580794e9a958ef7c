#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hct/config.hpp"
#include "hct/io.hpp"
#include "hct/model.hpp"
#include "hct/optim.hpp"
#include "hct/prototypes.hpp"

namespace hct {

/// Everything a trained run needs for inference and resumption.
struct ModelState {
  ModelConfig model;
  TrainConfig train;
  ParamStore params;
  std::optional<PrototypeBank> source_bank;
  std::optional<PrototypeBank> target_bank;

  const Tensor* bank_for(Domain d) const {
    const auto& b = d == Domain::Source ? source_bank : target_bank;
    return b ? &b->prototypes : nullptr;
  }
};

struct TraceRow {
  std::size_t step = 0;
  int stage = 1;
  double hm = 0, ctx = 0, hc = 0, video = 0, total = 0;
  double lr = 0, grl = 0;
};

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelState state;
  std::vector<TraceRow> trace;
  std::size_t stage1_steps = 0;
};

namespace training {

/// Loss breakdown of one batch; the four terms sum to `total`.
struct Breakdown {
  double hm = 0, ctx = 0, hc = 0, video = 0, total = 0;
};

/// Overall loss on one tape for a micro-batch (all four terms).
struct BatchLoss {
  Var total;
  std::vector<model::LossTerms> per_video;
  Breakdown breakdown;
};

inline model::Lambdas lambdas(const TrainConfig& t) { return {t.lambda_hm, t.lambda_ctx, t.lambda_hc, t.lambda_H}; }

inline model::BatchWeights batch_weights(const VideoRecord& v, std::size_t n_source, std::size_t n_total) {
  return {v.domain == Domain::Source && n_source ? 1.0 / static_cast<double>(n_source) : 0.0,
          1.0 / static_cast<double>(n_total)};
}

/// Sum of every video's weighted terms, on a single tape. `clip_leaves`
/// exposes clip feature maps as differentiable inputs.
inline BatchLoss total_loss(Binder& b, const ModelState& st, const std::vector<const PreparedVideo*>& batch,
                            model::Stage stage, double grl, Stream& subset_rng, bool clip_leaves = false,
                            std::vector<model::Graph>* graphs = nullptr) {
  std::size_t ns = 0;
  for (const auto* p : batch) ns += p->video->domain == Domain::Source ? 1 : 0;
  BatchLoss out;
  std::vector<Var> totals;
  for (const auto* p : batch) {
    model::Graph g;
    auto terms = model::objective(b, st.model, *p, st.bank_for(p->video->domain), stage, lambdas(st.train), grl,
                                  batch_weights(*p->video, ns, batch.size()), subset_rng, clip_leaves, &g);
    out.breakdown.hm += terms.hm.value().item();
    out.breakdown.ctx += terms.ctx.value().item();
    out.breakdown.hc += terms.hc.value().item();
    out.breakdown.video += terms.video.value().item();
    totals.push_back(terms.total);
    out.per_video.push_back(terms);
    if (graphs) graphs->push_back(std::move(g));
  }
  out.total = sum(concat(totals, 0));
  out.breakdown.total = out.total.value().item();
  return out;
}

/// Context features (raw rows) of every clip of every video, with video labels.
struct ContextPool {
  Tensor features;
  std::vector<int> labels;
};

inline ContextPool context_pool(const std::vector<PreparedVideo>& videos) {
  std::size_t n = 0, d = 0;
  for (const auto& p : videos)
    for (const auto& part : p.parts) n += part.context.size();
  if (!videos.empty()) d = videos.front().video->feature_dim();
  ContextPool pool{Tensor({n, d}), {}};
  pool.labels.reserve(n);
  std::size_t r = 0;
  for (const auto& p : videos)
    for (std::size_t i = 0; i < p.parts.size(); ++i)
      for (std::size_t pos : p.parts[i].context) {
        const auto src = p.video->clips[i].data();
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(pos * d), d,
                    pool.features.data().begin() + static_cast<std::ptrdiff_t>(r * d));
        pool.labels.push_back(p.video->label);
        ++r;
      }
  return pool;
}

/// Source-trained context classifier, then per-domain entropy filter and K-means.
inline void build_prototype_banks(ModelState& st, const std::vector<PreparedVideo>& source,
                                  const std::vector<PreparedVideo>& target, std::uint64_t stream_id) {
  Stream rng(st.train.seed, stream_id);
  auto src = context_pool(source);
  auto tgt = context_pool(target);
  Stream clf_rng = rng.derive(1);
  const auto clf = prototypes::train_context_classifier(src.features, src.labels, st.model.n_cls,
                                                        st.train.context_classifier_epochs, clf_rng);
  Stream ks = rng.derive(2), kt = rng.derive(3);
  st.source_bank = prototypes::build_bank(src.features, clf, Domain::Source, st.model.prototype_count(),
                                          st.model.proto_keep_fraction, ks);
  st.target_bank = prototypes::build_bank(tgt.features, clf, Domain::Target, st.model.prototype_count(),
                                          st.model.proto_keep_fraction, kt);
}

/// Cycles through a split in reshuffled passes.
class Cycler {
 public:
  Cycler(std::size_t n, Stream rng) : rng_(rng), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  Stream rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

using ProgressFn = std::function<void(const TraceRow&)>;

inline void check_finite(const Breakdown& b, std::size_t step) {
  const std::pair<const char*, double> terms[] = {{"L_hm", b.hm}, {"L_ctx", b.ctx}, {"L_hc", b.hc}, {"L_video", b.video}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw TrainError(std::string("non-finite ") + name + " at step " + std::to_string(step));
}

struct StageRun {
  model::Stage stage;
  int stage_index;
  const StageConfig* cfg;
  std::function<bool(const std::string&)> trainable;
};

inline void run_stage(ModelState& st, const std::vector<PreparedVideo>& source, const std::vector<PreparedVideo>& target,
                      const StageRun& run, std::vector<TraceRow>& trace, const ProgressFn& progress,
                      const std::function<void(std::size_t epoch)>& on_epoch = {}) {
  const TrainConfig& tc = st.train;
  const std::size_t bp = tc.batch_pairs;
  const std::size_t per_epoch = (std::max(source.size(), target.size()) + bp - 1) / bp;
  const std::size_t total = per_epoch * run.cfg->epochs;
  const std::uint64_t sid = static_cast<std::uint64_t>(run.stage_index) << 32;
  Cycler src_cycle(source.size(), Stream(tc.seed, sid | 0x10));
  Cycler tgt_cycle(target.size(), Stream(tc.seed, sid | 0x20));
  Sgd sgd(run.cfg->momentum, run.cfg->weight_decay);
  Adam adam(run.cfg->weight_decay);
  const model::Lambdas lam = lambdas(tc);
  const std::size_t batch_n = 2 * bp;

  for (std::size_t it = 0; it < total; ++it) {
    const double p = static_cast<double>(it) / static_cast<double>(total);
    const double lr = annealed_lr(run.cfg->lr0, p, tc.lr_alpha, tc.lr_beta);
    const double grl = grl_coefficient(p, tc.grl_gamma);
    std::vector<const PreparedVideo*> batch;
    for (std::size_t k = 0; k < bp; ++k) batch.push_back(&source[src_cycle.next()]);
    for (std::size_t k = 0; k < bp; ++k) batch.push_back(&target[tgt_cycle.next()]);

    Gradients grads;
    Breakdown bd;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      Tape tape;
      Binder b(tape, st.params, run.trainable);
      Stream subset_rng(tc.seed, sid | 0x100000000000ULL | (static_cast<std::uint64_t>(it) << 8) | k);
      const auto& pv = *batch[k];
      auto terms = model::objective(b, st.model, pv, st.bank_for(pv.video->domain), run.stage, lam, grl,
                                    batch_weights(*pv.video, bp, batch_n), subset_rng);
      bd.hm += terms.hm.value().item();
      bd.ctx += terms.ctx.value().item();
      bd.hc += terms.hc.value().item();
      bd.video += terms.video.value().item();
      bd.total += terms.total.value().item();
      tape.backward(terms.total);
      accumulate(grads, b.gradients());
    }
    check_finite(bd, trace.size());
    if (run.cfg->optimizer == OptimizerKind::Sgd)
      sgd.step(st.params, grads, lr);
    else
      adam.step(st.params, grads, lr);

    TraceRow row{trace.size(), run.stage_index, bd.hm, bd.ctx, bd.hc, bd.video, bd.total, lr, grl};
    trace.push_back(row);
    if (progress) progress(row);
    if (on_epoch && (it + 1) % per_epoch == 0) on_epoch((it + 1) / per_epoch);
  }
}

inline void check_splits(const Dataset& source, const Dataset& target, const ModelConfig& cfg) {
  if (source.videos.empty()) throw TrainError("missing source split");
  if (target.videos.empty()) throw TrainError("missing target split");
  for (const auto& v : source.videos)
    if (v.label < 0 || static_cast<std::size_t>(v.label) >= cfg.n_cls) throw TrainError("source video without a valid label");
  for (const auto& v : target.videos)
    if (v.label >= 0) throw TrainError("target split carries labels; load withheld labels through the evaluation loader");
}

/// Decoder residual branches start at zero and the video head copies the
/// stage-1 human head, so stage 2 begins at the human encoder's solution.
inline void warm_start_stage2(ParamStore& ps, const ModelConfig& cfg) {
  for (std::size_t l = 1; l <= cfg.L_d; ++l)
    for (const char* n : {".cross.v", ".ffn.fc2.w", ".ffn.fc2.b"})
      for (auto& x : ps.get_mut(hc_decoder::layer_name(l) + n).values()) x = 0.0;
  ps.set("video.cls.w", ps.get("hm.cls.w"));
  ps.set("video.cls.b", ps.get("hm.cls.b"));
}

/// Human stage with SGD, prototype banks, then the context stage with Adam
/// and the human encoder frozen. The baseline trains its head in one stage.
inline TrainResult two_stage_train(const Dataset& source, const Dataset& target, const ModelConfig& model_cfg,
                                   const TrainConfig& train_cfg, const ProgressFn& progress = {}) {
  model_cfg.validate();
  train_cfg.validate();
  check_splits(source, target, model_cfg);
  TrainResult r;
  ModelState& st = r.state;
  st.model = model_cfg;
  st.train = train_cfg;
  Stream init_rng(train_cfg.seed, 0x1A17);
  model::init_params(st.params, model_cfg, init_rng);

  const auto src = prepare_dataset(source, model_cfg);
  const auto tgt = prepare_dataset(target, model_cfg);
  const Variant v = model_cfg.variant();
  auto stage1 = [](const std::string& n) { return model::is_stage1_param(n); };
  auto stage2 = [](const std::string& n) { return !model::is_stage1_param(n); };

  if (v == Variant::Backbone) {
    run_stage(st, src, tgt, {model::Stage::Backbone, 1, &st.train.stage1, stage1}, r.trace, progress);
    r.stage1_steps = r.trace.size();
    return r;
  }
  if (model_cfg.uses_hm()) run_stage(st, src, tgt, {model::Stage::Human, 1, &st.train.stage1, stage1}, r.trace, progress);
  r.stage1_steps = r.trace.size();
  if (!model_cfg.uses_ctx_stream()) return r;

  if (model_cfg.uses_prototypes()) build_prototype_banks(st, src, tgt, 0xBA4C);
  if (train_cfg.stage2_warm_start && v == Variant::Full) warm_start_stage2(st.params, model_cfg);
  std::function<void(std::size_t)> refresh;
  if (model_cfg.uses_prototypes() && train_cfg.prototype_refresh_epochs > 0)
    refresh = [&](std::size_t epoch) {
      if (epoch % train_cfg.prototype_refresh_epochs == 0 && epoch < train_cfg.stage2.epochs)
        build_prototype_banks(st, src, tgt, 0xBA4C + epoch);
    };
  run_stage(st, src, tgt, {model::Stage::Context, 2, &st.train.stage2, stage2}, r.trace, progress, refresh);
  return r;
}

inline std::vector<model::Prediction> predict_all(const ModelState& st, const Dataset& ds) {
  const auto prepared = prepare_dataset(ds, st.model);
  std::vector<model::Prediction> out;
  out.reserve(prepared.size());
  for (const auto& p : prepared) out.push_back(model::predict(st.params, st.model, p, st.bank_for(ds.domain)));
  return out;
}

inline void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "step,L_hm,L_ctx,L_hc,L_video,total,lr,grl_coef\n";
  for (const auto& r : trace)
    os << r.step << ',' << r.hm << ',' << r.ctx << ',' << r.hc << ',' << r.video << ',' << r.total << ',' << r.lr << ','
       << r.grl << '\n';
  io::write_file(path, os.str());
}

}  // namespace training

/// Serialized inference entry point for one video.
inline model::Prediction predict(const VideoRecord& video, const ModelState& st, const HumanMask& dataset_average) {
  const auto pv = prepare_video(video, st.model, dataset_average);
  return model::predict(st.params, st.model, pv, st.bank_for(video.domain));
}

namespace checkpoint {

// Layout: magic, version, config JSON (length-prefixed), tensor count, then
// per tensor: name (length-prefixed), rank, dims (u64), row-major f64 LE.
inline constexpr char kMagic[9] = "HCTCKPT\0";
inline constexpr std::uint32_t kVersion = 1;

inline std::map<std::string, Tensor> bank_tensors(const std::optional<PrototypeBank>& bank, const std::string& prefix) {
  std::map<std::string, Tensor> out;
  if (!bank) return out;
  out[prefix + ".prototypes"] = bank->prototypes;
  out[prefix + ".kept_fraction"] = Tensor::scalar(bank->kept_fraction);
  out[prefix + ".inertia"] = Tensor({bank->inertia_trace.size()}, bank->inertia_trace);
  return out;
}

inline void write(std::ostream& os, const ModelState& st) {
  io::write_magic(os, kMagic);
  io::write_le<std::uint32_t>(os, kVersion);
  const std::string cfg = json{{"model", st.model}, {"train", st.train}}.dump();
  io::write_le<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, t] : st.params.all()) tensors["param." + name] = t;
  tensors.merge(bank_tensors(st.source_bank, "bank.source"));
  tensors.merge(bank_tensors(st.target_bank, "bank.target"));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::write_le<std::uint64_t>(os, d);
    io::write_doubles(os, t.values());
  }
  if (!os) throw IoError("checkpoint write failed");
}

inline ModelState read(std::istream& is) {
  io::expect_magic(is, kMagic, "checkpoint");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto len = io::read_le<std::uint64_t>(is);
  std::string cfg(len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("truncated checkpoint config");
  ModelState st;
  const json j = json::parse(cfg);
  from_json(j.at("model"), st.model);
  from_json(j.at("train"), st.train);
  const auto count = io::read_le<std::uint32_t>(is);
  std::map<std::string, Tensor> tensors;
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto nlen = io::read_le<std::uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const auto rank = io::read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = io::read_le<std::uint64_t>(is);
    Tensor t(shape);
    io::read_doubles(is, t.data().data(), t.size());
    tensors.emplace(std::move(name), std::move(t));
  }
  for (auto& [name, t] : tensors)
    if (name.rfind("param.", 0) == 0) st.params.set(name.substr(6), t);
  for (auto [prefix, domain] : {std::pair{"bank.source", Domain::Source}, std::pair{"bank.target", Domain::Target}}) {
    const std::string p = prefix;
    if (!tensors.count(p + ".prototypes")) continue;
    PrototypeBank b;
    b.prototypes = tensors.at(p + ".prototypes");
    b.domain = domain;
    b.kept_fraction = tensors.at(p + ".kept_fraction").item();
    b.inertia_trace = tensors.at(p + ".inertia").values();
    (domain == Domain::Source ? st.source_bank : st.target_bank) = std::move(b);
  }
  return st;
}

inline void save(const std::filesystem::path& path, const ModelState& st) {
  auto os = io::open_out(path);
  write(os, st);
}

inline ModelState load(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read(is);
}

}  // namespace checkpoint
}  // namespace hct

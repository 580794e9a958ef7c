#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hct/config.hpp"
#include "hct/io.hpp"
#include "hct/training.hpp"

namespace hct {

struct EvalError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Per-clip saliency grids in [0,1].
struct AttributionMap {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<double>> clips;
  double threshold_coef = 0.5;

  std::vector<bool> binarized(std::size_t clip) const {
    const auto& g = clips.at(clip);
    const double mx = g.empty() ? 0.0 : *std::max_element(g.begin(), g.end());
    std::vector<bool> out(g.size(), false);
    if (mx <= 0.0) return out;
    for (std::size_t j = 0; j < g.size(); ++j) out[j] = g[j] >= threshold_coef * mx;
    return out;
  }
};

namespace eval {

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw EvalError("accuracy: length mismatch");
  if (predictions.empty()) throw EvalError("accuracy: empty input");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

/// Rows are true labels, columns predictions.
inline std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<int>& predictions,
                                                              const std::vector<int>& labels, std::size_t n_cls) {
  if (predictions.size() != labels.size()) throw EvalError("confusion_matrix: length mismatch");
  std::vector<std::vector<std::size_t>> m(n_cls, std::vector<std::size_t>(n_cls, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || predictions[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_cls ||
        static_cast<std::size_t>(predictions[i]) >= n_cls)
      throw EvalError("confusion_matrix: label out of range");
    ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return m;
}

/// Gradient times activation summed over channels, rectified and max-normalized per clip.
/// `score` maps clip leaves to the scalar class score.
inline AttributionMap attribution_from(const std::vector<Tensor>& grads, const std::vector<Tensor>& clips,
                                       std::size_t height, std::size_t width, double threshold_coef = 0.5) {
  AttributionMap map;
  map.height = height;
  map.width = width;
  map.threshold_coef = threshold_coef;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const Tensor& x = clips[i];
    const Tensor& g = grads[i];
    if (!g.all_finite()) throw NumericError("attribution: non-finite gradient in clip " + std::to_string(i));
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> s(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += g.at(j, c) * x.at(j, c);
      s[j] = std::max(acc, 0.0);
    }
    const double mx = *std::max_element(s.begin(), s.end());
    if (mx > 0.0)
      for (auto& v : s) v /= mx;
    map.clips.push_back(std::move(s));
  }
  return map;
}

inline AttributionMap attribution_map(const VideoRecord& video, const ModelState& st, int target_class,
                                      const HumanMask& dataset_average, double threshold_coef = 0.5) {
  const auto pv = prepare_video(video, st.model, dataset_average);
  Tape t;
  Binder b(t, st.params, [](const std::string&) { return false; });
  Stream rng = model::eval_stream();
  auto g = model::forward(b, st.model, pv, st.bank_for(video.domain), rng, {}, true);
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= st.model.n_cls)
    throw EvalError("attribution_map: class out of range");
  Var score = gather_rows(transpose(g.score_logits), {static_cast<std::size_t>(target_class)});
  t.backward(score);
  std::vector<Tensor> grads;
  for (const auto& c : g.clips) grads.push_back(t.grad(c));
  return attribution_from(grads, video.clips, video.masks.front().height, video.masks.front().width, threshold_coef);
}

struct HumanRatio {
  double ratio = 0.0;  // fraction in [0,1]
  std::size_t keyframes = 0;
  std::size_t skipped = 0;
};

/// Overlap of each keyframe's binarized map with the ground-truth human set,
/// averaged over keyframes with a nonempty denominator.
inline HumanRatio human_ratio(const AttributionMap& map, const std::vector<HumanMask>& masks, double mask_threshold,
                              RatioDenominator denom = RatioDenominator::Attribution) {
  if (map.clips.size() != masks.size()) throw EvalError("human_ratio: keyframe count mismatch");
  HumanRatio r;
  double total = 0.0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].grid.size() != map.clips[i].size()) throw EvalError("human_ratio: grid size mismatch");
    const auto bin = map.binarized(i);
    std::size_t inter = 0, area = 0, mask_area = 0, uni = 0;
    for (std::size_t j = 0; j < bin.size(); ++j) {
      const bool h = masks[i].grid[j] >= mask_threshold;
      inter += bin[j] && h;
      area += bin[j];
      mask_area += h;
      uni += bin[j] || h;
    }
    std::size_t den = denom == RatioDenominator::Attribution ? area : denom == RatioDenominator::Mask ? mask_area : uni;
    if (area == 0 || den == 0) {
      ++r.skipped;
      continue;
    }
    total += static_cast<double>(inter) / static_cast<double>(den);
    ++r.keyframes;
  }
  r.ratio = r.keyframes ? total / static_cast<double>(r.keyframes) : 0.0;
  return r;
}

struct DaviesBouldin {
  double index = 0.0;
  std::string diagnostic;
};

inline DaviesBouldin davies_bouldin(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) {
  if (features.size() != labels.size()) throw EvalError("davies_bouldin: length mismatch");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  if (groups.size() < 2) throw EvalError("davies_bouldin: need at least two classes");
  const std::size_t d = features.front().size();
  std::vector<std::vector<double>> centroids;
  std::vector<double> scatter;
  std::vector<int> keys;
  for (const auto& [k, idx] : groups) {
    std::vector<double> c(d, 0.0);
    for (auto i : idx) {
      if (features[i].size() != d) throw EvalError("davies_bouldin: ragged features");
      for (std::size_t j = 0; j < d; ++j) c[j] += features[i][j];
    }
    for (auto& v : c) v /= static_cast<double>(idx.size());
    double s = 0.0;
    for (auto i : idx) {
      double q = 0.0;
      for (std::size_t j = 0; j < d; ++j) q += (features[i][j] - c[j]) * (features[i][j] - c[j]);
      s += std::sqrt(q);
    }
    centroids.push_back(std::move(c));
    scatter.push_back(s / static_cast<double>(idx.size()));
    keys.push_back(k);
  }
  DaviesBouldin out;
  double acc = 0.0;
  for (std::size_t a = 0; a < centroids.size(); ++a) {
    double worst = 0.0;
    for (std::size_t b = 0; b < centroids.size(); ++b) {
      if (a == b) continue;
      double q = 0.0;
      for (std::size_t j = 0; j < d; ++j) q += (centroids[a][j] - centroids[b][j]) * (centroids[a][j] - centroids[b][j]);
      const double dist = std::sqrt(q);
      if (dist < 1e-12) {
        out.index = std::numeric_limits<double>::infinity();
        out.diagnostic = "classes " + std::to_string(keys[a]) + " and " + std::to_string(keys[b]) + " have coincident centroids";
        return out;
      }
      worst = std::max(worst, (scatter[a] + scatter[b]) / dist);
    }
    acc += worst;
  }
  out.index = acc / static_cast<double>(centroids.size());
  return out;
}

struct MetricsReport {
  std::string variant;
  double source_accuracy = 0.0;
  double target_accuracy = 0.0;
  std::optional<double> human_ratio;
  std::size_t human_ratio_skipped = 0;
  std::optional<double> davies_bouldin;
  std::string dbi_diagnostic;
  std::vector<std::vector<std::size_t>> target_confusion;
};

inline void to_json(json& j, const MetricsReport& m) {
  j = json{{"variant", m.variant},
           {"source_accuracy", m.source_accuracy},
           {"target_accuracy", m.target_accuracy},
           {"target_confusion", m.target_confusion}};
  if (m.human_ratio) {
    j["human_ratio"] = *m.human_ratio;
    j["human_ratio_skipped_keyframes"] = m.human_ratio_skipped;
  }
  if (m.davies_bouldin) {
    j["davies_bouldin"] = std::isfinite(*m.davies_bouldin) ? json(*m.davies_bouldin) : json("inf");
    if (!m.dbi_diagnostic.empty()) j["davies_bouldin_diagnostic"] = m.dbi_diagnostic;
  }
}

inline std::string metrics_csv(const std::vector<MetricsReport>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "variant,source_accuracy,target_accuracy,human_ratio,davies_bouldin\n";
  for (const auto& m : rows) {
    os << m.variant << ',' << m.source_accuracy << ',' << m.target_accuracy << ',';
    if (m.human_ratio) os << *m.human_ratio;
    os << ',';
    if (m.davies_bouldin) os << *m.davies_bouldin;
    os << '\n';
  }
  return os.str();
}

inline std::vector<int> labels_of(const std::vector<model::Prediction>& preds) {
  std::vector<int> out;
  for (const auto& p : preds) out.push_back(p.label);
  return out;
}

inline std::vector<int> labels_of(const Dataset& ds) {
  std::vector<int> out;
  for (const auto& v : ds.videos) out.push_back(v.label);
  return out;
}

/// Accuracies, plus optional Human Ratio and DBI on the target split.
/// `target_labels` comes from the evaluation-only loader.
inline MetricsReport evaluate(const ModelState& st, const Dataset& source, const Dataset& target,
                              const std::vector<int>& target_labels, const EvalConfig& ec) {
  if (target_labels.size() != target.videos.size()) throw EvalError("evaluate: target label count mismatch");
  MetricsReport m;
  m.variant = variant_name(st.model.variant());
  m.source_accuracy = accuracy(labels_of(training::predict_all(st, source)), labels_of(source));
  const auto tp = training::predict_all(st, target);
  m.target_accuracy = accuracy(labels_of(tp), target_labels);
  m.target_confusion = confusion_matrix(labels_of(tp), target_labels, st.model.n_cls);
  if (ec.davies_bouldin) {
    std::vector<std::vector<double>> feats;
    for (const auto& p : tp) feats.push_back(p.feature);
    auto dbi = davies_bouldin(feats, target_labels);
    m.davies_bouldin = dbi.index;
    m.dbi_diagnostic = dbi.diagnostic;
  }
  if (ec.human_ratio) {
    const HumanMask avg = dataset_average_mask(target);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < target.videos.size(); ++i) {
      const auto& v = target.videos[i];
      auto map = attribution_map(v, st, tp[i].label, avg, ec.threshold_coef);
      auto hr = human_ratio(map, v.masks, st.model.mask_threshold, ec.denominator);
      m.human_ratio_skipped += hr.skipped;
      total += hr.ratio * static_cast<double>(hr.keyframes);
      n += hr.keyframes;
    }
    m.human_ratio = n ? total / static_cast<double>(n) : 0.0;
  }
  return m;
}

/// One flat little-endian f64 file per video: M*H*W values, clip-major.
inline void dump_attribution(const std::filesystem::path& path, const AttributionMap& map) {
  auto os = io::open_out(path);
  std::vector<double> flat;
  for (const auto& c : map.clips) flat.insert(flat.end(), c.begin(), c.end());
  io::write_doubles(os, flat);
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace eval
}  // namespace hct

#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "hct/diffcore.hpp"

namespace hct {

enum class MaskSource { Provided, MaxpoolFallback, DatasetAverageFallback };

inline const char* mask_source_name(MaskSource s) {
  switch (s) {
    case MaskSource::Provided: return "provided";
    case MaskSource::MaxpoolFallback: return "maxpool-fallback";
    case MaskSource::DatasetAverageFallback: return "dataset-average-fallback";
  }
  return "?";
}

/// Per-position probability of visible humans on the feature-map grid.
struct HumanMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> grid;  // row-major, height * width
  MaskSource source = MaskSource::Provided;

  HumanMask() = default;
  HumanMask(std::size_t h, std::size_t w, std::vector<double> g, MaskSource s = MaskSource::Provided)
      : height(h), width(w), grid(std::move(g)), source(s) {
    validate();
  }

  std::size_t size() const { return grid.size(); }

  void validate() const {
    if (grid.size() != height * width)
      throw ShapeError("human mask: grid holds " + std::to_string(grid.size()) + " values, expected " +
                       std::to_string(height) + "x" + std::to_string(width));
    for (double v : grid)
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("human mask: entry " + std::to_string(v) + " outside [0,1]");
  }
};

/// Position indices of the human and context sets of one clip.
struct ClipPartition {
  std::vector<std::size_t> human;
  std::vector<std::size_t> context;
};

namespace masking {

inline void check_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("mask threshold " + std::to_string(threshold) + " outside (0,1)");
}

/// Position j is human iff mask_j >= threshold.
inline ClipPartition partition(const HumanMask& mask, double threshold) {
  check_threshold(threshold);
  ClipPartition p;
  for (std::size_t j = 0; j < mask.size(); ++j) (mask.grid[j] >= threshold ? p.human : p.context).push_back(j);
  return p;
}

/// Partition of an H x W x D feature map (or (H*W) x D matrix); checks the grids agree.
inline ClipPartition partition(const Tensor& features, const HumanMask& mask, double threshold) {
  const Shape& s = features.shape();
  std::size_t positions = 0;
  if (s.size() == 3) {
    if (s[0] != mask.height || s[1] != mask.width)
      throw ShapeError("partition: feature map " + shape_str(s) + " vs mask " + std::to_string(mask.height) + "x" +
                       std::to_string(mask.width));
    positions = s[0] * s[1];
  } else if (s.size() == 2) {
    positions = s[0];
  } else {
    throw ShapeError("partition: expected H x W x D features, got " + shape_str(s));
  }
  if (positions != mask.size())
    throw ShapeError("partition: " + std::to_string(positions) + " feature positions vs " + std::to_string(mask.size()) +
                     " mask entries");
  return partition(mask, threshold);
}

/// Every position falls in both sets (the no-masking ablation).
inline ClipPartition unmasked(std::size_t positions) {
  ClipPartition p;
  for (std::size_t j = 0; j < positions; ++j) {
    p.human.push_back(j);
    p.context.push_back(j);
  }
  return p;
}

inline bool has_human(const HumanMask& m, double threshold) {
  return std::any_of(m.grid.begin(), m.grid.end(), [&](double v) { return v >= threshold; });
}

/// Elementwise mean of masks (the training-split average of one domain).
inline HumanMask average(const std::vector<HumanMask>& masks) {
  if (masks.empty()) throw std::invalid_argument("average mask: no masks");
  HumanMask out(masks.front().height, masks.front().width, std::vector<double>(masks.front().size(), 0.0));
  for (const auto& m : masks) {
    if (m.height != out.height || m.width != out.width) throw ShapeError("average mask: spatial shapes differ");
    for (std::size_t j = 0; j < m.size(); ++j) out.grid[j] += m.grid[j];
  }
  for (auto& v : out.grid) v /= static_cast<double>(masks.size());
  return out;
}

/// Replaces a clip mask that finds no human with the video's max-pooled mask;
/// if the whole video finds none, every clip takes the dataset average.
inline std::vector<HumanMask> fallback_masks(const std::vector<HumanMask>& clip_masks, const HumanMask& dataset_average,
                                             double threshold) {
  check_threshold(threshold);
  if (clip_masks.empty()) throw std::invalid_argument("fallback_masks: empty clip list");
  const auto& first = clip_masks.front();
  for (const auto& m : clip_masks)
    if (m.height != first.height || m.width != first.width) throw ShapeError("fallback_masks: clip masks differ in shape");
  if (dataset_average.height != first.height || dataset_average.width != first.width)
    throw ShapeError("fallback_masks: dataset average mask differs in shape");

  std::vector<HumanMask> out = clip_masks;
  const bool any = std::any_of(clip_masks.begin(), clip_masks.end(), [&](const HumanMask& m) { return has_human(m, threshold); });
  if (!any) {
    HumanMask avg = dataset_average;
    avg.source = MaskSource::DatasetAverageFallback;
    // An average below threshold everywhere would still leave no human; keep its peak.
    const double peak = avg.grid.empty() ? 0.0 : *std::max_element(avg.grid.begin(), avg.grid.end());
    if (peak > 0.0 && peak < threshold)
      for (auto& v : avg.grid) v /= peak;
    for (auto& m : out) m = avg;
    return out;
  }
  HumanMask pooled = first;
  for (const auto& m : clip_masks)
    for (std::size_t j = 0; j < m.size(); ++j) pooled.grid[j] = std::max(pooled.grid[j], m.grid[j]);
  pooled.source = MaskSource::MaxpoolFallback;
  for (auto& m : out)
    if (!has_human(m, threshold)) m = pooled;
  return out;
}

}  // namespace masking
}  // namespace hct

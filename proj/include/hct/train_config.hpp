#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "hct/synthbench.hpp"

namespace hct {

enum class OptimizerKind { Sgd, Adam };

struct StageConfig {
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double lr0 = 0.01;
  double weight_decay = 5e-4;
  double momentum = 0.9;  // SGD only
  std::size_t epochs = 30;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct TrainConfig {
  double lambda_hm = 0.5;
  double lambda_ctx = 0.5;
  double lambda_hc = 0.25;
  double lambda_H = 0.25;
  StageConfig stage1{OptimizerKind::Sgd, 0.01, 5e-4, 0.9, 30};
  StageConfig stage2{OptimizerKind::Adam, 0.001, 0.0, 0.0, 30};
  std::size_t batch_pairs = 16;
  double grl_gamma = 10.0;
  double lr_alpha = 10.0;
  double lr_beta = 0.75;
  std::uint64_t seed = 1;
  std::size_t context_classifier_epochs = 5;
  std::size_t prototype_refresh_epochs = 0;  // 0: banks are built once before stage 2
  bool stage2_warm_start = true;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    for (double l : {lambda_hm, lambda_ctx, lambda_hc, lambda_H})
      if (!(l >= 0.0)) throw ConfigError("train: loss weights must be nonnegative");
    for (const auto* s : {&stage1, &stage2}) {
      if (!(s->lr0 > 0.0)) throw ConfigError("train: lr0 must be positive");
      if (!(s->weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be nonnegative");
      if (!(s->momentum >= 0.0 && s->momentum < 1.0)) throw ConfigError("train: momentum outside [0,1)");
    }
    if (batch_pairs == 0) throw ConfigError("train: batch_pairs must be positive");
    if (!(grl_gamma >= 0.0 && lr_alpha >= 0.0 && lr_beta >= 0.0)) throw ConfigError("train: schedule constants must be nonnegative");
  }
};

}  // namespace hct

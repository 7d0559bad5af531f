#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmc/cam.hpp"
#include "mmc/nets.hpp"
#include "mmc/rng.hpp"
#include "mmc/synthbench.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

// N groups of S consecutive same-class images.
struct SetBatch {
  Tensor images;            // (N*S)CHW
  std::vector<int> labels;  // group-constant
  int n_groups = 0;
  int set_size = 0;

  void validate() const;
};

struct StageTwoConfig {
  double lambda1 = 0.0;  // common region weight
  double lambda2 = 0.0;  // full region weight
  double lr2 = -1.0;     // < 0 means reuse the stage one rate
};

enum class MaskVariant { input, feature };

struct TrainConfig {
  int epochs = 10;
  int batches_per_epoch = 0;  // 0: floor(train images / (n*s)), at least 1
  double lr1 = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  int set_size = 5;
  int n_groups = 2;
  bool stage2 = true;
  StageTwoConfig stage2_cfg;
  MaskVariant mask_variant = MaskVariant::input;
  CamConfig cam;
  // Stage-one-only ablation: each image scaled by an independent factor
  // from [lo, hi].
  std::optional<std::pair<double, double>> intensity_aug;

  void validate() const;
};

SetBatch sample_set_batch(const Dataset& ds, const std::string& split, int n_groups, int set_size,
                          Rng& rng);

// Mean squared distance over all ordered feature pairs in one set,
// normalized by S*(S-1).
Tensor crr(Tape& tape, const std::vector<Tensor>& features);

// Mean squared distance between each masked feature and its original
// counterpart. The originals are treated as constants.
Tensor frr(Tape& tape, const std::vector<std::pair<Tensor, Tensor>>& pairs);

// One classification SGD step over the whole batch; returns the loss.
double stage1_step(Model& model, const SetBatch& batch, SgdState& state, double lr1,
                   double momentum);

struct StageTwoStats {
  double crr_value = 0.0;
  double frr_value = 0.0;
};

// One regularization step: per-image maps from the current head, masked
// features against frozen originals, CRR per group + FRR over the batch.
// Only head.w moves; every other parameter is untouched.
StageTwoStats stage2_step(Model& model, const SetBatch& batch, const StageTwoConfig& cfg,
                          MaskVariant variant, const CamConfig& cam_cfg, SgdState& state,
                          double momentum);

struct TrainLogRow {
  int epoch = 0;
  int batch = 0;
  double ce = 0.0;
  double crr = 0.0;
  double frr = 0.0;
  long wall_ms = 0;
};

struct TrainResult {
  Model model;
  std::vector<TrainLogRow> log;
};

TrainResult train(const TrainConfig& cfg, const BackboneSpec& spec, const Dataset& ds,
                  const std::string& split = "train");

std::string train_log_csv(const std::vector<TrainLogRow>& log);

}  // namespace mmc

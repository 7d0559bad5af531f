#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmc/cam.hpp"
#include "mmc/config.hpp"
#include "mmc/minmax.hpp"
#include "mmc/nets.hpp"
#include "mmc/synthbench.hpp"
#include "mmc/wsoleval.hpp"

namespace mmc {

// Config -> domain structs. Each converter validates its slice.
BackboneSpec backbone_from_config(const RunConfig& cfg);
TrainConfig train_from_config(const RunConfig& cfg);
SynthConfig synth_from_config(const RunConfig& cfg);
BoxAccOptions box_options_from_config(const RunConfig& cfg);

// Ground-truth-class maps for every image of a split, item order. When
// quantize is set, values are snapped onto the 16-bit export grid, so
// in-process results match results computed from dumped PGM files exactly.
struct SplitMaps {
  std::vector<int> indices;  // dataset item ids, aligned with maps
  std::vector<LocalizationMap> maps;
};
SplitMaps compute_split_maps(const Model& model, const Dataset& ds, const std::string& split,
                             const CamConfig& cam_cfg, bool quantize);

struct EvalReport {
  BoxAccResult boxes;
  double pxap_value = 0.0;
  double topk_value = -1.0;  // -1 when not evaluated
  int topk_k = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  std::string to_json() const;
  std::string curves_csv() const;
};

EvalReport evaluate_maps(const SplitMaps& sm, const Dataset& ds, const BoxAccOptions& opt,
                         bool pxap_per_image);

struct TopkOptions {
  int k = 1;
  ThresholdGrid grid;
  int connectivity = 8;
  bool largest_only = false;
  bool use_predicted_class = false;
  bool quantize = true;
  CamConfig cam;
  std::string split = "test";
};

// Fraction of split images where the classifier ranks the true class in its
// top k and the localization box (at the dataset-optimal tau for IoU 0.5)
// hits the ground truth.
double topk_loc(const Model& loc_model, const Model& classifier, const Dataset& ds,
                const TopkOptions& opt);

// Command bodies shared by the CLI and the acceptance harness. Each writes
// its artifacts under cfg "out" and returns a summary line.
std::string run_gen(const RunConfig& cfg);
std::string run_train(const RunConfig& cfg);
std::string run_eval(const RunConfig& cfg);
std::string run_dump_cam(const RunConfig& cfg);
std::string run_ablate(const RunConfig& cfg);
std::string run_analyze(const RunConfig& cfg);
std::string run_check_grad();

}  // namespace mmc

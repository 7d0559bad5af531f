#pragma once

#include <vector>

#include "mmc/boxes.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

// Uniform score thresholds tau_t = t / size for t = 0..size-1.
struct ThresholdGrid {
  int size = 100;
  double tau(int t) const { return static_cast<double>(t) / size; }
};

// Connected components of {map >= tau} as tight boxes, row-major discovery
// order. connectivity is 4 or 8.
std::vector<BBox> extract_boxes(const Tensor& map, double tau, int connectivity = 8);

struct BoxAccOptions {
  std::vector<double> deltas = {0.3, 0.5, 0.7};
  ThresholdGrid grid;
  int connectivity = 8;
  bool largest_only = false;  // keep only the biggest component per threshold
};

struct BoxAccResult {
  std::vector<double> deltas;
  std::vector<std::vector<double>> curves;  // [delta][tau]: fraction localized
  std::vector<double> max_acc;              // per delta: best over taus
  std::vector<double> best_tau;             // per delta: first argmax
  double v2 = 0.0;                          // mean of max_acc
};

// Threshold-free box localization accuracy. One map per image; each image
// may have several ground-truth boxes, a hit is IoU >= delta against any of
// them for at least one predicted box.
BoxAccResult max_box_acc(const std::vector<Tensor>& maps,
                         const std::vector<std::vector<BBox>>& gt_boxes,
                         const BoxAccOptions& opt = {});

// Pixel average precision over the threshold grid. Masks are binary rank-2
// tensors matching the maps. Pooled across images by default; per_image
// averages each image's own AP instead.
double pxap(const std::vector<Tensor>& maps, const std::vector<Tensor>& gt_masks,
            const ThresholdGrid& grid = {}, bool per_image = false);

// Fraction of the predicted box that lies outside the ground truth.
double bg_proportion(const BBox& pred, const BBox& gt);
double bg_proportion(const BBox& pred, const Tensor& gt_mask);

struct Dispersion {
  double mean_std = 0.0;    // class-conditional spread, averaged over classes
  double std_of_stds = 0.0; // spread of those per-class spreads
  std::vector<double> per_class;
};

// Spread of pooled feature vectors around their class centroids.
Dispersion feature_dispersion(const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, int num_classes);

}  // namespace mmc

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc {

// Class activation map over an image, values in [0, 1].
struct LocalizationMap {
  std::string image_id;
  int class_id = -1;
  Tensor values;  // rank 2
};

struct CamConfig {
  // Default pipeline is normalize at feature resolution, then upsample.
  bool resize_first = false;
  // Treat the normalization extrema as constants in the backward pass.
  bool detach_norm = false;
  double eps = 1e-12;
};

// Weighted channel sum of one image's feature maps: out[h,w] =
// sum_k head_w[class_id,k] * features[k,h,w]. Differentiable in both the
// features and the head row.
Tensor compute_cam_raw(Tape& tape, const Tensor& features_chw, const Tensor& head_w,
                       int class_id);

// Raw map -> normalized [0,1] map at out_h x out_w.
Tensor finalize_map(Tape& tape, const Tensor& raw, int out_h, int out_w,
                    const CamConfig& cfg = {});

// Pixel-wise product of each image with its map. Maps must match the image
// resolution; images NCHW, one map per image.
Tensor mask_image(Tape& tape, const Tensor& images, const std::vector<LocalizationMap>& maps);

// Masking at feature resolution: maps are downsampled onto the feature grid,
// multiplied in, and the result pooled to one vector per image (NK).
Tensor mask_features(Tape& tape, const Tensor& features, const std::vector<LocalizationMap>& maps);

// Map values quantized onto the 16-bit export grid (round(v * 65535) / 65535
// after clamping to [0,1]).
std::vector<std::uint16_t> quantize_map(const Tensor& map);
Tensor dequantize_map(const std::vector<std::uint16_t>& samples, int h, int w);

// Writes <image_id>_<class_id>.pgm under dir; returns the path.
std::filesystem::path dump_map(const std::filesystem::path& dir, const LocalizationMap& map);
LocalizationMap load_map(const std::filesystem::path& file);

}  // namespace mmc

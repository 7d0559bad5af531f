#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmc/optim.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

struct ConvLayerSpec {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
};

// Stack of conv+relu blocks ending in a spatial feature map. stride_mod
// forces stride 1 in the last downsampling block, doubling the map extent.
struct BackboneSpec {
  std::vector<ConvLayerSpec> layers;
  bool stride_mod = false;

  void validate() const;
  int in_channels() const { return layers.empty() ? 0 : layers.front().in_ch; }
  int feature_channels() const { return layers.empty() ? 0 : layers.back().out_ch; }
  int effective_stride(std::size_t i) const;
  // Spatial extent of the feature map for a square input (0 when a kernel
  // no longer fits).
  int out_extent(int in) const;
  int min_input() const;

  std::string descriptor() const;
  static BackboneSpec from_descriptor(const std::string& text);
  // 64x64 RGB desk setup: channels 16,32,64,64 with strides 2,2,2,1.
  static BackboneSpec desk_default();
};

// Backbone parameters plus a linear classification head over pooled features.
// Parameter names: backbone.conv<i>.w / .b, head.w, head.b.
struct Model {
  BackboneSpec spec;
  int num_classes = 0;
  ParamSet params;

  Tensor head_w() const { return params.at("head.w"); }
  Tensor head_b() const { return params.at("head.b"); }
};

Model build_model(const BackboneSpec& spec, int num_classes, std::uint64_t seed);

// images NCHW -> feature maps NKhw.
Tensor forward_features(Tape& tape, const Model& model, const Tensor& images);
// pooled features NK -> logits NC.
Tensor classify_features(Tape& tape, const Model& model, const Tensor& pooled);
// images NCHW -> logits NC.
Tensor classify(Tape& tape, const Model& model, const Tensor& images);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace mmc

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmc/boxes.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

// Procedural shapes-on-textured-background benchmark. Each class is a
// (shape, base color) pair; bg_mode common reuses one background texture for
// the whole class, which makes the background itself class-predictive.
// marker_mode stamps a small class-unique patch inside the object.
struct SynthConfig {
  int num_classes = 8;
  int train_per_class = 25;
  int val_per_class = 0;
  int test_per_class = 13;
  int image_size = 64;
  enum class BgMode { varied, common } bg_mode = BgMode::varied;
  bool marker_mode = false;
  double scale_lo = 0.35;
  double scale_hi = 0.60;
  std::uint64_t seed = 1;

  void validate() const;
  std::string text() const;
};

struct SampleRecord {
  std::string image_id;
  std::string split;
  int class_id = -1;
  BBox gt_box;
  std::string image_path;  // relative to the dataset dir
  std::string mask_path;
};

std::vector<SampleRecord> generate_dataset(const SynthConfig& cfg,
                                           const std::filesystem::path& out_dir);

class Dataset {
 public:
  struct Item {
    std::string image_id;
    std::string split;
    int class_id = -1;
    BBox gt_box;
    Tensor image;  // CHW in [0,1]
    Tensor mask;   // HW, entries 0/1
  };

  int num_classes() const { return num_classes_; }
  int height() const { return height_; }
  int width() const { return width_; }
  const std::vector<Item>& items() const { return items_; }
  const Item& item(int i) const { return items_[static_cast<std::size_t>(i)]; }

  // Indices of a split, manifest order. Unknown split -> empty.
  std::vector<int> split_indices(const std::string& split) const;
  // Per-class index lists within a split.
  std::vector<std::vector<int>> class_indices(const std::string& split) const;

  friend Dataset load_dataset(const std::filesystem::path& dir);
  friend Dataset dataset_from_items(std::vector<Item> items, int num_classes);

 private:
  std::vector<Item> items_;
  int num_classes_ = 0;
  int height_ = 0;
  int width_ = 0;
};

Dataset load_dataset(const std::filesystem::path& dir);
// In-memory assembly, mostly for tests.
Dataset dataset_from_items(std::vector<Dataset::Item> items, int num_classes);

// Stacks the given items into one NCHW batch.
Tensor gather_images(const Dataset& ds, const std::vector<int>& indices);

}  // namespace mmc

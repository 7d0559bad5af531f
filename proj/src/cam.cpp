#include "mmc/cam.hpp"

#include <cmath>

#include "mmc/errors.hpp"
#include "mmc/io.hpp"
#include "mmc/ops.hpp"

namespace mmc {

Tensor compute_cam_raw(Tape& tape, const Tensor& features_chw, const Tensor& head_w,
                       int class_id) {
  if (features_chw.rank() != 3)
    throw ShapeError("compute_cam_raw wants KHW features, got " +
                     shape_str(features_chw.shape()));
  if (head_w.rank() != 2)
    throw ShapeError("compute_cam_raw wants a CK weight matrix, got " +
                     shape_str(head_w.shape()));
  int k = features_chw.dim(0), h = features_chw.dim(1), w = features_chw.dim(2);
  if (head_w.dim(1) != k)
    throw ShapeError("head weight covers " + std::to_string(head_w.dim(1)) +
                     " channels, features have " + std::to_string(k));
  if (class_id < 0 || class_id >= head_w.dim(0))
    throw ValueError("class id " + std::to_string(class_id) + " out of range [0, " +
                     std::to_string(head_w.dim(0)) + ")");

  Tensor out({h, w});
  auto forward = [=](const Tensor& f, const Tensor& hw, Tensor& y) {
    const auto& fv = f.values();
    const auto& wv = hw.values();
    auto& yv = y.values();
    std::fill(yv.begin(), yv.end(), 0.0);
    int plane = y.size();
    for (int c = 0; c < f.dim(0); ++c) {
      double wc = wv[class_id * hw.dim(1) + c];
      const double* src = fv.data() + c * plane;
      for (int i = 0; i < plane; ++i) yv[i] += wc * src[i];
    }
  };
  forward(features_chw, head_w, out);

  if (!features_chw.requires_grad() && !head_w.requires_grad()) return out;
  out.set_requires_grad(true);
  Tensor f = features_chw, hw = head_w, y = out;
  tape.record(
      "compute_cam_raw", {f, hw}, out,
      [=]() mutable { forward(f, hw, y); },
      [=]() {
        const auto& g = y.grad();
        int plane = static_cast<int>(y.size());
        if (f.requires_grad()) {
          auto& fg = f.grad();
          const auto& wv = hw.values();
          for (int c = 0; c < f.dim(0); ++c) {
            double wc = wv[class_id * hw.dim(1) + c];
            double* dst = fg.data() + c * plane;
            for (int i = 0; i < plane; ++i) dst[i] += wc * g[i];
          }
        }
        if (hw.requires_grad()) {
          auto& wg = hw.grad();
          const auto& fv = f.values();
          for (int c = 0; c < f.dim(0); ++c) {
            const double* src = fv.data() + c * plane;
            double acc = 0.0;
            for (int i = 0; i < plane; ++i) acc += src[i] * g[i];
            wg[class_id * hw.dim(1) + c] += acc;
          }
        }
      });
  return out;
}

Tensor finalize_map(Tape& tape, const Tensor& raw, int out_h, int out_w, const CamConfig& cfg) {
  if (raw.rank() != 2)
    throw ShapeError("finalize_map wants a rank-2 map, got " + shape_str(raw.shape()));
  if (cfg.resize_first) {
    Tensor up = bilinear_resize(tape, raw, out_h, out_w);
    return minmax_normalize(tape, up, cfg.eps, cfg.detach_norm);
  }
  Tensor norm = minmax_normalize(tape, raw, cfg.eps, cfg.detach_norm);
  return bilinear_resize(tape, norm, out_h, out_w);
}

static void check_maps(const Tensor& x, const std::vector<LocalizationMap>& maps, int h, int w,
                       const char* who) {
  if (x.rank() != 4) throw ShapeError(std::string(who) + " wants NCHW input");
  if (static_cast<int>(maps.size()) != x.dim(0))
    throw ShapeError(std::string(who) + ": " + std::to_string(maps.size()) + " maps for " +
                     std::to_string(x.dim(0)) + " images");
  for (const auto& m : maps) {
    if (m.values.rank() != 2 || m.values.dim(0) != h || m.values.dim(1) != w)
      throw ShapeError(std::string(who) + ": map " + m.image_id + " is " +
                       shape_str(m.values.shape()) + ", want " + std::to_string(h) + "x" +
                       std::to_string(w));
  }
}

Tensor mask_image(Tape& tape, const Tensor& images, const std::vector<LocalizationMap>& maps) {
  check_maps(images, maps, images.dim(2), images.dim(3), "mask_image");
  std::vector<Tensor> planes;
  planes.reserve(maps.size());
  for (const auto& m : maps) planes.push_back(m.values);
  Tensor stacked = stack_maps(tape, planes);
  return mul_broadcast(tape, images, stacked);
}

Tensor mask_features(Tape& tape, const Tensor& features,
                     const std::vector<LocalizationMap>& maps) {
  if (features.rank() != 4) throw ShapeError("mask_features wants NKhw input");
  if (static_cast<int>(maps.size()) != features.dim(0))
    throw ShapeError("mask_features: " + std::to_string(maps.size()) + " maps for " +
                     std::to_string(features.dim(0)) + " images");
  int h = features.dim(2), w = features.dim(3);
  std::vector<Tensor> planes;
  planes.reserve(maps.size());
  for (const auto& m : maps) {
    if (m.values.rank() != 2)
      throw ShapeError("mask_features: map " + m.image_id + " is not rank 2");
    planes.push_back(bilinear_resize(tape, m.values, h, w));
  }
  Tensor stacked = stack_maps(tape, planes);
  return gap(tape, mul_broadcast(tape, features, stacked));
}

std::vector<std::uint16_t> quantize_map(const Tensor& map) {
  std::vector<std::uint16_t> out(map.size());
  const auto& v = map.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double c = std::min(1.0, std::max(0.0, v[i]));
    out[i] = static_cast<std::uint16_t>(std::lround(c * 65535.0));
  }
  return out;
}

Tensor dequantize_map(const std::vector<std::uint16_t>& samples, int h, int w) {
  if (samples.size() != static_cast<std::size_t>(h) * w)
    throw ValueError("dequantize_map sample count mismatch");
  Tensor t({h, w});
  auto& v = t.values();
  for (std::size_t i = 0; i < samples.size(); ++i) v[i] = samples[i] / 65535.0;
  return t;
}

std::filesystem::path dump_map(const std::filesystem::path& dir, const LocalizationMap& map) {
  if (map.values.rank() != 2) throw ValueError("dump_map wants a rank-2 map");
  if (map.image_id.empty() || map.image_id.find('_') != std::string::npos)
    throw ValueError("dump_map: image id must be non-empty and underscore-free, got '" +
                     map.image_id + "'");
  auto path = dir / (map.image_id + "_" + std::to_string(map.class_id) + ".pgm");
  io::write_pgm16(path, map.values.dim(1), map.values.dim(0), quantize_map(map.values));
  return path;
}

LocalizationMap load_map(const std::filesystem::path& file) {
  std::string stem = file.stem().string();
  auto us = stem.rfind('_');
  if (us == std::string::npos)
    throw IoError(file.string() + ": map file name must be <image>_<class>.pgm");
  LocalizationMap map;
  map.image_id = stem.substr(0, us);
  try {
    map.class_id = std::stoi(stem.substr(us + 1));
  } catch (const std::exception&) {
    throw IoError(file.string() + ": bad class id in map file name");
  }
  int w = 0, h = 0;
  auto samples = io::read_pgm16(file, w, h);
  map.values = dequantize_map(samples, h, w);
  return map;
}

}  // namespace mmc

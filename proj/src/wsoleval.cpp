#include "mmc/wsoleval.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "mmc/errors.hpp"

namespace mmc {

std::vector<BBox> extract_boxes(const Tensor& map, double tau, int connectivity) {
  if (map.rank() != 2)
    throw ShapeError("extract_boxes wants a rank-2 map, got " + shape_str(map.shape()));
  if (connectivity != 4 && connectivity != 8)
    throw ValueError("connectivity must be 4 or 8, got " + std::to_string(connectivity));
  if (tau < 0.0 || tau > 1.0) throw ValueError("tau must lie in [0,1]");
  int h = map.dim(0), w = map.dim(1);
  const auto& v = map.values();
  std::vector<char> on(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) on[i] = v[i] >= tau;

  std::vector<char> seen(v.size(), 0);
  std::vector<BBox> boxes;
  std::deque<int> queue;
  for (int start = 0; start < h * w; ++start) {
    if (!on[start] || seen[start]) continue;
    BBox box{w, h, 0, 0};
    seen[start] = 1;
    queue.push_back(start);
    while (!queue.empty()) {
      int p = queue.front();
      queue.pop_front();
      int y = p / w, x = p % w;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (connectivity == 4 && dx != 0 && dy != 0) continue;
          int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          int q = ny * w + nx;
          if (on[q] && !seen[q]) {
            seen[q] = 1;
            queue.push_back(q);
          }
        }
      }
    }
    boxes.push_back(box);
  }
  return boxes;
}

BoxAccResult max_box_acc(const std::vector<Tensor>& maps,
                         const std::vector<std::vector<BBox>>& gt_boxes,
                         const BoxAccOptions& opt) {
  if (maps.size() != gt_boxes.size())
    throw ValueError("max_box_acc: " + std::to_string(maps.size()) + " maps but " +
                     std::to_string(gt_boxes.size()) + " ground-truth lists");
  if (maps.empty()) throw ValueError("max_box_acc: no images");
  if (opt.grid.size <= 0) throw ValueError("threshold grid must be non-empty");
  if (opt.deltas.empty()) throw ValueError("max_box_acc: no deltas");
  for (double d : opt.deltas)
    if (!(d > 0.0 && d <= 1.0)) throw ValueError("delta must lie in (0,1]");
  for (const auto& gts : gt_boxes)
    if (gts.empty()) throw ValueError("max_box_acc: image without ground-truth boxes");

  int t_count = opt.grid.size;
  // best_iou[i][t]: best pairing of any predicted box at tau_t with any GT box.
  std::vector<std::vector<double>> best_iou(maps.size(), std::vector<double>(t_count, 0.0));
  for (std::size_t i = 0; i < maps.size(); ++i) {
    for (int t = 0; t < t_count; ++t) {
      auto boxes = extract_boxes(maps[i], opt.grid.tau(t), opt.connectivity);
      if (opt.largest_only && boxes.size() > 1) {
        auto it = std::max_element(boxes.begin(), boxes.end(),
                                   [](const BBox& a, const BBox& b) { return a.area() < b.area(); });
        boxes = {*it};
      }
      double best = 0.0;
      for (const auto& pb : boxes)
        for (const auto& gb : gt_boxes[i]) best = std::max(best, iou(pb, gb));
      best_iou[i][t] = best;
    }
  }

  BoxAccResult res;
  res.deltas = opt.deltas;
  res.curves.assign(opt.deltas.size(), std::vector<double>(t_count, 0.0));
  for (std::size_t d = 0; d < opt.deltas.size(); ++d) {
    for (int t = 0; t < t_count; ++t) {
      int correct = 0;
      for (std::size_t i = 0; i < maps.size(); ++i)
        if (best_iou[i][t] >= opt.deltas[d]) ++correct;
      res.curves[d][t] = static_cast<double>(correct) / static_cast<double>(maps.size());
    }
    int arg = 0;
    for (int t = 1; t < t_count; ++t)
      if (res.curves[d][t] > res.curves[d][arg]) arg = t;
    res.max_acc.push_back(res.curves[d][arg]);
    res.best_tau.push_back(opt.grid.tau(arg));
  }
  double sum = 0.0;
  for (double a : res.max_acc) sum += a;
  res.v2 = sum / static_cast<double>(res.max_acc.size());
  return res;
}

double pxap(const std::vector<Tensor>& maps, const std::vector<Tensor>& gt_masks,
            const ThresholdGrid& grid, bool per_image) {
  if (maps.size() != gt_masks.size())
    throw ValueError("pxap: " + std::to_string(maps.size()) + " maps but " +
                     std::to_string(gt_masks.size()) + " masks");
  if (maps.empty()) throw ValueError("pxap: no images");
  if (grid.size <= 0) throw ValueError("threshold grid must be non-empty");
  for (std::size_t i = 0; i < maps.size(); ++i)
    if (maps[i].shape() != gt_masks[i].shape())
      throw ShapeError("pxap: map " + shape_str(maps[i].shape()) + " vs mask " +
                       shape_str(gt_masks[i].shape()));

  auto curve_ap = [&](const std::vector<long long>& tp, const std::vector<long long>& pp,
                      long long pos) {
    if (pos == 0) throw ValueError("pxap: ground truth has no positive pixels");
    double ap = 0.0;
    for (int t = 0; t < grid.size; ++t) {
      double prec = pp[t] > 0 ? static_cast<double>(tp[t]) / static_cast<double>(pp[t]) : 0.0;
      double rec = static_cast<double>(tp[t]) / static_cast<double>(pos);
      double rec_next =
          t + 1 < grid.size ? static_cast<double>(tp[t + 1]) / static_cast<double>(pos) : 0.0;
      ap += prec * (rec - rec_next);
    }
    return ap;
  };

  auto accumulate = [&](std::size_t i, std::vector<long long>& tp, std::vector<long long>& pp,
                        long long& pos) {
    const auto& hv = maps[i].values();
    const auto& mv = gt_masks[i].values();
    for (std::size_t p = 0; p < hv.size(); ++p) {
      bool is_pos = mv[p] != 0.0;
      if (is_pos) ++pos;
      for (int t = 0; t < grid.size; ++t) {
        if (hv[p] >= grid.tau(t)) {
          ++pp[t];
          if (is_pos) ++tp[t];
        } else {
          break;  // grid is increasing
        }
      }
    }
  };

  if (per_image) {
    double total = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      std::vector<long long> tp(grid.size, 0), pp(grid.size, 0);
      long long pos = 0;
      accumulate(i, tp, pp, pos);
      total += curve_ap(tp, pp, pos);
    }
    return total / static_cast<double>(maps.size());
  }
  std::vector<long long> tp(grid.size, 0), pp(grid.size, 0);
  long long pos = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) accumulate(i, tp, pp, pos);
  return curve_ap(tp, pp, pos);
}

double bg_proportion(const BBox& pred, const BBox& gt) {
  if (pred.empty()) return 0.0;
  int ix0 = std::max(pred.x0, gt.x0);
  int iy0 = std::max(pred.y0, gt.y0);
  int ix1 = std::min(pred.x1, gt.x1);
  int iy1 = std::min(pred.y1, gt.y1);
  long long inter = 0;
  if (ix1 > ix0 && iy1 > iy0) inter = static_cast<long long>(ix1 - ix0) * (iy1 - iy0);
  return static_cast<double>(pred.area() - inter) / static_cast<double>(pred.area());
}

double bg_proportion(const BBox& pred, const Tensor& gt_mask) {
  if (gt_mask.rank() != 2)
    throw ShapeError("bg_proportion wants a rank-2 mask, got " + shape_str(gt_mask.shape()));
  if (pred.empty()) return 0.0;
  int h = gt_mask.dim(0), w = gt_mask.dim(1);
  const auto& mv = gt_mask.values();
  long long outside = 0;
  for (int y = pred.y0; y < pred.y1; ++y) {
    for (int x = pred.x0; x < pred.x1; ++x) {
      bool in_mask = y >= 0 && y < h && x >= 0 && x < w && mv[y * w + x] != 0.0;
      if (!in_mask) ++outside;
    }
  }
  return static_cast<double>(outside) / static_cast<double>(pred.area());
}

Dispersion feature_dispersion(const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, int num_classes) {
  if (features.size() != labels.size())
    throw ValueError("feature_dispersion: feature/label count mismatch");
  if (num_classes <= 0) throw ValueError("feature_dispersion: need at least one class");
  std::size_t dim = features.empty() ? 0 : features.front().size();
  for (const auto& f : features)
    if (f.size() != dim) throw ShapeError("feature_dispersion: inconsistent feature dimension");

  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValueError("feature_dispersion: label " + std::to_string(labels[i]) + " out of range");
    by_class[labels[i]].push_back(i);
  }

  Dispersion out;
  for (int c = 0; c < num_classes; ++c) {
    const auto& idx = by_class[c];
    if (idx.size() < 2)
      throw ValueError("feature_dispersion: class " + std::to_string(c) + " has " +
                       std::to_string(idx.size()) + " samples, need at least 2");
    std::vector<double> centroid(dim, 0.0);
    for (std::size_t i : idx)
      for (std::size_t k = 0; k < dim; ++k) centroid[k] += features[i][k];
    for (double& v : centroid) v /= static_cast<double>(idx.size());
    std::vector<double> dist;
    dist.reserve(idx.size());
    for (std::size_t i : idx) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        double d = features[i][k] - centroid[k];
        s += d * d;
      }
      dist.push_back(std::sqrt(s));
    }
    double mean = 0.0;
    for (double d : dist) mean += d;
    mean /= static_cast<double>(dist.size());
    double var = 0.0;
    for (double d : dist) var += (d - mean) * (d - mean);
    var /= static_cast<double>(dist.size());
    out.per_class.push_back(std::sqrt(var));
  }

  double mean = 0.0;
  for (double s : out.per_class) mean += s;
  mean /= static_cast<double>(out.per_class.size());
  double var = 0.0;
  for (double s : out.per_class) var += (s - mean) * (s - mean);
  var /= static_cast<double>(out.per_class.size());
  out.mean_std = mean;
  out.std_of_stds = std::sqrt(var);
  return out;
}

}  // namespace mmc

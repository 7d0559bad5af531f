#pragma once

#include <algorithm>
#include <string>

namespace mmc {

// Axis-aligned pixel box, half-open: x in [x0, x1), y in [y0, y1).
struct BBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long long area() const { return static_cast<long long>(width()) * height(); }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const BBox& o) const {
    return x0 == o.x0 && y0 == o.y0 && x1 == o.x1 && y1 == o.y1;
  }
};

inline std::string box_str(const BBox& b) {
  return "[" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," + std::to_string(b.x1) +
         "," + std::to_string(b.y1) + ")";
}

inline double iou(const BBox& a, const BBox& b) {
  if (a.empty() || b.empty()) return 0.0;
  int ix0 = std::max(a.x0, b.x0);
  int iy0 = std::max(a.y0, b.y0);
  int ix1 = std::min(a.x1, b.x1);
  int iy1 = std::min(a.y1, b.y1);
  long long inter = 0;
  if (ix1 > ix0 && iy1 > iy0) inter = static_cast<long long>(ix1 - ix0) * (iy1 - iy0);
  long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace mmc

#include "mmc/synthbench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <sstream>

#include "mmc/errors.hpp"
#include "mmc/io.hpp"
#include "mmc/rng.hpp"

namespace mmc {

namespace {

constexpr double kPi = 3.14159265358979323846;

using Color = std::array<double, 3>;

// Object base colors, saturated so shapes stand out on any background.
constexpr Color kObjectColors[4] = {
    {0.86, 0.16, 0.16}, {0.18, 0.35, 0.86}, {0.16, 0.67, 0.27}, {0.90, 0.78, 0.16}};

// One vivid marker color per class.
constexpr Color kMarkerColors[16] = {
    {0.98, 0.98, 0.98}, {0.03, 0.03, 0.03}, {0.10, 0.90, 0.95}, {0.92, 0.12, 0.90},
    {0.97, 0.55, 0.08}, {0.55, 0.15, 0.90}, {0.62, 0.95, 0.10}, {0.98, 0.60, 0.72},
    {0.05, 0.60, 0.55}, {0.55, 0.32, 0.12}, {0.85, 0.95, 0.45}, {0.25, 0.05, 0.45},
    {0.95, 0.30, 0.40}, {0.15, 0.75, 0.95}, {0.75, 0.75, 0.15}, {0.40, 0.95, 0.70}};

struct ShapeGeom {
  int kind = 0;  // 0 disc, 1 rectangle, 2 triangle, 3 annulus
  double cx = 0, cy = 0;
  double radius = 0;  // bounding radius
  double inner = 0;   // annulus
  double hw = 0, hh = 0, rot = 0;                       // rectangle
  double ax = 0, ay = 0, bx = 0, by = 0, gx = 0, gy = 0;  // triangle

  bool inside(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    switch (kind) {
      case 0:
        return dx * dx + dy * dy <= radius * radius;
      case 1: {
        double u = dx * std::cos(-rot) - dy * std::sin(-rot);
        double v = dx * std::sin(-rot) + dy * std::cos(-rot);
        return std::abs(u) <= hw && std::abs(v) <= hh;
      }
      case 2: {
        auto side = [](double px, double py, double qx, double qy, double rx, double ry) {
          return (qx - px) * (ry - py) - (qy - py) * (rx - px);
        };
        double d1 = side(ax, ay, bx, by, x, y);
        double d2 = side(bx, by, gx, gy, x, y);
        double d3 = side(gx, gy, ax, ay, x, y);
        bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
        bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
        return !(has_neg && has_pos);
      }
      default: {
        double d2 = dx * dx + dy * dy;
        return d2 >= inner * inner && d2 <= radius * radius;
      }
    }
  }

  // A point and radius such that the disc around it stays inside the shape.
  void interior_disc(double& px, double& py, double& pr, double annulus_angle) const {
    switch (kind) {
      case 0:
        px = cx, py = cy, pr = radius;
        return;
      case 1:
        px = cx, py = cy, pr = std::min(hw, hh);
        return;
      case 2: {
        double la = std::hypot(gx - bx, gy - by);
        double lb = std::hypot(gx - ax, gy - ay);
        double lc = std::hypot(bx - ax, by - ay);
        double per = la + lb + lc;
        px = (la * ax + lb * bx + lc * gx) / per;
        py = (la * ay + lb * by + lc * gy) / per;
        double area2 = std::abs((bx - ax) * (gy - ay) - (gx - ax) * (by - ay));
        pr = area2 / per;
        return;
      }
      default: {
        double rho = (radius + inner) / 2.0;
        px = cx + rho * std::cos(annulus_angle);
        py = cy + rho * std::sin(annulus_angle);
        pr = (radius - inner) / 2.0;
        return;
      }
    }
  }
};

ShapeGeom sample_shape(Rng& rng, const SynthConfig& cfg, int class_id) {
  ShapeGeom g;
  g.kind = class_id % 4;
  double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  g.radius = scale * cfg.image_size / 2.0;
  double margin = 2.0 + g.radius;
  g.cx = rng.uniform(margin, cfg.image_size - margin);
  g.cy = rng.uniform(margin, cfg.image_size - margin);
  if (g.kind == 1) {
    g.hw = g.radius * rng.uniform(0.72, 0.95);
    g.hh = g.radius * rng.uniform(0.45, 0.70);
    g.rot = rng.uniform(0.0, kPi);
    g.radius = std::hypot(g.hw, g.hh);  // actual bounding radius shrinks
  } else if (g.kind == 2) {
    double base = rng.uniform(0.0, 2.0 * kPi);
    double angles[3];
    for (int i = 0; i < 3; ++i)
      angles[i] = base + i * 2.0 * kPi / 3.0 + rng.uniform(-0.25, 0.25);
    g.ax = g.cx + g.radius * std::cos(angles[0]);
    g.ay = g.cy + g.radius * std::sin(angles[0]);
    g.bx = g.cx + g.radius * std::cos(angles[1]);
    g.by = g.cy + g.radius * std::sin(angles[1]);
    g.gx = g.cx + g.radius * std::cos(angles[2]);
    g.gy = g.cy + g.radius * std::sin(angles[2]);
  } else if (g.kind == 3) {
    g.inner = g.radius * rng.uniform(0.45, 0.60);
  }
  return g;
}

Color lerp(const Color& a, const Color& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

Color muted_color(Rng& rng) {
  double g = rng.uniform(0.28, 0.62);
  Color c;
  for (int k = 0; k < 3; ++k)
    c[k] = std::clamp(g + rng.uniform(-0.10, 0.10), 0.12, 0.80);
  return c;
}

// Procedural background, row-major RGB in [0,1].
std::vector<double> render_background(Rng& rng, int size) {
  std::vector<double> out(static_cast<std::size_t>(size) * size * 3);
  int family = static_cast<int>(rng.uniform_int(2));
  Color pa = muted_color(rng), pb = muted_color(rng);
  if (family == 0) {
    // value noise on a coarse lattice, bilinear between nodes
    int cell = 16;
    int nodes = size / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(nodes) * nodes);
    for (double& v : lattice) v = rng.uniform();
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double fx = static_cast<double>(x) / cell, fy = static_cast<double>(y) / cell;
        int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        double tx = fx - x0, ty = fy - y0;
        double v00 = lattice[y0 * nodes + x0], v01 = lattice[y0 * nodes + x0 + 1];
        double v10 = lattice[(y0 + 1) * nodes + x0], v11 = lattice[(y0 + 1) * nodes + x0 + 1];
        double v = v00 * (1 - tx) * (1 - ty) + v01 * tx * (1 - ty) + v10 * (1 - tx) * ty +
                   v11 * tx * ty;
        Color c = lerp(pa, pb, v);
        for (int k = 0; k < 3; ++k) out[(y * size + x) * 3 + k] = c[k];
      }
    }
  } else {
    double theta = rng.uniform(0.0, kPi);
    double freq = rng.uniform(0.04, 0.12);
    double phase = rng.uniform(0.0, 2.0 * kPi);
    double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double v = 0.5 + 0.5 * std::sin(2.0 * kPi * freq * (x * ct + y * st) + phase);
        Color c = lerp(pa, pb, v);
        for (int k = 0; k < 3; ++k) out[(y * size + x) * 3 + k] = c[k];
      }
    }
  }
  return out;
}

struct RenderedSample {
  io::Image8 image;
  io::Image8 mask;
  BBox box;
};

RenderedSample render_sample(const SynthConfig& cfg, int split_tag, int class_id, int index) {
  Rng rng = derive_rng(cfg.seed, {static_cast<std::uint64_t>(split_tag),
                                  static_cast<std::uint64_t>(class_id),
                                  static_cast<std::uint64_t>(index)});
  int size = cfg.image_size;
  ShapeGeom geom = sample_shape(rng, cfg, class_id);
  double annulus_angle = rng.uniform(0.0, 2.0 * kPi);
  double brightness = rng.uniform(0.85, 1.15);

  std::vector<double> bg;
  if (cfg.bg_mode == SynthConfig::BgMode::common) {
    Rng bg_rng = derive_rng(cfg.seed, {0xB69u, static_cast<std::uint64_t>(class_id)});
    bg = render_background(bg_rng, size);
  } else {
    bg = render_background(rng, size);
  }

  Color base = kObjectColors[class_id / 4];
  Color obj;
  for (int k = 0; k < 3; ++k) obj[k] = std::clamp(base[k] * brightness, 0.0, 1.0);

  std::vector<char> mask(static_cast<std::size_t>(size) * size, 0);
  std::vector<double> rgb = bg;
  long long area = 0;
  BBox box{size, size, 0, 0};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!geom.inside(x + 0.5, y + 0.5)) continue;
      mask[y * size + x] = 1;
      ++area;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
      for (int k = 0; k < 3; ++k) rgb[(y * size + x) * 3 + k] = obj[k];
    }
  }

  if (cfg.marker_mode && area > 0) {
    double px, py, pr;
    geom.interior_disc(px, py, pr, annulus_angle);
    double r = std::min(0.8 * pr, std::sqrt(0.10 * static_cast<double>(area) / kPi));
    r = std::max(r, 1.0);
    struct Cand {
      double d2;
      int y, x;
    };
    std::vector<Cand> cands;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!mask[y * size + x]) continue;
        double dx = x + 0.5 - px, dy = y + 0.5 - py;
        double d2 = dx * dx + dy * dy;
        if (d2 <= r * r) cands.push_back({d2, y, x});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.d2 != b.d2) return a.d2 < b.d2;
      if (a.y != b.y) return a.y < b.y;
      return a.x < b.x;
    });
    std::size_t cap = static_cast<std::size_t>(area / 10);  // at most 10% of the object
    if (cands.size() > cap) cands.resize(cap);
    const Color& mc = kMarkerColors[class_id % 16];
    for (const auto& c : cands)
      for (int k = 0; k < 3; ++k) rgb[(c.y * size + c.x) * 3 + k] = mc[k];
  }

  RenderedSample out;
  out.box = box;
  out.image.width = size;
  out.image.height = size;
  out.image.channels = 3;
  out.image.pixels.resize(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i)
    out.image.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0));
  out.mask.width = size;
  out.mask.height = size;
  out.mask.channels = 1;
  out.mask.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out.mask.pixels[i] = mask[i] ? 255 : 0;
  return out;
}

std::string sample_id(const std::string& split, int class_id, int index) {
  std::ostringstream os;
  os << split << "-c" << class_id << "-";
  os.width(3);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

void SynthConfig::validate() const {
  if (num_classes < 2 || num_classes > 16)
    throw ConfigError("num_classes must lie in [2,16], got " + std::to_string(num_classes));
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (train_per_class < 0 || val_per_class < 0 || test_per_class < 0)
    throw ConfigError("per-class counts must be non-negative");
  if (train_per_class + val_per_class + test_per_class == 0)
    throw ConfigError("dataset would be empty");
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi < 0.9))
    throw ConfigError("object scale range must satisfy 0 < lo <= hi < 0.9");
  if (scale_hi * image_size / 2.0 + 2.0 > image_size / 2.0)
    throw ConfigError("objects at scale_hi cannot keep a 2 px border margin");
}

std::string SynthConfig::text() const {
  std::ostringstream os;
  os << "num_classes=" << num_classes << "\n";
  os << "image_size=" << image_size << "\n";
  os << "train_per_class=" << train_per_class << "\n";
  os << "val_per_class=" << val_per_class << "\n";
  os << "test_per_class=" << test_per_class << "\n";
  os << "bg_mode=" << (bg_mode == BgMode::varied ? "varied" : "common") << "\n";
  os << "marker_mode=" << (marker_mode ? 1 : 0) << "\n";
  os << "scale_lo=" << scale_lo << "\n";
  os << "scale_hi=" << scale_hi << "\n";
  os << "seed=" << seed << "\n";
  return os.str();
}

std::vector<SampleRecord> generate_dataset(const SynthConfig& cfg,
                                           const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (!std::filesystem::is_directory(out_dir / "images") ||
      !std::filesystem::is_directory(out_dir / "masks"))
    throw IoError("cannot create dataset directories under " + out_dir.string());

  struct SplitPlan {
    const char* name;
    int tag;
    int count;
  };
  SplitPlan plans[] = {{"train", 1, cfg.train_per_class},
                       {"val", 2, cfg.val_per_class},
                       {"test", 3, cfg.test_per_class}};

  std::vector<SampleRecord> manifest;
  std::ostringstream csv;
  csv << "image_id,split,class_id,x0,y0,x1,y1\n";
  for (const auto& plan : plans) {
    for (int c = 0; c < cfg.num_classes; ++c) {
      for (int i = 0; i < plan.count; ++i) {
        RenderedSample s = render_sample(cfg, plan.tag, c, i);
        SampleRecord rec;
        rec.image_id = sample_id(plan.name, c, i);
        rec.split = plan.name;
        rec.class_id = c;
        rec.gt_box = s.box;
        rec.image_path = "images/" + rec.image_id + ".ppm";
        rec.mask_path = "masks/" + rec.image_id + ".pgm";
        io::write_ppm(out_dir / rec.image_path, s.image);
        io::write_pgm8(out_dir / rec.mask_path, s.mask);
        csv << rec.image_id << "," << rec.split << "," << rec.class_id << "," << rec.gt_box.x0
            << "," << rec.gt_box.y0 << "," << rec.gt_box.x1 << "," << rec.gt_box.y1 << "\n";
        manifest.push_back(std::move(rec));
      }
    }
  }
  io::write_text_file(out_dir / "manifest.csv", csv.str());
  io::write_text_file(out_dir / "dataset.cfg", cfg.text());
  return manifest;
}

static std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

static BBox tight_box(const Tensor& mask) {
  int h = mask.dim(0), w = mask.dim(1);
  BBox box{w, h, 0, 0};
  const auto& v = mask.values();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (v[y * w + x] != 0.0) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x + 1);
        box.y1 = std::max(box.y1, y + 1);
      }
  return box;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  auto manifest_path = dir / "manifest.csv";
  if (!std::filesystem::exists(manifest_path))
    throw IoError("no manifest.csv under " + dir.string());
  std::istringstream is(io::read_text_file(manifest_path));
  std::string line;
  if (!std::getline(is, line) || split_csv_line(line) != std::vector<std::string>{
                                     "image_id", "split", "class_id", "x0", "y0", "x1", "y1"})
    throw IoError(manifest_path.string() + ": bad manifest header");

  Dataset ds;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 7)
      throw IoError(manifest_path.string() + " line " + std::to_string(line_no) +
                    ": expected 7 fields");
    Dataset::Item item;
    item.image_id = fields[0];
    item.split = fields[1];
    try {
      item.class_id = std::stoi(fields[2]);
      item.gt_box = {std::stoi(fields[3]), std::stoi(fields[4]), std::stoi(fields[5]),
                     std::stoi(fields[6])};
    } catch (const std::exception&) {
      throw IoError(manifest_path.string() + " line " + std::to_string(line_no) +
                    ": bad numeric field");
    }
    if (item.image_id.empty() || item.split.empty() || item.class_id < 0)
      throw IoError(manifest_path.string() + " line " + std::to_string(line_no) +
                    ": bad record fields");

    try {
      io::Image8 img = io::read_ppm(dir / "images" / (item.image_id + ".ppm"));
      io::Image8 msk = io::read_pgm8(dir / "masks" / (item.image_id + ".pgm"));
      if (img.width != msk.width || img.height != msk.height)
        throw IntegrityError("image and mask extents differ");
      item.image = Tensor({3, img.height, img.width});
      auto& iv = item.image.values();
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          for (int k = 0; k < 3; ++k)
            iv[(k * img.height + y) * img.width + x] =
                img.pixels[(y * img.width + x) * 3 + k] / 255.0;
      item.mask = Tensor({msk.height, msk.width});
      auto& mv = item.mask.values();
      for (std::size_t i = 0; i < msk.pixels.size(); ++i) {
        if (msk.pixels[i] != 0 && msk.pixels[i] != 255)
          throw IntegrityError("mask has non-binary value " + std::to_string(msk.pixels[i]));
        mv[i] = msk.pixels[i] ? 1.0 : 0.0;
      }
      BBox tight = tight_box(item.mask);
      if (tight.empty()) throw IntegrityError("mask is empty");
      if (!(tight == item.gt_box))
        throw IntegrityError("gt_box " + box_str(item.gt_box) + " does not match mask box " +
                             box_str(tight));
    } catch (const Error& e) {
      throw IntegrityError("record " + item.image_id + ": " + e.what());
    }

    if (!ds.items_.empty() &&
        (item.image.dim(1) != ds.height_ || item.image.dim(2) != ds.width_))
      throw IntegrityError("record " + item.image_id + ": extent differs from the rest");
    if (ds.items_.empty()) {
      ds.height_ = item.image.dim(1);
      ds.width_ = item.image.dim(2);
    }
    ds.num_classes_ = std::max(ds.num_classes_, item.class_id + 1);
    ds.items_.push_back(std::move(item));
  }
  if (ds.items_.empty()) throw IoError(manifest_path.string() + ": manifest has no records");
  return ds;
}

Dataset dataset_from_items(std::vector<Dataset::Item> items, int num_classes) {
  if (items.empty()) throw ValueError("dataset_from_items: no items");
  Dataset ds;
  ds.height_ = items.front().image.dim(1);
  ds.width_ = items.front().image.dim(2);
  for (const auto& it : items) {
    if (it.image.rank() != 3 || it.image.dim(1) != ds.height_ || it.image.dim(2) != ds.width_)
      throw ShapeError("dataset_from_items: inconsistent image shapes");
    if (it.class_id < 0 || it.class_id >= num_classes)
      throw ValueError("dataset_from_items: class id out of range");
  }
  ds.items_ = std::move(items);
  ds.num_classes_ = num_classes;
  return ds;
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<std::vector<int>> Dataset::class_indices(const std::string& split) const {
  std::vector<std::vector<int>> out(num_classes_);
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].split == split) out[items_[i].class_id].push_back(static_cast<int>(i));
  return out;
}

Tensor gather_images(const Dataset& ds, const std::vector<int>& indices) {
  if (indices.empty()) throw ValueError("gather_images: empty index list");
  int c = ds.item(indices[0]).image.dim(0);
  Tensor out({static_cast<int>(indices.size()), c, ds.height(), ds.width()});
  std::size_t plane = ds.item(indices[0]).image.size();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& img = ds.item(indices[n]).image;
    std::copy(img.values().begin(), img.values().end(), out.values().begin() + n * plane);
  }
  return out;
}

}  // namespace mmc

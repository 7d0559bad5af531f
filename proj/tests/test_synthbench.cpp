#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmc/errors.hpp"
#include "mmc/io.hpp"
#include "mmc/synthbench.hpp"
#include "support/testutil.hpp"

using namespace mmc;
using mmc::testing::TempDir;

namespace {

SynthConfig tiny_cfg() {
  SynthConfig cfg;
  cfg.num_classes = 2;
  cfg.image_size = 32;
  cfg.train_per_class = 3;
  cfg.val_per_class = 1;
  cfg.test_per_class = 1;
  cfg.seed = 5;
  return cfg;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is),
                                   std::istreambuf_iterator<char>());
}

std::vector<std::filesystem::path> relative_files(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

BBox mask_tight_box(const io::Image8& m) {
  BBox box{m.width, m.height, 0, 0};
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.pixels[static_cast<std::size_t>(y) * m.width + x]) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x + 1);
        box.y1 = std::max(box.y1, y + 1);
      }
  return box;
}

void patch_text_file(const std::filesystem::path& p, const std::string& from,
                     const std::string& to) {
  std::string text = io::read_text_file(p);
  auto pos = text.find(from);
  REQUIRE(pos != std::string::npos);
  text.replace(pos, from.size(), to);
  io::write_text_file(p, text);
}

}  // namespace

TEST_SUITE("synthbench") {

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny_cfg().validate());
  auto cfg = tiny_cfg();
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.num_classes = 17;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.image_size = 8;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.train_per_class = cfg.val_per_class = cfg.test_per_class = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.scale_lo = 0.7;
  cfg.scale_hi = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.scale_hi = 0.95;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_cfg();
  cfg.image_size = 16;
  cfg.scale_hi = 0.8;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(tiny_cfg().text().find("bg_mode=varied") != std::string::npos);
}

TEST_CASE("generation is bit-identical across runs") {
  TempDir a, b;
  auto cfg = tiny_cfg();
  auto rec_a = generate_dataset(cfg, a.path);
  auto rec_b = generate_dataset(cfg, b.path);
  REQUIRE(rec_a.size() == rec_b.size());
  for (std::size_t i = 0; i < rec_a.size(); ++i) {
    CHECK(rec_a[i].image_id == rec_b[i].image_id);
    CHECK(rec_a[i].gt_box == rec_b[i].gt_box);
  }
  auto files_a = relative_files(a.path);
  auto files_b = relative_files(b.path);
  REQUIRE(files_a == files_b);
  REQUIRE(files_a.size() == 2 * rec_a.size() + 2);
  for (const auto& rel : files_a) CHECK(read_bytes(a.path / rel) == read_bytes(b.path / rel));
}

TEST_CASE("records cover the split plan with underscore-free ids") {
  TempDir dir;
  auto cfg = tiny_cfg();
  auto recs = generate_dataset(cfg, dir.path);
  REQUIRE(static_cast<int>(recs.size()) ==
          cfg.num_classes * (cfg.train_per_class + cfg.val_per_class + cfg.test_per_class));
  CHECK(recs[0].image_id == "train-c0-000");
  CHECK(recs[0].split == "train");
  CHECK(recs[0].image_path == "images/train-c0-000.ppm");
  CHECK(recs[0].mask_path == "masks/train-c0-000.pgm");
  int trains = 0, vals = 0, tests = 0;
  for (const auto& r : recs) {
    CHECK(r.image_id.find('_') == std::string::npos);
    CHECK(std::filesystem::exists(dir.path / r.image_path));
    CHECK(std::filesystem::exists(dir.path / r.mask_path));
    if (r.split == "train") ++trains;
    if (r.split == "val") ++vals;
    if (r.split == "test") ++tests;
  }
  CHECK(trains == cfg.num_classes * cfg.train_per_class);
  CHECK(vals == cfg.num_classes * cfg.val_per_class);
  CHECK(tests == cfg.num_classes * cfg.test_per_class);
}

TEST_CASE("gt boxes are tight mask boxes with a 2 px border margin") {
  TempDir dir;
  auto cfg = tiny_cfg();
  auto recs = generate_dataset(cfg, dir.path);
  for (const auto& r : recs) {
    io::Image8 m = io::read_pgm8(dir.path / r.mask_path);
    for (auto p : m.pixels) CHECK((p == 0 || p == 255));
    BBox tight = mask_tight_box(m);
    CHECK_FALSE(tight.empty());
    CHECK(tight == r.gt_box);
    CHECK(r.gt_box.x0 >= 2);
    CHECK(r.gt_box.y0 >= 2);
    CHECK(r.gt_box.x1 <= cfg.image_size - 2);
    CHECK(r.gt_box.y1 <= cfg.image_size - 2);
  }
}

TEST_CASE("marker stays inside the object and under a tenth of its area") {
  TempDir plain_dir, marked_dir;
  auto cfg = tiny_cfg();
  auto plain = generate_dataset(cfg, plain_dir.path);
  cfg.marker_mode = true;
  auto marked = generate_dataset(cfg, marked_dir.path);
  REQUIRE(plain.size() == marked.size());
  long long total_marker = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    CHECK(plain[i].gt_box == marked[i].gt_box);
    CHECK(read_bytes(plain_dir.path / plain[i].mask_path) ==
          read_bytes(marked_dir.path / marked[i].mask_path));
    io::Image8 a = io::read_ppm(plain_dir.path / plain[i].image_path);
    io::Image8 b = io::read_ppm(marked_dir.path / marked[i].image_path);
    io::Image8 m = io::read_pgm8(plain_dir.path / plain[i].mask_path);
    long long area = 0, changed = 0;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        std::size_t p = static_cast<std::size_t>(y) * m.width + x;
        if (m.pixels[p]) ++area;
        bool diff = false;
        for (int k = 0; k < 3; ++k)
          if (a.pixels[p * 3 + k] != b.pixels[p * 3 + k]) diff = true;
        if (!diff) continue;
        ++changed;
        CHECK(m.pixels[p] == 255);
      }
    CHECK(changed <= area / 10);
    total_marker += changed;
  }
  CHECK(total_marker > 0);
}

TEST_CASE("common backgrounds repeat within a class, varied ones do not") {
  auto cfg = tiny_cfg();
  cfg.train_per_class = 2;
  cfg.val_per_class = 0;
  cfg.test_per_class = 0;

  auto bg_diffs = [&](const std::filesystem::path& dir,
                      const std::vector<SampleRecord>& recs) {
    io::Image8 img0 = io::read_ppm(dir / recs[0].image_path);
    io::Image8 img1 = io::read_ppm(dir / recs[1].image_path);
    io::Image8 m0 = io::read_pgm8(dir / recs[0].mask_path);
    io::Image8 m1 = io::read_pgm8(dir / recs[1].mask_path);
    long long diffs = 0;
    for (std::size_t p = 0; p < m0.pixels.size(); ++p) {
      if (m0.pixels[p] || m1.pixels[p]) continue;
      for (int k = 0; k < 3; ++k)
        if (img0.pixels[p * 3 + k] != img1.pixels[p * 3 + k]) ++diffs;
    }
    return diffs;
  };

  TempDir common_dir;
  cfg.bg_mode = SynthConfig::BgMode::common;
  auto common_recs = generate_dataset(cfg, common_dir.path);
  REQUIRE(common_recs[0].class_id == common_recs[1].class_id);
  CHECK(bg_diffs(common_dir.path, common_recs) == 0);

  TempDir varied_dir;
  cfg.bg_mode = SynthConfig::BgMode::varied;
  auto varied_recs = generate_dataset(cfg, varied_dir.path);
  CHECK(bg_diffs(varied_dir.path, varied_recs) > 0);
}

TEST_CASE("load round-trips a generated dataset") {
  TempDir dir;
  auto cfg = tiny_cfg();
  auto recs = generate_dataset(cfg, dir.path);
  Dataset ds = load_dataset(dir.path);
  REQUIRE(ds.items().size() == recs.size());
  CHECK(ds.num_classes() == cfg.num_classes);
  CHECK(ds.height() == cfg.image_size);
  CHECK(ds.width() == cfg.image_size);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& it = ds.item(static_cast<int>(i));
    CHECK(it.image_id == recs[i].image_id);
    CHECK(it.split == recs[i].split);
    CHECK(it.class_id == recs[i].class_id);
    CHECK(it.gt_box == recs[i].gt_box);
  }

  io::Image8 raw = io::read_ppm(dir.path / recs[3].image_path);
  const auto& img = ds.item(3).image;
  REQUIRE(img.dim(0) == 3);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int k = 0; k < 3; ++k)
        CHECK(img.values()[(k * raw.height + y) * raw.width + x] ==
              raw.pixels[(y * static_cast<std::size_t>(raw.width) + x) * 3 + k] / 255.0);
  io::Image8 rawm = io::read_pgm8(dir.path / recs[3].mask_path);
  for (std::size_t p = 0; p < rawm.pixels.size(); ++p)
    CHECK(ds.item(3).mask.values()[p] == (rawm.pixels[p] ? 1.0 : 0.0));

  auto train = ds.split_indices("train");
  CHECK(static_cast<int>(train.size()) == cfg.num_classes * cfg.train_per_class);
  CHECK(ds.split_indices("nope").empty());
  auto per_class = ds.class_indices("train");
  REQUIRE(static_cast<int>(per_class.size()) == cfg.num_classes);
  for (int c = 0; c < cfg.num_classes; ++c) {
    CHECK(static_cast<int>(per_class[c].size()) == cfg.train_per_class);
    for (int idx : per_class[c]) CHECK(ds.item(idx).class_id == c);
  }
}

TEST_CASE("loader rejects missing or malformed manifests") {
  TempDir dir;
  CHECK_THROWS_AS(load_dataset(dir.path), IoError);

  auto cfg = tiny_cfg();
  generate_dataset(cfg, dir.path);
  CHECK_NOTHROW(load_dataset(dir.path));

  std::string manifest = io::read_text_file(dir.path / "manifest.csv");
  io::write_text_file(dir.path / "manifest.csv", "id,split\n" + manifest);
  CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains("bad manifest header"),
                       IoError);

  io::write_text_file(dir.path / "manifest.csv",
                      "image_id,split,class_id,x0,y0,x1,y1\ntrain-c0-000,train,0,1,1\n");
  CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains("expected 7 fields"), IoError);

  io::write_text_file(dir.path / "manifest.csv",
                      "image_id,split,class_id,x0,y0,x1,y1\ntrain-c0-000,train,zero,1,1,5,5\n");
  CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains("bad numeric field"), IoError);

  io::write_text_file(dir.path / "manifest.csv", "image_id,split,class_id,x0,y0,x1,y1\n");
  CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains("no records"), IoError);
}

TEST_CASE("loader verifies masks against manifest boxes") {
  TempDir dir;
  auto cfg = tiny_cfg();
  auto recs = generate_dataset(cfg, dir.path);

  SUBCASE("tampered box") {
    const auto& victim = recs[1];
    std::string row = victim.image_id + "," + victim.split + "," +
                      std::to_string(victim.class_id) + "," + std::to_string(victim.gt_box.x0);
    patch_text_file(dir.path / "manifest.csv", row,
                    victim.image_id + "," + victim.split + "," +
                        std::to_string(victim.class_id) + "," +
                        std::to_string(victim.gt_box.x0 + 1));
    CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains(victim.image_id.c_str()),
                         IntegrityError);
  }

  SUBCASE("non-binary mask pixel") {
    const auto& victim = recs[2];
    io::Image8 m = io::read_pgm8(dir.path / victim.mask_path);
    m.pixels[m.pixels.size() / 2] = 128;
    io::write_pgm8(dir.path / victim.mask_path, m);
    try {
      load_dataset(dir.path);
      FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
      CHECK(std::string(e.what()).find(victim.image_id) != std::string::npos);
      CHECK(std::string(e.what()).find("non-binary") != std::string::npos);
    }
  }

  SUBCASE("emptied mask") {
    const auto& victim = recs[0];
    io::Image8 m = io::read_pgm8(dir.path / victim.mask_path);
    std::fill(m.pixels.begin(), m.pixels.end(), 0);
    io::write_pgm8(dir.path / victim.mask_path, m);
    CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains(victim.image_id.c_str()),
                         IntegrityError);
  }

  SUBCASE("mask extent differs from image") {
    const auto& victim = recs[0];
    io::Image8 small;
    small.width = small.height = 8;
    small.channels = 1;
    small.pixels.assign(64, 255);
    io::write_pgm8(dir.path / victim.mask_path, small);
    CHECK_THROWS_WITH_AS(load_dataset(dir.path), doctest::Contains(victim.image_id.c_str()),
                         IntegrityError);
  }
}

TEST_CASE("dataset_from_items validates and gathers") {
  CHECK_THROWS_AS(dataset_from_items({}, 2), ValueError);

  auto make = [](const std::string& id, int cls, int side, double fill) {
    Dataset::Item it;
    it.image_id = id;
    it.split = "train";
    it.class_id = cls;
    it.gt_box = {1, 1, 2, 2};
    it.image = Tensor({3, side, side}, fill);
    it.mask = Tensor({side, side}, 1.0);
    return it;
  };

  CHECK_THROWS_AS(dataset_from_items({make("a", 0, 4, 0.0), make("b", 0, 5, 0.0)}, 2),
                  ShapeError);
  CHECK_THROWS_AS(dataset_from_items({make("a", 2, 4, 0.0)}, 2), ValueError);

  Dataset ds = dataset_from_items({make("a", 0, 4, 0.25), make("b", 1, 4, 0.75)}, 2);
  CHECK(ds.num_classes() == 2);
  CHECK(ds.height() == 4);

  Tensor batch = gather_images(ds, {1, 0});
  REQUIRE(batch.shape() == Shape{2, 3, 4, 4});
  CHECK(batch.values()[0] == 0.75);
  CHECK(batch.values()[3 * 4 * 4] == 0.25);
  CHECK_THROWS_AS(gather_images(ds, {}), ValueError);
}

}  // TEST_SUITE

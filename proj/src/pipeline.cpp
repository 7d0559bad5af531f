#include "mmc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <future>
#include <sstream>

#include <json.hpp>

#include "mmc/errors.hpp"
#include "mmc/io.hpp"
#include "mmc/ops.hpp"
#include "mmc/rng.hpp"

namespace mmc {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string delta_code(double delta) {
  int code = static_cast<int>(std::lround(delta * 100.0));
  std::string s = std::to_string(code);
  while (s.size() < 3) s.insert(s.begin(), '0');
  return s;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

int thread_budget(int requested) {
  int jobs = std::max(1, requested);
  if (const char* cap = std::getenv("MMC_THREADS")) {
    try {
      jobs = std::min(jobs, std::max(1, std::stoi(cap)));
    } catch (const std::exception&) {
      throw ConfigError("MMC_THREADS must be an integer");
    }
  }
  return jobs;
}

}  // namespace

BackboneSpec backbone_from_config(const RunConfig& cfg) {
  auto channels = cfg.integers("model.channels");
  auto strides = cfg.integers("model.strides");
  int kernel = static_cast<int>(cfg.integer("model.kernel"));
  if (channels.empty() || channels.size() != strides.size())
    throw ConfigError("model.channels and model.strides must list one value per layer");
  BackboneSpec spec;
  int in_ch = 3;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    ConvLayerSpec l;
    l.in_ch = in_ch;
    l.out_ch = static_cast<int>(channels[i]);
    l.kernel = kernel;
    l.stride = static_cast<int>(strides[i]);
    l.pad = kernel / 2;
    spec.layers.push_back(l);
    in_ch = l.out_ch;
  }
  spec.stride_mod = cfg.flag("model.stride_mod");
  spec.validate();
  return spec;
}

TrainConfig train_from_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.epochs = static_cast<int>(cfg.integer("train.epochs"));
  tc.batches_per_epoch = static_cast<int>(cfg.integer("train.batches_per_epoch"));
  tc.lr1 = cfg.number("train.lr1");
  tc.momentum = cfg.number("train.momentum");
  tc.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  tc.set_size = static_cast<int>(cfg.integer("train.s"));
  tc.n_groups = static_cast<int>(cfg.integer("train.n"));
  tc.stage2 = cfg.flag("train.stage2");
  tc.stage2_cfg.lambda1 = cfg.number("train.lambda1");
  tc.stage2_cfg.lambda2 = cfg.number("train.lambda2");
  tc.stage2_cfg.lr2 = cfg.number("train.lr2");
  std::string variant = cfg.str("train.mask_variant");
  if (variant == "input")
    tc.mask_variant = MaskVariant::input;
  else if (variant == "feature")
    tc.mask_variant = MaskVariant::feature;
  else
    throw ConfigError("train.mask_variant must be input or feature, got '" + variant + "'");
  tc.cam.resize_first = cfg.flag("cam.resize_first");
  tc.cam.detach_norm = cfg.flag("cam.detach_norm");
  std::string intensity = cfg.str("train.intensity");
  if (!intensity.empty()) {
    auto pos = intensity.find(',');
    if (pos == std::string::npos)
      throw ConfigError("train.intensity wants 'lo,hi', got '" + intensity + "'");
    try {
      tc.intensity_aug = {std::stod(intensity.substr(0, pos)),
                          std::stod(intensity.substr(pos + 1))};
    } catch (const std::exception&) {
      throw ConfigError("train.intensity wants 'lo,hi', got '" + intensity + "'");
    }
  }
  tc.validate();
  return tc;
}

SynthConfig synth_from_config(const RunConfig& cfg) {
  SynthConfig sc;
  sc.num_classes = static_cast<int>(cfg.integer("gen.classes"));
  sc.image_size = static_cast<int>(cfg.integer("gen.size"));
  sc.train_per_class = static_cast<int>(cfg.integer("gen.train"));
  sc.val_per_class = static_cast<int>(cfg.integer("gen.val"));
  sc.test_per_class = static_cast<int>(cfg.integer("gen.test"));
  std::string bg = cfg.str("gen.bg");
  if (bg == "varied")
    sc.bg_mode = SynthConfig::BgMode::varied;
  else if (bg == "common")
    sc.bg_mode = SynthConfig::BgMode::common;
  else
    throw ConfigError("gen.bg must be varied or common, got '" + bg + "'");
  sc.marker_mode = cfg.flag("gen.marker");
  auto scale = cfg.numbers("gen.scale");
  if (scale.size() != 2) throw ConfigError("gen.scale wants 'lo,hi'");
  sc.scale_lo = scale[0];
  sc.scale_hi = scale[1];
  sc.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  sc.validate();
  return sc;
}

BoxAccOptions box_options_from_config(const RunConfig& cfg) {
  BoxAccOptions opt;
  opt.deltas = cfg.numbers("eval.deltas");
  opt.grid.size = static_cast<int>(cfg.integer("eval.grid"));
  opt.connectivity = static_cast<int>(cfg.integer("eval.connectivity"));
  opt.largest_only = cfg.flag("eval.largest_only");
  return opt;
}

SplitMaps compute_split_maps(const Model& model, const Dataset& ds, const std::string& split,
                             const CamConfig& cam_cfg, bool quantize) {
  SplitMaps out;
  out.indices = ds.split_indices(split);
  if (out.indices.empty()) throw ValueError("split '" + split + "' is empty");
  Tape tape;
  Tensor images = gather_images(ds, out.indices);
  Tensor feats = forward_features(tape, model, images);
  for (std::size_t i = 0; i < out.indices.size(); ++i) {
    const auto& item = ds.item(out.indices[i]);
    Tensor fi = select_image(tape, feats, static_cast<int>(i));
    Tensor raw = compute_cam_raw(tape, fi, model.head_w(), item.class_id);
    LocalizationMap m;
    m.image_id = item.image_id;
    m.class_id = item.class_id;
    m.values = finalize_map(tape, raw, ds.height(), ds.width(), cam_cfg);
    if (quantize) m.values = dequantize_map(quantize_map(m.values), ds.height(), ds.width());
    out.maps.push_back(std::move(m));
  }
  return out;
}

EvalReport evaluate_maps(const SplitMaps& sm, const Dataset& ds, const BoxAccOptions& opt,
                         bool pxap_per_image) {
  std::vector<Tensor> maps;
  std::vector<std::vector<BBox>> gts;
  std::vector<Tensor> masks;
  maps.reserve(sm.maps.size());
  for (std::size_t i = 0; i < sm.maps.size(); ++i) {
    maps.push_back(sm.maps[i].values);
    const auto& item = ds.item(sm.indices[i]);
    gts.push_back({item.gt_box});
    masks.push_back(item.mask);
  }
  EvalReport rep;
  rep.boxes = max_box_acc(maps, gts, opt);
  rep.pxap_value = pxap(maps, masks, opt.grid, pxap_per_image);
  return rep;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  for (std::size_t d = 0; d < boxes.deltas.size(); ++d) {
    std::string code = delta_code(boxes.deltas[d]);
    j["maxboxacc_" + code] = boxes.max_acc[d];
    j["best_tau_per_delta"][code] = boxes.best_tau[d];
  }
  j["maxboxacc_v2"] = boxes.v2;
  j["pxap"] = pxap_value;
  if (topk_value >= 0.0) {
    j["topk_loc"] = topk_value;
    j["topk_k"] = topk_k;
  }
  j["seed"] = seed;
  j["config_hash"] = hex64(config_hash);
  j["version"] = kVersion;
  return j.dump(2) + "\n";
}

std::string EvalReport::curves_csv() const {
  std::ostringstream os;
  os << "tau";
  for (double d : boxes.deltas) os << ",acc_" << delta_code(d);
  os << "\n";
  os.precision(17);
  int t_count = boxes.curves.empty() ? 0 : static_cast<int>(boxes.curves[0].size());
  for (int t = 0; t < t_count; ++t) {
    os << static_cast<double>(t) / t_count;
    for (const auto& curve : boxes.curves) os << "," << curve[t];
    os << "\n";
  }
  return os.str();
}

double topk_loc(const Model& loc_model, const Model& classifier, const Dataset& ds,
                const TopkOptions& opt) {
  if (opt.k != 1 && opt.k != 5) throw ValueError("topk_loc supports k = 1 or 5");
  if (loc_model.num_classes != classifier.num_classes)
    throw ValueError("localization and classifier models disagree on class count (" +
                     std::to_string(loc_model.num_classes) + " vs " +
                     std::to_string(classifier.num_classes) + ")");
  if (loc_model.num_classes != ds.num_classes())
    throw ValueError("model covers " + std::to_string(loc_model.num_classes) +
                     " classes, dataset has " + std::to_string(ds.num_classes()));

  SplitMaps sm = compute_split_maps(loc_model, ds, opt.split, opt.cam, opt.quantize);
  BoxAccOptions bopt;
  bopt.deltas = {0.5};
  bopt.grid = opt.grid;
  bopt.connectivity = opt.connectivity;
  bopt.largest_only = opt.largest_only;
  std::vector<Tensor> maps;
  std::vector<std::vector<BBox>> gts;
  for (std::size_t i = 0; i < sm.maps.size(); ++i) {
    maps.push_back(sm.maps[i].values);
    gts.push_back({ds.item(sm.indices[i]).gt_box});
  }
  double tau_star = max_box_acc(maps, gts, bopt).best_tau[0];

  Tape tape;
  Tensor images = gather_images(ds, sm.indices);
  Tensor logits = classify(tape, classifier, images);
  Tensor feats;
  if (opt.use_predicted_class) feats = forward_features(tape, loc_model, images);

  int correct = 0;
  int c_count = classifier.num_classes;
  for (std::size_t i = 0; i < sm.indices.size(); ++i) {
    const auto& item = ds.item(sm.indices[i]);
    std::vector<int> order(c_count);
    for (int c = 0; c < c_count; ++c) order[c] = c;
    const double* lg = logits.data() + i * c_count;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (lg[a] != lg[b]) return lg[a] > lg[b];
      return a < b;
    });
    bool cls_hit = false;
    for (int r = 0; r < std::min(opt.k, c_count); ++r) cls_hit |= order[r] == item.class_id;
    if (!cls_hit) continue;

    Tensor map_values = sm.maps[i].values;
    if (opt.use_predicted_class && order[0] != item.class_id) {
      Tensor fi = select_image(tape, feats, static_cast<int>(i));
      Tensor raw = compute_cam_raw(tape, fi, loc_model.head_w(), order[0]);
      map_values = finalize_map(tape, raw, ds.height(), ds.width(), opt.cam);
      if (opt.quantize)
        map_values = dequantize_map(quantize_map(map_values), ds.height(), ds.width());
    }
    auto boxes = extract_boxes(map_values, tau_star, opt.connectivity);
    if (opt.largest_only && boxes.size() > 1) {
      auto it = std::max_element(boxes.begin(), boxes.end(),
                                 [](const BBox& a, const BBox& b) { return a.area() < b.area(); });
      boxes = {*it};
    }
    double best = 0.0;
    for (const auto& b : boxes) best = std::max(best, iou(b, item.gt_box));
    if (best >= 0.5) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(sm.indices.size());
}

namespace {

std::filesystem::path ensure_out_dir(const RunConfig& cfg) {
  std::filesystem::path out = cfg.str("out");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (!std::filesystem::is_directory(out))
    throw IoError("cannot create output directory " + out.string());
  return out;
}

Dataset load_configured_dataset(const RunConfig& cfg) {
  std::string dir = cfg.str("dataset");
  if (dir.empty()) throw ConfigError("dataset path is required (--dataset)");
  return load_dataset(dir);
}

}  // namespace

std::string run_gen(const RunConfig& cfg) {
  SynthConfig sc = synth_from_config(cfg);
  std::filesystem::path out = ensure_out_dir(cfg);
  auto manifest = generate_dataset(sc, out);
  io::write_text_file(out / "resolved.cfg", cfg.resolved_text());
  return "generated " + std::to_string(manifest.size()) + " images under " + out.string();
}

std::string run_train(const RunConfig& cfg) {
  Dataset ds = load_configured_dataset(cfg);
  BackboneSpec spec = backbone_from_config(cfg);
  TrainConfig tc = train_from_config(cfg);
  std::filesystem::path out = ensure_out_dir(cfg);

  TrainResult result = train(tc, spec, ds);
  save_checkpoint(out / "checkpoint.mmc", result.model);
  io::write_text_file(out / "train_log.csv", train_log_csv(result.log));
  io::write_text_file(out / "resolved.cfg", cfg.resolved_text());

  double last_ce = result.log.empty() ? 0.0 : result.log.back().ce;
  std::ostringstream os;
  os.precision(6);
  os << "trained " << tc.epochs << " epochs, final ce " << last_ce << ", checkpoint "
     << (out / "checkpoint.mmc").string();
  return os.str();
}

namespace {

SplitMaps maps_from_directory(const std::filesystem::path& dir, const Dataset& ds,
                              const std::string& split) {
  SplitMaps sm;
  sm.indices = ds.split_indices(split);
  if (sm.indices.empty()) throw ValueError("split '" + split + "' is empty");
  for (int idx : sm.indices) {
    const auto& item = ds.item(idx);
    auto path = dir / (item.image_id + "_" + std::to_string(item.class_id) + ".pgm");
    if (!std::filesystem::exists(path))
      throw IoError("missing heatmap " + path.string());
    LocalizationMap m = load_map(path);
    if (m.values.dim(0) != ds.height() || m.values.dim(1) != ds.width())
      throw ShapeError("heatmap " + path.string() + " extent mismatch");
    sm.maps.push_back(std::move(m));
  }
  return sm;
}

}  // namespace

std::string run_eval(const RunConfig& cfg) {
  Dataset ds = load_configured_dataset(cfg);
  std::filesystem::path out = ensure_out_dir(cfg);
  std::string split = cfg.str("eval.split");
  CamConfig cam_cfg;
  cam_cfg.resize_first = cfg.flag("cam.resize_first");
  cam_cfg.detach_norm = cfg.flag("cam.detach_norm");

  SplitMaps sm;
  std::string maps_dir = cfg.str("eval.maps_dir");
  Model model;
  bool have_model = false;
  if (!maps_dir.empty()) {
    sm = maps_from_directory(maps_dir, ds, split);
  } else {
    std::string ckpt = cfg.str("checkpoint");
    if (ckpt.empty()) throw ConfigError("eval needs --checkpoint or eval.maps_dir");
    model = load_checkpoint(ckpt);
    have_model = true;
    if (model.num_classes != ds.num_classes())
      throw ConfigError("checkpoint covers " + std::to_string(model.num_classes) +
                        " classes, dataset has " + std::to_string(ds.num_classes()));
    sm = compute_split_maps(model, ds, split, cam_cfg, cfg.flag("eval.quantize"));
  }

  EvalReport rep = evaluate_maps(sm, ds, box_options_from_config(cfg),
                                 cfg.flag("eval.pxap_per_image"));
  rep.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  rep.config_hash = cfg.hash();

  int k = static_cast<int>(cfg.integer("eval.topk"));
  if (k > 0) {
    if (!have_model) throw ConfigError("eval.topk needs a localization checkpoint");
    std::string cls_path = cfg.str("eval.classifier");
    if (cls_path.empty()) throw ConfigError("eval.topk needs eval.classifier");
    Model classifier = load_checkpoint(cls_path);
    TopkOptions topt;
    topt.k = k;
    topt.grid.size = static_cast<int>(cfg.integer("eval.grid"));
    topt.connectivity = static_cast<int>(cfg.integer("eval.connectivity"));
    topt.largest_only = cfg.flag("eval.largest_only");
    topt.use_predicted_class = cfg.flag("eval.use_predicted_class");
    topt.quantize = cfg.flag("eval.quantize");
    topt.cam = cam_cfg;
    topt.split = split;
    rep.topk_value = topk_loc(model, classifier, ds, topt);
    rep.topk_k = k;
  }

  if (cfg.flag("eval.dump_maps")) {
    std::error_code ec;
    std::filesystem::create_directories(out / "maps", ec);
    for (const auto& m : sm.maps) dump_map(out / "maps", m);
  }

  io::write_text_file(out / "report.json", rep.to_json());
  io::write_text_file(out / "curves.csv", rep.curves_csv());
  io::write_text_file(out / "resolved.cfg", cfg.resolved_text());

  std::ostringstream os;
  os.precision(6);
  os << "eval " << split << ": maxboxacc_v2 " << rep.boxes.v2 << ", pxap " << rep.pxap_value
     << ", report " << (out / "report.json").string();
  return os.str();
}

std::string run_dump_cam(const RunConfig& cfg) {
  Dataset ds = load_configured_dataset(cfg);
  std::string ckpt = cfg.str("checkpoint");
  if (ckpt.empty()) throw ConfigError("dump-cam needs --checkpoint");
  Model model = load_checkpoint(ckpt);
  if (model.num_classes != ds.num_classes())
    throw ConfigError("checkpoint covers " + std::to_string(model.num_classes) +
                      " classes, dataset has " + std::to_string(ds.num_classes()));
  std::filesystem::path out = ensure_out_dir(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out / "maps", ec);

  CamConfig cam_cfg;
  cam_cfg.resize_first = cfg.flag("cam.resize_first");
  cam_cfg.detach_norm = cfg.flag("cam.detach_norm");
  std::string split = cfg.str("dump.split");
  SplitMaps sm = compute_split_maps(model, ds, split, cam_cfg, true);
  long long limit = cfg.integer("dump.limit");
  std::size_t count = limit > 0 ? std::min<std::size_t>(sm.maps.size(), limit) : sm.maps.size();
  for (std::size_t i = 0; i < count; ++i) dump_map(out / "maps", sm.maps[i]);
  io::write_text_file(out / "resolved.cfg", cfg.resolved_text());
  return "dumped " + std::to_string(count) + " maps under " + (out / "maps").string();
}

namespace {

struct AblateCell {
  std::string param;
  std::string value;
  std::uint64_t seed = 0;
  TrainConfig tc;
};

struct AblateRow {
  std::string param;
  std::string value;
  std::string seed;
  double acc50 = 0.0;
  double v2 = 0.0;
  double pxap_value = 0.0;
};

AblateRow run_cell(const AblateCell& cell, const BackboneSpec& spec, const Dataset& ds,
                   const BoxAccOptions& base_opt, bool quantize) {
  TrainResult tr = train(cell.tc, spec, ds);
  SplitMaps sm = compute_split_maps(tr.model, ds, "test", cell.tc.cam, quantize);
  BoxAccOptions opt = base_opt;
  opt.deltas = {0.3, 0.5, 0.7};
  EvalReport rep = evaluate_maps(sm, ds, opt, false);
  AblateRow row;
  row.param = cell.param;
  row.value = cell.value;
  row.seed = std::to_string(cell.seed);
  row.acc50 = rep.boxes.max_acc[1];
  row.v2 = rep.boxes.v2;
  row.pxap_value = rep.pxap_value;
  return row;
}

}  // namespace

std::string run_ablate(const RunConfig& cfg) {
  std::string study = cfg.str("ablate.study");
  if (study.empty()) throw ConfigError("ablate needs --study");
  Dataset ds = load_configured_dataset(cfg);
  BackboneSpec spec = backbone_from_config(cfg);
  TrainConfig base = train_from_config(cfg);
  auto seeds = cfg.integers("ablate.seeds");
  if (seeds.empty()) throw ConfigError("ablate.seeds is empty");

  std::vector<AblateCell> cells;
  auto add_cell = [&](const std::string& param, const std::string& value, std::uint64_t seed,
                      const TrainConfig& tc) {
    cells.push_back({param, value, seed, tc});
  };

  if (study == "lambda_sweep") {
    std::string vals = cfg.str("ablate.values");
    if (vals.empty()) vals = "0,0.25,0.5,1,2";
    std::vector<double> sweep;
    std::string cur;
    auto push = [&] {
      try {
        sweep.push_back(std::stod(cur));
      } catch (const std::exception&) {
        throw ConfigError("ablate.values wants numbers, got '" + cur + "'");
      }
      cur.clear();
    };
    for (char c : vals) {
      if (c == ',')
        push();
      else
        cur.push_back(c);
    }
    push();
    for (auto seed : seeds) {
      for (double v : sweep) {
        TrainConfig tc = base;
        tc.seed = static_cast<std::uint64_t>(seed);
        tc.stage2_cfg.lambda1 = v;
        add_cell("lambda1", std::to_string(v), tc.seed, tc);
        tc = base;
        tc.seed = static_cast<std::uint64_t>(seed);
        tc.stage2_cfg.lambda2 = v;
        add_cell("lambda2", std::to_string(v), tc.seed, tc);
      }
    }
  } else if (study == "set_size") {
    std::vector<long long> sizes = {2, 3, 4, 5};
    if (!cfg.str("ablate.values").empty()) sizes = cfg.integers("ablate.values");
    int batch = static_cast<int>(cfg.integer("ablate.batch"));
    for (auto seed : seeds) {
      for (long long s : sizes) {
        if (s < 2) throw ConfigError("set_size study wants sizes >= 2");
        TrainConfig tc = base;
        tc.seed = static_cast<std::uint64_t>(seed);
        tc.set_size = static_cast<int>(s);
        tc.n_groups = std::min(ds.num_classes(), std::max(1, batch / tc.set_size));
        add_cell("s", std::to_string(s), tc.seed, tc);
      }
    }
  } else if (study == "intensity") {
    for (auto seed : seeds) {
      TrainConfig tc = base;
      tc.seed = static_cast<std::uint64_t>(seed);
      tc.intensity_aug.reset();
      add_cell("intensity", "off", tc.seed, tc);
      tc.intensity_aug = {0.5, 1.5};
      add_cell("intensity", "on", tc.seed, tc);
    }
  } else if (study == "mask_variant") {
    for (auto seed : seeds) {
      TrainConfig tc = base;
      tc.seed = static_cast<std::uint64_t>(seed);
      tc.mask_variant = MaskVariant::input;
      add_cell("mask_variant", "input", tc.seed, tc);
      tc.mask_variant = MaskVariant::feature;
      add_cell("mask_variant", "feature", tc.seed, tc);
    }
  } else {
    throw ConfigError("unknown ablation study '" + study + "'");
  }
  if (cells.empty()) throw ConfigError("ablation grid is empty");

  BoxAccOptions base_opt = box_options_from_config(cfg);
  bool quantize = cfg.flag("eval.quantize");
  int jobs = thread_budget(static_cast<int>(cfg.integer("ablate.jobs")));

  std::vector<AblateRow> rows(cells.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      rows[i] = run_cell(cells[i], spec, ds, base_opt, quantize);
  } else {
    std::size_t next = 0;
    while (next < cells.size()) {
      std::size_t burst = std::min<std::size_t>(jobs, cells.size() - next);
      std::vector<std::future<AblateRow>> futs;
      for (std::size_t b = 0; b < burst; ++b)
        futs.push_back(std::async(std::launch::async, run_cell, std::cref(cells[next + b]),
                                  std::cref(spec), std::cref(ds), std::cref(base_opt), quantize));
      for (std::size_t b = 0; b < burst; ++b) rows[next + b] = futs[b].get();
      next += burst;
    }
  }

  // Per-cell means across seeds, appended after the raw rows.
  std::map<std::pair<std::string, std::string>, std::vector<const AblateRow*>> by_cell;
  for (const auto& r : rows) by_cell[{r.param, r.value}].push_back(&r);

  std::ostringstream csv;
  csv << "study,param,value,seed,maxboxacc_050,maxboxacc_v2,pxap\n";
  csv.precision(17);
  for (const auto& r : rows)
    csv << study << "," << r.param << "," << r.value << "," << r.seed << "," << r.acc50 << ","
        << r.v2 << "," << r.pxap_value << "\n";
  for (const auto& [key, group] : by_cell) {
    double a = 0, v = 0, p = 0;
    for (const auto* r : group) {
      a += r->acc50;
      v += r->v2;
      p += r->pxap_value;
    }
    double n = static_cast<double>(group.size());
    csv << study << "," << key.first << "," << key.second << ",mean," << a / n << "," << v / n
        << "," << p / n << "\n";
  }

  std::filesystem::path out = ensure_out_dir(cfg);
  auto csv_path = out / ("ablate_" + study + ".csv");
  io::write_text_file(csv_path, csv.str());
  io::write_text_file(out / "resolved.cfg", cfg.resolved_text());
  return "ablation " + study + ": " + std::to_string(cells.size()) + " cells, table " +
         csv_path.string();
}

std::string run_analyze(const RunConfig& cfg) {
  Dataset ds = load_configured_dataset(cfg);
  std::string ckpt = cfg.str("checkpoint");
  if (ckpt.empty()) throw ConfigError("analyze needs --checkpoint");
  Model model = load_checkpoint(ckpt);
  if (model.num_classes != ds.num_classes())
    throw ConfigError("checkpoint covers " + std::to_string(model.num_classes) +
                      " classes, dataset has " + std::to_string(ds.num_classes()));
  std::filesystem::path out = ensure_out_dir(cfg);
  std::string split = cfg.str("analyze.split");
  std::string kind = cfg.str("analyze.kind");
  CamConfig cam_cfg;
  cam_cfg.resize_first = cfg.flag("cam.resize_first");
  cam_cfg.detach_norm = cfg.flag("cam.detach_norm");

  nlohmann::json j;
  j["seed"] = static_cast<std::uint64_t>(cfg.integer("seed"));
  j["config_hash"] = hex64(cfg.hash());
  j["version"] = kVersion;
  j["kind"] = kind;

  if (kind == "dispersion") {
    auto indices = ds.split_indices(split);
    if (indices.empty()) throw ValueError("split '" + split + "' is empty");
    Tape tape;
    Tensor images = gather_images(ds, indices);
    Tensor feats = forward_features(tape, model, images);
    Tensor f_orig = gap(tape, feats);

    std::vector<LocalizationMap> maps;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& item = ds.item(indices[i]);
      Tensor fi = select_image(tape, feats, static_cast<int>(i));
      Tensor raw = compute_cam_raw(tape, fi, model.head_w(), item.class_id);
      LocalizationMap m;
      m.class_id = item.class_id;
      m.values = finalize_map(tape, raw, ds.height(), ds.width(), cam_cfg);
      maps.push_back(std::move(m));
    }
    Tensor masked = mask_image(tape, images, maps);
    Tensor f_masked = gap(tape, forward_features(tape, model, masked));

    int k = model.spec.feature_channels();
    std::vector<std::vector<double>> fm, fo;
    std::vector<int> labels;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const double* m = f_masked.data() + i * k;
      const double* o = f_orig.data() + i * k;
      fm.emplace_back(m, m + k);
      fo.emplace_back(o, o + k);
      labels.push_back(ds.item(indices[i]).class_id);
    }
    Dispersion dm = feature_dispersion(fm, labels, ds.num_classes());
    Dispersion dorig = feature_dispersion(fo, labels, ds.num_classes());
    j["masked"] = {{"mean_std", dm.mean_std}, {"std_of_stds", dm.std_of_stds}};
    j["original"] = {{"mean_std", dorig.mean_std}, {"std_of_stds", dorig.std_of_stds}};
  } else if (kind == "bg_proportion") {
    SplitMaps sm = compute_split_maps(model, ds, split, cam_cfg, cfg.flag("eval.quantize"));
    BoxAccOptions opt = box_options_from_config(cfg);
    opt.deltas = {0.5};
    std::vector<Tensor> maps;
    std::vector<std::vector<BBox>> gts;
    for (std::size_t i = 0; i < sm.maps.size(); ++i) {
      maps.push_back(sm.maps[i].values);
      gts.push_back({ds.item(sm.indices[i]).gt_box});
    }
    double tau_star = max_box_acc(maps, gts, opt).best_tau[0];

    std::ostringstream csv;
    csv << "image_id,bg_proportion\n";
    csv.precision(17);
    int above = 0;
    double mean = 0.0;
    for (std::size_t i = 0; i < sm.maps.size(); ++i) {
      const auto& item = ds.item(sm.indices[i]);
      auto boxes = extract_boxes(sm.maps[i].values, tau_star, opt.connectivity);
      BBox pred{0, 0, 0, 0};
      double best = -1.0;
      for (const auto& b : boxes) {
        double v = iou(b, item.gt_box);
        if (v > best) {
          best = v;
          pred = b;
        }
      }
      double prop = pred.empty() ? 1.0 : bg_proportion(pred, item.mask);
      csv << item.image_id << "," << prop << "\n";
      mean += prop;
      if (prop > 0.1) ++above;
    }
    mean /= static_cast<double>(sm.maps.size());
    j["tau"] = tau_star;
    j["mean"] = mean;
    j["fraction_above_0.1"] = static_cast<double>(above) / static_cast<double>(sm.maps.size());
    io::write_text_file(out / "bg_proportion.csv", csv.str());
  } else {
    throw ConfigError("analyze.kind must be dispersion or bg_proportion, got '" + kind + "'");
  }

  io::write_text_file(out / "analyze.json", j.dump(2) + "\n");
  io::write_text_file(out / "resolved.cfg", cfg.resolved_text());
  return "analyze " + kind + ": report " + (out / "analyze.json").string();
}

namespace {

// Small self-check of the autodiff engine against central differences.
struct GradProbe {
  std::string name;
  double max_rel_err = 0.0;
};

double rel_err(double a, double b) {
  double denom = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) / denom;
}

template <class Fn>
GradProbe probe_op(const std::string& name, Tensor x, Fn&& build) {
  Tape tape;
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor loss = build(tape, x);
  tape.backward(loss);
  std::vector<double> analytic = x.grad();

  GradProbe result{name, 0.0};
  const double h = 1e-4;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    Tensor probe = x.clone();
    probe.set_requires_grad(false);
    probe[i] = keep + h;
    Tape t1;
    double up = build(t1, probe).item();
    probe[i] = keep - h;
    Tape t2;
    double down = build(t2, probe).item();
    double numeric = (up - down) / (2 * h);
    result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic[i], numeric));
  }
  return result;
}

}  // namespace

std::string run_check_grad() {
  Rng rng(20240817u);
  auto rand_tensor = [&](Shape shape, double lo, double hi) {
    Tensor t(shape);
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
  };

  std::vector<GradProbe> probes;

  {
    Tensor w = rand_tensor({3, 2, 3, 3}, -0.5, 0.5);
    Tensor b = rand_tensor({3}, -0.2, 0.2);
    Tensor target = rand_tensor({1, 3, 3, 3}, -1, 1);
    probes.push_back(probe_op("conv2d", rand_tensor({1, 2, 5, 5}, -1, 1),
                              [&](Tape& tape, const Tensor& x) {
                                Tensor y = conv2d(tape, x, w, b, 2, 1);
                                return sq_l2(tape, y, target);
                              }));
  }
  {
    Tensor x = rand_tensor({2, 3, 4, 4}, 0.2, 1.0);  // away from the relu kink
    for (double& v : x.values())
      if (rng.uniform() < 0.5) v = -v;
    Tensor target = rand_tensor({2, 3, 4, 4}, -1, 1);
    probes.push_back(probe_op("relu", x, [&](Tape& tape, const Tensor& t) {
      return sq_l2(tape, relu(tape, t), target);
    }));
  }
  {
    Tensor target = rand_tensor({2, 3}, -1, 1);
    probes.push_back(probe_op("gap", rand_tensor({2, 3, 4, 4}, -1, 1),
                              [&](Tape& tape, const Tensor& x) {
                                return sq_l2(tape, gap(tape, x), target);
                              }));
  }
  {
    Tensor w = rand_tensor({4, 3}, -0.7, 0.7);
    Tensor b = rand_tensor({4}, -0.3, 0.3);
    Tensor target = rand_tensor({2, 4}, -1, 1);
    probes.push_back(probe_op("linear", rand_tensor({2, 3}, -1, 1),
                              [&](Tape& tape, const Tensor& x) {
                                return sq_l2(tape, linear(tape, x, w, b), target);
                              }));
  }
  {
    Tensor x = rand_tensor({2, 3, 4, 4}, -1, 1);
    Tensor target = rand_tensor({2, 3, 4, 4}, -1, 1);
    probes.push_back(probe_op("mul_broadcast", rand_tensor({2, 1, 4, 4}, 0.1, 0.9),
                              [&](Tape& tape, const Tensor& m) {
                                return sq_l2(tape, mul_broadcast(tape, x, m), target);
                              }));
  }
  {
    // well separated values keep the extrema stable under the probe step
    Tensor x({3, 3}, {0.05, 0.9, 0.3, 0.62, 0.18, 0.76, 0.41, 0.02, 0.55});
    Tensor target = rand_tensor({3, 3}, 0, 1);
    probes.push_back(probe_op("minmax_normalize", x, [&](Tape& tape, const Tensor& t) {
      return sq_l2(tape, minmax_normalize(tape, t), target);
    }));
  }
  {
    Tensor target = rand_tensor({5, 7}, -1, 1);
    probes.push_back(probe_op("bilinear_resize", rand_tensor({3, 4}, -1, 1),
                              [&](Tape& tape, const Tensor& x) {
                                return sq_l2(tape, bilinear_resize(tape, x, 5, 7), target);
                              }));
  }
  {
    std::vector<int> labels = {1, 0, 2};
    probes.push_back(probe_op("softmax_cross_entropy", rand_tensor({3, 4}, -2, 2),
                              [&](Tape& tape, const Tensor& x) {
                                return softmax_cross_entropy(tape, x, labels);
                              }));
  }
  {
    Tensor b = rand_tensor({2, 5}, -1, 1);
    probes.push_back(probe_op("sq_l2", rand_tensor({2, 5}, -1, 1),
                              [&](Tape& tape, const Tensor& a) { return sq_l2(tape, a, b); }));
  }
  {
    Tensor w = rand_tensor({3, 4}, -0.8, 0.8);
    Tensor target = rand_tensor({4, 4}, -1, 1);
    probes.push_back(probe_op("compute_cam_raw", rand_tensor({4, 4, 4}, -1, 1),
                              [&](Tape& tape, const Tensor& f) {
                                Tensor raw = compute_cam_raw(tape, f, w, 1);
                                return sq_l2(tape, raw, target);
                              }));
  }
  {
    // masked pipeline end to end, gradient taken in the head weights
    BackboneSpec spec;
    spec.layers.push_back({1, 2, 3, 1, 1});
    Model model = build_model(spec, 2, 7);
    Tensor images = rand_tensor({2, 1, 4, 4}, 0.1, 1.0);
    std::vector<int> labels = {0, 1};
    Tensor w0 = model.params.at("head.w").clone();
    probes.push_back(probe_op("stage2_loss", w0, [&](Tape& tape, const Tensor& w) {
      Tensor feats = forward_features(tape, model, images);
      std::vector<LocalizationMap> maps;
      for (int i = 0; i < 2; ++i) {
        Tensor fi = select_image(tape, feats, i);
        Tensor raw = compute_cam_raw(tape, fi, w, labels[i]);
        LocalizationMap m;
        m.class_id = labels[i];
        m.values = finalize_map(tape, raw, 4, 4, CamConfig{});
        maps.push_back(std::move(m));
      }
      Tensor masked = mask_image(tape, images, maps);
      Tensor f = gap(tape, forward_features(tape, model, masked));
      Tensor fo = gap(tape, feats);
      std::vector<std::pair<Tensor, Tensor>> pairs;
      for (int i = 0; i < 2; ++i) pairs.emplace_back(row(tape, f, i), row(tape, fo, i));
      return frr(tape, pairs);
    }));
  }

  std::ostringstream os;
  os << "op                      max_rel_err   status\n";
  bool all_ok = true;
  for (const auto& p : probes) {
    bool ok = p.max_rel_err <= 1e-4;
    all_ok = all_ok && ok;
    os << p.name;
    for (std::size_t i = p.name.size(); i < 24; ++i) os << ' ';
    os.precision(3);
    os << std::scientific << p.max_rel_err << "   " << (ok ? "ok" : "FAIL") << "\n";
  }
  if (!all_ok) throw Error("gradient check failed:\n" + os.str());
  os << "all gradients match central differences (tolerance 1e-4)\n";
  return os.str();
}

}  // namespace mmc

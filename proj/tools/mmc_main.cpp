#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "mmc/errors.hpp"
#include "mmc/pipeline.hpp"

namespace {

// Flags are staged during parsing and applied after the config file, so the
// precedence is flag > file > default.
struct Staged {
  std::vector<std::pair<std::string, std::string>> kv;

  void stage(const std::string& key, const std::string& value) { kv.emplace_back(key, value); }
};

void opt(CLI::App* cmd, Staged& st, const std::string& flag, const std::string& key,
         const std::string& desc) {
  cmd->add_option_function<std::string>(
      flag, [&st, key](const std::string& v) { st.stage(key, v); }, desc);
}

void onoff(CLI::App* cmd, Staged& st, const std::string& flag, const std::string& key,
           const std::string& value, const std::string& desc) {
  cmd->add_flag_function(
      flag, [&st, key, value](std::int64_t) { st.stage(key, value); }, desc);
}

void add_model_opts(CLI::App* cmd, Staged& st) {
  opt(cmd, st, "--channels", "model.channels", "conv channels per layer, comma separated");
  opt(cmd, st, "--strides", "model.strides", "conv strides per layer, comma separated");
  opt(cmd, st, "--kernel", "model.kernel", "conv kernel size");
  onoff(cmd, st, "--stride-mod", "model.stride_mod", "1",
        "stride 1 in the last downsampling conv (larger maps)");
}

void add_cam_opts(CLI::App* cmd, Staged& st) {
  onoff(cmd, st, "--resize-first", "cam.resize_first", "1",
        "upsample the raw map before normalizing");
  onoff(cmd, st, "--detach-norm", "cam.detach_norm", "1",
        "treat normalization extrema as constants in backward");
}

void add_train_opts(CLI::App* cmd, Staged& st) {
  opt(cmd, st, "--dataset", "dataset", "dataset directory");
  opt(cmd, st, "--epochs", "train.epochs", "training epochs");
  opt(cmd, st, "--batches-per-epoch", "train.batches_per_epoch", "0 = derive from split size");
  opt(cmd, st, "--lr1", "train.lr1", "stage one learning rate");
  opt(cmd, st, "--lr2", "train.lr2", "stage two learning rate (-1: reuse lr1)");
  opt(cmd, st, "--momentum", "train.momentum", "SGD momentum");
  opt(cmd, st, "--n", "train.n", "classes per set batch");
  opt(cmd, st, "--s", "train.s", "images per class in a set batch");
  opt(cmd, st, "--lambda1", "train.lambda1", "common region weight");
  opt(cmd, st, "--lambda2", "train.lambda2", "full region weight");
  onoff(cmd, st, "--stage1-only", "train.stage2", "0", "skip the regularization stage");
  opt(cmd, st, "--mask-variant", "train.mask_variant", "input or feature");
  opt(cmd, st, "--intensity", "train.intensity", "stage one intensity range lo,hi");
  add_model_opts(cmd, st);
  add_cam_opts(cmd, st);
}

void add_eval_opts(CLI::App* cmd, Staged& st) {
  opt(cmd, st, "--dataset", "dataset", "dataset directory");
  opt(cmd, st, "--checkpoint", "checkpoint", "model checkpoint");
  opt(cmd, st, "--split", "eval.split", "dataset split to score");
  opt(cmd, st, "--grid", "eval.grid", "threshold count");
  opt(cmd, st, "--deltas", "eval.deltas", "IoU thresholds, comma separated");
  opt(cmd, st, "--connectivity", "eval.connectivity", "component connectivity, 4 or 8");
  onoff(cmd, st, "--largest-only", "eval.largest_only", "1", "keep only the largest component");
  onoff(cmd, st, "--pxap-per-image", "eval.pxap_per_image", "1",
        "average per-image AP instead of pooling pixels");
  onoff(cmd, st, "--no-quantize", "eval.quantize", "0",
        "skip snapping maps onto the 16-bit export grid");
  onoff(cmd, st, "--dump-maps", "eval.dump_maps", "1", "write the scored heatmaps as PGM");
  opt(cmd, st, "--maps-dir", "eval.maps_dir", "score dumped heatmaps instead of a checkpoint");
  opt(cmd, st, "--classifier", "eval.classifier", "classifier checkpoint for top-k localization");
  opt(cmd, st, "--topk", "eval.topk", "top-k localization (1 or 5, 0 = off)");
  onoff(cmd, st, "--use-predicted-class", "eval.use_predicted_class", "1",
        "box from the predicted class map instead of the ground-truth class");
  add_cam_opts(cmd, st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MinMaxCAM weakly supervised localization toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  Staged st;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option_function<std::string>(
      "--seed", [&st](const std::string& v) { st.stage("seed", v); }, "run seed");
  app.add_option_function<std::string>(
      "--out", [&st](const std::string& v) { st.stage("out", v); }, "output directory");

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  opt(gen, st, "--classes", "gen.classes", "number of classes");
  opt(gen, st, "--size", "gen.size", "image extent");
  opt(gen, st, "--train", "gen.train", "train images per class");
  opt(gen, st, "--val", "gen.val", "val images per class");
  opt(gen, st, "--test", "gen.test", "test images per class");
  opt(gen, st, "--bg", "gen.bg", "background mode: varied or common");
  onoff(gen, st, "--marker", "gen.marker", "1", "class-unique marker patch inside the object");
  onoff(gen, st, "--no-marker", "gen.marker", "0", "disable the marker patch");
  opt(gen, st, "--scale", "gen.scale", "object scale range lo,hi");

  CLI::App* train_cmd = app.add_subcommand("train", "two-stage training");
  add_train_opts(train_cmd, st);

  CLI::App* eval_cmd = app.add_subcommand("eval", "score localization maps");
  add_eval_opts(eval_cmd, st);

  CLI::App* dump = app.add_subcommand("dump-cam", "write heatmaps for a split");
  opt(dump, st, "--dataset", "dataset", "dataset directory");
  opt(dump, st, "--checkpoint", "checkpoint", "model checkpoint");
  opt(dump, st, "--split", "dump.split", "dataset split");
  opt(dump, st, "--limit", "dump.limit", "max maps to write, 0 = all");
  add_cam_opts(dump, st);

  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation study grid");
  opt(ablate, st, "--study", "ablate.study",
      "lambda_sweep, set_size, intensity, or mask_variant");
  opt(ablate, st, "--seeds", "ablate.seeds", "seeds, comma separated");
  opt(ablate, st, "--values", "ablate.values", "study-specific value grid");
  opt(ablate, st, "--batch", "ablate.batch", "batch size held fixed by the set_size study");
  opt(ablate, st, "--jobs", "ablate.jobs", "parallel cells (MMC_THREADS caps this)");
  add_train_opts(ablate, st);

  CLI::App* analyze = app.add_subcommand("analyze", "diagnostic statistics");
  opt(analyze, st, "--dataset", "dataset", "dataset directory");
  opt(analyze, st, "--checkpoint", "checkpoint", "model checkpoint");
  opt(analyze, st, "--kind", "analyze.kind", "dispersion or bg_proportion");
  opt(analyze, st, "--split", "analyze.split", "dataset split");
  add_cam_opts(analyze, st);

  CLI::App* check = app.add_subcommand("check-grad", "finite difference self check");

  CLI11_PARSE(app, argc, argv);

  try {
    mmc::RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& [key, value] : st.kv) cfg.set(key, value, mmc::RunConfig::Source::flag);

    std::string summary;
    if (gen->parsed()) summary = mmc::run_gen(cfg);
    else if (train_cmd->parsed()) summary = mmc::run_train(cfg);
    else if (eval_cmd->parsed()) summary = mmc::run_eval(cfg);
    else if (dump->parsed()) summary = mmc::run_dump_cam(cfg);
    else if (ablate->parsed()) summary = mmc::run_ablate(cfg);
    else if (analyze->parsed()) summary = mmc::run_analyze(cfg);
    else if (check->parsed()) summary = mmc::run_check_grad();
    std::printf("%s\n", summary.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

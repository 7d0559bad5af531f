#include "mmc/minmax.hpp"

#include <chrono>
#include <set>
#include <sstream>

#include "mmc/errors.hpp"
#include "mmc/ops.hpp"
#include "mmc/rng.hpp"

namespace mmc {

void SetBatch::validate() const {
  if (n_groups < 1 || set_size < 1) throw ValueError("set batch needs n >= 1 and s >= 1");
  if (images.rank() != 4) throw ShapeError("set batch images must be NCHW");
  if (images.dim(0) != n_groups * set_size)
    throw ShapeError("set batch has " + std::to_string(images.dim(0)) + " images, expected " +
                     std::to_string(n_groups * set_size));
  if (static_cast<int>(labels.size()) != n_groups * set_size)
    throw ShapeError("set batch label count mismatch");
  std::set<int> group_labels;
  for (int g = 0; g < n_groups; ++g) {
    int l = labels[g * set_size];
    for (int s = 1; s < set_size; ++s)
      if (labels[g * set_size + s] != l)
        throw ValueError("set batch group " + std::to_string(g) + " mixes classes");
    if (!group_labels.insert(l).second)
      throw ValueError("set batch repeats class " + std::to_string(l));
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batches_per_epoch < 0) throw ConfigError("batches_per_epoch must be >= 0");
  if (lr1 < 0 || momentum < 0) throw ConfigError("lr1 and momentum must be >= 0");
  if (set_size < 1 || n_groups < 1) throw ConfigError("need set_size >= 1 and n_groups >= 1");
  if (stage2_cfg.lambda1 < 0 || stage2_cfg.lambda2 < 0)
    throw ConfigError("lambda weights must be >= 0");
  if (intensity_aug) {
    auto [lo, hi] = *intensity_aug;
    if (!(lo <= 1.0 && 1.0 <= hi))
      throw ConfigError("intensity range must bracket 1.0");
  }
}

SetBatch sample_set_batch(const Dataset& ds, const std::string& split, int n_groups, int set_size,
                          Rng& rng) {
  if (n_groups < 1 || set_size < 1)
    throw ValueError("sample_set_batch needs n >= 1 and s >= 1");
  auto per_class = ds.class_indices(split);
  std::vector<int> usable;
  for (int c = 0; c < ds.num_classes(); ++c)
    if (!per_class[c].empty()) usable.push_back(c);
  if (static_cast<int>(usable.size()) < n_groups)
    throw ValueError("split has " + std::to_string(usable.size()) + " usable classes, need " +
                     std::to_string(n_groups));

  std::vector<int> picks;
  std::vector<int> labels;
  for (int ci : rng.sample_without_replacement(static_cast<int>(usable.size()), n_groups)) {
    int c = usable[ci];
    const auto& pool = per_class[c];
    if (static_cast<int>(pool.size()) >= set_size) {
      for (int pi : rng.sample_without_replacement(static_cast<int>(pool.size()), set_size))
        picks.push_back(pool[pi]);
    } else {
      for (int s = 0; s < set_size; ++s)
        picks.push_back(pool[rng.uniform_int(static_cast<int>(pool.size()))]);
    }
    for (int s = 0; s < set_size; ++s) labels.push_back(c);
  }

  SetBatch batch;
  batch.images = gather_images(ds, picks);
  batch.labels = std::move(labels);
  batch.n_groups = n_groups;
  batch.set_size = set_size;
  batch.validate();
  return batch;
}

Tensor crr(Tape& tape, const std::vector<Tensor>& features) {
  int s = static_cast<int>(features.size());
  if (s < 2) throw ValueError("crr needs at least 2 features, got " + std::to_string(s));
  Tensor acc;
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      if (i == j) continue;
      Tensor d = sq_l2(tape, features[i], features[j]);
      acc = acc.defined() ? add(tape, acc, d) : d;
    }
  return scale(tape, acc, 1.0 / (static_cast<double>(s) * (s - 1)));
}

Tensor frr(Tape& tape, const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  if (pairs.empty()) throw ValueError("frr needs at least one pair");
  Tensor acc;
  for (const auto& [f, f_o] : pairs) {
    Tensor d = sq_l2(tape, f, f_o);
    acc = acc.defined() ? add(tape, acc, d) : d;
  }
  return scale(tape, acc, 1.0 / static_cast<double>(pairs.size()));
}

double stage1_step(Model& model, const SetBatch& batch, SgdState& state, double lr1,
                   double momentum) {
  batch.validate();
  model.params.zero_grad();
  Tape tape;
  Tensor logits = classify(tape, model, batch.images);
  Tensor loss = softmax_cross_entropy(tape, logits, batch.labels);
  tape.backward(loss);
  sgd_step(model.params, state, lr1, momentum);
  return loss.item();
}

StageTwoStats stage2_step(Model& model, const SetBatch& batch, const StageTwoConfig& cfg,
                          MaskVariant variant, const CamConfig& cam_cfg, SgdState& state,
                          double momentum) {
  batch.validate();
  if (batch.set_size < 2 && cfg.lambda1 > 0)
    throw ValueError("common region loss needs set_size >= 2");
  if (cfg.lambda1 < 0 || cfg.lambda2 < 0) throw ValueError("lambda weights must be >= 0");
  if (cfg.lr2 < 0) throw ValueError("stage two learning rate is unset");

  // Freeze everything but the head weights for the duration of the step.
  std::vector<std::pair<std::string, bool>> saved;
  for (const auto& name : model.params.names())
    saved.emplace_back(name, model.params.trainable(name));
  model.params.set_trainable_prefix("backbone.", false);
  model.params.set_trainable("head.b", false);
  model.params.set_trainable("head.w", true);

  StageTwoStats stats;
  try {
    model.params.zero_grad();
    Tape tape;
    int total = batch.n_groups * batch.set_size;
    int img_h = batch.images.dim(2), img_w = batch.images.dim(3);

    // Original features: frozen backbone on raw images, constants on the tape.
    Tensor feats = forward_features(tape, model, batch.images);
    Tensor f_orig = gap(tape, feats);

    std::vector<LocalizationMap> maps;
    maps.reserve(total);
    for (int i = 0; i < total; ++i) {
      Tensor fi = select_image(tape, feats, i);
      Tensor raw = compute_cam_raw(tape, fi, model.params.at("head.w"), batch.labels[i]);
      LocalizationMap m;
      m.class_id = batch.labels[i];
      m.values = finalize_map(tape, raw, img_h, img_w, cam_cfg);
      maps.push_back(std::move(m));
    }

    Tensor f_masked;
    if (variant == MaskVariant::input) {
      Tensor masked = mask_image(tape, batch.images, maps);
      f_masked = gap(tape, forward_features(tape, model, masked));
    } else {
      std::vector<LocalizationMap> feat_maps = maps;
      f_masked = mask_features(tape, feats, feat_maps);
    }

    Tensor crr_total;
    if (batch.set_size >= 2) {
      for (int g = 0; g < batch.n_groups; ++g) {
        std::vector<Tensor> group;
        for (int s = 0; s < batch.set_size; ++s)
          group.push_back(row(tape, f_masked, g * batch.set_size + s));
        Tensor c = crr(tape, group);
        crr_total = crr_total.defined() ? add(tape, crr_total, c) : c;
      }
      crr_total = scale(tape, crr_total, 1.0 / batch.n_groups);
      stats.crr_value = crr_total.item();
    }

    std::vector<std::pair<Tensor, Tensor>> pairs;
    pairs.reserve(total);
    for (int i = 0; i < total; ++i)
      pairs.emplace_back(row(tape, f_masked, i), row(tape, f_orig, i));
    Tensor frr_total = frr(tape, pairs);
    stats.frr_value = frr_total.item();

    Tensor loss = scale(tape, frr_total, cfg.lambda2);
    if (crr_total.defined())
      loss = add(tape, loss, scale(tape, crr_total, cfg.lambda1));
    tape.backward(loss);
    sgd_step(model.params, state, cfg.lr2, momentum);
  } catch (...) {
    for (const auto& [name, trainable] : saved) model.params.set_trainable(name, trainable);
    throw;
  }

  for (const auto& [name, trainable] : saved) model.params.set_trainable(name, trainable);
  return stats;
}

TrainResult train(const TrainConfig& cfg, const BackboneSpec& spec, const Dataset& ds,
                  const std::string& split) {
  cfg.validate();
  StageTwoConfig s2 = cfg.stage2_cfg;
  if (s2.lr2 < 0) s2.lr2 = cfg.lr1;
  if (cfg.stage2 && cfg.set_size < 2 && s2.lambda1 > 0)
    throw ConfigError("common region loss needs set_size >= 2");

  int train_count = static_cast<int>(ds.split_indices(split).size());
  if (train_count == 0) throw ValueError("split '" + split + "' is empty");
  int per_epoch = cfg.batches_per_epoch;
  if (per_epoch == 0)
    per_epoch = std::max(1, train_count / (cfg.n_groups * cfg.set_size));

  TrainResult out;
  out.model = build_model(spec, ds.num_classes(), cfg.seed);
  Rng batch_rng = derive_rng(cfg.seed, {0xBA7C4u});
  Rng aug_rng = derive_rng(cfg.seed, {0xA46u});
  SgdState state1, state2;

  auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int b = 0; b < per_epoch; ++b) {
      SetBatch batch = sample_set_batch(ds, split, cfg.n_groups, cfg.set_size, batch_rng);

      TrainLogRow row;
      row.epoch = epoch;
      row.batch = b;
      if (cfg.intensity_aug) {
        auto [lo, hi] = *cfg.intensity_aug;
        SetBatch aug = batch;
        aug.images = batch.images.clone();
        auto& v = aug.images.values();
        std::size_t plane = v.size() / aug.images.dim(0);
        for (int i = 0; i < aug.images.dim(0); ++i) {
          double f = aug_rng.uniform(lo, hi);
          for (std::size_t p = 0; p < plane; ++p) v[i * plane + p] *= f;
        }
        row.ce = stage1_step(out.model, aug, state1, cfg.lr1, cfg.momentum);
      } else {
        row.ce = stage1_step(out.model, batch, state1, cfg.lr1, cfg.momentum);
      }

      if (cfg.stage2) {
        StageTwoStats st = stage2_step(out.model, batch, s2, cfg.mask_variant, cfg.cam, state2,
                                       cfg.momentum);
        row.crr = st.crr_value;
        row.frr = st.frr_value;
      }
      row.wall_ms = static_cast<long>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                          std::chrono::steady_clock::now() - t0)
                                          .count());
      out.log.push_back(row);
    }
  }
  return out;
}

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os << "epoch,batch,ce,crr,frr,wall_ms\n";
  os.precision(17);
  for (const auto& r : log)
    os << r.epoch << "," << r.batch << "," << r.ce << "," << r.crr << "," << r.frr << ","
       << r.wall_ms << "\n";
  return os.str();
}

}  // namespace mmc

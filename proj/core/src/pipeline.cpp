#include "rvit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "rvit/saliency.hpp"

namespace rvit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed stream tags.
constexpr uint64_t kTagModelInit = 0x20;
constexpr uint64_t kTagDetShuffle = 0x101;
constexpr uint64_t kTagDetAttack = 0x102;
constexpr uint64_t kTagDetHeldout = 0x103;
constexpr uint64_t kTagPreShuffle = 0x201;
constexpr uint64_t kTagPreAttack = 0x202;
constexpr uint64_t kTagPreMask = 0x203;
constexpr uint64_t kTagPreAug = 0x204;
constexpr uint64_t kTagFtShuffle = 0x301;
constexpr uint64_t kTagFtAttack = 0x302;
constexpr uint64_t kTagFtMask = 0x303;
constexpr uint64_t kTagEvalMask = 0x401;
constexpr uint64_t kTagEvalAttack = 0x402;
constexpr uint64_t kTagEvalAttackMask = 0x403;
constexpr uint64_t kTagSupShuffle = 0x501;
constexpr uint64_t kTagSupAug = 0x502;
constexpr uint64_t kTagExportAttack = 0x601;

float stage_scale(const TrainConfig& cfg) {
  return cfg.lr_batch_scaling ? static_cast<float>(cfg.batch_size) / 256.0f : 1.0f;
}

AdvConfig one_step_cfg(const TrainConfig& cfg) {
  AdvConfig a;
  a.epsilon = cfg.epsilon;
  a.steps = 1;
  a.targeted = true;
  a.descend_to_target = cfg.descend_to_target;
  return a;
}

void check_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw DivergenceError(cat(where, ": loss is not finite (", v, ")"));
}

}  // namespace

Models build_models(const TrainConfig& cfg, const DatasetManifest& manifest) {
  TrainConfig c = cfg;
  c.detector_shape.patch = c.patch;
  c.encoder_shape.patch = c.patch;
  c.decoder_shape.patch = c.patch;
  c.probe_shape.patch = c.patch;

  Rng rng(derive_seed(cfg.seed, kTagModelInit));
  Models m{
      ViTClassifier::make(manifest.height, manifest.width, manifest.channels, manifest.classes, c.probe_shape,
                          cfg.probe_head_hidden, rng),
      DetectorModel::make(manifest.height, manifest.width, manifest.channels, c.detector_shape,
                          cfg.detector_head_hidden, rng),
      ClassifierModel::make(manifest.height, manifest.width, manifest.channels, manifest.classes,
                            c.encoder_shape, c.decoder_shape, cfg.classifier_head_hidden, rng),
  };
  return m;
}

NamedParams collect_models(const Models& m) {
  NamedParams p;
  m.probe.collect("probe", p);
  m.detector.collect("detector", p);
  m.classifier.collect("classifier", p);
  return p;
}

void save_models(const std::string& path, const Models& m, const TrainConfig& cfg) {
  save_checkpoint(path, collect_models(m), cfg);
}

Models load_models(const Checkpoint& ckpt, const DatasetManifest& manifest) {
  Models m = build_models(ckpt.config, manifest);
  NamedParams p = collect_models(m);
  restore_params(ckpt.archive, p);
  return m;
}

Tensor augment_image(const Tensor& image, int pad, bool flip, Rng& rng) {
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const bool do_flip = flip && rng.coin();
  int dy = 0, dx = 0;
  if (pad > 0) {
    dy = rng.uniform_int(0, 2 * pad);
    dx = rng.uniform_int(0, 2 * pad);
  }
  Tensor out({h, w, c});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sy = y + dy - pad;
      int sx = x + dx - pad;
      if (do_flip && sx >= 0 && sx < w) sx = w - 1 - sx;
      for (int ch = 0; ch < c; ++ch) {
        float v = 0.0f;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w) v = image.data()[(sy * w + sx) * c + ch];
        out.data()[(y * w + x) * c + ch] = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detector training
// ---------------------------------------------------------------------------

DetectorTrainer::DetectorTrainer(Models& models, const DatasetPair& data, const TrainConfig& cfg,
                                 const PipelineOptions& opt)
    : models_(&models), data_(&data), cfg_(cfg), opt_(opt) {
  lambda_ = opt.lambda_override >= 0.0f ? opt.lambda_override : cfg.lambda;
  models_->detector.use_gb = opt.detector_use_gb;
  models_->detector.use_bias = opt.detector_use_bias;

  NamedParams p;
  models_->detector.collect("detector", p);
  adam_ = std::make_unique<AdamW>(p.tensors(), default_decay_mask(p),
                                  AdamWConfig{cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});
  sched_ = LrSchedule{cfg.detector_stage.base_lr, cfg.detector_stage.warmup_epochs, cfg.detector_stage.epochs,
                      stage_scale(cfg)};

  if (models_->detector.use_gb) {
    gb_cache_.reserve(data.train.size());
    for (const Tensor& x : data.train.images) {
      gb_cache_.push_back(guided_backprop(models_->probe, x).x_prime);
    }
  }
}

DetectorEpochStats DetectorTrainer::run_epoch(int epoch) {
  const Dataset& train = data_->train;
  const int b = cfg_.batch_size / 2;
  const int steps = std::max<int>(1, static_cast<int>(train.size()) / b);
  std::vector<int> order = shuffled_indices(train.size(), derive_seed(cfg_.seed, kTagDetShuffle), epoch);
  Rng attack_rng(derive_seed(cfg_.seed, kTagDetAttack, static_cast<uint64_t>(epoch)));
  const AdvConfig acfg = one_step_cfg(cfg_);

  NamedParams p;
  models_->detector.collect("detector", p);

  DetectorEpochStats stats;
  stats.epoch = epoch;
  int correct = 0, total = 0;

  for (int step = 0; step < steps; ++step) {
    Tape tape;
    for (auto& [name, t] : p.items) tape.watch(t);

    std::vector<Tensor> logit_rows, z_rows;
    std::vector<int> y_det;
    std::vector<Tensor> clean_imgs, adv_imgs;
    std::vector<int> batch_idx;
    for (int i = 0; i < b; ++i) {
      batch_idx.push_back(order[static_cast<size_t>((step * b + i) % train.size())]);
    }
    for (int idx : batch_idx) clean_imgs.push_back(train.images[static_cast<size_t>(idx)]);
    for (int idx : batch_idx) {
      adv_imgs.push_back(fgsm_ll(models_->probe, train.images[static_cast<size_t>(idx)], acfg, attack_rng).x_adv);
    }

    auto feed = [&](const Tensor& img, const Tensor* gb, int label) {
      DetectorOutput out = detector_forward(tape, models_->detector, img, models_->probe, gb);
      logit_rows.push_back(tape.reshape(out.logits, {1, 2}));
      z_rows.push_back(tape.reshape(out.z, {1, models_->detector.shape.hidden}));
      y_det.push_back(label);
      const int pred = out.logits.data()[1] > out.logits.data()[0] ? 1 : 0;
      correct += (pred == det_label_to_class(label)) ? 1 : 0;
      ++total;
    };
    for (int i = 0; i < b; ++i) {
      const Tensor* gb = models_->detector.use_gb ? &gb_cache_[static_cast<size_t>(batch_idx[static_cast<size_t>(i)])]
                                                  : nullptr;
      feed(clean_imgs[static_cast<size_t>(i)], gb, +1);
    }
    for (int i = 0; i < b; ++i) feed(adv_imgs[static_cast<size_t>(i)], nullptr, -1);

    Tensor logits = tape.concat(logit_rows, 0);
    Tensor z = tape.concat(z_rows, 0);
    DetectorLossParts parts;
    Tensor loss = detector_loss(tape, logits, y_det, z, lambda_, cfg_.tau_snn, &parts);
    check_finite(loss.scalar(), cat("detector epoch ", epoch));
    GradMap grads = tape.backward(loss);
    clip_grad_norm(grads, 1.0);
    adam_->step(grads, sched_.at(epoch + static_cast<double>(step) / steps));

    stats.ce += parts.ce;
    stats.snn += parts.snn;
  }
  stats.ce /= steps;
  stats.snn /= steps;
  stats.train_acc = total > 0 ? static_cast<double>(correct) / total : 0.0;
  return stats;
}

float DetectorTrainer::heldout_accuracy(int max_items) const {
  const Dataset& test = data_->test;
  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(test.size()))
                              : static_cast<int>(test.size());
  const AdvConfig acfg = one_step_cfg(cfg_);
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const Tensor& x = test.images[static_cast<size_t>(i)];
    Rng rng(derive_seed(cfg_.seed, kTagDetHeldout, static_cast<uint64_t>(i)));
    {
      Tape tape;
      DetectorOutput out = detector_forward(tape, models_->detector, x, models_->probe);
      if (out.logits.data()[1] > out.logits.data()[0]) ++correct;
    }
    {
      Tensor x_adv = fgsm_ll(models_->probe, x, acfg, rng).x_adv;
      Tape tape;
      DetectorOutput out = detector_forward(tape, models_->detector, x_adv, models_->probe);
      if (out.logits.data()[0] >= out.logits.data()[1]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(2 * n);
}

// ---------------------------------------------------------------------------
// Classifier pretraining
// ---------------------------------------------------------------------------

ClassifierPretrainer::ClassifierPretrainer(Models& models, const DatasetPair& data, const TrainConfig& cfg,
                                           const PipelineOptions& opt)
    : models_(&models), data_(&data), cfg_(cfg) {
  omega_ = opt.omega_override >= 0.0f ? opt.omega_override : cfg.omega;
  rec_target_ = cfg.rec_target == "all" ? RecTarget::all : RecTarget::masked;
  NamedParams p;
  models_->classifier.collect_frozen("classifier", p);
  adam_ = std::make_unique<AdamW>(p.tensors(), default_decay_mask(p),
                                  AdamWConfig{cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});
  sched_ = LrSchedule{cfg.pretrain_stage.base_lr, cfg.pretrain_stage.warmup_epochs, cfg.pretrain_stage.epochs,
                      stage_scale(cfg)};
}

PretrainEpochStats ClassifierPretrainer::run_epoch(int epoch) {
  const Dataset& train = data_->train;
  const int b = cfg_.batch_size / 2;  // pairs per batch; the batch holds 2B samples
  const int steps = std::max<int>(1, static_cast<int>(train.size()) / b);
  std::vector<int> order = shuffled_indices(train.size(), derive_seed(cfg_.seed, kTagPreShuffle), epoch);
  Rng attack_rng(derive_seed(cfg_.seed, kTagPreAttack, static_cast<uint64_t>(epoch)));
  Rng mask_rng(derive_seed(cfg_.seed, kTagPreMask, static_cast<uint64_t>(epoch)));
  Rng aug_rng(derive_seed(cfg_.seed, kTagPreAug, static_cast<uint64_t>(epoch)));
  const AdvConfig acfg = one_step_cfg(cfg_);
  const int patches = models_->classifier.patch_count();

  NamedParams p;
  models_->classifier.collect_frozen("classifier", p);

  PretrainEpochStats stats;
  stats.epoch = epoch;

  for (int step = 0; step < steps; ++step) {
    std::vector<PretrainItem> batch;
    batch.reserve(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) {
      const int idx = order[static_cast<size_t>((step * b + i) % train.size())];
      const Tensor& x = train.images[static_cast<size_t>(idx)];
      PretrainItem item;
      item.x_cln = augment_image(x, cfg_.aug_pad, cfg_.aug_flip, aug_rng);
      item.x_adv = fgsm_ll(models_->probe, x, acfg, attack_rng).x_adv;
      item.mask = sample_mask(patches, cfg_.mask_ratio_pretrain, mask_rng);
      batch.push_back(std::move(item));
    }

    Tape tape;
    for (auto& [name, t] : p.items) tape.watch(t);
    PretrainParts parts;
    Tensor loss = pretrain_loss(tape, models_->classifier, batch, omega_, cfg_.tau_cl, rec_target_, &parts);
    check_finite(loss.scalar(), cat("pretrain epoch ", epoch));
    GradMap grads = tape.backward(loss);
    clip_grad_norm(grads, 1.0);
    adam_->step(grads, sched_.at(epoch + static_cast<double>(step) / steps));

    stats.rec_cln += parts.rec_cln;
    stats.rec_adv += parts.rec_adv;
    stats.cl += parts.cl;
  }
  stats.rec_cln /= steps;
  stats.rec_adv /= steps;
  stats.cl /= steps;
  stats.rec = 0.5 * (stats.rec_cln + stats.rec_adv);
  return stats;
}

// ---------------------------------------------------------------------------
// Head fine-tuning
// ---------------------------------------------------------------------------

HeadFinetuner::HeadFinetuner(Models& models, const DatasetPair& data, const TrainConfig& cfg,
                             const PipelineOptions& opt)
    : models_(&models), data_(&data), cfg_(cfg), opt_(opt) {
  mask_ratio_ = opt.finetune_mask_ratio_override >= 0.0f ? opt.finetune_mask_ratio_override
                                                         : cfg.mask_ratio_finetune;
  NamedParams p;
  collect_head(models_->classifier.head, "classifier.head", p);
  adam_ = std::make_unique<AdamW>(p.tensors(), default_decay_mask(p),
                                  AdamWConfig{cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});
  sched_ = LrSchedule{cfg.finetune_stage.base_lr, cfg.finetune_stage.warmup_epochs, cfg.finetune_stage.epochs,
                      stage_scale(cfg)};
  frozen_hash_ = hash_frozen();
}

uint64_t HeadFinetuner::hash_frozen() const {
  NamedParams frozen;
  models_->probe.collect("probe", frozen);
  models_->detector.collect("detector", frozen);
  models_->classifier.collect_frozen("classifier", frozen);
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : frozen.items) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(float), h);
  }
  return h;
}

FinetuneEpochStats HeadFinetuner::run_epoch(int epoch) {
  const Dataset& train = data_->train;
  const int batch = cfg_.batch_size;
  const int steps = std::max<int>(1, static_cast<int>(train.size()) / batch);
  std::vector<int> order = shuffled_indices(train.size(), derive_seed(cfg_.seed, kTagFtShuffle), epoch);
  Rng attack_rng(derive_seed(cfg_.seed, kTagFtAttack, static_cast<uint64_t>(epoch)));
  Rng mask_rng(derive_seed(cfg_.seed, kTagFtMask, static_cast<uint64_t>(epoch)));
  const int patches = models_->classifier.patch_count();
  const AdvConfig acfg = one_step_cfg(cfg_);

  NamedParams head_params;
  collect_head(models_->classifier.head, "classifier.head", head_params);

  FinetuneEpochStats stats;
  stats.epoch = epoch;
  int correct = 0, total = 0;

  for (int step = 0; step < steps; ++step) {
    Tape tape;
    for (auto& [name, t] : head_params.items) tape.watch(t);

    std::vector<Tensor> logit_rows;
    std::vector<int> labels;
    for (int i = 0; i < batch; ++i) {
      const int idx = order[static_cast<size_t>((step * batch + i) % train.size())];
      const Tensor& x = train.images[static_cast<size_t>(idx)];
      const int y = train.labels[static_cast<size_t>(idx)];

      Tensor input = x;
      if (i >= batch / 2) {
        // Adversarial half, generated against the frozen composite with the
        // current head snapshot.
        MaskSpec am1 = sample_mask(patches, mask_ratio_, mask_rng);
        MaskSpec am2 = sample_mask(patches, mask_ratio_, mask_rng);
        EnsembleClassifier surface(models_->classifier, models_->detector, models_->probe, am1, am2,
                                   opt_.fixed_p);
        input = fgsm_ll(surface, x, acfg, attack_rng).x_adv;
      }

      float p_val;
      if (opt_.fixed_p.has_value()) {
        p_val = *opt_.fixed_p;
      } else {
        Tape det_tape;
        p_val = detector_forward(det_tape, models_->detector, input, models_->probe).p;
      }
      if (opt_.p_observer != nullptr) opt_.p_observer->push_back(p_val);

      MaskSpec m1 = sample_mask(patches, mask_ratio_, mask_rng);
      MaskSpec m2 = sample_mask(patches, mask_ratio_, mask_rng);
      Tensor logits = finetune_forward(tape, models_->classifier, input, p_val, m1, m2);
      logit_rows.push_back(tape.reshape(logits, {1, models_->classifier.classes}));
      labels.push_back(y);

      int pred = 0;
      for (int ci = 1; ci < models_->classifier.classes; ++ci) {
        if (logits.data()[ci] > logits.data()[pred]) pred = ci;
      }
      correct += pred == y ? 1 : 0;
      ++total;
    }

    Tensor all_logits = tape.concat(logit_rows, 0);
    Tensor loss = tape.cross_entropy_logits(all_logits, labels);
    check_finite(loss.scalar(), cat("finetune epoch ", epoch));
    GradMap grads = tape.backward(loss);
    clip_grad_norm(grads, 1.0);
    adam_->step(grads, sched_.at(epoch + static_cast<double>(step) / steps));
    stats.ce += loss.scalar();
  }
  stats.ce /= steps;
  stats.train_acc = total > 0 ? static_cast<double>(correct) / total : 0.0;
  stats.frozen_ok = hash_frozen() == frozen_hash_;
  if (!stats.frozen_ok) audit_ok_ = false;
  return stats;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

int composite_predict(const Models& m, const TrainConfig& cfg, const PipelineOptions& opt, const Tensor& x,
                      int item_index, float* p_out) {
  float p;
  if (opt.fixed_p.has_value()) {
    p = *opt.fixed_p;
  } else {
    Tape det_tape;
    p = detector_forward(det_tape, m.detector, x, m.probe).p;
  }
  if (p_out != nullptr) *p_out = p;
  if (opt.p_observer != nullptr) opt.p_observer->push_back(p);

  const float ratio = opt.finetune_mask_ratio_override >= 0.0f ? opt.finetune_mask_ratio_override
                                                               : cfg.mask_ratio_finetune;
  const int patches = m.classifier.patch_count();
  const int classes = m.classifier.classes;
  std::vector<double> avg(static_cast<size_t>(classes), 0.0);
  for (int draw = 0; draw < cfg.eval_mask_draws; ++draw) {
    Rng rng(derive_seed(cfg.seed, kTagEvalMask, static_cast<uint64_t>(item_index) * 64 + draw));
    MaskSpec m1 = sample_mask(patches, ratio, rng);
    MaskSpec m2 = sample_mask(patches, ratio, rng);
    Tape tape;
    Tensor logits = finetune_forward(tape, m.classifier, x, p, m1, m2);
    for (int c = 0; c < classes; ++c) avg[static_cast<size_t>(c)] += logits.data()[c];
  }
  int pred = 0;
  for (int c = 1; c < classes; ++c) {
    if (avg[static_cast<size_t>(c)] > avg[static_cast<size_t>(pred)]) pred = c;
  }
  return pred;
}

AttackSpec parse_attack_name(const std::string& name) {
  if (name == "none") return {"none", 0};
  if (name == "fgsm") return {"fgsm", 1};
  if (name == "fgsm_ll") return {"fgsm_ll", 1};
  if (name.rfind("pgd-", 0) == 0) {
    int steps = 0;
    try {
      size_t pos = 0;
      steps = std::stoi(name.substr(4), &pos);
      if (pos != name.size() - 4 || steps < 1) throw std::invalid_argument("steps");
    } catch (...) {
      throw ConfigError(cat("unknown attack name '", name, "'"));
    }
    return {"pgd", steps};
  }
  throw ConfigError(cat("unknown attack name '", name, "'"));
}

namespace {

bool detector_says_clean(const Models& m, const Tensor& x) {
  Tape tape;
  DetectorOutput out = detector_forward(tape, m.detector, x, m.probe);
  return out.logits.data()[1] > out.logits.data()[0];
}

Tensor eval_attack_example(const Models& m, const TrainConfig& cfg, const PipelineOptions& opt,
                           const AttackSpec& spec, const Tensor& x, int y, int item_index, size_t attack_no,
                           float epsilon) {
  Rng rng(derive_seed(cfg.seed, kTagEvalAttack + attack_no, static_cast<uint64_t>(item_index)));
  const float ratio = opt.finetune_mask_ratio_override >= 0.0f ? opt.finetune_mask_ratio_override
                                                               : cfg.mask_ratio_finetune;
  // The attacker optimizes through its own mask draw; inference draws masks
  // independently per query.
  Rng mask_rng(derive_seed(cfg.seed, kTagEvalAttackMask + attack_no, static_cast<uint64_t>(item_index)));
  const int patches = m.classifier.patch_count();
  MaskSpec m1 = sample_mask(patches, ratio, mask_rng);
  MaskSpec m2 = sample_mask(patches, ratio, mask_rng);
  EnsembleClassifier surface(m.classifier, m.detector, m.probe, m1, m2, opt.fixed_p);

  AdvConfig acfg;
  acfg.epsilon = epsilon;
  acfg.descend_to_target = cfg.descend_to_target;
  if (spec.name == "fgsm") {
    acfg.steps = 1;
    return fgsm_rs(surface, x, y, acfg, rng).x_adv;
  }
  if (spec.name == "fgsm_ll") {
    acfg.steps = 1;
    acfg.targeted = true;
    return fgsm_ll(surface, x, acfg, rng).x_adv;
  }
  acfg.steps = spec.steps;
  acfg.step_size = cfg.pgd_step_size;
  return pgd(surface, x, y, acfg, rng).x_adv;
}

}  // namespace

EvalReport evaluate_models(const Models& m, const TrainConfig& cfg, const Dataset& data,
                           const std::vector<std::string>& attacks, const PipelineOptions& opt) {
  EvalReport rep;
  const int n = cfg.eval_max_samples > 0 ? std::min<int>(cfg.eval_max_samples, static_cast<int>(data.size()))
                                         : static_cast<int>(data.size());
  rep.sample_count = n;

  int std_correct = 0, det_correct = 0, joint_correct = 0;
  for (int i = 0; i < n; ++i) {
    const Tensor& x = data.images[static_cast<size_t>(i)];
    const int y = data.labels[static_cast<size_t>(i)];
    const int pred = composite_predict(m, cfg, opt, x, i);
    const bool cls_ok = pred == y;
    const bool det_ok = detector_says_clean(m, x);
    std_correct += cls_ok ? 1 : 0;
    det_correct += det_ok ? 1 : 0;
    joint_correct += (cls_ok && det_ok) ? 1 : 0;
  }
  rep.standard_acc = static_cast<double>(std_correct) / n;
  rep.clean_det_acc = static_cast<double>(det_correct) / n;
  rep.clean_joint_acc = static_cast<double>(joint_correct) / n;

  for (size_t a = 0; a < attacks.size(); ++a) {
    const AttackSpec spec = parse_attack_name(attacks[a]);
    EvalAttackRow row;
    row.attack = attacks[a];
    row.epsilon = spec.name == "none" ? 0.0f : cfg.epsilon;
    int rob = 0, det = 0, joint = 0;
    for (int i = 0; i < n; ++i) {
      const Tensor& x = data.images[static_cast<size_t>(i)];
      const int y = data.labels[static_cast<size_t>(i)];
      Tensor x_eval = spec.name == "none"
                          ? x
                          : eval_attack_example(m, cfg, opt, spec, x, y, i, a, cfg.epsilon);
      const int pred = composite_predict(m, cfg, opt, x_eval, i);
      const bool cls_ok = pred == y;
      const bool says_clean = detector_says_clean(m, x_eval);
      const bool det_ok = spec.name == "none" ? says_clean : !says_clean;
      rob += cls_ok ? 1 : 0;
      det += det_ok ? 1 : 0;
      joint += (cls_ok && det_ok) ? 1 : 0;
    }
    row.robust_acc = static_cast<double>(rob) / n;
    row.det_acc = static_cast<double>(det) / n;
    row.joint_acc = static_cast<double>(joint) / n;
    row.correct = rob;
    row.incorrect = n - rob;
    rep.attacks.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Supervised baseline
// ---------------------------------------------------------------------------

std::vector<SupervisedEpochStats> train_supervised(ViTClassifier& model, const Dataset& train,
                                                   const TrainConfig& cfg, const StageConfig& stage,
                                                   uint64_t seed_tag, bool augment) {
  NamedParams p;
  model.collect("model", p);
  AdamW adam(p.tensors(), default_decay_mask(p), AdamWConfig{cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});
  LrSchedule sched{stage.base_lr, stage.warmup_epochs, stage.epochs, stage_scale(cfg)};

  std::vector<SupervisedEpochStats> log;
  const int batch = cfg.batch_size;
  const int steps = std::max<int>(1, static_cast<int>(train.size()) / batch);

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    std::vector<int> order =
        shuffled_indices(train.size(), derive_seed(cfg.seed, kTagSupShuffle ^ seed_tag), epoch);
    Rng aug_rng(derive_seed(cfg.seed, kTagSupAug ^ seed_tag, static_cast<uint64_t>(epoch)));
    SupervisedEpochStats stats;
    stats.epoch = epoch;
    int correct = 0, total = 0;
    for (int step = 0; step < steps; ++step) {
      Tape tape;
      for (auto& [name, t] : p.items) tape.watch(t);
      std::vector<Tensor> rows;
      std::vector<int> labels;
      for (int i = 0; i < batch; ++i) {
        const int idx = order[static_cast<size_t>((step * batch + i) % train.size())];
        Tensor x = train.images[static_cast<size_t>(idx)];
        if (augment) x = augment_image(x, cfg.aug_pad, cfg.aug_flip, aug_rng);
        Tensor logits = model.forward(tape, x);
        rows.push_back(tape.reshape(logits, {1, model.classes}));
        labels.push_back(train.labels[static_cast<size_t>(idx)]);
        int pred = 0;
        for (int c = 1; c < model.classes; ++c)
          if (logits.data()[c] > logits.data()[pred]) pred = c;
        correct += pred == train.labels[static_cast<size_t>(idx)] ? 1 : 0;
        ++total;
      }
      Tensor loss = tape.cross_entropy_logits(tape.concat(rows, 0), labels);
      check_finite(loss.scalar(), cat("supervised epoch ", epoch));
      GradMap grads = tape.backward(loss);
      clip_grad_norm(grads, 1.0);
      adam.step(grads, sched.at(epoch + static_cast<double>(step) / steps));
      stats.ce += loss.scalar();
    }
    stats.ce /= steps;
    stats.train_acc = total > 0 ? static_cast<double>(correct) / total : 0.0;
    log.push_back(stats);
  }
  return log;
}

double model_accuracy(const DiffModel& model, const Dataset& data, int max_items) {
  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(data.size()))
                              : static_cast<int>(data.size());
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    Tape tape;
    Tensor logits = model.forward(tape, data.images[static_cast<size_t>(i)]);
    int pred = 0;
    for (int c = 1; c < logits.dim(0); ++c)
      if (logits.data()[c] > logits.data()[pred]) pred = c;
    correct += pred == data.labels[static_cast<size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(correct) / n;
}

double model_robust_accuracy(const DiffModel& model, const Dataset& data, const AdvConfig& attack_cfg,
                             uint64_t seed, int max_items) {
  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(data.size()))
                              : static_cast<int>(data.size());
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, kTagEvalAttack, static_cast<uint64_t>(i)));
    const int y = data.labels[static_cast<size_t>(i)];
    Tensor x_adv = pgd(model, data.images[static_cast<size_t>(i)], y, attack_cfg, rng).x_adv;
    Tape tape;
    Tensor logits = model.forward(tape, x_adv);
    int pred = 0;
    for (int c = 1; c < logits.dim(0); ++c)
      if (logits.data()[c] > logits.data()[pred]) pred = c;
    correct += pred == y ? 1 : 0;
  }
  return static_cast<double>(correct) / n;
}

// ---------------------------------------------------------------------------
// Command entry points
// ---------------------------------------------------------------------------

PretrainRunResult run_pretrain(const TrainConfig& cfg, const std::string& out_dir, const PipelineOptions& opt) {
  fs::create_directories(out_dir);
  DatasetPair data = load_dataset(cfg.dataset_dir, cfg.patch);
  Models models = build_models(cfg, data.train.manifest);

  DetectorTrainer det(models, data, cfg, opt);
  ClassifierPretrainer cls(models, data, cfg, opt);

  PretrainRunResult res;
  // Joint schedule: detector epochs are spread across the classifier's
  // pretraining span so the alternating threat sees evolving snapshots.
  const int total = std::max(det.epochs(), cls.epochs());
  int det_done = 0;
  for (int e = 0; e < total; ++e) {
    if (e < cls.epochs()) res.classifier_log.push_back(cls.run_epoch(e));
    const int det_target =
        det.epochs() >= total ? e + 1 : ((e + 1) * det.epochs() + total - 1) / total;
    while (det_done < std::min(det_target, det.epochs())) {
      res.detector_log.push_back(det.run_epoch(det_done));
      ++det_done;
    }
  }
  while (det_done < det.epochs()) {
    res.detector_log.push_back(det.run_epoch(det_done));
    ++det_done;
  }
  res.detector_heldout_acc = det.heldout_accuracy();

  res.checkpoint_path = (fs::path(out_dir) / "checkpoint.marc").string();
  save_models(res.checkpoint_path, models, cfg);

  CsvWriter det_log((fs::path(out_dir) / "detector_log.csv").string(), {"epoch", "ce", "snn", "det_acc"});
  for (const auto& s : res.detector_log) {
    det_log.row({std::to_string(s.epoch), format_value(s.ce), format_value(s.snn), format_value(s.train_acc)});
  }
  det_log.close();

  CsvWriter metrics((fs::path(out_dir) / "metrics.csv").string(), {"epoch", "split", "metric", "value"});
  for (const auto& s : res.detector_log) {
    metrics.row({std::to_string(s.epoch), "train", "det_ce", format_value(s.ce)});
    metrics.row({std::to_string(s.epoch), "train", "det_snn", format_value(s.snn)});
    metrics.row({std::to_string(s.epoch), "train", "det_acc", format_value(s.train_acc)});
  }
  for (const auto& s : res.classifier_log) {
    metrics.row({std::to_string(s.epoch), "train", "rec_loss", format_value(s.rec)});
    metrics.row({std::to_string(s.epoch), "train", "cl_loss", format_value(s.cl)});
  }
  metrics.row({std::to_string(std::max(0, total - 1)), "test", "det_heldout_acc",
               format_value(res.detector_heldout_acc)});
  metrics.close();
  return res;
}

FinetuneRunResult run_finetune(const TrainConfig& cfg_override, const std::string& checkpoint_path,
                               const std::string& out_dir, const PipelineOptions& opt) {
  fs::create_directories(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = cfg_override;
  DatasetPair data = load_dataset(cfg.dataset_dir, cfg.patch);
  Models models = build_models(cfg, data.train.manifest);
  NamedParams all = collect_models(models);
  restore_params(ckpt.archive, all);

  HeadFinetuner tuner(models, data, cfg, opt);
  FinetuneRunResult res;
  for (int e = 0; e < tuner.epochs(); ++e) res.log.push_back(tuner.run_epoch(e));
  res.audit_ok = tuner.audit_ok();
  if (!res.audit_ok) throw DivergenceError("finetune: frozen-weight audit failed");

  res.checkpoint_path = (fs::path(out_dir) / "checkpoint.marc").string();
  save_models(res.checkpoint_path, models, cfg);

  CsvWriter metrics((fs::path(out_dir) / "metrics.csv").string(), {"epoch", "split", "metric", "value"});
  for (const auto& s : res.log) {
    metrics.row({std::to_string(s.epoch), "train", "ce", format_value(s.ce)});
    metrics.row({std::to_string(s.epoch), "train", "acc", format_value(s.train_acc)});
    metrics.row({std::to_string(s.epoch), "train", "frozen_ok", s.frozen_ok ? "1" : "0"});
  }
  metrics.close();
  return res;
}

EvalReport run_eval(const std::string& checkpoint_path, const std::string& dataset_dir,
                    const std::vector<std::string>& attacks, const std::string& split,
                    const std::string& out_csv, std::optional<float> epsilon_override,
                    const PipelineOptions& opt, std::optional<int> eval_max_override) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = ckpt.config;
  if (epsilon_override.has_value()) cfg.epsilon = *epsilon_override;
  if (eval_max_override.has_value()) cfg.eval_max_samples = *eval_max_override;
  const std::string dir = dataset_dir.empty() ? cfg.dataset_dir : dataset_dir;
  DatasetPair data = load_dataset(dir, cfg.patch);
  const Dataset& d = split == "train" ? data.train : data.test;
  Models models = load_models(ckpt, data.train.manifest);

  for (const std::string& a : attacks) parse_attack_name(a);  // fail fast on bad names
  EvalReport rep = evaluate_models(models, cfg, d, attacks, opt);

  if (!out_csv.empty()) {
    CsvWriter csv(out_csv, {"split", "attack", "epsilon", "metric", "value"});
    csv.row({split, "none", "0", "standard_acc", format_value(rep.standard_acc)});
    csv.row({split, "none", "0", "det_acc", format_value(rep.clean_det_acc)});
    csv.row({split, "none", "0", "joint_acc", format_value(rep.clean_joint_acc)});
    csv.row({split, "none", "0", "samples", std::to_string(rep.sample_count)});
    for (const auto& row : rep.attacks) {
      const std::string eps = format_value(row.epsilon);
      csv.row({split, row.attack, eps, "robust_acc", format_value(row.robust_acc)});
      csv.row({split, row.attack, eps, "det_acc", format_value(row.det_acc)});
      csv.row({split, row.attack, eps, "joint_acc", format_value(row.joint_acc)});
      csv.row({split, row.attack, eps, "correct", std::to_string(row.correct)});
      csv.row({split, row.attack, eps, "incorrect", std::to_string(row.incorrect)});
    }
    csv.close();
  }
  return rep;
}

std::vector<AblateRow> run_ablate(const std::string& checkpoint_path, const std::string& switch_name,
                                  const std::string& out_dir, std::optional<float> mask_ratio) {
  fs::create_directories(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = ckpt.config;
  DatasetPair data = load_dataset(cfg.dataset_dir, cfg.patch);
  std::vector<AblateRow> rows;

  auto detector_variant = [&](const PipelineOptions& vopt) {
    Models fresh = build_models(cfg, data.train.manifest);
    DetectorTrainer trainer(fresh, data, cfg, vopt);
    for (int e = 0; e < trainer.epochs(); ++e) trainer.run_epoch(e);
    return trainer.heldout_accuracy();
  };

  if (switch_name == "no-snn" || switch_name == "no-gb" || switch_name == "no-msa-bias") {
    Models ref = load_models(ckpt, data.train.manifest);
    DetectorTrainer ref_eval(ref, data, cfg, {});  // no epochs run; heldout protocol only
    rows.push_back({"full", "det_acc", ref_eval.heldout_accuracy()});
    PipelineOptions vopt;
    if (switch_name == "no-snn") vopt.lambda_override = 0.0f;
    if (switch_name == "no-gb") vopt.detector_use_gb = false;
    if (switch_name == "no-msa-bias") vopt.detector_use_bias = false;
    rows.push_back({switch_name, "det_acc", detector_variant(vopt)});
  } else if (switch_name == "no-cl" || switch_name == "no-ae") {
    Models ref = load_models(ckpt, data.train.manifest);
    EvalReport ref_rep = evaluate_models(ref, cfg, data.test, {cat("pgd-", cfg.pgd_steps)}, {});
    rows.push_back({"full", "standard_acc", ref_rep.standard_acc});
    rows.push_back({"full", "robust_acc", ref_rep.attacks[0].robust_acc});

    PipelineOptions vopt;
    Models variant = build_models(cfg, data.train.manifest);
    if (switch_name == "no-cl") {
      vopt.omega_override = 0.0f;
      DetectorTrainer det(variant, data, cfg, vopt);
      ClassifierPretrainer pre(variant, data, cfg, vopt);
      const int total = std::max(det.epochs(), pre.epochs());
      for (int e = 0; e < total; ++e) {
        if (e < det.epochs()) det.run_epoch(e);
        if (e < pre.epochs()) pre.run_epoch(e);
      }
    } else {
      // Keep the pretrained frozen weights; refit the head under the naive
      // average ensemble.
      vopt.fixed_p = 0.5f;
      NamedParams frozen;
      variant.probe.collect("probe", frozen);
      variant.detector.collect("detector", frozen);
      variant.classifier.collect_frozen("classifier", frozen);
      restore_params(ckpt.archive, frozen);
    }
    HeadFinetuner tuner(variant, data, cfg, vopt);
    for (int e = 0; e < tuner.epochs(); ++e) tuner.run_epoch(e);
    EvalReport var_rep = evaluate_models(variant, cfg, data.test, {cat("pgd-", cfg.pgd_steps)}, vopt);
    rows.push_back({switch_name, "standard_acc", var_rep.standard_acc});
    rows.push_back({switch_name, "robust_acc", var_rep.attacks[0].robust_acc});
  } else if (switch_name == "mask-ratio") {
    std::vector<float> ratios;
    if (mask_ratio.has_value()) {
      ratios.push_back(*mask_ratio);
    } else {
      for (int i = 0; i < 12; ++i) ratios.push_back(0.25f + 0.05f * static_cast<float>(i));
    }
    CsvWriter sweep((fs::path(out_dir) / "mask_ratio_sweep.csv").string(),
                    {"ratio", "standard_acc", "robust_acc"});
    for (float r : ratios) {
      PipelineOptions vopt;
      vopt.finetune_mask_ratio_override = r;
      Models variant = build_models(cfg, data.train.manifest);
      NamedParams frozen;
      variant.probe.collect("probe", frozen);
      variant.detector.collect("detector", frozen);
      variant.classifier.collect_frozen("classifier", frozen);
      restore_params(ckpt.archive, frozen);
      HeadFinetuner tuner(variant, data, cfg, vopt);
      for (int e = 0; e < tuner.epochs(); ++e) tuner.run_epoch(e);
      EvalReport rep = evaluate_models(variant, cfg, data.test, {cat("pgd-", cfg.pgd_steps)}, vopt);
      sweep.row({format_value(r), format_value(rep.standard_acc), format_value(rep.attacks[0].robust_acc)});
      rows.push_back({cat("ratio-", format_value(r)), "standard_acc", rep.standard_acc});
      rows.push_back({cat("ratio-", format_value(r)), "robust_acc", rep.attacks[0].robust_acc});
    }
    sweep.close();
  } else {
    throw ConfigError(cat("unknown ablation switch '", switch_name, "'"));
  }

  CsvWriter csv((fs::path(out_dir) / cat("ablate_", switch_name, ".csv")).string(),
                {"variant", "metric", "value"});
  for (const auto& r : rows) csv.row({r.variant, r.metric, format_value(r.value)});
  csv.close();
  return rows;
}

void run_export_embeddings(const std::string& checkpoint_path, const std::string& dataset_dir,
                           const std::string& which, const std::string& out_csv, int max_items) {
  if (which != "detector" && which != "classifier") {
    throw ConfigError(cat("export-embeddings: unknown kind '", which, "'"));
  }
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = ckpt.config;
  const std::string dir = dataset_dir.empty() ? cfg.dataset_dir : dataset_dir;
  DatasetPair data = load_dataset(dir, cfg.patch);
  Models models = load_models(ckpt, data.train.manifest);

  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(data.test.size()))
                              : static_cast<int>(data.test.size());
  const int dim = which == "detector" ? models.detector.shape.hidden : models.classifier.enc_shape.hidden;

  std::vector<std::string> header{"kind", "label", "is_adv"};
  for (int d = 0; d < dim; ++d) header.push_back(cat("d", d));
  CsvWriter csv(out_csv, header);

  const AdvConfig acfg = one_step_cfg(cfg);
  auto emit = [&](const Tensor& x, int label, int is_adv, int item) {
    Tensor z;
    if (which == "detector") {
      Tape tape;
      z = detector_forward(tape, models.detector, x, models.probe).z;
    } else {
      Rng mask_rng(derive_seed(cfg.seed, kTagEvalMask, static_cast<uint64_t>(item) * 64));
      MaskSpec m1 = sample_mask(models.classifier.patch_count(), cfg.mask_ratio_finetune, mask_rng);
      MaskSpec m2 = sample_mask(models.classifier.patch_count(), cfg.mask_ratio_finetune, mask_rng);
      Tape det_tape;
      const float p = detector_forward(det_tape, models.detector, x, models.probe).p;
      Tape tape;
      EnsembleRep rep;
      finetune_forward(tape, models.classifier, x, p, m1, m2, &rep);
      z = gap(tape, rep.z_hat);
    }
    std::vector<std::string> row{which, std::to_string(label), std::to_string(is_adv)};
    for (int d = 0; d < dim; ++d) row.push_back(format_value(z.data()[d]));
    csv.row(row);
  };

  for (int i = 0; i < n; ++i) {
    const Tensor& x = data.test.images[static_cast<size_t>(i)];
    emit(x, data.test.labels[static_cast<size_t>(i)], 0, i);
    Rng rng(derive_seed(cfg.seed, kTagExportAttack, static_cast<uint64_t>(i)));
    Tensor x_adv = fgsm_ll(models.probe, x, acfg, rng).x_adv;
    emit(x_adv, data.test.labels[static_cast<size_t>(i)], 1, i);
  }
  csv.close();
}

void run_attack_dump(const std::string& checkpoint_path, const std::string& dataset_dir,
                     const std::string& attack, std::optional<float> epsilon_override,
                     const std::string& out_dir, int max_items) {
  const AttackSpec spec = parse_attack_name(attack);
  if (spec.name == "none") throw ConfigError("attack: 'none' writes nothing");
  fs::create_directories(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = ckpt.config;
  if (epsilon_override.has_value()) cfg.epsilon = *epsilon_override;
  const std::string dir = dataset_dir.empty() ? cfg.dataset_dir : dataset_dir;
  DatasetPair data = load_dataset(dir, cfg.patch);
  Models models = load_models(ckpt, data.train.manifest);

  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(data.test.size()))
                              : static_cast<int>(data.test.size());
  const DatasetManifest& man = data.test.manifest;
  Tensor x_block({n, man.height, man.width, man.channels});
  Tensor d_block({n, man.height, man.width, man.channels});
  Tensor y_block({n});
  const int64_t per = static_cast<int64_t>(man.height) * man.width * man.channels;

  for (int i = 0; i < n; ++i) {
    const Tensor& x = data.test.images[static_cast<size_t>(i)];
    const int y = data.test.labels[static_cast<size_t>(i)];
    Tensor x_adv = eval_attack_example(models, cfg, {}, spec, x, y, i, 0, cfg.epsilon);
    for (int64_t e = 0; e < per; ++e) {
      x_block.data()[i * per + e] = x_adv.data()[e];
      d_block.data()[i * per + e] = x_adv.data()[e] - x.data()[e];
    }
    y_block.data()[i] = static_cast<float>(y);
  }
  save_tensor((fs::path(out_dir) / "x_adv.mten").string(), x_block);
  save_tensor((fs::path(out_dir) / "delta.mten").string(), d_block);
  save_tensor((fs::path(out_dir) / "labels.mten").string(), y_block);

  json side;
  side["attack"] = attack;
  side["epsilon"] = cfg.epsilon;
  side["steps"] = spec.steps;
  side["seed"] = cfg.seed;
  side["count"] = n;
  std::ofstream os((fs::path(out_dir) / "attack.json").string(), std::ios::binary);
  if (!os) throw IoError("attack: cannot write sidecar");
  os << side.dump(2) << "\n";
}

void run_saliency_dump(const std::string& checkpoint_path, const std::string& dataset_dir,
                       const std::string& out_dir, int max_items) {
  fs::create_directories(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = ckpt.config;
  const std::string dir = dataset_dir.empty() ? cfg.dataset_dir : dataset_dir;
  DatasetPair data = load_dataset(dir, cfg.patch);
  Models models = load_models(ckpt, data.train.manifest);
  CleanPathModel clean_path(models.classifier);

  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(data.test.size()))
                              : static_cast<int>(data.test.size());
  const DatasetManifest& man = data.test.manifest;
  Tensor block({n, man.height, man.width, man.channels});
  const int64_t per = static_cast<int64_t>(man.height) * man.width * man.channels;
  int degenerate = 0;
  for (int i = 0; i < n; ++i) {
    SaliencyResult res = guided_backprop(clean_path, data.test.images[static_cast<size_t>(i)]);
    degenerate += res.degenerate ? 1 : 0;
    for (int64_t e = 0; e < per; ++e) block.data()[i * per + e] = res.x_prime.data()[e];
  }
  save_tensor((fs::path(out_dir) / "saliency.mten").string(), block);

  json side;
  side["target_rule"] = "top1";
  side["network"] = "clean_encoder_head";
  side["count"] = n;
  side["degenerate"] = degenerate;
  std::ofstream os((fs::path(out_dir) / "saliency.json").string(), std::ios::binary);
  if (!os) throw IoError("saliency: cannot write sidecar");
  os << side.dump(2) << "\n";
}

}  // namespace rvit

#pragma once

#include <memory>
#include <optional>

#include "rvit/adversarial.hpp"
#include "rvit/classifier.hpp"
#include "rvit/dataio.hpp"
#include "rvit/detector.hpp"
#include "rvit/optim.hpp"

namespace rvit {

// The full model set: fixed random probe (saliency source while no head
// exists), two-stream detector, dual-encoder classifier.
struct Models {
  ViTClassifier probe;
  DetectorModel detector;
  ClassifierModel classifier;
};

Models build_models(const TrainConfig& cfg, const DatasetManifest& manifest);
NamedParams collect_models(const Models& m);
void save_models(const std::string& path, const Models& m, const TrainConfig& cfg);
Models load_models(const Checkpoint& ckpt, const DatasetManifest& manifest);

// Ablation and variant switches threaded through training and evaluation.
struct PipelineOptions {
  bool detector_use_gb = true;
  bool detector_use_bias = true;
  float lambda_override = -1.0f;  // negative means "use the config value"
  float omega_override = -1.0f;
  std::optional<float> fixed_p;   // naive average ensemble when set
  float finetune_mask_ratio_override = -1.0f;
  std::vector<float>* p_observer = nullptr;  // records ensemble factors used
};

// Random flip plus zero-pad-and-crop.
Tensor augment_image(const Tensor& image, int pad, bool flip, Rng& rng);

struct DetectorEpochStats {
  int epoch = 0;
  double ce = 0.0, snn = 0.0, train_acc = 0.0;
};

class DetectorTrainer {
 public:
  DetectorTrainer(Models& models, const DatasetPair& data, const TrainConfig& cfg, const PipelineOptions& opt);
  DetectorEpochStats run_epoch(int epoch);
  // Detection accuracy over held-out clean images and fresh one-step
  // least-likely examples against the probe.
  float heldout_accuracy(int max_items = 0) const;
  int epochs() const { return cfg_.detector_stage.epochs; }

 private:
  Models* models_;
  const DatasetPair* data_;
  TrainConfig cfg_;
  PipelineOptions opt_;
  float lambda_ = 0.0f;
  std::unique_ptr<AdamW> adam_;
  LrSchedule sched_;
  std::vector<Tensor> gb_cache_;  // clean-image saliency variants (probe is fixed)
};

struct PretrainEpochStats {
  int epoch = 0;
  double rec = 0.0, rec_cln = 0.0, rec_adv = 0.0, cl = 0.0;
};

class ClassifierPretrainer {
 public:
  ClassifierPretrainer(Models& models, const DatasetPair& data, const TrainConfig& cfg,
                       const PipelineOptions& opt);
  PretrainEpochStats run_epoch(int epoch);
  int epochs() const { return cfg_.pretrain_stage.epochs; }

 private:
  Models* models_;
  const DatasetPair* data_;
  TrainConfig cfg_;
  float omega_ = 0.0f;
  RecTarget rec_target_ = RecTarget::masked;
  std::unique_ptr<AdamW> adam_;
  LrSchedule sched_;
};

struct FinetuneEpochStats {
  int epoch = 0;
  double ce = 0.0, train_acc = 0.0;
  bool frozen_ok = true;
};

class HeadFinetuner {
 public:
  HeadFinetuner(Models& models, const DatasetPair& data, const TrainConfig& cfg, const PipelineOptions& opt);
  FinetuneEpochStats run_epoch(int epoch);
  bool audit_ok() const { return audit_ok_; }
  int epochs() const { return cfg_.finetune_stage.epochs; }

 private:
  Models* models_;
  const DatasetPair* data_;
  TrainConfig cfg_;
  PipelineOptions opt_;
  float mask_ratio_ = 0.45f;
  std::unique_ptr<AdamW> adam_;
  LrSchedule sched_;
  uint64_t frozen_hash_ = 0;
  bool audit_ok_ = true;

  uint64_t hash_frozen() const;
};

// Averaged-logit prediction with per-(seed,item) evaluation masks.
int composite_predict(const Models& m, const TrainConfig& cfg, const PipelineOptions& opt, const Tensor& x,
                      int item_index, float* p_out = nullptr);

struct AttackSpec {
  std::string name;  // none | fgsm | fgsm_ll | pgd-<k>
  int steps = 1;
};
AttackSpec parse_attack_name(const std::string& name);

struct EvalAttackRow {
  std::string attack;
  float epsilon = 0.0f;
  double robust_acc = 0.0, det_acc = 0.0, joint_acc = 0.0;
  int correct = 0, incorrect = 0;
};

struct EvalReport {
  int sample_count = 0;
  double standard_acc = 0.0, clean_det_acc = 0.0, clean_joint_acc = 0.0;
  std::vector<EvalAttackRow> attacks;
};

EvalReport evaluate_models(const Models& m, const TrainConfig& cfg, const Dataset& data,
                           const std::vector<std::string>& attacks, const PipelineOptions& opt = {});

// Supervised training of a plain ViT classifier (baseline and feasibility
// harness).
struct SupervisedEpochStats {
  int epoch = 0;
  double ce = 0.0, train_acc = 0.0;
};
std::vector<SupervisedEpochStats> train_supervised(ViTClassifier& model, const Dataset& train,
                                                   const TrainConfig& cfg, const StageConfig& stage,
                                                   uint64_t seed_tag, bool augment);
double model_accuracy(const DiffModel& model, const Dataset& data, int max_items = 0);
double model_robust_accuracy(const DiffModel& model, const Dataset& data, const AdvConfig& attack_cfg,
                             uint64_t seed, int max_items = 0);

// ---------------------------------------------------------------------------
// Command-level entry points (file layout + CSV logs)
// ---------------------------------------------------------------------------

struct PretrainRunResult {
  std::string checkpoint_path;
  float detector_heldout_acc = 0.0f;
  std::vector<DetectorEpochStats> detector_log;
  std::vector<PretrainEpochStats> classifier_log;
};
PretrainRunResult run_pretrain(const TrainConfig& cfg, const std::string& out_dir,
                               const PipelineOptions& opt = {});

struct FinetuneRunResult {
  std::string checkpoint_path;
  std::vector<FinetuneEpochStats> log;
  bool audit_ok = true;
};
FinetuneRunResult run_finetune(const TrainConfig& cfg_override, const std::string& checkpoint_path,
                               const std::string& out_dir, const PipelineOptions& opt = {});

EvalReport run_eval(const std::string& checkpoint_path, const std::string& dataset_dir,
                    const std::vector<std::string>& attacks, const std::string& split,
                    const std::string& out_csv, std::optional<float> epsilon_override = std::nullopt,
                    const PipelineOptions& opt = {}, std::optional<int> eval_max_override = std::nullopt);

struct AblateRow {
  std::string variant;
  std::string metric;
  double value = 0.0;
};
std::vector<AblateRow> run_ablate(const std::string& checkpoint_path, const std::string& switch_name,
                                  const std::string& out_dir, std::optional<float> mask_ratio = std::nullopt);

void run_export_embeddings(const std::string& checkpoint_path, const std::string& dataset_dir,
                           const std::string& which, const std::string& out_csv, int max_items);

void run_attack_dump(const std::string& checkpoint_path, const std::string& dataset_dir,
                     const std::string& attack, std::optional<float> epsilon_override,
                     const std::string& out_dir, int max_items);

void run_saliency_dump(const std::string& checkpoint_path, const std::string& dataset_dir,
                       const std::string& out_dir, int max_items);

}  // namespace rvit

#pragma once

#include <map>
#include <string>
#include <vector>

#include "rvit/mten.hpp"
#include "rvit/vit.hpp"

namespace rvit {

struct DatasetManifest {
  std::string name;
  int height = 0, width = 0, channels = 0, classes = 0;
  std::map<std::string, int> split_counts;
  std::string dir;
};

struct Dataset {
  DatasetManifest manifest;
  std::string split;
  std::vector<Tensor> images;  // each H x W x C in [0,1]
  std::vector<int> labels;

  size_t size() const { return images.size(); }
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

DatasetManifest read_manifest(const std::string& dir);

// Loads both splits from a manifest directory; patch divisibility and pixel
// range are validated here.
DatasetPair load_dataset(const std::string& dir, int patch);

// Deterministic per-(seed, epoch) permutation of [0, n).
std::vector<int> shuffled_indices(size_t n, uint64_t seed, int epoch);

// Synthesizes a geometric-pattern dataset (oriented stripe classes plus
// noise), balanced across classes, split 80/20, and writes manifest + MTEN1
// payloads under dir.
DatasetManifest synth_toy_dataset(const std::string& dir, int classes, int n, int height, int width,
                                  int channels, uint64_t seed);

struct StageConfig {
  int epochs = 0;
  float base_lr = 0.0f;
  int warmup_epochs = 0;
};

struct TrainConfig {
  std::string dataset_dir;
  uint64_t seed = 0;
  int batch_size = 512;
  float weight_decay = 0.05f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float lambda = 0.15f;
  float omega = 0.35f;
  float tau_snn = 0.5f;
  float tau_cl = 0.5f;
  float mask_ratio_pretrain = 0.75f;
  float mask_ratio_finetune = 0.45f;
  float epsilon = 8.0f / 255.0f;
  int pgd_steps = 10;
  float pgd_step_size = 2.0f / 255.0f;
  bool lr_batch_scaling = true;
  bool descend_to_target = false;
  bool aug_flip = true;
  int aug_pad = 4;
  std::string rec_target = "masked";
  int eval_mask_draws = 1;
  int eval_max_samples = 0;  // 0 = whole split
  int patch = 4;

  StageConfig detector_stage{100, 1e-3f, 5};
  StageConfig pretrain_stage{200, 1e-4f, 20};
  StageConfig finetune_stage{100, 1e-3f, 5};

  // Table-style model shapes (patch is overridden by `patch` above).
  ModelShape detector_shape{12, 192, 3, 768, 4};
  ModelShape encoder_shape{12, 384, 3, 1536, 4};
  ModelShape decoder_shape{8, 192, 4, 768, 4};
  ModelShape probe_shape{2, 64, 2, 128, 4};
  int detector_head_hidden = 192;
  int classifier_head_hidden = 384;
  int probe_head_hidden = 64;

  // Returns one message per invalid field; empty means valid.
  std::vector<std::string> validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& json_text);
};

// Flat key=value configuration text with `include <path>` support and '#'
// comments. Later keys override earlier ones. Collects every bad field into
// one ConfigError.
TrainConfig parse_config_file(const std::string& path);
void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& origin_dir);

// Checkpoint = named-tensor archive with the config embedded in the header.
void save_checkpoint(const std::string& path, const NamedParams& params, const TrainConfig& cfg);
struct Checkpoint {
  Archive archive;
  TrainConfig config;
};
Checkpoint load_checkpoint(const std::string& path);
// Copies archived tensors into the model parameters (matched by name); dims
// are validated and mismatches name the offending tensor.
void restore_params(const Archive& archive, NamedParams& params);

// Deterministic float formatting shared by every CSV writer.
std::string format_value(double v);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& cells);
  void close();

 private:
  std::string path_;
  std::string buffer_;
  size_t columns_ = 0;
  bool closed_ = false;
};

}  // namespace rvit

#include "rvit/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"
#include "rvit/rng.hpp"

namespace rvit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("cannot open ", path));
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("cannot open ", path, " for writing"));
  os << text;
  if (!os) throw IoError(cat("write failed for ", path));
}

}  // namespace

DatasetManifest read_manifest(const std::string& dir) {
  const std::string path = (fs::path(dir) / "manifest.json").string();
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IoError(cat("manifest ", path, ": ", e.what()));
  }
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.channels = j.at("channels").get<int>();
    m.classes = j.at("classes").get<int>();
    for (const auto& [split, entry] : j.at("splits").items()) {
      m.split_counts[split] = entry.at("count").get<int>();
    }
  } catch (const json::exception& e) {
    throw IoError(cat("manifest ", path, ": ", e.what()));
  }
  m.dir = dir;
  return m;
}

namespace {

Dataset load_split(const DatasetManifest& m, const std::string& split) {
  Dataset d;
  d.manifest = m;
  d.split = split;
  auto it = m.split_counts.find(split);
  if (it == m.split_counts.end()) throw IoError(cat("dataset ", m.dir, ": no split '", split, "'"));
  const int count = it->second;

  Tensor images = load_tensor((fs::path(m.dir) / (split + "_images.mten")).string());
  Tensor labels = load_tensor((fs::path(m.dir) / (split + "_labels.mten")).string());
  if (images.ndim() != 4 || images.dim(0) != count || images.dim(1) != m.height || images.dim(2) != m.width ||
      images.dim(3) != m.channels) {
    throw IoError(cat("dataset ", m.dir, " split ", split, ": image tensor ", shape_str(images.shape()),
                      " does not match manifest ", count, "x", m.height, "x", m.width, "x", m.channels));
  }
  if (labels.ndim() != 1 || labels.dim(0) != count) {
    throw IoError(cat("dataset ", m.dir, " split ", split, ": label tensor ", shape_str(labels.shape()),
                      " does not match manifest count ", count));
  }

  const int64_t per = static_cast<int64_t>(m.height) * m.width * m.channels;
  d.images.reserve(static_cast<size_t>(count));
  d.labels.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Tensor img({m.height, m.width, m.channels});
    std::copy(images.data() + i * per, images.data() + (i + 1) * per, img.data());
    for (int64_t e = 0; e < per; ++e) {
      const float v = img.data()[e];
      if (v < -1e-6f || v > 1.0f + 1e-6f) {
        throw IoError(cat("dataset ", m.dir, " split ", split, ": pixel ", v, " outside [0,1] in item ", i));
      }
    }
    d.images.push_back(std::move(img));
    const float lf = labels.data()[i];
    const int li = static_cast<int>(std::lround(lf));
    if (li < 0 || li >= m.classes) {
      throw IoError(cat("dataset ", m.dir, " split ", split, ": label ", lf, " out of range in item ", i));
    }
    d.labels.push_back(li);
  }
  return d;
}

}  // namespace

DatasetPair load_dataset(const std::string& dir, int patch) {
  DatasetManifest m = read_manifest(dir);
  if (patch <= 0 || m.height % patch != 0 || m.width % patch != 0) {
    throw IoError(cat("dataset ", dir, ": image ", m.height, "x", m.width, " not divisible by patch ", patch));
  }
  DatasetPair p;
  p.train = load_split(m, "train");
  p.test = load_split(m, "test");
  return p;
}

std::vector<int> shuffled_indices(size_t n, uint64_t seed, int epoch) {
  std::vector<int> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, 0x5u, static_cast<uint64_t>(epoch)));
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

DatasetManifest synth_toy_dataset(const std::string& dir, int classes, int n, int height, int width,
                                  int channels, uint64_t seed) {
  if (classes < 2) throw ConfigError("synth: need at least 2 classes");
  if (n < classes * 10) throw ConfigError("synth: need at least 10 samples per class");
  fs::create_directories(dir);

  Rng rng(derive_seed(seed, 0x10u));
  const int per_class = n / classes;
  const int total = per_class * classes;

  // Classes are brightness levels 0.08 apart under a shared nuisance texture
  // of oriented stripes (random orientation, frequency, phase, contrast).
  // The level gap slightly exceeds twice the usual 8/255 attack budget, so a
  // margin-aware classifier can be robust on it while ordinarily trained
  // ones remain attackable.
  std::vector<Tensor> images;
  std::vector<int> labels;
  images.reserve(static_cast<size_t>(total));
  const double pi = 3.14159265358979323846;
  for (int c = 0; c < classes; ++c) {
    const double level = 0.5 + 0.08 * (static_cast<double>(c) - 0.5 * (classes - 1));
    for (int i = 0; i < per_class; ++i) {
      const double theta = pi * rng.uniform(0.0f, 1.0f);
      const double ct = std::cos(theta), st = std::sin(theta);
      const double cycles = 1.2 + 3.6 * rng.uniform(0.0f, 1.0f);
      const double freq = 2.0 * pi * cycles / static_cast<double>(std::max(height, width));
      const double phase = rng.uniform(0.0f, static_cast<float>(2.0 * pi));
      const double contrast = 0.25 + 0.20 * rng.uniform(0.0f, 1.0f);
      Tensor img({height, width, channels});
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const double proj = ct * x + st * y;
          const double base = level + contrast * std::sin(freq * proj + phase);
          for (int ch = 0; ch < channels; ++ch) {
            double v = base + 0.05 * rng.normal(0.0f, 1.0f);
            img.data()[(y * width + x) * channels + ch] =
                static_cast<float>(std::min(1.0, std::max(0.0, v)));
          }
        }
      }
      images.push_back(std::move(img));
      labels.push_back(c);
    }
  }

  std::vector<int> order(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());

  const int train_n = (total * 8) / 10;
  const int test_n = total - train_n;
  const int64_t per = static_cast<int64_t>(height) * width * channels;

  auto write_split = [&](const std::string& split, int begin, int count) {
    Tensor img_block({count, height, width, channels});
    Tensor lab_block({count});
    for (int i = 0; i < count; ++i) {
      const int src = order[static_cast<size_t>(begin + i)];
      std::copy(images[static_cast<size_t>(src)].data(), images[static_cast<size_t>(src)].data() + per,
                img_block.data() + static_cast<int64_t>(i) * per);
      lab_block.data()[i] = static_cast<float>(labels[static_cast<size_t>(src)]);
    }
    save_tensor((fs::path(dir) / (split + "_images.mten")).string(), img_block);
    save_tensor((fs::path(dir) / (split + "_labels.mten")).string(), lab_block);
  };
  write_split("train", 0, train_n);
  write_split("test", train_n, test_n);

  json j;
  j["name"] = cat("toy-stripes-c", classes);
  j["height"] = height;
  j["width"] = width;
  j["channels"] = channels;
  j["classes"] = classes;
  j["splits"]["train"]["count"] = train_n;
  j["splits"]["test"]["count"] = test_n;
  write_text_file((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");

  DatasetManifest m;
  m.name = j["name"].get<std::string>();
  m.height = height;
  m.width = width;
  m.channels = channels;
  m.classes = classes;
  m.split_counts["train"] = train_n;
  m.split_counts["test"] = test_n;
  m.dir = dir;
  return m;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> errs;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  check(batch_size >= 2 && batch_size % 2 == 0, "batch_size must be even and >= 2");
  check(weight_decay >= 0.0f, "weight_decay must be non-negative");
  check(beta1 > 0.0f && beta1 < 1.0f, "beta1 must lie in (0,1)");
  check(beta2 > 0.0f && beta2 < 1.0f, "beta2 must lie in (0,1)");
  check(lambda >= 0.0f && lambda <= 1.0f, "lambda must lie in [0,1]");
  check(omega >= 0.0f && omega <= 1.0f, "omega must lie in [0,1]");
  check(tau_snn > 0.0f, "tau_snn must be positive");
  check(tau_cl > 0.0f, "tau_cl must be positive");
  check(mask_ratio_pretrain >= 0.0f && mask_ratio_pretrain < 1.0f, "mask_ratio_pretrain must lie in [0,1)");
  check(mask_ratio_finetune >= 0.0f && mask_ratio_finetune < 1.0f, "mask_ratio_finetune must lie in [0,1)");
  check(epsilon >= 0.0f && epsilon < 1.0f, "epsilon must lie in [0,1)");
  check(pgd_steps >= 1, "pgd_steps must be >= 1");
  check(pgd_step_size >= 0.0f, "pgd_step_size must be non-negative");
  check(aug_pad >= 0, "aug_pad must be non-negative");
  check(rec_target == "masked" || rec_target == "all", "rec_target must be 'masked' or 'all'");
  check(eval_mask_draws >= 1, "eval_mask_draws must be >= 1");
  check(eval_max_samples >= 0, "eval_max_samples must be non-negative");
  check(patch >= 1, "patch must be >= 1");
  auto check_stage = [&](const StageConfig& s, const std::string& name) {
    check(s.epochs >= 0, name + ".epochs must be non-negative");
    check(s.base_lr >= 0.0f, name + ".base_lr must be non-negative");
    check(s.warmup_epochs >= 0, name + ".warmup_epochs must be non-negative");
  };
  check_stage(detector_stage, "detector");
  check_stage(pretrain_stage, "pretrain");
  check_stage(finetune_stage, "finetune");
  auto check_shape = [&](const ModelShape& s, const std::string& name) {
    check(s.layers >= 0, name + ".layers must be non-negative");
    check(s.hidden > 0, name + ".hidden must be positive");
    check(s.heads > 0, name + ".heads must be positive");
    check(s.hidden % std::max(1, s.heads) == 0, name + ".hidden must be divisible by heads");
    check(s.mlp > 0, name + ".mlp must be positive");
  };
  check_shape(detector_shape, "detector");
  check_shape(encoder_shape, "encoder");
  check_shape(decoder_shape, "decoder");
  check_shape(probe_shape, "probe");
  check(detector_head_hidden > 0, "detector.head_hidden must be positive");
  check(classifier_head_hidden > 0, "classifier.head_hidden must be positive");
  check(probe_head_hidden > 0, "probe.head_hidden must be positive");
  return errs;
}

namespace {

json shape_to_json(const ModelShape& s) {
  return json{{"layers", s.layers}, {"hidden", s.hidden}, {"heads", s.heads}, {"mlp", s.mlp}, {"patch", s.patch}};
}

ModelShape shape_from_json(const json& j) {
  ModelShape s;
  s.layers = j.at("layers").get<int>();
  s.hidden = j.at("hidden").get<int>();
  s.heads = j.at("heads").get<int>();
  s.mlp = j.at("mlp").get<int>();
  s.patch = j.at("patch").get<int>();
  return s;
}

json stage_to_json(const StageConfig& s) {
  return json{{"epochs", s.epochs}, {"base_lr", s.base_lr}, {"warmup_epochs", s.warmup_epochs}};
}

StageConfig stage_from_json(const json& j) {
  StageConfig s;
  s.epochs = j.at("epochs").get<int>();
  s.base_lr = j.at("base_lr").get<float>();
  s.warmup_epochs = j.at("warmup_epochs").get<int>();
  return s;
}

}  // namespace

std::string TrainConfig::to_json() const {
  json j;
  j["dataset"] = dataset_dir;
  j["seed"] = seed;
  j["batch_size"] = batch_size;
  j["weight_decay"] = weight_decay;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["lambda"] = lambda;
  j["omega"] = omega;
  j["tau_snn"] = tau_snn;
  j["tau_cl"] = tau_cl;
  j["mask_ratio_pretrain"] = mask_ratio_pretrain;
  j["mask_ratio_finetune"] = mask_ratio_finetune;
  j["epsilon"] = epsilon;
  j["pgd_steps"] = pgd_steps;
  j["pgd_step_size"] = pgd_step_size;
  j["lr_batch_scaling"] = lr_batch_scaling;
  j["descend_to_target"] = descend_to_target;
  j["aug_flip"] = aug_flip;
  j["aug_pad"] = aug_pad;
  j["rec_target"] = rec_target;
  j["eval_mask_draws"] = eval_mask_draws;
  j["eval_max_samples"] = eval_max_samples;
  j["patch"] = patch;
  j["detector_stage"] = stage_to_json(detector_stage);
  j["pretrain_stage"] = stage_to_json(pretrain_stage);
  j["finetune_stage"] = stage_to_json(finetune_stage);
  j["detector_shape"] = shape_to_json(detector_shape);
  j["encoder_shape"] = shape_to_json(encoder_shape);
  j["decoder_shape"] = shape_to_json(decoder_shape);
  j["probe_shape"] = shape_to_json(probe_shape);
  j["detector_head_hidden"] = detector_head_hidden;
  j["classifier_head_hidden"] = classifier_head_hidden;
  j["probe_head_hidden"] = probe_head_hidden;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw IoError(cat("config json: ", e.what()));
  }
  TrainConfig c;
  try {
    c.dataset_dir = j.at("dataset").get<std::string>();
    c.seed = j.at("seed").get<uint64_t>();
    c.batch_size = j.at("batch_size").get<int>();
    c.weight_decay = j.at("weight_decay").get<float>();
    c.beta1 = j.at("beta1").get<float>();
    c.beta2 = j.at("beta2").get<float>();
    c.lambda = j.at("lambda").get<float>();
    c.omega = j.at("omega").get<float>();
    c.tau_snn = j.at("tau_snn").get<float>();
    c.tau_cl = j.at("tau_cl").get<float>();
    c.mask_ratio_pretrain = j.at("mask_ratio_pretrain").get<float>();
    c.mask_ratio_finetune = j.at("mask_ratio_finetune").get<float>();
    c.epsilon = j.at("epsilon").get<float>();
    c.pgd_steps = j.at("pgd_steps").get<int>();
    c.pgd_step_size = j.at("pgd_step_size").get<float>();
    c.lr_batch_scaling = j.at("lr_batch_scaling").get<bool>();
    c.descend_to_target = j.at("descend_to_target").get<bool>();
    c.aug_flip = j.at("aug_flip").get<bool>();
    c.aug_pad = j.at("aug_pad").get<int>();
    c.rec_target = j.at("rec_target").get<std::string>();
    c.eval_mask_draws = j.at("eval_mask_draws").get<int>();
    c.eval_max_samples = j.at("eval_max_samples").get<int>();
    c.patch = j.at("patch").get<int>();
    c.detector_stage = stage_from_json(j.at("detector_stage"));
    c.pretrain_stage = stage_from_json(j.at("pretrain_stage"));
    c.finetune_stage = stage_from_json(j.at("finetune_stage"));
    c.detector_shape = shape_from_json(j.at("detector_shape"));
    c.encoder_shape = shape_from_json(j.at("encoder_shape"));
    c.decoder_shape = shape_from_json(j.at("decoder_shape"));
    c.probe_shape = shape_from_json(j.at("probe_shape"));
    c.detector_head_hidden = j.at("detector_head_hidden").get<int>();
    c.classifier_head_hidden = j.at("classifier_head_hidden").get<int>();
    c.probe_head_hidden = j.at("probe_head_hidden").get<int>();
  } catch (const json::exception& e) {
    throw IoError(cat("config json: ", e.what()));
  }
  return c;
}

namespace {

struct KeyValue {
  std::string key, value;
  int line;
};

void parse_lines(const std::string& text, const std::string& origin_dir, std::vector<KeyValue>& out,
                 std::vector<std::string>& errs, int depth) {
  if (depth > 8) {
    errs.push_back("config: include depth exceeds 8");
    return;
  }
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      const size_t b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      const size_t e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include ", 0) == 0) {
      const std::string inc = trim(line.substr(8));
      const fs::path p = fs::path(inc).is_absolute() ? fs::path(inc) : fs::path(origin_dir) / inc;
      try {
        parse_lines(read_text_file(p.string()), p.parent_path().string(), out, errs, depth + 1);
      } catch (const IoError& e) {
        errs.push_back(cat("line ", lineno, ": ", e.what()));
      }
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      errs.push_back(cat("line ", lineno, ": expected key = value, got '", line, "'"));
      continue;
    }
    KeyValue kv;
    kv.key = trim(line.substr(0, eq));
    kv.value = trim(line.substr(eq + 1));
    kv.line = lineno;
    if (kv.key.empty()) {
      errs.push_back(cat("line ", lineno, ": empty key"));
      continue;
    }
    out.push_back(std::move(kv));
  }
}

bool parse_float_value(const std::string& s, float& out) {
  const size_t slash = s.find('/');
  try {
    size_t pos = 0;
    if (slash != std::string::npos) {
      const float num = std::stof(s.substr(0, slash), &pos);
      if (pos != slash) return false;
      const float den = std::stof(s.substr(slash + 1), &pos);
      if (pos != s.size() - slash - 1 || den == 0.0f) return false;
      out = num / den;
      return true;
    }
    out = std::stof(s, &pos);
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

bool parse_int_value(const std::string& s, int& out) {
  try {
    size_t pos = 0;
    out = std::stoi(s, &pos);
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

bool parse_bool_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
    return true;
  }
  return false;
}

bool parse_u64_value(const std::string& s, uint64_t& out) {
  try {
    size_t pos = 0;
    out = std::stoull(s, &pos);
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

}  // namespace

void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& origin_dir) {
  std::vector<KeyValue> kvs;
  std::vector<std::string> errs;
  parse_lines(text, origin_dir, kvs, errs, 0);

  auto fail = [&](const KeyValue& kv, const char* kind) {
    errs.push_back(cat("line ", kv.line, ": '", kv.key, "': expected ", kind, ", got '", kv.value, "'"));
  };

  for (const KeyValue& kv : kvs) {
    auto set_f = [&](float& dst) {
      if (!parse_float_value(kv.value, dst)) fail(kv, "number");
    };
    auto set_i = [&](int& dst) {
      if (!parse_int_value(kv.value, dst)) fail(kv, "integer");
    };
    auto set_b = [&](bool& dst) {
      if (!parse_bool_value(kv.value, dst)) fail(kv, "boolean");
    };

    const std::string& k = kv.key;
    if (k == "dataset") cfg.dataset_dir = kv.value;
    else if (k == "seed") {
      if (!parse_u64_value(kv.value, cfg.seed)) fail(kv, "unsigned integer");
    } else if (k == "batch_size") set_i(cfg.batch_size);
    else if (k == "weight_decay") set_f(cfg.weight_decay);
    else if (k == "beta1") set_f(cfg.beta1);
    else if (k == "beta2") set_f(cfg.beta2);
    else if (k == "lambda") set_f(cfg.lambda);
    else if (k == "omega") set_f(cfg.omega);
    else if (k == "tau_snn") set_f(cfg.tau_snn);
    else if (k == "tau_cl") set_f(cfg.tau_cl);
    else if (k == "mask_ratio_pretrain") set_f(cfg.mask_ratio_pretrain);
    else if (k == "mask_ratio_finetune") set_f(cfg.mask_ratio_finetune);
    else if (k == "epsilon") set_f(cfg.epsilon);
    else if (k == "pgd_steps") set_i(cfg.pgd_steps);
    else if (k == "pgd_step_size") set_f(cfg.pgd_step_size);
    else if (k == "lr_batch_scaling") set_b(cfg.lr_batch_scaling);
    else if (k == "descend_to_target") set_b(cfg.descend_to_target);
    else if (k == "aug_flip") set_b(cfg.aug_flip);
    else if (k == "aug_pad") set_i(cfg.aug_pad);
    else if (k == "rec_target") cfg.rec_target = kv.value;
    else if (k == "eval_mask_draws") set_i(cfg.eval_mask_draws);
    else if (k == "eval_max_samples") set_i(cfg.eval_max_samples);
    else if (k == "patch") set_i(cfg.patch);
    else if (k == "detector.epochs") set_i(cfg.detector_stage.epochs);
    else if (k == "detector.base_lr") set_f(cfg.detector_stage.base_lr);
    else if (k == "detector.warmup_epochs") set_i(cfg.detector_stage.warmup_epochs);
    else if (k == "pretrain.epochs") set_i(cfg.pretrain_stage.epochs);
    else if (k == "pretrain.base_lr") set_f(cfg.pretrain_stage.base_lr);
    else if (k == "pretrain.warmup_epochs") set_i(cfg.pretrain_stage.warmup_epochs);
    else if (k == "finetune.epochs") set_i(cfg.finetune_stage.epochs);
    else if (k == "finetune.base_lr") set_f(cfg.finetune_stage.base_lr);
    else if (k == "finetune.warmup_epochs") set_i(cfg.finetune_stage.warmup_epochs);
    else if (k == "detector.layers") set_i(cfg.detector_shape.layers);
    else if (k == "detector.hidden") set_i(cfg.detector_shape.hidden);
    else if (k == "detector.heads") set_i(cfg.detector_shape.heads);
    else if (k == "detector.mlp") set_i(cfg.detector_shape.mlp);
    else if (k == "detector.head_hidden") set_i(cfg.detector_head_hidden);
    else if (k == "encoder.layers") set_i(cfg.encoder_shape.layers);
    else if (k == "encoder.hidden") set_i(cfg.encoder_shape.hidden);
    else if (k == "encoder.heads") set_i(cfg.encoder_shape.heads);
    else if (k == "encoder.mlp") set_i(cfg.encoder_shape.mlp);
    else if (k == "decoder.layers") set_i(cfg.decoder_shape.layers);
    else if (k == "decoder.hidden") set_i(cfg.decoder_shape.hidden);
    else if (k == "decoder.heads") set_i(cfg.decoder_shape.heads);
    else if (k == "decoder.mlp") set_i(cfg.decoder_shape.mlp);
    else if (k == "probe.layers") set_i(cfg.probe_shape.layers);
    else if (k == "probe.hidden") set_i(cfg.probe_shape.hidden);
    else if (k == "probe.heads") set_i(cfg.probe_shape.heads);
    else if (k == "probe.mlp") set_i(cfg.probe_shape.mlp);
    else if (k == "probe.head_hidden") set_i(cfg.probe_head_hidden);
    else if (k == "classifier.head_hidden") set_i(cfg.classifier_head_hidden);
    else errs.push_back(cat("line ", kv.line, ": unknown key '", k, "'"));
  }

  cfg.detector_shape.patch = cfg.patch;
  cfg.encoder_shape.patch = cfg.patch;
  cfg.decoder_shape.patch = cfg.patch;
  cfg.probe_shape.patch = cfg.patch;

  for (const std::string& e : cfg.validate()) errs.push_back(cat("invalid: ", e));
  if (!errs.empty()) {
    std::string msg = "config errors:";
    for (const std::string& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

TrainConfig parse_config_file(const std::string& path) {
  TrainConfig cfg;
  const std::string text = read_text_file(path);
  apply_config_text(cfg, text, fs::path(path).parent_path().string());
  return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const NamedParams& params, const TrainConfig& cfg) {
  Archive a;
  json meta;
  meta["format"] = "rvit-checkpoint";
  meta["config"] = json::parse(cfg.to_json());
  meta["param_count"] = params.total_elems();
  a.meta_json = meta.dump();
  for (const auto& [name, t] : params.items) a.put(name, t);
  save_archive(path, a);
}

Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint c;
  c.archive = load_archive(path);
  json meta;
  try {
    meta = json::parse(c.archive.meta_json);
  } catch (const json::exception& e) {
    throw IoError(cat("checkpoint ", path, ": bad header: ", e.what()));
  }
  if (!meta.contains("config")) throw IoError(cat("checkpoint ", path, ": header carries no config"));
  c.config = TrainConfig::from_json(meta["config"].dump());
  return c;
}

void restore_params(const Archive& archive, NamedParams& params) {
  for (auto& [name, t] : params.items) {
    const Tensor& src = archive.get(name);
    if (src.shape() != t.shape()) {
      throw IoError(cat("checkpoint tensor '", name, "': stored ", shape_str(src.shape()), ", model expects ",
                        shape_str(t.shape())));
    }
    std::copy(src.data(), src.data() + src.numel(), t.data());
  }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : path_(path), columns_(header.size()) {
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) buffer_ += ",";
    buffer_ += header[i];
  }
  buffer_ += "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw ValueError(cat("csv ", path_, ": row has ", cells.size(), " cells"));
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) buffer_ += ",";
    buffer_ += cells[i];
  }
  buffer_ += "\n";
}

void CsvWriter::close() {
  if (closed_) return;
  write_text_file(path_, buffer_);
  closed_ = true;
}

}  // namespace rvit

#include "rvit/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rvit/pipeline.hpp"

namespace rvit {

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out = "out";
  std::string checkpoint;
  std::optional<float> epsilon;
};

TrainConfig resolve_config(const CommonArgs& args, const std::string& fallback_checkpoint = "") {
  TrainConfig cfg;
  if (!args.config.empty()) {
    cfg = parse_config_file(args.config);
  } else if (!fallback_checkpoint.empty()) {
    cfg = load_checkpoint(fallback_checkpoint).config;
  } else {
    throw ConfigError("no --config given");
  }
  if (args.seed.has_value()) cfg.seed = *args.seed;
  if (args.epsilon.has_value()) cfg.epsilon = *args.epsilon;
  return cfg;
}

void add_epsilon_option(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option_function<std::string>(
      "--epsilon",
      [&args](const std::string& v) {
        const size_t slash = v.find('/');
        float value = 0.0f;
        try {
          if (slash != std::string::npos) {
            value = std::stof(v.substr(0, slash)) / std::stof(v.substr(slash + 1));
          } else {
            value = std::stof(v);
          }
        } catch (...) {
          throw CLI::ValidationError("--epsilon", "expected a number or fraction like 8/255");
        }
        args.epsilon = value;
      },
      "l-inf budget (number or fraction, e.g. 8/255)");
}

void print_eval_report(const EvalReport& rep) {
  std::printf("samples: %d\n", rep.sample_count);
  std::printf("%-12s %-8s %12s %12s %12s\n", "attack", "epsilon", "robust_acc", "det_acc", "joint_acc");
  std::printf("%-12s %-8s %12.4f %12.4f %12.4f\n", "none", "0", rep.standard_acc, rep.clean_det_acc,
              rep.clean_joint_acc);
  for (const auto& row : rep.attacks) {
    std::printf("%-12s %-8.4g %12.4f %12.4f %12.4f\n", row.attack.c_str(), static_cast<double>(row.epsilon),
                row.robust_acc, row.det_acc, row.joint_acc);
  }
}

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"robust ViT pipeline: detector + dual-encoder masked classifier"};
  app.require_subcommand(1);

  CommonArgs args;
  std::vector<std::string> attacks;
  std::string dataset_dir;
  std::string split = "test";
  std::string ablate_switch;
  std::string which = "detector";
  std::optional<float> mask_ratio;
  int max_items = 0;
  int synth_classes = 2, synth_n = 2000, synth_h = 16, synth_w = 16, synth_c = 1;
  uint64_t synth_seed = 0;

  auto add_common = [&](CLI::App* cmd, bool with_ckpt) {
    cmd->add_option("--config", args.config, "key=value config file");
    cmd->add_option("--seed", args.seed, "seed override");
    cmd->add_option("--out", args.out, "output directory or file");
    if (with_ckpt) cmd->add_option("--checkpoint", args.checkpoint, "checkpoint archive")->required();
    add_epsilon_option(cmd, args);
  };

  CLI::App* pretrain = app.add_subcommand("pretrain", "joint detector training + masked dual-encoder pretraining");
  pretrain->add_option("--config", args.config, "key=value config file")->required();
  pretrain->add_option("--seed", args.seed, "seed override");
  pretrain->add_option("--out", args.out, "output directory");

  CLI::App* finetune = app.add_subcommand("finetune", "freeze backbone, fit the classification head");
  add_common(finetune, true);

  CLI::App* eval = app.add_subcommand("eval", "standard accuracy, robustness and detection metrics");
  add_common(eval, true);
  eval->add_option("--attack", attacks, "attack names: none fgsm fgsm_ll pgd-<k> (repeatable)");
  eval->add_option("--dataset", dataset_dir, "dataset directory (defaults to the checkpoint's)");
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--max-items", max_items, "cap evaluated items");

  CLI::App* ablate = app.add_subcommand("ablate", "train/evaluate an ablated variant");
  add_common(ablate, true);
  ablate->add_option("--switch", ablate_switch, "no-snn | no-gb | no-msa-bias | no-cl | no-ae | mask-ratio")
      ->required();
  ablate->add_option("--mask-ratio", mask_ratio, "single ratio for the mask-ratio switch");

  CLI::App* attack = app.add_subcommand("attack", "write adversarial example batches (MTEN1 + JSON sidecar)");
  add_common(attack, true);
  attack->add_option("--attack", attacks, "attack name")->required();
  attack->add_option("--dataset", dataset_dir, "dataset directory");
  attack->add_option("--max-items", max_items, "cap generated items");

  CLI::App* saliency = app.add_subcommand("saliency", "write guided-backprop variants (MTEN1)");
  add_common(saliency, true);
  saliency->add_option("--dataset", dataset_dir, "dataset directory");
  saliency->add_option("--max-items", max_items, "cap items");

  CLI::App* exp = app.add_subcommand("export-embeddings", "write pooled representations with labels to CSV");
  add_common(exp, true);
  exp->add_option("--dataset", dataset_dir, "dataset directory");
  exp->add_option("--which", which, "detector or classifier")->check(CLI::IsMember({"detector", "classifier"}));
  exp->add_option("--max-items", max_items, "cap items");

  CLI::App* synth = app.add_subcommand("synth-data", "generate the toy stripe dataset");
  synth->add_option("--out", args.out, "dataset directory")->required();
  synth->add_option("--classes", synth_classes, "class count");
  synth->add_option("--n", synth_n, "total samples");
  synth->add_option("--height", synth_h, "image height");
  synth->add_option("--width", synth_w, "image width");
  synth->add_option("--channels", synth_c, "image channels");
  synth->add_option("--seed", synth_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  if (pretrain->parsed()) {
    TrainConfig cfg = resolve_config(args);
    PretrainRunResult res = run_pretrain(cfg, args.out);
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
    std::printf("detector held-out accuracy: %.4f\n", static_cast<double>(res.detector_heldout_acc));
  } else if (finetune->parsed()) {
    TrainConfig cfg = resolve_config(args, args.checkpoint);
    FinetuneRunResult res = run_finetune(cfg, args.checkpoint, args.out);
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
    if (!res.log.empty()) {
      std::printf("final train ce: %s acc: %s\n", format_value(res.log.back().ce).c_str(),
                  format_value(res.log.back().train_acc).c_str());
    }
  } else if (eval->parsed()) {
    if (attacks.empty()) attacks = {"none"};
    const std::string out_csv =
        args.out.empty() ? "" : (fs::path(args.out).has_extension() ? args.out
                                                                    : (fs::path(args.out) / "eval.csv").string());
    if (!args.out.empty() && !fs::path(args.out).has_extension()) fs::create_directories(args.out);
    EvalReport rep = run_eval(args.checkpoint, dataset_dir, attacks, split, out_csv, args.epsilon, {},
                              max_items > 0 ? std::optional<int>(max_items) : std::nullopt);
    print_eval_report(rep);
  } else if (ablate->parsed()) {
    std::vector<AblateRow> rows = run_ablate(args.checkpoint, ablate_switch, args.out, mask_ratio);
    for (const auto& r : rows) {
      std::printf("%-16s %-14s %s\n", r.variant.c_str(), r.metric.c_str(), format_value(r.value).c_str());
    }
  } else if (attack->parsed()) {
    if (attacks.size() != 1) throw ConfigError("attack: exactly one --attack name expected");
    run_attack_dump(args.checkpoint, dataset_dir, attacks[0], args.epsilon, args.out, max_items);
    std::printf("wrote %s\n", args.out.c_str());
  } else if (saliency->parsed()) {
    run_saliency_dump(args.checkpoint, dataset_dir, args.out, max_items);
    std::printf("wrote %s\n", args.out.c_str());
  } else if (exp->parsed()) {
    const std::string out_csv = fs::path(args.out).has_extension()
                                    ? args.out
                                    : (fs::create_directories(args.out),
                                       (fs::path(args.out) / "embeddings.csv").string());
    run_export_embeddings(args.checkpoint, dataset_dir, which, out_csv, max_items);
    std::printf("wrote %s\n", out_csv.c_str());
  } else if (synth->parsed()) {
    DatasetManifest man =
        synth_toy_dataset(args.out, synth_classes, synth_n, synth_h, synth_w, synth_c, synth_seed);
    std::printf("wrote %s (%d train / %d test)\n", man.dir.c_str(), man.split_counts.at("train"),
                man.split_counts.at("test"));
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace rvit

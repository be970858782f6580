#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "mphm/checkpoint.hpp"
#include "mphm/complexity.hpp"
#include "mphm/data.hpp"
#include "mphm/errors.hpp"
#include "mphm/harness.hpp"
#include "mphm/train.hpp"

namespace fs = std::filesystem;
using namespace mphm;

namespace {

PairedDataset dataset_or_throw(const std::string& dir) {
  if (dir.empty()) throw ConfigError("no dataset directory given (data_dir)");
  return load_paired_root(dir);
}

void log_config(const RunConfig& cfg) {
  std::cerr << "# resolved config\n" << cfg.to_text();
}

int run(int argc, char** argv) {
  CLI::App app{"Image deraining: train, evaluate, infer, ablate and visualize"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", config_path, "Run config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--set", overrides, "key=value override (repeatable)");

  std::string ckpt, data_dir, out;
  auto* eval_cmd = app.add_subcommand("eval", "Per-image PSNR/SSIM of a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt)->required();
  eval_cmd->add_option("--data", data_dir, "Directory with rain/ and norain/")->required();
  eval_cmd->add_option("--out", out, "CSV output")->required();

  std::string in;
  auto* infer_cmd = app.add_subcommand("infer", "Derain one image");
  infer_cmd->add_option("--ckpt", ckpt)->required();
  infer_cmd->add_option("--in", in)->required();
  infer_cmd->add_option("--out", out)->required();

  std::string axis;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare variants along one axis");
  ablate_cmd->add_option("--config", config_path)->check(CLI::ExistingFile);
  ablate_cmd->add_option("--set", overrides);
  ablate_cmd->add_option("--axis", axis,
                         "hmm_branches | branch_fusion | prior_injection | priors_fusion")
      ->required();
  ablate_cmd->add_option("--out", out)->required();

  std::string kind, pred_path, gt_path, layer;
  auto* vis_cmd = app.add_subcommand("visualize", "Residual heatmap or feature PCA");
  vis_cmd->add_option("--kind", kind, "residual_heatmap | pca_features")->required();
  vis_cmd->add_option("--ckpt", ckpt, "Model (pca_features, or heatmap without --pred)");
  vis_cmd->add_option("--in", in, "Rainy input image");
  vis_cmd->add_option("--pred", pred_path, "Prediction image (residual_heatmap)");
  vis_cmd->add_option("--gt", gt_path, "Ground-truth image (residual_heatmap)");
  vis_cmd->add_option("--layer", layer, "Feature tap (pca_features)")->default_val("bottleneck");
  vis_cmd->add_option("--out", out)->required();

  int64_t count = 20, size = 64;
  uint64_t seed = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic rainy/clean pairs");
  gen_cmd->add_option("--out", out)->required();
  gen_cmd->add_option("--n", count)->default_val(20);
  gen_cmd->add_option("--size", size, "Square image side")->default_val(64);
  gen_cmd->add_option("--seed", seed)->default_val(0);

  auto* defaults_cmd = app.add_subcommand("config-defaults", "Print the full default config");
  auto* complexity_cmd = app.add_subcommand("complexity", "Params and MACs at 256x256");
  complexity_cmd->add_option("--config", config_path)->check(CLI::ExistingFile);
  complexity_cmd->add_option("--set", overrides);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*train_cmd) {
    const auto cfg = resolve_run_config(config_path, overrides);
    log_config(cfg);
    const auto data = dataset_or_throw(cfg.data_dir);
    const auto result = train(cfg, data, nullptr, [&](const StepRecord& r) {
      if (r.step % cfg.log_every == 0 || r.step + 1 == cfg.steps) {
        std::cerr << "step " << r.step << " lr " << r.lr << " loss " << r.loss << " psnr "
                  << r.psnr << "\n";
      }
    });
    if (!result.checkpoint.empty()) std::cout << result.checkpoint.string() << "\n";
    return 0;
  }
  if (*eval_cmd) {
    auto model = load_model(ckpt);
    const auto summary = evaluate(model, load_paired_root(data_dir), out);
    std::cout << "mean psnr " << summary.mean_psnr << " ssim " << summary.mean_ssim << "\n";
    return 0;
  }
  if (*infer_cmd) {
    auto model = load_model(ckpt);
    infer_file(model, in, out);
    return 0;
  }
  if (*ablate_cmd) {
    const auto cfg = resolve_run_config(config_path, overrides);
    log_config(cfg);
    const auto train_data = dataset_or_throw(cfg.data_dir);
    const auto eval_data = cfg.eval_dir.empty() ? train_data : load_paired_root(cfg.eval_dir);
    for (const auto& row : ablate(cfg, axis, train_data, eval_data, out)) {
      std::cout << row.name << ": " << row.psnr << " dB, " << row.ssim << " (seed " << row.seed
                << ")\n";
    }
    return 0;
  }
  if (*vis_cmd) {
    if (kind == "residual_heatmap") {
      if (gt_path.empty()) throw ConfigError("residual_heatmap needs --gt");
      torch::Tensor pred;
      if (!pred_path.empty()) {
        pred = read_png(pred_path);
      } else {
        if (ckpt.empty() || in.empty()) throw ConfigError("give --pred, or --ckpt and --in");
        auto model = load_model(ckpt);
        torch::NoGradGuard guard;
        pred = model->forward(read_png(in).unsqueeze(0), true).squeeze(0);
      }
      write_png(out, residual_heatmap(pred, read_png(gt_path)));
      return 0;
    }
    if (kind == "pca_features") {
      if (ckpt.empty() || in.empty()) throw ConfigError("pca_features needs --ckpt and --in");
      auto model = load_model(ckpt);
      const auto image = read_png(in);
      auto rgb = pca_features(capture_feature(model, image, layer));
      rgb = bilinear_resize(rgb.unsqueeze(0), image.size(1), image.size(2)).squeeze(0);
      write_png(out, rgb);
      return 0;
    }
    throw ConfigError("unknown visualization kind '" + kind +
                      "' (expected residual_heatmap or pca_features)");
  }
  if (*gen_cmd) {
    generate_pairs(out, count, size, size, seed);
    return 0;
  }
  if (*defaults_cmd) {
    std::cout << "# Flat key = value run config. Precedence: defaults < file < MPHM_SEED < --set.\n"
              << RunConfig{}.to_text();
    return 0;
  }
  if (*complexity_cmd) {
    const auto cfg = resolve_run_config(config_path, overrides);
    const auto c = count_params_flops(cfg.model);
    std::cout << "params " << c.params << " (" << c.params / 1e6 << " M)\nmacs " << c.macs << " ("
              << c.macs / 1e9 << " G) at 256x256\n";
    for (const auto& [name, part] : c.parts) {
      std::cout << "  " << name << " " << part.params << " " << part.macs << "\n";
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

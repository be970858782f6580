#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mphm/data.hpp"
#include "mphm/model.hpp"
#include "mphm/train.hpp"

namespace mphm {

struct EvalRow {
  std::string id;
  double psnr = 0;
  double ssim = 0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  double mean_psnr = 0;
  double mean_ssim = 0;
};

/// Full-image inference (no grad, clamped) on every pair. DataError on an
/// empty dataset. When `csv` is non-empty writes image_id,psnr,ssim rows plus
/// a final "mean" row.
EvalSummary evaluate(Mphm& model, const PairedDataset& data,
                     const std::filesystem::path& csv = {});

/// Builds the network from the config stored in the checkpoint and loads it.
Mphm load_model(const std::filesystem::path& checkpoint);

/// Derains one image file into an 8-bit PNG.
void infer_file(Mphm& model, const std::filesystem::path& in, const std::filesystem::path& out);

struct AblationVariant {
  std::string name;
  RunConfig config;
};

/// Axes: hmm_branches, branch_fusion, prior_injection, priors_fusion.
/// Variants differ from `base` only in the axis keys (checked).
std::vector<AblationVariant> ablation_variants(const RunConfig& base, const std::string& axis);
std::vector<std::string> ablation_axis_keys(const std::string& axis);

struct AblationRow {
  std::string name;
  std::vector<std::pair<std::string, std::string>> settings;
  double psnr = 0;
  double ssim = 0;
  double params_m = 0;
  double gmacs = 0;
  uint64_t seed = 0;
};

/// Trains and evaluates each variant with the base seed and budget. Writes
/// ablation.md and ablation.csv into `out_dir` when non-empty.
std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis,
                                const PairedDataset& train_data, const PairedDataset& eval_data,
                                const std::filesystem::path& out_dir);

/// |pred - gt| summed over channels, scaled by its maximum, through a
/// black-red-yellow-white ramp. Returns (3, H, W).
torch::Tensor residual_heatmap(const torch::Tensor& pred, const torch::Tensor& gt);

/// Top-3 principal components of the (C, H, W) map's channel vectors as RGB,
/// each min-max normalized. Components whose range is below 1e-6 of the
/// leading component's range render as 0. Returns (3, H, W).
torch::Tensor pca_features(const torch::Tensor& feature);

/// Runs `model` on `image` and returns the named tap (C, h, w). StructuralError
/// listing valid names for an unknown layer.
torch::Tensor capture_feature(Mphm& model, const torch::Tensor& image, const std::string& layer);

}  // namespace mphm

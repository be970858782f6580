#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mphm/hmm.hpp"
#include "mphm/ops.hpp"
#include "mphm/pfi.hpp"
#include "mphm/priors.hpp"

namespace mphm {

/// Every architectural hyperparameter of the network.
struct ModelConfig {
  int64_t base_channels = 32;
  std::vector<int64_t> stage_depths{4, 6, 8, 6, 4};
  /// Empty: base_channels * 2^min(i, S-1-i).
  std::vector<int64_t> channel_plan;
  /// Empty: 2^min(i, S-1-i).
  std::vector<int64_t> heads;

  // HMM
  int64_t dw_kernel = 3;
  bool ffcm_enabled = true;
  bool dw_enabled = true;
  BranchFusion branch_fusion = BranchFusion::kConcatConv;
  int64_t vssm_expand = 2;
  int64_t d_state = 8;
  double ffcm_expand = 2.2;

  // PFI
  bool inject_visual = true;
  bool inject_text = true;
  PriorFusion prior_fusion = PriorFusion::kHierarchical;
  bool text_queries = true;
  double gdfn_expansion = 2.66;
  int64_t max_attention_tokens = 4096;
  int64_t max_kv_tokens = 1024;

  // Priors
  std::string prior_provider = "mock";
  std::string prompt = "No rain";
  uint64_t prior_seed = 0;
  std::string feature_file;
  int64_t visual_dim = 384;
  int64_t text_dim = 512;
  int64_t patch = 16;
  int64_t clip_bottleneck = 128;

  std::vector<int64_t> channels() const;
  std::vector<int64_t> stage_heads() const;
  int64_t stage_count() const { return static_cast<int64_t>(stage_depths.size()); }
  /// Number of 2x downsamplings.
  int64_t levels() const { return stage_count() / 2; }
  /// Input sides are reflect-padded up to a multiple of this.
  int64_t size_multiple() const { return int64_t{1} << levels(); }

  HmmConfig hmm_config(int64_t stage) const;
  PfiConfig pfi_config(int64_t stage) const;
  PriorOptions prior_options() const;

  /// Throws ConfigError on an asymmetric plan, even stage count, or channel
  /// counts not divisible by 4 and the stage's heads.
  void validate() const;

  /// Canonical ordered (key, value) listing; keys are unprefixed ("base_channels").
  std::vector<std::pair<std::string, std::string>> entries() const;
  /// Sets one field from its textual form. Throws ConfigError for unknown keys
  /// or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// "key = value" lines of entries().
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  /// FNV-1a of to_text().
  uint64_t hash() const;

  /// Keys whose values differ between two configs.
  static std::vector<std::string> diff(const ModelConfig& a, const ModelConfig& b);
};

/// Named intermediate features captured during a forward pass.
using FeatureTaps = std::map<std::string, torch::Tensor>;

/// U-shaped deraining network: HMM encoder stages with strided downsampling,
/// HMM bottleneck, decoder stages with pixel-shuffle upsampling and skip
/// fusion, one PFI after the HMM stack of the bottleneck and every decoder
/// stage, and a residual output: prediction = rainy - R.
struct MphmImpl : torch::nn::Module {
  explicit MphmImpl(ModelConfig cfg);

  /// Arbitrary-size input (B, 3, H, W); reflect-pads to a multiple of
  /// size_multiple(), builds the priors, runs the network and crops back.
  /// `clamp` limits the prediction to [0, 1] (inference).
  torch::Tensor forward(const torch::Tensor& rainy, bool clamp = false);

  /// Input already padded; `bundle` must match injection_shapes().
  torch::Tensor forward_padded(const torch::Tensor& rainy, const PriorBundle& bundle,
                               bool clamp = false);

  /// Predicted rain residual R for a padded input.
  torch::Tensor residual(const torch::Tensor& rainy, const PriorBundle& bundle);

  PriorBundle priors(const torch::Tensor& padded_rainy);

  /// Shapes of all stages for an (H, W) padded input, stage order.
  std::vector<StageShape> stage_shapes(int64_t height, int64_t width) const;
  /// Shapes of the PFI sites, finest first.
  std::vector<StageShape> injection_shapes(int64_t height, int64_t width) const;

  /// Zeroes the output convolution so R = 0.
  void zero_output();
  /// zero_output() plus zeroed PFI residual branches.
  void make_identity();

  /// When non-null, forward() records features under tap_names().
  FeatureTaps* taps = nullptr;
  std::vector<std::string> tap_names() const;

  ModelConfig cfg;
  Conv stem{nullptr};
  torch::nn::ModuleList encoder, downsample, upsample, skip_fuse, decoder, pfi;
  torch::nn::Sequential bottleneck{nullptr};
  Conv output{nullptr};
  PriorGenerator prior_generator{nullptr};
};
TORCH_MODULE(Mphm);

int64_t count_parameters(torch::nn::Module& module);

}  // namespace mphm

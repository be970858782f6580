#pragma once

#include <string>

#include <torch/torch.h>

#include "mphm/ops.hpp"
#include "mphm/vssm.hpp"

namespace mphm {

/// How the spatial and frequency branch outputs are merged inside an HMM.
enum class BranchFusion { kConcatConv, kAddition, kCrossAttention };

const char* to_string(BranchFusion fusion);
BranchFusion parse_branch_fusion(const std::string& name);

struct HmmConfig {
  int64_t channels = 32;
  int64_t dw_kernel = 3;
  bool ffcm_enabled = true;
  bool dw_enabled = true;
  BranchFusion fusion = BranchFusion::kConcatConv;
  VssmOptions vssm;
  /// Hidden width of the frequency branch relative to `channels`.
  double ffcm_expand = 2.2;
  /// Heads and token budget for the cross-attention fusion variant.
  int64_t heads = 1;
  int64_t max_attention_tokens = 4096;
  int64_t max_kv_tokens = 1024;

  /// Throws ConfigError when the channel count cannot be split four ways, the
  /// kernel is even, or heads do not divide channels.
  void validate() const;
  int64_t ffcm_hidden() const;
};

/// Channel-split global/local hierarchy.
///
/// [f1, f2, f3, f4] = split(x)
/// f1, f3 -> VSSM -> 1x1;  f2, f4 -> depthwise
/// GL1 = [f1, f2] -> VSSM -> 1x1;  GL2 = [f3, f4] -> depthwise
/// out = 1x1([GL1, GL2])
///
/// With `dw_enabled == false` the depthwise stages are identities.
struct SpatialBranchImpl : torch::nn::Module {
  explicit SpatialBranchImpl(const HmmConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t quarter;
  bool dw_enabled;
  VssmBlock global1{nullptr}, global3{nullptr}, global_pair{nullptr};
  torch::nn::Conv2d refine1{nullptr}, refine3{nullptr}, refine_pair{nullptr};
  DepthwiseConv local2{nullptr}, local4{nullptr}, local_pair{nullptr};
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(SpatialBranch);

/// Frequency branch: pointwise expansion, spectral pointwise mixing of the
/// stacked real/imaginary parts (residual, GELU), inverse transform, parallel
/// 3x3/5x5 depthwise paths, pointwise merge of [identity, 3x3, 5x5].
struct FfcmImpl : torch::nn::Module {
  FfcmImpl(int64_t channels, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t channels;
  int64_t hidden;
  torch::nn::Conv2d expand{nullptr};
  torch::nn::Conv2d spectral_mix{nullptr};
  DepthwiseConv local3{nullptr}, local5{nullptr};
  torch::nn::Conv2d merge{nullptr};
};
TORCH_MODULE(Ffcm);

/// Hierarchical Mamba Module: x + fuse(spatial(x), frequency(x)).
struct HmmImpl : torch::nn::Module {
  explicit HmmImpl(HmmConfig cfg);
  torch::Tensor forward(const torch::Tensor& x);

  /// Zeroes the projection(s) that feed the residual sum, making the module the
  /// identity. For the addition scheme that is the last layer of each branch.
  void zero_residual();

  HmmConfig cfg;
  SpatialBranch spatial{nullptr};
  Ffcm frequency{nullptr};
  torch::nn::Conv2d fuse{nullptr};
  ChannelNorm query_norm{nullptr}, key_norm{nullptr};
  Attention cross{nullptr};
};
TORCH_MODULE(Hmm);

}  // namespace mphm

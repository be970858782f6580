#pragma once

#include <string>

#include <torch/torch.h>

#include "mphm/ops.hpp"

namespace mphm {

/// How the two priors enter a PFI block.
enum class PriorFusion { kHierarchical, kAddition, kConcat, kJointCrossAttention };

const char* to_string(PriorFusion fusion);
PriorFusion parse_prior_fusion(const std::string& name);

struct PfiConfig {
  int64_t channels = 32;
  int64_t heads = 1;
  bool inject_visual = true;
  bool inject_text = true;
  PriorFusion fusion = PriorFusion::kHierarchical;
  /// true: text tokens query the image and a pooled descriptor modulates the
  /// map. false: image tokens query the text tokens.
  bool text_queries = true;
  double gdfn_expansion = 2.66;
  /// Query-side token budget; larger maps are average-pooled for attention and
  /// the result is resized back.
  int64_t max_attention_tokens = 4096;
  /// Key/value-side token budget.
  int64_t max_kv_tokens = 1024;

  void validate() const;
  int64_t gdfn_hidden() const;
};

/// feature + attn(q = feature, kv = visual prior), resized back to the feature grid when pooled.
struct VisualInjectionImpl : torch::nn::Module {
  explicit VisualInjectionImpl(const PfiConfig& cfg);
  torch::Tensor forward(const torch::Tensor& feature, const torch::Tensor& prior,
                        torch::Tensor* weights = nullptr);

  int64_t max_q, max_kv;
  ChannelNorm query_norm{nullptr}, prior_norm{nullptr};
  Attention attention{nullptr};
};
TORCH_MODULE(VisualInjection);

/// Text-prior injection. In text-query mode the text tokens attend over F,
/// the mean descriptor passes through `modulation` to a per-channel
/// (scale, shift), and F + scale * F + shift is returned.
struct TextInjectionImpl : torch::nn::Module {
  explicit TextInjectionImpl(const PfiConfig& cfg);
  /// text: (batch, N_t, C)
  torch::Tensor forward(const torch::Tensor& feature, const torch::Tensor& text,
                        torch::Tensor* weights = nullptr);

  bool text_queries;
  int64_t max_q, max_kv;
  ChannelNorm feature_norm{nullptr};
  torch::nn::LayerNorm text_norm{nullptr};
  Attention attention{nullptr};
  torch::nn::Linear modulation{nullptr};
};
TORCH_MODULE(TextInjection);

struct SelfAttentionBlockImpl : torch::nn::Module {
  explicit SelfAttentionBlockImpl(const PfiConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, torch::Tensor* weights = nullptr);

  int64_t max_q, max_kv;
  ChannelNorm norm{nullptr};
  Attention attention{nullptr};
};
TORCH_MODULE(SelfAttentionBlock);

/// Gated depthwise feedforward:
/// x + W_out( GELU(dw_a(W_a LN(x))) * dw_b(W_b LN(x)) )
struct GdfnImpl : torch::nn::Module {
  GdfnImpl(int64_t channels, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t hidden;
  ChannelNorm norm{nullptr};
  torch::nn::Conv2d project_in{nullptr};
  DepthwiseConv local{nullptr};
  torch::nn::Conv2d project_out{nullptr};
};
TORCH_MODULE(Gdfn);

/// Priors Fusion Injection: prior injection (per `fusion`), then
/// multi-head self-attention, then GDFN, all residual.
///
/// Injection output projections start at zero so a fresh block does not
/// perturb the backbone until the priors have been learned.
struct PfiImpl : torch::nn::Module {
  explicit PfiImpl(PfiConfig cfg);

  /// visual: (B, C, H, W) or undefined; text: (B, N_t, C) or undefined.
  torch::Tensor forward(const torch::Tensor& feature, const torch::Tensor& visual,
                        const torch::Tensor& text);

  /// Zeroes every residual-branch output projection; the block becomes the identity.
  void zero_residual();

  PfiConfig cfg;
  VisualInjection visual_injection{nullptr};
  TextInjection text_injection{nullptr};
  torch::nn::Conv2d fuse_visual{nullptr};  // addition
  torch::nn::Linear fuse_text{nullptr};    // addition
  torch::nn::Conv2d fuse_concat{nullptr};  // concat
  ChannelNorm joint_query_norm{nullptr}, joint_visual_norm{nullptr};  // joint
  torch::nn::LayerNorm joint_text_norm{nullptr};
  Attention joint_attention{nullptr};
  SelfAttentionBlock self_attention{nullptr};
  Gdfn gdfn{nullptr};
};
TORCH_MODULE(Pfi);

}  // namespace mphm

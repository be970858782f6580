#include "mphm/hmm.hpp"

#include <cmath>

#include "mphm/errors.hpp"

namespace mphm {

const char* to_string(BranchFusion fusion) {
  switch (fusion) {
    case BranchFusion::kConcatConv:
      return "concat_conv";
    case BranchFusion::kAddition:
      return "addition";
    case BranchFusion::kCrossAttention:
      return "cross_attention";
  }
  return "?";
}

BranchFusion parse_branch_fusion(const std::string& name) {
  if (name == "concat_conv") return BranchFusion::kConcatConv;
  if (name == "addition") return BranchFusion::kAddition;
  if (name == "cross_attention") return BranchFusion::kCrossAttention;
  throw ConfigError("unknown branch fusion '" + name +
                    "' (expected concat_conv, addition or cross_attention)");
}

void HmmConfig::validate() const {
  if (channels <= 0 || channels % 4 != 0) {
    throw ConfigError("HMM channels must be a positive multiple of 4, got " +
                      std::to_string(channels));
  }
  if (dw_kernel <= 0 || dw_kernel % 2 == 0) {
    throw ConfigError("HMM depthwise kernel must be odd, got " + std::to_string(dw_kernel));
  }
  if (heads <= 0 || channels % heads != 0) {
    throw ConfigError("HMM heads " + std::to_string(heads) + " do not divide channels " +
                      std::to_string(channels));
  }
  if (ffcm_expand <= 0) throw ConfigError("ffcm_expand must be positive");
}

int64_t HmmConfig::ffcm_hidden() const {
  return std::max<int64_t>(1, static_cast<int64_t>(std::lround(ffcm_expand * channels)));
}

SpatialBranchImpl::SpatialBranchImpl(const HmmConfig& cfg)
    : quarter(cfg.channels / 4), dw_enabled(cfg.dw_enabled) {
  cfg.validate();
  const auto half = 2 * quarter;
  global1 = register_module("global1", VssmBlock(quarter, cfg.vssm));
  refine1 = register_module("refine1", pointwise_conv(quarter, quarter));
  global3 = register_module("global3", VssmBlock(quarter, cfg.vssm));
  refine3 = register_module("refine3", pointwise_conv(quarter, quarter));
  global_pair = register_module("global_pair", VssmBlock(half, cfg.vssm));
  refine_pair = register_module("refine_pair", pointwise_conv(half, half));
  if (dw_enabled) {
    local2 = register_module("local2", DepthwiseConv(quarter, cfg.dw_kernel));
    local4 = register_module("local4", DepthwiseConv(quarter, cfg.dw_kernel));
    local_pair = register_module("local_pair", DepthwiseConv(half, cfg.dw_kernel));
  }
  out = register_module("out", pointwise_conv(cfg.channels, cfg.channels));
}

torch::Tensor SpatialBranchImpl::forward(const torch::Tensor& x) {
  if (x.size(1) != 4 * quarter) {
    throw StructuralError("spatial branch expects " + std::to_string(4 * quarter) +
                          " channels, got " + std::to_string(x.size(1)));
  }
  auto quarters = x.chunk(4, 1);
  auto global_a = refine1->forward(global1->forward(quarters[0]));
  auto local_a = dw_enabled ? local2->forward(quarters[1]) : quarters[1];
  auto global_b = refine3->forward(global3->forward(quarters[2]));
  auto local_b = dw_enabled ? local4->forward(quarters[3]) : quarters[3];

  // Second level: one pair mixed globally, the other locally.
  auto mixed_global =
      refine_pair->forward(global_pair->forward(torch::cat({global_a, local_a}, 1)));
  auto mixed_local = torch::cat({global_b, local_b}, 1);
  if (dw_enabled) mixed_local = local_pair->forward(mixed_local);
  return out->forward(torch::cat({mixed_global, mixed_local}, 1));
}

FfcmImpl::FfcmImpl(int64_t channels_, int64_t hidden_) : channels(channels_), hidden(hidden_) {
  expand = register_module("expand", pointwise_conv(channels, hidden));
  spectral_mix = register_module("spectral_mix", pointwise_conv(2 * hidden, 2 * hidden));
  local3 = register_module("local3", DepthwiseConv(hidden, 3));
  local5 = register_module("local5", DepthwiseConv(hidden, 5));
  merge = register_module("merge", pointwise_conv(3 * hidden, channels));
}

torch::Tensor FfcmImpl::forward(const torch::Tensor& x) {
  const auto h = x.size(2);
  const auto w = x.size(3);
  auto y = expand->forward(x);

  // Real input, so the half spectrum carries everything.
  auto spectrum = torch::fft::rfft2(y, c10::nullopt, {-2, -1}, "backward");
  auto stacked = torch::cat({torch::real(spectrum), torch::imag(spectrum)}, 1);
  if (!torch::isfinite(stacked).all().item<bool>()) {
    throw NumericError("FFCM: non-finite spectrum");
  }
  stacked = stacked + torch::gelu(spectral_mix->forward(stacked));
  auto parts = stacked.chunk(2, 1);
  auto mixed = torch::complex(parts[0].contiguous(), parts[1].contiguous());
  auto spatial = torch::fft::irfft2(mixed, std::vector<int64_t>{h, w}, {-2, -1}, "backward");

  auto paths = torch::cat({spatial, local3->forward(spatial), local5->forward(spatial)}, 1);
  return merge->forward(paths);
}

HmmImpl::HmmImpl(HmmConfig cfg_) : cfg(std::move(cfg_)) {
  cfg.validate();
  const auto c = cfg.channels;
  spatial = register_module("spatial", SpatialBranch(cfg));
  if (cfg.ffcm_enabled) {
    frequency = register_module("frequency", Ffcm(c, cfg.ffcm_hidden()));
  }
  switch (cfg.fusion) {
    case BranchFusion::kConcatConv:
      fuse = register_module("fuse", pointwise_conv(cfg.ffcm_enabled ? 2 * c : c, c));
      break;
    case BranchFusion::kAddition:
      break;
    case BranchFusion::kCrossAttention:
      query_norm = register_module("query_norm", ChannelNorm(c));
      key_norm = register_module("key_norm", ChannelNorm(c));
      cross = register_module("cross", Attention(c, cfg.heads));
      fuse = register_module("fuse", pointwise_conv(c, c));
      break;
  }
}

torch::Tensor HmmImpl::forward(const torch::Tensor& x) {
  auto spa = spatial->forward(x);
  torch::Tensor fre;
  if (cfg.ffcm_enabled) fre = frequency->forward(x);

  switch (cfg.fusion) {
    case BranchFusion::kConcatConv:
      return x + fuse->forward(fre.defined() ? torch::cat({spa, fre}, 1) : spa);
    case BranchFusion::kAddition:
      return fre.defined() ? x + spa + fre : x + spa;
    case BranchFusion::kCrossAttention: {
      const auto h = x.size(2);
      const auto w = x.size(3);
      auto q_map = limit_tokens(query_norm->forward(spa), cfg.max_attention_tokens);
      auto kv_map =
          limit_tokens(key_norm->forward(fre.defined() ? fre : spa), cfg.max_kv_tokens);
      auto attended = cross->forward(to_tokens(q_map), to_tokens(kv_map));
      auto attended_map =
          bilinear_resize(from_tokens(attended, q_map.size(2), q_map.size(3)), h, w);
      return x + fuse->forward(spa + attended_map);
    }
  }
  return x;
}

void HmmImpl::zero_residual() {
  torch::NoGradGuard guard;
  if (fuse) {
    fuse->weight.zero_();
    if (fuse->bias.defined()) fuse->bias.zero_();
    return;
  }
  spatial->out->weight.zero_();
  spatial->out->bias.zero_();
  if (frequency) {
    frequency->merge->weight.zero_();
    frequency->merge->bias.zero_();
  }
}

}  // namespace mphm

#include "mphm/complexity.hpp"

#include <cmath>

namespace mphm {
namespace {

Complexity norm_cost(int64_t channels) { return {2 * channels, 0, {}}; }

int64_t fft_macs(int64_t channels, int64_t h, int64_t w) {
  const auto n = h * w;
  return channels * n * static_cast<int64_t>(std::ceil(std::log2(static_cast<double>(n))));
}

Complexity attention_cost(int64_t dim, int64_t kv_dim, int64_t q_tokens, int64_t kv_tokens) {
  Complexity c;
  c += linear_cost(dim, dim, true, q_tokens);
  c += linear_cost(kv_dim, dim, true, kv_tokens);
  c += linear_cost(kv_dim, dim, true, kv_tokens);
  c += linear_cost(dim, dim, true, q_tokens);
  c.macs += 2 * q_tokens * kv_tokens * dim;
  return c;
}

int64_t grid_tokens(int64_t h, int64_t w, int64_t budget) {
  const auto [gh, gw] = limited_grid(h, w, budget);
  return gh * gw;
}

Complexity spatial_branch_cost(const HmmConfig& cfg, int64_t h, int64_t w) {
  const auto q = cfg.channels / 4;
  Complexity c;
  c += vssm_cost(q, cfg.vssm, h, w);
  c += conv_cost(q, q, 1, true, h, w);
  c += vssm_cost(q, cfg.vssm, h, w);
  c += conv_cost(q, q, 1, true, h, w);
  c += vssm_cost(2 * q, cfg.vssm, h, w);
  c += conv_cost(2 * q, 2 * q, 1, true, h, w);
  if (cfg.dw_enabled) {
    c += depthwise_cost(q, cfg.dw_kernel, true, h, w);
    c += depthwise_cost(q, cfg.dw_kernel, true, h, w);
    c += depthwise_cost(2 * q, cfg.dw_kernel, true, h, w);
  }
  c += conv_cost(cfg.channels, cfg.channels, 1, true, h, w);
  return c;
}

Complexity ffcm_cost(int64_t channels, int64_t hidden, int64_t h, int64_t w) {
  Complexity c;
  c += conv_cost(channels, hidden, 1, true, h, w);
  c.macs += 2 * fft_macs(hidden, h, w);
  c += conv_cost(2 * hidden, 2 * hidden, 1, true, h, w / 2 + 1);
  c += depthwise_cost(hidden, 3, true, h, w);
  c += depthwise_cost(hidden, 5, true, h, w);
  c += conv_cost(3 * hidden, channels, 1, true, h, w);
  return c;
}

Complexity gdfn_cost(int64_t channels, int64_t hidden, int64_t h, int64_t w) {
  Complexity c = norm_cost(channels);
  c += conv_cost(channels, 2 * hidden, 1, true, h, w);
  c += depthwise_cost(2 * hidden, 3, true, h, w);
  c += conv_cost(hidden, channels, 1, true, h, w);
  return c;
}

}  // namespace

Complexity conv_cost(int64_t in, int64_t out, int64_t kernel, bool bias, int64_t h, int64_t w) {
  const auto weights = in * out * kernel * kernel;
  return {weights + (bias ? out : 0), weights * h * w, {}};
}

Complexity depthwise_cost(int64_t channels, int64_t kernel, bool bias, int64_t h, int64_t w) {
  const auto weights = channels * kernel * kernel;
  return {weights + (bias ? channels : 0), weights * h * w, {}};
}

Complexity linear_cost(int64_t in, int64_t out, bool bias, int64_t tokens) {
  return {in * out + (bias ? out : 0), in * out * tokens, {}};
}

Complexity vssm_cost(int64_t channels, const VssmOptions& options, int64_t h, int64_t w) {
  constexpr int64_t kDirections = 4;
  const auto inner = options.expand * channels;
  const auto rank = (channels + 15) / 16;
  const auto n = options.d_state;
  const auto length = h * w;
  Complexity c = norm_cost(channels);
  c += conv_cost(channels, 2 * inner, 1, false, h, w);
  c += depthwise_cost(inner, 3, true, h, w);
  // x_proj, dt_proj (+bias), A_log, D
  c.params += kDirections * ((rank + 2 * n) * inner + inner * rank + inner + inner * n + inner);
  c.macs += kDirections * length * inner * (rank + 2 * n + rank + 3 * n);
  c += norm_cost(inner);
  c += conv_cost(inner, channels, 1, false, h, w);
  return c;
}

Complexity hmm_cost(const HmmConfig& cfg, int64_t h, int64_t w) {
  const auto ch = cfg.channels;
  Complexity c = spatial_branch_cost(cfg, h, w);
  if (cfg.ffcm_enabled) c += ffcm_cost(ch, cfg.ffcm_hidden(), h, w);
  switch (cfg.fusion) {
    case BranchFusion::kConcatConv:
      c += conv_cost(cfg.ffcm_enabled ? 2 * ch : ch, ch, 1, true, h, w);
      break;
    case BranchFusion::kAddition:
      break;
    case BranchFusion::kCrossAttention:
      c += norm_cost(ch);
      c += norm_cost(ch);
      c += attention_cost(ch, ch, grid_tokens(h, w, cfg.max_attention_tokens),
                          grid_tokens(h, w, cfg.max_kv_tokens));
      c += conv_cost(ch, ch, 1, true, h, w);
      break;
  }
  return c;
}

Complexity pfi_cost(const PfiConfig& cfg, int64_t h, int64_t w, int64_t text_tokens) {
  const auto ch = cfg.channels;
  const auto q_tokens = grid_tokens(h, w, cfg.max_attention_tokens);
  const auto kv_tokens = grid_tokens(h, w, cfg.max_kv_tokens);
  Complexity c;
  switch (cfg.fusion) {
    case PriorFusion::kHierarchical:
      if (cfg.inject_visual) {
        c += norm_cost(ch);
        c += norm_cost(ch);
        c += attention_cost(ch, ch, q_tokens, kv_tokens);
      }
      if (cfg.inject_text) {
        c += norm_cost(ch);
        c += norm_cost(ch);
        if (cfg.text_queries) {
          c += attention_cost(ch, ch, text_tokens, kv_tokens);
          c += linear_cost(ch, 2 * ch, true, 1);
        } else {
          c += attention_cost(ch, ch, q_tokens, text_tokens);
        }
      }
      break;
    case PriorFusion::kAddition:
      if (cfg.inject_visual) c += conv_cost(ch, ch, 1, true, h, w);
      if (cfg.inject_text) c += linear_cost(ch, ch, true, 1);
      break;
    case PriorFusion::kConcat: {
      const int64_t in = ch * (1 + int64_t{cfg.inject_visual} + int64_t{cfg.inject_text});
      c += conv_cost(in, ch, 1, true, h, w);
      break;
    }
    case PriorFusion::kJointCrossAttention:
      if (cfg.inject_visual || cfg.inject_text) {
        c += norm_cost(ch);
        int64_t kv = 0;
        if (cfg.inject_visual) {
          c += norm_cost(ch);
          kv += kv_tokens;
        }
        if (cfg.inject_text) {
          c += norm_cost(ch);
          kv += text_tokens;
        }
        c += attention_cost(ch, ch, q_tokens, kv);
      }
      break;
  }
  c += norm_cost(ch);
  const auto [qh, qw] = limited_grid(h, w, cfg.max_attention_tokens);
  c += attention_cost(ch, ch, q_tokens, grid_tokens(qh, qw, cfg.max_kv_tokens));
  c += gdfn_cost(ch, cfg.gdfn_hidden(), h, w);
  return c;
}

Complexity count_params_flops(const ModelConfig& cfg, int64_t height, int64_t width,
                              int64_t text_tokens) {
  cfg.validate();
  const auto m = cfg.size_multiple();
  const auto h0 = (height + m - 1) / m * m;
  const auto w0 = (width + m - 1) / m * m;
  const auto plan = cfg.channels();
  const auto levels = cfg.levels();
  const auto s = cfg.stage_count();

  Complexity total;
  auto add = [&](const std::string& name, const Complexity& c) {
    total.parts[name] += c;
    total += c;
  };
  auto stage_cost = [&](int64_t stage, int64_t h, int64_t w) {
    Complexity c;
    for (int64_t i = 0; i < cfg.stage_depths[static_cast<size_t>(stage)]; ++i) {
      c += hmm_cost(cfg.hmm_config(stage), h, w);
    }
    return c;
  };

  add("stem", conv_cost(3, plan[0], 3, true, h0, w0));
  for (int64_t i = 0; i < levels; ++i) {
    const auto h = h0 >> i;
    const auto w = w0 >> i;
    add("encoder." + std::to_string(i), stage_cost(i, h, w));
    add("downsample", conv_cost(plan[static_cast<size_t>(i)], plan[static_cast<size_t>(i + 1)] / 4,
                                3, true, h, w));
  }
  add("bottleneck", stage_cost(levels, h0 >> levels, w0 >> levels));
  add("pfi.0", pfi_cost(cfg.pfi_config(levels), h0 >> levels, w0 >> levels, text_tokens));
  for (int64_t j = levels + 1; j < s; ++j) {
    const auto level = s - 1 - j;
    const auto h = h0 >> level;
    const auto w = w0 >> level;
    const auto c = plan[static_cast<size_t>(j)];
    add("upsample", conv_cost(plan[static_cast<size_t>(j - 1)], 4 * c, 3, true, h >> 1, w >> 1));
    add("skip_fuse", conv_cost(2 * c, c, 1, true, h, w));
    add("decoder." + std::to_string(j - levels - 1), stage_cost(j, h, w));
    add("pfi." + std::to_string(j - levels), pfi_cost(cfg.pfi_config(j), h, w, text_tokens));
  }
  add("output", conv_cost(plan.back(), 3, 3, true, h0, w0));

  // Adapters: sites finest first, channels of stages levels..0 reversed.
  Complexity priors;
  if (cfg.inject_visual) {
    const auto c0 = plan[static_cast<size_t>(s - 1)];
    const auto gh = h0 / cfg.patch;
    const auto gw = w0 / cfg.patch;
    priors += conv_cost(cfg.visual_dim, c0, 1, true, gh, gw);
    priors += conv_cost(c0, c0, 3, true, h0, w0);
    for (int64_t i = 1; i <= levels; ++i) {
      const auto prev = plan[static_cast<size_t>(s - i)];
      const auto cur = plan[static_cast<size_t>(s - 1 - i)];
      priors += conv_cost(prev, prev, 3, true, h0 >> (i - 1), w0 >> (i - 1));
      priors += conv_cost(4 * prev, cur, 1, true, h0 >> i, w0 >> i);
    }
  }
  if (cfg.inject_text) {
    priors += linear_cost(cfg.text_dim, cfg.clip_bottleneck, true, text_tokens);
    priors += linear_cost(cfg.clip_bottleneck, cfg.clip_bottleneck, true, text_tokens);
    for (int64_t i = 0; i <= levels; ++i) {
      priors += linear_cost(cfg.clip_bottleneck, plan[static_cast<size_t>(s - 1 - i)], true,
                            text_tokens);
    }
  }
  if (cfg.inject_visual || cfg.inject_text) add("prior_generator", priors);
  return total;
}

}  // namespace mphm

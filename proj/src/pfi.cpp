#include "mphm/pfi.hpp"

#include <cmath>

#include "mphm/errors.hpp"

namespace mphm {
namespace {

void zero_linear(torch::nn::Linear& layer) {
  torch::NoGradGuard guard;
  layer->weight.zero_();
  if (layer->bias.defined()) layer->bias.zero_();
}

void zero_conv(torch::nn::Conv2d& layer) {
  torch::NoGradGuard guard;
  layer->weight.zero_();
  if (layer->bias.defined()) layer->bias.zero_();
}

/// Runs attention between pooled query/key-value maps and resizes the result
/// back to the query map's original grid.
torch::Tensor attend_maps(Attention& attention, const torch::Tensor& query_map,
                          const torch::Tensor& kv_tokens, int64_t max_q,
                          torch::Tensor* weights) {
  const auto h = query_map.size(2);
  const auto w = query_map.size(3);
  auto q = limit_tokens(query_map, max_q);
  auto out = attention->forward(to_tokens(q), kv_tokens, weights);
  return bilinear_resize(from_tokens(out, q.size(2), q.size(3)), h, w);
}

}  // namespace

const char* to_string(PriorFusion fusion) {
  switch (fusion) {
    case PriorFusion::kHierarchical:
      return "hierarchical";
    case PriorFusion::kAddition:
      return "addition";
    case PriorFusion::kConcat:
      return "concat";
    case PriorFusion::kJointCrossAttention:
      return "joint_cross_attention";
  }
  return "?";
}

PriorFusion parse_prior_fusion(const std::string& name) {
  if (name == "hierarchical") return PriorFusion::kHierarchical;
  if (name == "addition") return PriorFusion::kAddition;
  if (name == "concat") return PriorFusion::kConcat;
  if (name == "joint_cross_attention") return PriorFusion::kJointCrossAttention;
  throw ConfigError("unknown prior fusion '" + name +
                    "' (expected hierarchical, addition, concat or joint_cross_attention)");
}

void PfiConfig::validate() const {
  if (channels <= 0) throw ConfigError("PFI channels must be positive");
  if (heads <= 0 || channels % heads != 0) {
    throw ConfigError("PFI heads " + std::to_string(heads) + " do not divide channels " +
                      std::to_string(channels));
  }
  if (gdfn_expansion <= 0) throw ConfigError("GDFN expansion must be positive");
  if (max_attention_tokens <= 0 || max_kv_tokens <= 0) {
    throw ConfigError("attention token budgets must be positive");
  }
}

int64_t PfiConfig::gdfn_hidden() const {
  return std::max<int64_t>(1, static_cast<int64_t>(std::floor(channels * gdfn_expansion)));
}

VisualInjectionImpl::VisualInjectionImpl(const PfiConfig& cfg)
    : max_q(cfg.max_attention_tokens), max_kv(cfg.max_kv_tokens) {
  query_norm = register_module("query_norm", ChannelNorm(cfg.channels));
  prior_norm = register_module("prior_norm", ChannelNorm(cfg.channels));
  attention = register_module("attention", Attention(cfg.channels, cfg.heads));
  zero_linear(attention->out_proj);
}

torch::Tensor VisualInjectionImpl::forward(const torch::Tensor& feature,
                                           const torch::Tensor& prior, torch::Tensor* weights) {
  if (prior.sizes() != feature.sizes()) {
    throw StructuralError("visual prior " + c10::str(prior.sizes()) +
                          " does not match feature " + c10::str(feature.sizes()));
  }
  auto kv = to_tokens(limit_tokens(prior_norm->forward(prior), max_kv));
  return feature + attend_maps(attention, query_norm->forward(feature), kv, max_q, weights);
}

TextInjectionImpl::TextInjectionImpl(const PfiConfig& cfg)
    : text_queries(cfg.text_queries),
      max_q(cfg.max_attention_tokens),
      max_kv(cfg.max_kv_tokens) {
  feature_norm = register_module("feature_norm", ChannelNorm(cfg.channels));
  text_norm = register_module("text_norm",
                              torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.channels})));
  attention = register_module("attention", Attention(cfg.channels, cfg.heads));
  if (text_queries) {
    modulation = register_module("modulation", torch::nn::Linear(cfg.channels, 2 * cfg.channels));
    zero_linear(modulation);
  } else {
    zero_linear(attention->out_proj);
  }
}

torch::Tensor TextInjectionImpl::forward(const torch::Tensor& feature, const torch::Tensor& text,
                                         torch::Tensor* weights) {
  if (text.dim() != 3 || text.size(0) != feature.size(0) || text.size(2) != feature.size(1)) {
    throw StructuralError("text prior " + c10::str(text.sizes()) +
                          " does not match feature " + c10::str(feature.sizes()));
  }
  auto normed_text = text_norm->forward(text);
  if (!text_queries) {
    return feature +
           attend_maps(attention, feature_norm->forward(feature), normed_text, max_q, weights);
  }
  auto kv = to_tokens(limit_tokens(feature_norm->forward(feature), max_kv));
  auto descriptor = attention->forward(normed_text, kv, weights).mean(1);  // (B, C)
  auto affine = modulation->forward(descriptor).chunk(2, -1);
  auto scale = affine[0].unsqueeze(-1).unsqueeze(-1);
  auto shift = affine[1].unsqueeze(-1).unsqueeze(-1);
  return feature + feature * scale + shift;
}

SelfAttentionBlockImpl::SelfAttentionBlockImpl(const PfiConfig& cfg)
    : max_q(cfg.max_attention_tokens), max_kv(cfg.max_kv_tokens) {
  norm = register_module("norm", ChannelNorm(cfg.channels));
  attention = register_module("attention", Attention(cfg.channels, cfg.heads));
}

torch::Tensor SelfAttentionBlockImpl::forward(const torch::Tensor& x, torch::Tensor* weights) {
  auto normed = norm->forward(x);
  auto kv = to_tokens(limit_tokens(limit_tokens(normed, max_q), max_kv));
  return x + attend_maps(attention, normed, kv, max_q, weights);
}

GdfnImpl::GdfnImpl(int64_t channels, int64_t hidden_) : hidden(hidden_) {
  norm = register_module("norm", ChannelNorm(channels));
  project_in = register_module("project_in", pointwise_conv(channels, 2 * hidden));
  local = register_module("local", DepthwiseConv(2 * hidden, 3));
  project_out = register_module("project_out", pointwise_conv(hidden, channels));
}

torch::Tensor GdfnImpl::forward(const torch::Tensor& x) {
  auto paths = local->forward(project_in->forward(norm->forward(x))).chunk(2, 1);
  return x + project_out->forward(torch::gelu(paths[0]) * paths[1]);
}

PfiImpl::PfiImpl(PfiConfig cfg_) : cfg(std::move(cfg_)) {
  cfg.validate();
  const auto c = cfg.channels;
  // Prior paths draw from a private stream so toggling them leaves every other
  // initial weight unchanged.
  with_private_rng([&] {
    switch (cfg.fusion) {
      case PriorFusion::kHierarchical:
        if (cfg.inject_visual) {
          visual_injection = register_module("visual_injection", VisualInjection(cfg));
        }
        if (cfg.inject_text) {
          text_injection = register_module("text_injection", TextInjection(cfg));
        }
        break;
      case PriorFusion::kAddition:
        if (cfg.inject_visual) {
          fuse_visual = register_module("fuse_visual", pointwise_conv(c, c));
          zero_conv(fuse_visual);
        }
        if (cfg.inject_text) {
          fuse_text = register_module("fuse_text", torch::nn::Linear(c, c));
          zero_linear(fuse_text);
        }
        break;
      case PriorFusion::kConcat: {
        const int64_t in = c * (1 + int64_t{cfg.inject_visual} + int64_t{cfg.inject_text});
        fuse_concat = register_module("fuse_concat", pointwise_conv(in, c));
        zero_conv(fuse_concat);
        break;
      }
      case PriorFusion::kJointCrossAttention:
        if (cfg.inject_visual || cfg.inject_text) {
          joint_query_norm = register_module("joint_query_norm", ChannelNorm(c));
          if (cfg.inject_visual) {
            joint_visual_norm = register_module("joint_visual_norm", ChannelNorm(c));
          }
          if (cfg.inject_text) {
            joint_text_norm = register_module(
                "joint_text_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
          }
          joint_attention = register_module("joint_attention", Attention(c, cfg.heads));
          zero_linear(joint_attention->out_proj);
        }
        break;
    }
  });
  self_attention = register_module("self_attention", SelfAttentionBlock(cfg));
  gdfn = register_module("gdfn", Gdfn(c, cfg.gdfn_hidden()));
}

torch::Tensor PfiImpl::forward(const torch::Tensor& feature, const torch::Tensor& visual,
                               const torch::Tensor& text) {
  if (cfg.inject_visual && !visual.defined()) {
    throw ConfigError("PFI: visual injection enabled but no visual prior supplied");
  }
  if (cfg.inject_text && !text.defined()) {
    throw ConfigError("PFI: text injection enabled but no text prior supplied");
  }
  if (cfg.inject_visual && visual.sizes() != feature.sizes()) {
    throw StructuralError("visual prior " + c10::str(visual.sizes()) +
                          " does not match feature " + c10::str(feature.sizes()));
  }
  if (cfg.inject_text &&
      (text.dim() != 3 || text.size(0) != feature.size(0) || text.size(2) != feature.size(1))) {
    throw StructuralError("text prior " + c10::str(text.sizes()) + " does not match feature " +
                          c10::str(feature.sizes()));
  }

  auto x = feature;
  switch (cfg.fusion) {
    case PriorFusion::kHierarchical:
      if (cfg.inject_visual) x = visual_injection->forward(x, visual);
      if (cfg.inject_text) x = text_injection->forward(x, text);
      break;
    case PriorFusion::kAddition:
      if (cfg.inject_visual) x = x + fuse_visual->forward(visual);
      if (cfg.inject_text) {
        x = x + fuse_text->forward(text.mean(1)).unsqueeze(-1).unsqueeze(-1);
      }
      break;
    case PriorFusion::kConcat: {
      std::vector<torch::Tensor> parts{x};
      if (cfg.inject_visual) parts.push_back(visual);
      if (cfg.inject_text) {
        parts.push_back(text.mean(1).unsqueeze(-1).unsqueeze(-1).expand_as(x));
      }
      x = x + fuse_concat->forward(torch::cat(parts, 1));
      break;
    }
    case PriorFusion::kJointCrossAttention: {
      if (!joint_attention) break;
      std::vector<torch::Tensor> kv;
      if (cfg.inject_visual) {
        kv.push_back(to_tokens(limit_tokens(joint_visual_norm->forward(visual), cfg.max_kv_tokens)));
      }
      if (cfg.inject_text) kv.push_back(joint_text_norm->forward(text));
      x = x + attend_maps(joint_attention, joint_query_norm->forward(x), torch::cat(kv, 1),
                          cfg.max_attention_tokens, nullptr);
      break;
    }
  }
  x = self_attention->forward(x);
  return gdfn->forward(x);
}

void PfiImpl::zero_residual() {
  torch::NoGradGuard guard;
  if (visual_injection) zero_linear(visual_injection->attention->out_proj);
  if (text_injection) {
    if (text_injection->modulation) zero_linear(text_injection->modulation);
    zero_linear(text_injection->attention->out_proj);
  }
  if (fuse_visual) zero_conv(fuse_visual);
  if (fuse_text) zero_linear(fuse_text);
  if (fuse_concat) zero_conv(fuse_concat);
  if (joint_attention) zero_linear(joint_attention->out_proj);
  zero_linear(self_attention->attention->out_proj);
  zero_conv(gdfn->project_out);
}

}  // namespace mphm

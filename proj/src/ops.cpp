#include "mphm/ops.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

#include "mphm/errors.hpp"

namespace F = torch::nn::functional;

namespace mphm {

torch::Tensor fft2(const torch::Tensor& x) {
  return torch::fft::fft2(x, c10::nullopt, {-2, -1}, "backward");
}

torch::Tensor ifft2(const torch::Tensor& spectrum) {
  return torch::real(torch::fft::ifft2(spectrum, c10::nullopt, {-2, -1}, "backward"));
}

const char* to_string(ScanOrder order) {
  switch (order) {
    case ScanOrder::kRowMajor:
      return "row-major";
    case ScanOrder::kRowMajorReversed:
      return "row-major-reversed";
    case ScanOrder::kColumnMajor:
      return "column-major";
    case ScanOrder::kColumnMajorReversed:
      return "column-major-reversed";
  }
  return "?";
}

std::array<SequenceTensor, 4> cross_scan(const torch::Tensor& feature) {
  TORCH_CHECK(feature.dim() == 4, "cross_scan expects (B, C, H, W)");
  auto rows = feature.flatten(2).transpose(1, 2);
  auto cols = feature.transpose(2, 3).flatten(2).transpose(1, 2);
  return {SequenceTensor{rows, ScanOrder::kRowMajor},
          SequenceTensor{rows.flip({1}), ScanOrder::kRowMajorReversed},
          SequenceTensor{cols, ScanOrder::kColumnMajor},
          SequenceTensor{cols.flip({1}), ScanOrder::kColumnMajorReversed}};
}

torch::Tensor cross_merge(std::span<const SequenceTensor> sequences, int64_t height,
                          int64_t width) {
  if (sequences.size() != 4) {
    throw StructuralError("cross_merge needs exactly 4 sequences, got " +
                          std::to_string(sequences.size()));
  }
  std::array<bool, 4> seen{};
  for (const auto& seq : sequences) {
    if (seq.data.dim() != 3 || seq.length() != height * width) {
      throw StructuralError("cross_merge: sequence length " +
                            std::to_string(seq.data.dim() == 3 ? seq.length() : -1) +
                            " does not match " + std::to_string(height) + "x" +
                            std::to_string(width));
    }
    auto idx = static_cast<size_t>(seq.order);
    if (seen[idx]) {
      throw StructuralError(std::string("cross_merge: duplicate scan order ") +
                            to_string(seq.order));
    }
    seen[idx] = true;
  }
  const auto& ref = sequences[0].data;
  for (const auto& seq : sequences) {
    if (seq.data.size(0) != ref.size(0) || seq.data.size(2) != ref.size(2)) {
      throw StructuralError("cross_merge: batch/channel mismatch between sequences");
    }
  }

  torch::Tensor out;
  for (const auto& seq : sequences) {
    auto data = seq.data;
    const auto b = data.size(0);
    const auto c = data.size(2);
    torch::Tensor spatial;
    switch (seq.order) {
      case ScanOrder::kRowMajorReversed:
        data = data.flip({1});
        [[fallthrough]];
      case ScanOrder::kRowMajor:
        spatial = data.transpose(1, 2).reshape({b, c, height, width});
        break;
      case ScanOrder::kColumnMajorReversed:
        data = data.flip({1});
        [[fallthrough]];
      case ScanOrder::kColumnMajor:
        spatial = data.transpose(1, 2).reshape({b, c, width, height}).transpose(2, 3);
        break;
    }
    out = out.defined() ? out + spatial : spatial;
  }
  return out.contiguous();
}

torch::Tensor reflect_pad(const torch::Tensor& x, int64_t left, int64_t right, int64_t top,
                          int64_t bottom) {
  if (left == 0 && right == 0 && top == 0 && bottom == 0) return x;
  const auto h = x.size(-2);
  const auto w = x.size(-1);
  const bool can_reflect = left < w && right < w && top < h && bottom < h;
  if (can_reflect) {
    return F::pad(x, F::PadFuncOptions({left, right, top, bottom}).mode(torch::kReflect));
  }
  return F::pad(x, F::PadFuncOptions({left, right, top, bottom}).mode(torch::kReplicate));
}

torch::Tensor dwconv(const torch::Tensor& x, const torch::Tensor& weight,
                     const torch::Tensor& bias) {
  const auto k = weight.size(-1);
  if (k % 2 == 0 || weight.size(-2) != k) {
    throw ConfigError("dwconv kernel must be square with odd size, got " + std::to_string(k));
  }
  if (weight.size(0) != x.size(1)) {
    throw StructuralError("dwconv: weight has " + std::to_string(weight.size(0)) +
                          " channels, input has " + std::to_string(x.size(1)));
  }
  const auto p = k / 2;
  auto padded = reflect_pad(x, p, p, p, p);
  return F::conv2d(padded, weight, F::Conv2dFuncOptions().bias(bias).groups(x.size(1)));
}

DepthwiseConvImpl::DepthwiseConvImpl(int64_t channels_, int64_t kernel_size_, bool with_bias)
    : channels(channels_), kernel_size(kernel_size_) {
  if (kernel_size % 2 == 0 || kernel_size < 1) {
    throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(kernel_size));
  }
  // Same fan-in scaling as torch's Conv2d default.
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel_size * kernel_size));
  weight = register_parameter(
      "weight", torch::empty({channels, 1, kernel_size, kernel_size}).uniform_(-bound, bound));
  if (with_bias) {
    bias = register_parameter("bias", torch::empty({channels}).uniform_(-bound, bound));
  }
}

torch::Tensor DepthwiseConvImpl::forward(const torch::Tensor& x) {
  return dwconv(x, weight, bias);
}

ConvImpl::ConvImpl(int64_t in_channels, int64_t out_channels, int64_t kernel_size_,
                   bool with_bias)
    : kernel_size(kernel_size_) {
  if (kernel_size % 2 == 0) {
    throw ConfigError("conv kernel size must be odd, got " + std::to_string(kernel_size));
  }
  conv = register_module(
      "conv", torch::nn::Conv2d(
                  torch::nn::Conv2dOptions(in_channels, out_channels, kernel_size).bias(with_bias)));
}

torch::Tensor ConvImpl::forward(const torch::Tensor& x) {
  const auto p = kernel_size / 2;
  return conv->forward(reflect_pad(x, p, p, p, p));
}

torch::nn::Conv2d pointwise_conv(int64_t in_channels, int64_t out_channels, bool with_bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1).bias(with_bias));
}

ChannelNormImpl::ChannelNormImpl(int64_t channels) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor& x) {
  return norm->forward(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

torch::Tensor to_tokens(const torch::Tensor& feature) {
  return feature.flatten(2).transpose(1, 2);
}

torch::Tensor from_tokens(const torch::Tensor& tokens, int64_t height, int64_t width) {
  if (tokens.size(1) != height * width) {
    throw StructuralError("from_tokens: " + std::to_string(tokens.size(1)) +
                          " tokens cannot fill " + std::to_string(height) + "x" +
                          std::to_string(width));
  }
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), height, width});
}

std::pair<int64_t, int64_t> limited_grid(int64_t height, int64_t width, int64_t max_tokens) {
  if (max_tokens <= 0 || height * width <= max_tokens) return {height, width};
  auto stride = static_cast<int64_t>(
      std::ceil(std::sqrt(static_cast<double>(height * width) / static_cast<double>(max_tokens))));
  auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
  while (ceil_div(height, stride) * ceil_div(width, stride) > max_tokens) ++stride;
  return {ceil_div(height, stride), ceil_div(width, stride)};
}

torch::Tensor limit_tokens(const torch::Tensor& feature, int64_t max_tokens) {
  const auto [h, w] = limited_grid(feature.size(2), feature.size(3), max_tokens);
  if (h == feature.size(2) && w == feature.size(3)) return feature;
  return F::adaptive_avg_pool2d(feature, F::AdaptiveAvgPool2dFuncOptions({h, w}));
}

torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v, int64_t heads,
                                   torch::Tensor* weights) {
  const auto dim = q.size(-1);
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide dim " +
                      std::to_string(dim));
  }
  if (k.size(1) != v.size(1)) {
    throw StructuralError("attention: keys and values have different token counts");
  }
  if (k.size(-1) != dim) {
    throw StructuralError("attention: query dim " + std::to_string(dim) + " vs key dim " +
                          std::to_string(k.size(-1)));
  }
  const auto b = q.size(0);
  const auto head_dim = dim / heads;
  auto split = [&](const torch::Tensor& t) {
    return t.reshape({b, t.size(1), heads, head_dim}).transpose(1, 2);
  };
  auto qh = split(q);
  auto kh = split(k);
  auto vh = split(v);
  auto logits = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto attn = torch::softmax(logits, -1);
  if (weights != nullptr) *weights = attn;
  auto out = torch::matmul(attn, vh);  // (B, heads, Tq, head_dim)
  return out.transpose(1, 2).reshape({b, q.size(1), dim});
}

AttentionImpl::AttentionImpl(int64_t dim_, int64_t heads_, int64_t kv_dim)
    : dim(dim_), heads(heads_) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide dim " +
                      std::to_string(dim));
  }
  if (kv_dim <= 0) kv_dim = dim;
  q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
  k_proj = register_module("k_proj", torch::nn::Linear(kv_dim, dim));
  v_proj = register_module("v_proj", torch::nn::Linear(kv_dim, dim));
  out_proj = register_module("out_proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key_value,
                                     torch::Tensor* weights) {
  auto mixed = scaled_dot_attention(q_proj->forward(query), k_proj->forward(key_value),
                                    v_proj->forward(key_value), heads, weights);
  return out_proj->forward(mixed);
}

torch::Tensor space_to_depth(const torch::Tensor& x, int64_t factor) {
  if (x.size(-2) % factor != 0 || x.size(-1) % factor != 0) {
    std::ostringstream msg;
    msg << "space_to_depth: " << x.size(-2) << "x" << x.size(-1) << " not divisible by "
        << factor;
    throw StructuralError(msg.str());
  }
  return torch::pixel_unshuffle(x, factor);
}

torch::Tensor depth_to_space(const torch::Tensor& x, int64_t factor) {
  if (x.size(1) % (factor * factor) != 0) {
    throw StructuralError("depth_to_space: channels " + std::to_string(x.size(1)) +
                          " not divisible by " + std::to_string(factor * factor));
  }
  return torch::pixel_shuffle(x, factor);
}

torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t height, int64_t width) {
  if (x.size(-2) == height && x.size(-1) == width) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{height, width})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

void zero_parameters(torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& p : module.parameters()) p.zero_();
}

void with_private_rng(const std::function<void()>& build) {
  auto gen = at::detail::getDefaultCPUGenerator();
  uint64_t seed = 0;
  {
    std::lock_guard<std::mutex> lock(gen.mutex());
    seed = at::check_generator<at::CPUGeneratorImpl>(gen)->random64();
  }
  const auto saved = gen.get_state();
  gen.set_current_seed(seed);
  try {
    build();
  } catch (...) {
    gen.set_state(saved);
    throw;
  }
  gen.set_state(saved);
}

}  // namespace mphm

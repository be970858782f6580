#pragma once

// Framework-level building blocks shared by every network module.
// Feature maps are (batch, channels, height, width) tensors; token tensors are
// (batch, tokens, channels).

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>

#include <torch/torch.h>

namespace mphm {

// ---------------------------------------------------------------------------
// Spectral utilities. Forward transform unnormalized, inverse scaled by 1/(H*W).

torch::Tensor fft2(const torch::Tensor& x);
/// Real part of the inverse transform.
torch::Tensor ifft2(const torch::Tensor& spectrum);

// ---------------------------------------------------------------------------
// Four-direction cross scan.

enum class ScanOrder : std::uint8_t {
  kRowMajor = 0,
  kRowMajorReversed = 1,
  kColumnMajor = 2,
  kColumnMajorReversed = 3,
};

inline constexpr std::array<ScanOrder, 4> kScanOrders = {
    ScanOrder::kRowMajor, ScanOrder::kRowMajorReversed, ScanOrder::kColumnMajor,
    ScanOrder::kColumnMajorReversed};

const char* to_string(ScanOrder order);

/// A flattened feature map, (batch, H*W, channels), tagged with the traversal
/// that produced it.
struct SequenceTensor {
  torch::Tensor data;
  ScanOrder order = ScanOrder::kRowMajor;

  int64_t length() const { return data.size(1); }
};

std::array<SequenceTensor, 4> cross_scan(const torch::Tensor& feature);

/// Inverse-permutes each sequence back to (H, W) and sums the four maps.
/// Throws StructuralError on length mismatch or repeated scan orders.
torch::Tensor cross_merge(std::span<const SequenceTensor> sequences, int64_t height,
                          int64_t width);

// ---------------------------------------------------------------------------
// Padding and convolutions. All spatial convolutions pad by reflection; when a
// side is too small to reflect, replication is used instead.

torch::Tensor reflect_pad(const torch::Tensor& x, int64_t left, int64_t right, int64_t top,
                          int64_t bottom);

/// Same-size depthwise convolution with reflect padding. `weight` is
/// (C, 1, k, k) with odd k.
torch::Tensor dwconv(const torch::Tensor& x, const torch::Tensor& weight,
                     const torch::Tensor& bias = {});

struct DepthwiseConvImpl : torch::nn::Module {
  DepthwiseConvImpl(int64_t channels, int64_t kernel_size, bool with_bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t channels;
  int64_t kernel_size;
  torch::Tensor weight;
  torch::Tensor bias;
};
TORCH_MODULE(DepthwiseConv);

/// k x k convolution, stride 1, reflect padded, bias included.
struct ConvImpl : torch::nn::Module {
  ConvImpl(int64_t in_channels, int64_t out_channels, int64_t kernel_size, bool with_bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t kernel_size;
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Conv);

torch::nn::Conv2d pointwise_conv(int64_t in_channels, int64_t out_channels, bool with_bias = true);

// ---------------------------------------------------------------------------
// Normalization over the channel axis of a feature map.

struct ChannelNormImpl : torch::nn::Module {
  explicit ChannelNormImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(ChannelNorm);

// ---------------------------------------------------------------------------
// Token views.

/// (B, C, H, W) -> (B, H*W, C)
torch::Tensor to_tokens(const torch::Tensor& feature);
/// (B, H*W, C) -> (B, C, H, W)
torch::Tensor from_tokens(const torch::Tensor& tokens, int64_t height, int64_t width);

/// Average-pools a map so that its token count is at most `max_tokens`.
/// Returns the input unchanged when it already fits.
torch::Tensor limit_tokens(const torch::Tensor& feature, int64_t max_tokens);

/// Grid produced by limit_tokens for an (height, width) map.
std::pair<int64_t, int64_t> limited_grid(int64_t height, int64_t width, int64_t max_tokens);

// ---------------------------------------------------------------------------
// Attention.

/// softmax(q k^T / sqrt(d_head)) v for each head. q: (B, Tq, D), k/v: (B, Tk, D).
/// If `weights` is non-null it receives the (B, heads, Tq, Tk) attention map.
torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v, int64_t heads,
                                   torch::Tensor* weights = nullptr);

/// Multi-head attention with query/key/value/output projections.
struct AttentionImpl : torch::nn::Module {
  AttentionImpl(int64_t dim, int64_t heads, int64_t kv_dim = 0);
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key_value,
                        torch::Tensor* weights = nullptr);

  int64_t dim;
  int64_t heads;
  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(Attention);

// ---------------------------------------------------------------------------
// Resolution changes.

/// Pixel unshuffle: (B, C, H, W) -> (B, C*f*f, H/f, W/f).
torch::Tensor space_to_depth(const torch::Tensor& x, int64_t factor);
/// Pixel shuffle, the inverse.
torch::Tensor depth_to_space(const torch::Tensor& x, int64_t factor);
/// Bilinear interpolation, align_corners = false.
torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t height, int64_t width);

/// Zeroes every parameter of a module (used to build identity initializations).
void zero_parameters(torch::nn::Module& module);

/// Runs `build` on a private random stream. Exactly one value is drawn from the
/// default generator to seed it, so modules built afterwards see the same
/// stream whatever `build` consumes.
void with_private_rng(const std::function<void()>& build);

}  // namespace mphm

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mphm {

/// Patch features from a (frozen) visual encoder.
struct RawVisualPrior {
  torch::Tensor tokens;  // (batch, grid_h * grid_w, d_v), row-major grid
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  std::string source_id;

  /// Tokens as a (batch, d_v, grid_h, grid_w) map.
  torch::Tensor grid() const;
};

/// Token features from a (frozen) text encoder.
struct RawTextPrior {
  torch::Tensor tokens;  // (N_t, d_t)
  std::string prompt;
};

struct StageShape {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;

  friend bool operator==(const StageShape&, const StageShape&) = default;
};

std::string to_string(const StageShape& shape);

/// Adapted priors, one entry per injection stage, finest stage first.
struct PriorBundle {
  std::vector<torch::Tensor> visual;  // (batch, C_i, H_i, W_i); empty when not injected
  std::vector<torch::Tensor> text;    // (batch, N_t, C_i); empty when not injected

  /// Throws ConfigError unless every present list has one entry per stage and
  /// each entry matches its stage shape.
  void validate(std::span<const StageShape> stages, int64_t batch) const;
};

// ---------------------------------------------------------------------------
// Encoder providers. Providers are frozen: nothing they hold takes gradients.

class PriorProvider {
 public:
  virtual ~PriorProvider() = default;
  virtual std::string name() const = 0;
  virtual int64_t visual_dim() const = 0;
  virtual int64_t text_dim() const = 0;
  /// images: (batch, 3, H, W) in [0, 1].
  virtual RawVisualPrior encode_visual(const torch::Tensor& images) const = 0;
  virtual RawTextPrior encode_text(const std::string& prompt) const = 0;
};

struct ProviderOptions {
  uint64_t seed = 0;
  int64_t visual_dim = 384;
  int64_t text_dim = 512;
  int64_t patch = 16;
  std::filesystem::path feature_file;  // "external" only
};

/// Deterministic stand-in encoders. Visual: non-overlapping patch x patch
/// blocks projected by a seed-derived Gaussian matrix. Text: one unit-norm
/// token drawn from a generator seeded by (seed, hash(prompt)).
class MockPriorProvider final : public PriorProvider {
 public:
  explicit MockPriorProvider(const ProviderOptions& options = {});

  std::string name() const override { return "mock"; }
  int64_t visual_dim() const override { return visual_dim_; }
  int64_t text_dim() const override { return text_dim_; }
  RawVisualPrior encode_visual(const torch::Tensor& images) const override;
  RawTextPrior encode_text(const std::string& prompt) const override;

  const torch::Tensor& projection() const { return projection_; }

 private:
  uint64_t seed_;
  int64_t visual_dim_;
  int64_t text_dim_;
  int64_t patch_;
  torch::Tensor projection_;  // (3 * patch * patch, d_v), requires_grad = false
};

/// Features precomputed by a real encoder and stored in a feature file. The
/// stored visual tokens are returned for every image of a batch.
class ExternalPriorProvider final : public PriorProvider {
 public:
  explicit ExternalPriorProvider(const ProviderOptions& options);

  std::string name() const override { return "external"; }
  int64_t visual_dim() const override { return visual_.size(2); }
  int64_t text_dim() const override { return text_.size(1); }
  RawVisualPrior encode_visual(const torch::Tensor& images) const override;
  RawTextPrior encode_text(const std::string& prompt) const override;

 private:
  std::string source_;
  torch::Tensor visual_;  // (grid_h, grid_w, d_v)
  torch::Tensor text_;    // (N_t, d_t)
};

/// "mock" or "external"; anything else is a ConfigError.
std::shared_ptr<PriorProvider> make_provider(const std::string& name,
                                             const ProviderOptions& options);

// ---------------------------------------------------------------------------
// Feature file, version 1:
//
//   8 bytes   magic "MPHMFEAT"
//   u32 LE    format version (1)
//   u32 LE    header length in bytes
//   header    UTF-8 JSON: {"visual_tokens": {"shape": [gh, gw, d_v], "offset": o},
//                          "text_tokens":   {"shape": [n_t, d_t],   "offset": o},
//                          "source": "..."}
//   payload   float32 little-endian arrays at the given byte offsets

struct FeatureFile {
  torch::Tensor visual_tokens;  // (grid_h, grid_w, d_v)
  torch::Tensor text_tokens;    // (N_t, d_t)
  std::string source = "external";
};

void write_feature_file(const std::filesystem::path& path, const FeatureFile& features);
FeatureFile read_feature_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Adapters.

/// Visual adapter: 1x1 reduction d_v -> C_0, bilinear resize to the finest
/// stage, 3x3 refinement, then for each coarser stage
/// 3x3 conv + GELU -> space_to_depth(2) -> 1x1 to that stage's channels.
struct DinoAdapterImpl : torch::nn::Module {
  DinoAdapterImpl(int64_t visual_dim, std::vector<int64_t> stage_channels);
  /// `stages` finest first; consecutive stages must halve both spatial dims.
  std::vector<torch::Tensor> forward(const RawVisualPrior& raw,
                                     std::span<const StageShape> stages);

  std::vector<int64_t> stage_channels;
  torch::nn::Conv2d reduce{nullptr};
  torch::nn::ModuleList refine;
  torch::nn::ModuleList down;
  torch::nn::ModuleList project;
};
TORCH_MODULE(DinoAdapter);

/// Text adapter: d_t -> bottleneck -> GELU -> bottleneck -> GELU, then one
/// linear head per stage producing that stage's channel width.
struct ClipAdapterImpl : torch::nn::Module {
  ClipAdapterImpl(int64_t text_dim, int64_t bottleneck, std::vector<int64_t> stage_channels);
  /// tokens (N_t, d_t) -> per stage (N_t, C_i).
  std::vector<torch::Tensor> forward(const torch::Tensor& tokens);

  torch::nn::Linear down{nullptr}, hidden{nullptr};
  torch::nn::ModuleList heads;
};
TORCH_MODULE(ClipAdapter);

struct PriorOptions {
  std::string provider = "mock";
  std::string prompt = "No rain";
  ProviderOptions provider_options;
  int64_t clip_bottleneck = 128;
};

/// Provider plus trainable adapters; builds the PriorBundle for a batch.
struct PriorGeneratorImpl : torch::nn::Module {
  PriorGeneratorImpl(PriorOptions options, std::vector<int64_t> stage_channels, bool visual,
                     bool text);

  PriorBundle forward(const torch::Tensor& images, std::span<const StageShape> stages);

  PriorOptions options;
  bool use_visual;
  bool use_text;
  std::shared_ptr<PriorProvider> provider;
  DinoAdapter visual_adapter{nullptr};
  ClipAdapter text_adapter{nullptr};
};
TORCH_MODULE(PriorGenerator);

}  // namespace mphm

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mphm {

/// Images are float32 (3, H, W) tensors with values in [0, 1].
torch::Tensor read_png(const std::filesystem::path& path);
/// Quantizes with round-half-up to 8-bit RGB. Accepts (3, H, W) or (1, 3, H, W).
void write_png(const std::filesystem::path& path, const torch::Tensor& image);
/// Width and height from the PNG header without decoding pixels.
std::pair<int64_t, int64_t> png_size(const std::filesystem::path& path);

struct RainParams {
  double streak_density = 0.02;  // fraction of pixels seeding a streak
  double angle_degrees = 10.0;   // from vertical
  double streak_length_px = 15.0;
  double streak_width_px = 1.0;
  double intensity = 0.7;
  uint64_t seed = 0;

  void validate() const;
};

/// Oriented line kernel (odd square) with unit weight inside the streak footprint.
torch::Tensor streak_kernel(const RainParams& params);

/// clean + intensity * clamp(seed_mask * streak_kernel, 0, 1), clamped to [0, 1].
torch::Tensor synth_rain(const torch::Tensor& clean, const RainParams& params);

/// Smooth procedural scene (sinusoids plus flat rectangles), deterministic per seed.
torch::Tensor synth_clean(int64_t height, int64_t width, uint64_t seed);

struct PairedSample {
  torch::Tensor rainy;
  torch::Tensor clean;
  std::string id;
};

/// File pairs matched by name; pixels are decoded on demand.
class PairedDataset {
 public:
  struct Entry {
    std::string id;
    std::filesystem::path rainy, clean;
    int64_t height = 0, width = 0;
  };

  PairedDataset() = default;
  explicit PairedDataset(std::vector<Entry> entries) : entries_(std::move(entries)) {}

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Entry& entry(size_t i) const { return entries_.at(i); }
  PairedSample get(size_t i) const;

 private:
  std::vector<Entry> entries_;
};

/// Sorted by file name. Throws DataError listing orphans on either side, or
/// naming the first pair whose dimensions differ.
PairedDataset load_paired_dir(const std::filesystem::path& rain_dir,
                              const std::filesystem::path& clean_dir);
/// `root`/rain and `root`/norain.
PairedDataset load_paired_root(const std::filesystem::path& root);

struct Batch {
  torch::Tensor rainy;  // (B, 3, crop, crop)
  torch::Tensor clean;
  std::vector<std::string> ids;
};

struct BatchOptions {
  int64_t crop = 64;
  int64_t batch = 4;
  /// Random crops and horizontal flips; otherwise a center crop.
  bool augment = true;
  /// Reshuffle the order every epoch; otherwise file order.
  bool shuffle = true;
  uint64_t seed = 0;
};

/// Endless batch stream over a dataset. Decoded samples are cached.
class BatchIterator {
 public:
  /// Throws ConfigError when crop exceeds any image side or batch < 1.
  BatchIterator(const PairedDataset& dataset, BatchOptions options);

  Batch next();

 private:
  void reshuffle();

  const PairedDataset& dataset_;
  BatchOptions options_;
  std::mt19937_64 rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  std::vector<std::optional<PairedSample>> cache_;
};

/// Writes `count` synthetic pairs as rain/NNNN.png and norain/NNNN.png.
void generate_pairs(const std::filesystem::path& root, int64_t count, int64_t height,
                    int64_t width, uint64_t seed);

}  // namespace mphm

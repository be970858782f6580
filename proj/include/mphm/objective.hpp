#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace mphm {

struct LossConfig {
  double lambda_fcr = 0.1;
  int64_t n_negatives = 2;
  double epsilon = 1e-7;

  /// Throws ConfigError unless lambda >= 0, n >= 1, epsilon > 0.
  void validate() const;
};

/// Mean absolute error over all elements.
torch::Tensor l_rec(const torch::Tensor& pred, const torch::Tensor& target);

/// Frequency contrastive ratio. Images are (B, 3, H, W) or (3, H, W); each of
/// the n negatives matches `pred`. Distances are sums of |Re| + |Im| of the
/// per-channel 2D DFT difference, one ratio per sample and negative, averaged.
torch::Tensor l_fcr(const torch::Tensor& pred, const torch::Tensor& target,
                    const std::vector<torch::Tensor>& negatives, const LossConfig& cfg);

/// l_rec + lambda * l_fcr; the frequency term is skipped when lambda == 0.
torch::Tensor total_loss(const torch::Tensor& pred, const torch::Tensor& target,
                         const std::vector<torch::Tensor>& negatives, const LossConfig& cfg);

/// n negatives for a (B, 3, H, W) rainy batch: for each sample, other rainy
/// images drawn without replacement; once those run out, the sample's own.
std::vector<torch::Tensor> sample_negatives(const torch::Tensor& rainy, int64_t n,
                                            std::mt19937_64& rng);

/// Peak 1. Capped at 100 dB when MSE < 1e-10.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Luminance SSIM, 11x11 Gaussian window (sigma 1.5), valid windows only.
/// Accepts (3, H, W) or (1, 3, H, W); both sides must be at least 11.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// BT.601 luma of a (3, H, W) or (B, 3, H, W) image, channel dim kept.
torch::Tensor luminance(const torch::Tensor& rgb);

}  // namespace mphm

#include "mphm/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mphm/errors.hpp"
#include "mphm/ops.hpp"

namespace mphm {
namespace {

constexpr double kPsnrCap = 100.0;
constexpr int64_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw StructuralError(std::string(what) + ": shape " + c10::str(a.sizes()) +
                          " vs " + c10::str(b.sizes()));
  }
}

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

/// Per-sample sum of |Re| + |Im| of the spectrum of `diff`.
torch::Tensor spectral_l1(const torch::Tensor& diff) {
  auto spectrum = fft2(diff);
  return (torch::real(spectrum).abs() + torch::imag(spectrum).abs()).sum({1, 2, 3});
}

torch::Tensor gaussian_window(torch::ScalarType dtype) {
  auto axis = torch::arange(kSsimWindow, torch::kFloat64) - (kSsimWindow - 1) / 2.0;
  auto g = torch::exp(-axis.pow(2) / (2 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g).to(dtype).view({1, 1, kSsimWindow, kSsimWindow});
}

}  // namespace

void LossConfig::validate() const {
  if (lambda_fcr < 0) throw ConfigError("lambda_fcr must be >= 0");
  if (n_negatives < 1) throw ConfigError("n_negatives must be >= 1");
  if (!(epsilon > 0)) throw ConfigError("epsilon must be > 0");
}

torch::Tensor l_rec(const torch::Tensor& pred, const torch::Tensor& target) {
  require_same(pred, target, "l_rec");
  return (pred - target).abs().mean();
}

torch::Tensor l_fcr(const torch::Tensor& pred, const torch::Tensor& target,
                    const std::vector<torch::Tensor>& negatives, const LossConfig& cfg) {
  require_same(pred, target, "l_fcr");
  if (static_cast<int64_t>(negatives.size()) != cfg.n_negatives) {
    throw StructuralError("l_fcr: expected " + std::to_string(cfg.n_negatives) +
                          " negatives, got " + std::to_string(negatives.size()));
  }
  const auto p = batched(pred);
  // Linearity: F(gt) - F(pred) = F(gt - pred).
  const auto pull = spectral_l1(batched(target) - p);
  torch::Tensor total = torch::zeros_like(pull);
  for (const auto& negative : negatives) {
    require_same(pred, negative, "l_fcr negative");
    total = total + pull / (spectral_l1(batched(negative) - p) + cfg.epsilon);
  }
  return (total / static_cast<double>(negatives.size())).mean();
}

torch::Tensor total_loss(const torch::Tensor& pred, const torch::Tensor& target,
                         const std::vector<torch::Tensor>& negatives, const LossConfig& cfg) {
  auto loss = l_rec(pred, target);
  if (cfg.lambda_fcr == 0.0) return loss;
  return loss + cfg.lambda_fcr * l_fcr(pred, target, negatives, cfg);
}

std::vector<torch::Tensor> sample_negatives(const torch::Tensor& rainy, int64_t n,
                                            std::mt19937_64& rng) {
  if (rainy.dim() != 4) {
    throw StructuralError("sample_negatives expects (B, 3, H, W), got " + c10::str(rainy.sizes()));
  }
  const auto batch = rainy.size(0);
  std::vector<std::vector<int64_t>> picks(static_cast<size_t>(n));
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<int64_t> others;
    for (int64_t o = 0; o < batch; ++o) {
      if (o != b) others.push_back(o);
    }
    std::shuffle(others.begin(), others.end(), rng);
    for (int64_t i = 0; i < n; ++i) {
      picks[static_cast<size_t>(i)].push_back(i < static_cast<int64_t>(others.size())
                                                  ? others[static_cast<size_t>(i)]
                                                  : b);
    }
  }
  std::vector<torch::Tensor> negatives;
  for (const auto& index : picks) {
    negatives.push_back(rainy.index_select(0, torch::tensor(index, torch::kLong)));
  }
  return negatives;
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  require_same(a, b, "psnr");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

torch::Tensor luminance(const torch::Tensor& rgb) {
  const auto x = batched(rgb);
  if (x.size(1) != 3) throw StructuralError("luminance expects 3 channels");
  auto y = 0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2);
  return y.unsqueeze(1);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  require_same(a, b, "ssim");
  const auto x = luminance(a.to(torch::kFloat64));
  const auto y = luminance(b.to(torch::kFloat64));
  if (x.size(0) != 1) throw StructuralError("ssim expects a single image");
  if (x.size(2) < kSsimWindow || x.size(3) < kSsimWindow) {
    throw StructuralError("ssim needs images of at least 11x11, got " + c10::str(a.sizes()));
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto window = gaussian_window(torch::kFloat64);
  auto blur = [&](const torch::Tensor& t) { return torch::conv2d(t, window); };
  auto mu_x = blur(x);
  auto mu_y = blur(y);
  auto var_x = blur(x * x) - mu_x * mu_x;
  auto var_y = blur(y * y) - mu_y * mu_y;
  auto cov = blur(x * y) - mu_x * mu_y;
  auto map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) /
             ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
  return map.mean().item<double>();
}

}  // namespace mphm

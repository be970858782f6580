#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mphm/model.hpp"

namespace mphm {

/// Analytic parameter and multiply-accumulate counts.
///
/// Counted: convolutions, linear layers, attention products, the selective
/// scan state update (3 MACs per state element per step) and FFTs
/// (channels * H * W * log2(H * W) per transform). Normalization, activations,
/// pooling and resizing are free. The frozen prior encoders are excluded;
/// their adapters are included.
struct Complexity {
  int64_t params = 0;
  int64_t macs = 0;
  /// Per top-level group ("stem", "encoder.0", "pfi.1", "prior_generator", ...).
  std::map<std::string, Complexity> parts;

  Complexity& operator+=(const Complexity& other) {
    params += other.params;
    macs += other.macs;
    return *this;
  }
};

/// Closed-form building blocks, exposed for testing.
Complexity conv_cost(int64_t in, int64_t out, int64_t kernel, bool bias, int64_t h, int64_t w);
Complexity depthwise_cost(int64_t channels, int64_t kernel, bool bias, int64_t h, int64_t w);
Complexity linear_cost(int64_t in, int64_t out, bool bias, int64_t tokens);

Complexity vssm_cost(int64_t channels, const VssmOptions& options, int64_t h, int64_t w);
Complexity hmm_cost(const HmmConfig& cfg, int64_t h, int64_t w);
Complexity pfi_cost(const PfiConfig& cfg, int64_t h, int64_t w, int64_t text_tokens);

/// Whole network at a (height x width) input; 256 x 256 by default.
Complexity count_params_flops(const ModelConfig& cfg, int64_t height = 256, int64_t width = 256,
                              int64_t text_tokens = 1);

}  // namespace mphm

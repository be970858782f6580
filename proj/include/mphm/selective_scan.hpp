#pragma once

#include <vector>

#include <torch/torch.h>

#include "mphm/ops.hpp"

namespace mphm {

/// Discretized selective state-space recurrence, run independently per channel:
///
///   h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t,   h_0 = 0
///   y_t = <C_t, h_t> + D * u_t
///
/// Channels are arranged in `groups` equal blocks; B and C are shared by the
/// channels of a block (one block per scan direction in the 2D case).
///
///   u, delta : (batch, L, groups * d)
///   A        : (groups * d, d_state)
///   B, C     : (batch, L, groups, d_state)
///   D        : (groups * d)
///
/// Differentiable in every argument. Throws NumericError naming the step when
/// a non-finite value appears.
torch::Tensor selective_scan(const torch::Tensor& u, const torch::Tensor& delta,
                             const torch::Tensor& A, const torch::Tensor& B,
                             const torch::Tensor& C, const torch::Tensor& D);

/// Input-dependent projections producing delta, B and C, plus the decay and
/// skip parameters, for `directions` independent scans over `channels`.
///
/// delta = softplus(dt_proj(x_proj(x)[:rank]) + dt_bias) > 0 and
/// A = -exp(A_log) <= 0, so every per-step decay lies in (0, 1].
struct SsmParamsImpl : torch::nn::Module {
  SsmParamsImpl(int64_t channels, int64_t d_state = 8, int64_t dt_rank = 0,
                int64_t directions = 1);

  /// One scan per direction; all sequences must share batch, length and width.
  std::vector<SequenceTensor> forward(const std::vector<SequenceTensor>& inputs);
  SequenceTensor forward(const SequenceTensor& input);

  torch::Tensor decay() const { return -torch::exp(A_log); }

  int64_t channels;
  int64_t d_state;
  int64_t dt_rank;
  int64_t directions;
  torch::Tensor x_proj_weight;   // (directions, dt_rank + 2 * d_state, channels)
  torch::Tensor dt_proj_weight;  // (directions, channels, dt_rank)
  torch::Tensor dt_proj_bias;    // (directions, channels)
  torch::Tensor A_log;           // (directions * channels, d_state)
  torch::Tensor D;               // (directions * channels)
};
TORCH_MODULE(SsmParams);

}  // namespace mphm

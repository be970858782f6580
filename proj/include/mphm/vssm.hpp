#pragma once

#include <torch/torch.h>

#include "mphm/ops.hpp"
#include "mphm/selective_scan.hpp"

namespace mphm {

struct VssmOptions {
  int64_t expand = 2;
  int64_t d_state = 8;
};

/// Visual selective-scan block (2D state-space mixing over four scan orders).
///
///   x -> norm -> in_proj -> [branch, gate]
///   branch -> depthwise 3x3 -> SiLU -> cross_scan -> selective scans
///          -> cross_merge -> norm -> * SiLU(gate) -> out_proj -> + x
///
/// Shape preserving. With `out_proj` zeroed the block is the identity.
struct VssmBlockImpl : torch::nn::Module {
  VssmBlockImpl(int64_t channels, VssmOptions options = {});
  torch::Tensor forward(const torch::Tensor& x);

  int64_t channels;
  int64_t inner;
  ChannelNorm norm{nullptr};
  torch::nn::Conv2d in_proj{nullptr};
  DepthwiseConv local{nullptr};
  SsmParams ssm{nullptr};
  ChannelNorm out_norm{nullptr};
  torch::nn::Conv2d out_proj{nullptr};
};
TORCH_MODULE(VssmBlock);

}  // namespace mphm

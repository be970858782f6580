#include "mphm/vssm.hpp"

#include "mphm/errors.hpp"

namespace mphm {

VssmBlockImpl::VssmBlockImpl(int64_t channels_, VssmOptions options)
    : channels(channels_), inner(options.expand * channels_) {
  if (channels <= 0 || options.expand <= 0) {
    throw ConfigError("VSSM needs positive channels and expansion");
  }
  norm = register_module("norm", ChannelNorm(channels));
  in_proj = register_module("in_proj", pointwise_conv(channels, 2 * inner, false));
  local = register_module("local", DepthwiseConv(inner, 3));
  ssm = register_module("ssm", SsmParams(inner, options.d_state, (channels + 15) / 16, 4));
  out_norm = register_module("out_norm", ChannelNorm(inner));
  out_proj = register_module("out_proj", pointwise_conv(inner, channels, false));
}

torch::Tensor VssmBlockImpl::forward(const torch::Tensor& x) {
  const auto h = x.size(2);
  const auto w = x.size(3);
  auto projected = in_proj->forward(norm->forward(x));
  auto parts = projected.chunk(2, 1);
  auto branch = torch::silu(local->forward(parts[0]));

  auto seqs = cross_scan(branch);
  auto scanned = ssm->forward(std::vector<SequenceTensor>(seqs.begin(), seqs.end()));
  auto merged = cross_merge(scanned, h, w);

  auto gated = out_norm->forward(merged) * torch::silu(parts[1]);
  return x + out_proj->forward(gated);
}

}  // namespace mphm

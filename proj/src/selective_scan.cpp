#include "mphm/selective_scan.hpp"

#include <cmath>
#include <string>

#include "mphm/errors.hpp"

namespace mphm {
namespace {

struct ScanShape {
  int64_t batch, length, width, groups, d_state, group_width;
};

ScanShape check_shapes(const torch::Tensor& u, const torch::Tensor& delta, const torch::Tensor& A,
                       const torch::Tensor& B, const torch::Tensor& C, const torch::Tensor& D) {
  if (u.dim() != 3 || delta.sizes() != u.sizes()) {
    throw StructuralError("selective_scan: u and delta must both be (batch, L, channels)");
  }
  ScanShape s{u.size(0), u.size(1), u.size(2), 0, 0, 0};
  if (B.dim() != 4 || C.sizes() != B.sizes() || B.size(0) != s.batch || B.size(1) != s.length) {
    throw StructuralError("selective_scan: B and C must be (batch, L, groups, d_state)");
  }
  s.groups = B.size(2);
  s.d_state = B.size(3);
  if (s.groups <= 0 || s.width % s.groups != 0) {
    throw StructuralError("selective_scan: " + std::to_string(s.groups) +
                          " groups do not divide " + std::to_string(s.width) + " channels");
  }
  s.group_width = s.width / s.groups;
  if (A.dim() != 2 || A.size(0) != s.width || A.size(1) != s.d_state) {
    throw StructuralError("selective_scan: A must be (channels, d_state)");
  }
  if (D.dim() != 1 || D.size(0) != s.width) {
    throw StructuralError("selective_scan: D must be (channels)");
  }
  return s;
}

template <typename T>
void scan_forward(const ScanShape& s, const T* u, const T* delta, const T* A, const T* B,
                  const T* C, const T* D, T* y, T* states) {
  const int64_t n_state = s.d_state;
  std::vector<T> h(static_cast<size_t>(n_state));
  for (int64_t b = 0; b < s.batch; ++b) {
    for (int64_t ch = 0; ch < s.width; ++ch) {
      const int64_t g = ch / s.group_width;
      std::fill(h.begin(), h.end(), T(0));
      const T* a_row = A + ch * n_state;
      T* hs = states + (b * s.width + ch) * s.length * n_state;
      for (int64_t t = 0; t < s.length; ++t) {
        const int64_t io = (b * s.length + t) * s.width + ch;
        const int64_t bc = ((b * s.length + t) * s.groups + g) * n_state;
        const T dt = delta[io];
        const T ut = u[io];
        T acc = 0;
        for (int64_t n = 0; n < n_state; ++n) {
          h[n] = std::exp(dt * a_row[n]) * h[n] + dt * B[bc + n] * ut;
          acc += C[bc + n] * h[n];
          hs[t * n_state + n] = h[n];
        }
        const T out = acc + D[ch] * ut;
        if (!std::isfinite(out)) {
          throw NumericError("selective_scan: non-finite output at step " + std::to_string(t) +
                             " (batch " + std::to_string(b) + ", channel " + std::to_string(ch) +
                             ")");
        }
        y[io] = out;
      }
    }
  }
}

template <typename T>
void scan_backward(const ScanShape& s, const T* u, const T* delta, const T* A, const T* B,
                   const T* C, const T* D, const T* states, const T* grad_y, T* grad_u,
                   T* grad_delta, T* grad_A, T* grad_B, T* grad_C, T* grad_D) {
  const int64_t n_state = s.d_state;
  std::vector<T> gh(static_cast<size_t>(n_state));
  for (int64_t b = 0; b < s.batch; ++b) {
    for (int64_t ch = 0; ch < s.width; ++ch) {
      const int64_t g = ch / s.group_width;
      std::fill(gh.begin(), gh.end(), T(0));
      const T* a_row = A + ch * n_state;
      T* ga_row = grad_A + ch * n_state;
      const T* hs = states + (b * s.width + ch) * s.length * n_state;
      for (int64_t t = s.length - 1; t >= 0; --t) {
        const int64_t io = (b * s.length + t) * s.width + ch;
        const int64_t bc = ((b * s.length + t) * s.groups + g) * n_state;
        const T gy = grad_y[io];
        const T dt = delta[io];
        const T ut = u[io];
        T g_dt = 0;
        T g_u = D[ch] * gy;
        for (int64_t n = 0; n < n_state; ++n) {
          const T h_t = hs[t * n_state + n];
          const T h_prev = t > 0 ? hs[(t - 1) * n_state + n] : T(0);
          const T decay = std::exp(dt * a_row[n]);
          gh[n] += C[bc + n] * gy;
          grad_C[bc + n] += gy * h_t;
          const T g_decay = gh[n] * h_prev;
          g_dt += g_decay * decay * a_row[n] + gh[n] * B[bc + n] * ut;
          ga_row[n] += g_decay * decay * dt;
          grad_B[bc + n] += gh[n] * dt * ut;
          g_u += gh[n] * dt * B[bc + n];
          gh[n] *= decay;
        }
        grad_u[io] = g_u;
        grad_delta[io] = g_dt;
        grad_D[ch] += gy * ut;
      }
    }
  }
}

class SelectiveScanFunction : public torch::autograd::Function<SelectiveScanFunction> {
 public:
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, torch::Tensor u,
                               torch::Tensor delta, torch::Tensor A, torch::Tensor B,
                               torch::Tensor C, torch::Tensor D) {
    const auto s = check_shapes(u, delta, A, B, C, D);
    const auto dtype = u.scalar_type();
    u = u.contiguous();
    delta = delta.to(dtype).contiguous();
    A = A.to(dtype).contiguous();
    B = B.to(dtype).contiguous();
    C = C.to(dtype).contiguous();
    D = D.to(dtype).contiguous();
    auto y = torch::empty_like(u);
    auto states = torch::empty({s.batch, s.width, s.length, s.d_state}, u.options());
    AT_DISPATCH_FLOATING_TYPES(dtype, "selective_scan_forward", [&] {
      scan_forward<scalar_t>(s, u.data_ptr<scalar_t>(), delta.data_ptr<scalar_t>(),
                             A.data_ptr<scalar_t>(), B.data_ptr<scalar_t>(),
                             C.data_ptr<scalar_t>(), D.data_ptr<scalar_t>(),
                             y.data_ptr<scalar_t>(), states.data_ptr<scalar_t>());
    });
    ctx->save_for_backward({u, delta, A, B, C, D, states});
    return y;
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grads) {
    auto saved = ctx->get_saved_variables();
    const auto& u = saved[0];
    const auto& delta = saved[1];
    const auto& A = saved[2];
    const auto& B = saved[3];
    const auto& C = saved[4];
    const auto& D = saved[5];
    const auto& states = saved[6];
    const auto s = check_shapes(u, delta, A, B, C, D);
    auto grad_y = grads[0].to(u.scalar_type()).contiguous();

    auto grad_u = torch::empty_like(u);
    auto grad_delta = torch::empty_like(delta);
    auto grad_A = torch::zeros_like(A);
    auto grad_B = torch::zeros_like(B);
    auto grad_C = torch::zeros_like(C);
    auto grad_D = torch::zeros_like(D);
    AT_DISPATCH_FLOATING_TYPES(u.scalar_type(), "selective_scan_backward", [&] {
      scan_backward<scalar_t>(
          s, u.data_ptr<scalar_t>(), delta.data_ptr<scalar_t>(), A.data_ptr<scalar_t>(),
          B.data_ptr<scalar_t>(), C.data_ptr<scalar_t>(), D.data_ptr<scalar_t>(),
          states.data_ptr<scalar_t>(), grad_y.data_ptr<scalar_t>(), grad_u.data_ptr<scalar_t>(),
          grad_delta.data_ptr<scalar_t>(), grad_A.data_ptr<scalar_t>(),
          grad_B.data_ptr<scalar_t>(), grad_C.data_ptr<scalar_t>(), grad_D.data_ptr<scalar_t>());
    });
    return {grad_u, grad_delta, grad_A, grad_B, grad_C, grad_D};
  }
};

}  // namespace

torch::Tensor selective_scan(const torch::Tensor& u, const torch::Tensor& delta,
                             const torch::Tensor& A, const torch::Tensor& B,
                             const torch::Tensor& C, const torch::Tensor& D) {
  return SelectiveScanFunction::apply(u, delta, A, B, C, D);
}

SsmParamsImpl::SsmParamsImpl(int64_t channels_, int64_t d_state_, int64_t dt_rank_,
                             int64_t directions_)
    : channels(channels_),
      d_state(d_state_),
      dt_rank(dt_rank_ > 0 ? dt_rank_ : (channels_ + 15) / 16),
      directions(directions_) {
  if (channels <= 0 || d_state <= 0 || directions <= 0) {
    throw ConfigError("SsmParams: channels, d_state and directions must be positive");
  }
  const double x_bound = 1.0 / std::sqrt(static_cast<double>(channels));
  const double dt_bound = 1.0 / std::sqrt(static_cast<double>(dt_rank));
  x_proj_weight = register_parameter(
      "x_proj_weight",
      torch::empty({directions, dt_rank + 2 * d_state, channels}).uniform_(-x_bound, x_bound));
  dt_proj_weight = register_parameter(
      "dt_proj_weight", torch::empty({directions, channels, dt_rank}).uniform_(-dt_bound, dt_bound));

  // Step sizes start log-uniform in [1e-3, 1e-1]; the bias stores softplus^-1.
  auto dt = torch::exp(torch::empty({directions, channels})
                           .uniform_(std::log(1e-3), std::log(1e-1)))
                .clamp_min(1e-4);
  dt_proj_bias = register_parameter("dt_proj_bias", dt + torch::log(-torch::expm1(-dt)));

  auto a = torch::arange(1, d_state + 1, torch::kFloat).log().repeat({directions * channels, 1});
  A_log = register_parameter("A_log", a);
  D = register_parameter("D", torch::ones({directions * channels}));
}

std::vector<SequenceTensor> SsmParamsImpl::forward(const std::vector<SequenceTensor>& inputs) {
  if (static_cast<int64_t>(inputs.size()) != directions) {
    throw StructuralError("SsmParams: expected " + std::to_string(directions) +
                          " sequences, got " + std::to_string(inputs.size()));
  }
  const auto& first = inputs.front().data;
  for (const auto& seq : inputs) {
    if (seq.data.sizes() != first.sizes()) {
      throw StructuralError("SsmParams: all direction sequences must share one shape");
    }
  }
  if (first.size(2) != channels) {
    throw StructuralError("SsmParams: sequence width " + std::to_string(first.size(2)) +
                          " != " + std::to_string(channels));
  }
  std::vector<torch::Tensor> us, deltas, bs, cs;
  for (int64_t k = 0; k < directions; ++k) {
    const auto& x = inputs[static_cast<size_t>(k)].data;
    auto proj = torch::matmul(x, x_proj_weight[k].t());  // (B, L, rank + 2N)
    auto parts = proj.split_with_sizes({dt_rank, d_state, d_state}, -1);
    auto dt = torch::matmul(parts[0], dt_proj_weight[k].t()) + dt_proj_bias[k];
    us.push_back(x);
    deltas.push_back(torch::softplus(dt));
    bs.push_back(parts[1]);
    cs.push_back(parts[2]);
  }
  auto y = selective_scan(torch::cat(us, -1), torch::cat(deltas, -1), decay(),
                          torch::stack(bs, 2), torch::stack(cs, 2), D);
  auto outs = y.split(channels, -1);
  std::vector<SequenceTensor> result;
  result.reserve(inputs.size());
  for (int64_t k = 0; k < directions; ++k) {
    result.push_back(SequenceTensor{outs[static_cast<size_t>(k)], inputs[static_cast<size_t>(k)].order});
  }
  return result;
}

SequenceTensor SsmParamsImpl::forward(const SequenceTensor& input) {
  return forward(std::vector<SequenceTensor>{input}).front();
}

}  // namespace mphm

#include "acf/attention.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace acf {

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-bound, bound);
  std::vector<double> w(rows * cols);
  for (double& x : w) x = uni(rng);
  return Tensor({rows, cols}, std::move(w));
}

struct Batched {
  Tensor x;  // [B x N x C]
  bool squeeze = false;
};

Batched as_batched(const Tensor& x, std::size_t channels) {
  if (x.rank() < 2 || x.last() != channels) {
    throw DimensionError("attention: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(channels) + " channels");
  }
  if (x.rank() == 3) return {x, false};
  return {reshape(x, {1, x.extent(0), x.extent(1)}), true};
}

// [B x N x C] x [C x K] -> [B x N x K]
Tensor project(const Tensor& x3, const Tensor& w) {
  const std::size_t b = x3.extent(0), n = x3.extent(1), c = x3.extent(2);
  return reshape(matmul(reshape(x3, {b * n, c}), w), {b, n, w.extent(1)});
}

}  // namespace

L2AttentionParams::L2AttentionParams(std::size_t channels, std::size_t proj,
                                     std::uint64_t seed) {
  if (channels == 0 || proj == 0 || proj > channels) {
    throw ParameterError("L2 attention: need 0 < proj <= channels");
  }
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  query_weight = uniform_matrix(channels, proj, bound, rng);
  out_weight = uniform_matrix(channels, channels, bound, rng);
  gamma = Tensor::scalar(0.0);
  query_state = PowerIterationState::random(channels, proj, rng());
  out_state = PowerIterationState::random(channels, channels, rng());
  power_iterate(100);
}

Tensor L2AttentionParams::effective_query() const {
  Tensor sigma = rayleigh_sigma(query_weight, query_state);
  return mul_scalar(query_weight, reciprocal(clamp_min(sigma, 1.0)));
}

void L2AttentionParams::power_iterate(int iters) {
  spectral_norm(query_weight, query_state, iters);
  spectral_norm(out_weight, out_state, iters);
  refresh_buffers();
}

void L2AttentionParams::refresh_buffers() {
  buffers_[0] = Tensor({query_state.u.size()}, query_state.u);
  buffers_[1] = Tensor({query_state.v.size()}, query_state.v);
  buffers_[2] = Tensor({out_state.u.size()}, out_state.u);
  buffers_[3] = Tensor({out_state.v.size()}, out_state.v);
}

void L2AttentionParams::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                                std::vector<NamedTensor>& buffers) {
  params.push_back({prefix + ".query_weight", &query_weight});
  params.push_back({prefix + ".out_weight", &out_weight});
  params.push_back({prefix + ".gamma", &gamma});
  if (!buffers_[0].defined()) refresh_buffers();
  buffers.push_back({prefix + ".query_u", &buffers_[0]});
  buffers.push_back({prefix + ".query_v", &buffers_[1]});
  buffers.push_back({prefix + ".out_u", &buffers_[2]});
  buffers.push_back({prefix + ".out_v", &buffers_[3]});
}

void L2AttentionParams::sync_buffers_from_tensors() {
  if (buffers_[0].numel() != channels() || buffers_[1].numel() != proj() ||
      buffers_[2].numel() != channels() || buffers_[3].numel() != channels()) {
    throw DimensionError("L2 attention: power-iteration buffers do not match weights");
  }
  query_state.u = buffers_[0].to_vector();
  query_state.v = buffers_[1].to_vector();
  out_state.u = buffers_[2].to_vector();
  out_state.v = buffers_[3].to_vector();
}

DotAttentionParams::DotAttentionParams(std::size_t channels, std::size_t proj,
                                       std::uint64_t seed) {
  if (channels == 0 || proj == 0) throw ParameterError("dot attention: empty projection");
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  query_weight = uniform_matrix(channels, proj, bound, rng);
  key_weight = uniform_matrix(channels, proj, bound, rng);
  value_weight = uniform_matrix(channels, channels, bound, rng);
  gamma = Tensor::scalar(0.0);
}

void DotAttentionParams::collect(const std::string& prefix, std::vector<NamedTensor>& params) {
  params.push_back({prefix + ".query_weight", &query_weight});
  params.push_back({prefix + ".key_weight", &key_weight});
  params.push_back({prefix + ".value_weight", &value_weight});
  params.push_back({prefix + ".gamma", &gamma});
}

// ---------------------------------------------------------------------------

Tensor l2_logits(const Tensor& x, const L2AttentionParams& params) {
  const std::size_t c = params.channels();
  Batched in = as_batched(x, c);
  Tensor q = project(in.x, params.effective_query());
  Tensor sq = row_sq_l2(q);                                 // [B x N]
  Tensor cross = bmm(q, transpose(q));                      // [B x N x N]
  Tensor dist = sub(pairwise_sum(sq), scale(cross, 2.0));  // ||q_i||^2 + ||q_j||^2 - 2 q_i.q_j
  Tensor logits = scale(dist, -1.0 / std::sqrt(static_cast<double>(c)));
  if (in.squeeze) logits = reshape(logits, {x.extent(0), x.extent(0)});
  return logits;
}

Tensor l2_attention_forward(const Tensor& x, const L2AttentionParams& params) {
  const std::size_t c = params.channels();
  Batched in = as_batched(x, c);
  const std::size_t b = in.x.extent(0), n = in.x.extent(1);
  Tensor p = softmax_rows(l2_logits(in.x, params));
  Tensor wq = params.effective_query();
  // A W_L = W_Q W_Q^T W_L / sqrt(C)
  Tensor mixing = scale(matmul(matmul_nt(wq, wq), params.out_weight),
                        1.0 / std::sqrt(static_cast<double>(c)));
  Tensor px = bmm(p, in.x);
  Tensor f = matmul(reshape(px, {b * n, c}), mixing);
  return reshape(f, x.shape());
}

double lambert_w0(double y) {
  if (std::isnan(y) || y < 0.0) throw DomainError("lambert_w0: argument must be nonnegative");
  if (y == 0.0) return 0.0;
  if (std::isinf(y)) return y;
  double w = std::log1p(y);
  for (int it = 0; it < 100; ++it) {
    const double ew = std::exp(w);
    const double f = w * ew - y;
    const double fp = ew * (w + 1.0);
    const double step = f / (fp - (w + 2.0) * f / (2.0 * w + 2.0));
    w -= step;
    if (std::abs(step) <= 1e-16 * (1.0 + std::abs(w))) break;
  }
  return w;
}

Tensor lipschitz_bound_tensor(const L2AttentionParams& params, std::size_t positions) {
  if (positions == 0) throw DimensionError("lipschitz_bound: need at least one position");
  const double n = static_cast<double>(positions);
  const double c = static_cast<double>(params.channels());
  // phi^{-1}(N - 1) with phi(x) = x e^{x + 1}
  const double phi_inv = lambert_w0((n - 1.0) / std::numbers::e);
  const double factor = std::sqrt(n) / std::sqrt(c) * (4.0 * phi_inv + 1.0);
  Tensor sigma_q = rayleigh_sigma(params.query_weight, params.query_state);
  Tensor q_norm = mul(sigma_q, reciprocal(clamp_min(sigma_q, 1.0)));
  Tensor l_norm = rayleigh_sigma(params.out_weight, params.out_state);
  return scale(mul(q_norm, l_norm), factor);
}

double lipschitz_bound(const L2AttentionParams& params, std::size_t positions) {
  NoGradGuard guard;
  return lipschitz_bound_tensor(params, positions).item();
}

Tensor attention_block(const Tensor& x, const L2AttentionParams& params) {
  if (!params.gamma.tracked() && params.gamma.item() == 0.0) {
    as_batched(x, params.channels());
    return x;
  }
  const std::size_t positions = x.extent(x.rank() - 2);
  Tensor bound = lipschitz_bound_tensor(params, positions);
  if (bound.item() <= 1e-30) return x;
  Tensor f = l2_attention_forward(x, params);
  return add(x, mul_scalar(f, mul(params.gamma, reciprocal(bound))));
}

Tensor dot_attention_block(const Tensor& x, const DotAttentionParams& params) {
  const std::size_t c = params.query_weight.extent(0);
  if (params.key_weight.shape() != params.query_weight.shape() ||
      params.value_weight.extent(0) != c || params.value_weight.extent(1) != c) {
    throw DimensionError("dot attention: inconsistent weight shapes");
  }
  if (!params.gamma.tracked() && params.gamma.item() == 0.0) {
    as_batched(x, c);
    return x;
  }
  Batched in = as_batched(x, c);
  const double temp = 1.0 / std::sqrt(static_cast<double>(params.query_weight.extent(1)));
  Tensor q = project(in.x, params.query_weight);
  Tensor k = project(in.x, params.key_weight);
  Tensor p = softmax_rows(scale(bmm(q, transpose(k)), temp));
  Tensor v = project(in.x, params.value_weight);
  Tensor f = reshape(bmm(p, v), x.shape());
  return add(x, mul_scalar(f, params.gamma));
}

}  // namespace acf

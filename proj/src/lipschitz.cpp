#include "acf/lipschitz.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace acf {

namespace {

double norm2(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

std::vector<double> random_unit(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(n);
  double nrm = 0.0;
  while (nrm == 0.0) {
    for (double& v : x) v = normal(rng);
    nrm = norm2(x);
  }
  for (double& v : x) v /= nrm;
  return x;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double lipswish_slope(double t) {
  // d/dt [t sigmoid(t)] / 1.1
  const double s = 1.0 / (1.0 + std::exp(-t));
  return (s + t * s * (1.0 - s)) / 1.1;
}

}  // namespace

PowerIterationState PowerIterationState::random(std::size_t out, std::size_t in,
                                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PowerIterationState s;
  s.u = random_unit(out, rng);
  s.v = random_unit(in, rng);
  return s;
}

double spectral_norm(const Tensor& weight, PowerIterationState& state, int iters) {
  if (weight.rank() != 2) throw DimensionError("spectral_norm: weight must be a matrix");
  const std::size_t out = weight.extent(0), in = weight.extent(1);
  if (state.u.size() != out || state.v.size() != in) {
    throw DimensionError("spectral_norm: state does not match weight " +
                         shape_str(weight.shape()));
  }
  auto w = weight.values();
  if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; })) return 0.0;

  std::vector<double> u = state.u, v = state.v;
  std::vector<double> nv(in), nu(out);
  for (int it = 0; it < iters; ++it) {
    std::fill(nv.begin(), nv.end(), 0.0);
    for (std::size_t i = 0; i < out; ++i) {
      for (std::size_t j = 0; j < in; ++j) nv[j] += w[i * in + j] * u[i];
    }
    const double nvn = norm2(nv);
    if (nvn == 0.0) break;  // u orthogonal to the range; keep the last good pair
    for (double& x : nv) x /= nvn;
    for (std::size_t i = 0; i < out; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j) s += w[i * in + j] * nv[j];
      nu[i] = s;
    }
    const double nun = norm2(nu);
    if (nun == 0.0) break;
    for (double& x : nu) x /= nun;
    u = nu;
    v = nv;
  }
  state.u = u;
  state.v = v;
  double sigma = 0.0;
  for (std::size_t i = 0; i < out; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < in; ++j) s += w[i * in + j] * v[j];
    sigma += u[i] * s;
  }
  return sigma;
}

Tensor rayleigh_sigma(const Tensor& weight, const PowerIterationState& state) {
  const std::size_t out = weight.extent(0), in = weight.extent(1);
  std::vector<double> outer(out * in);
  for (std::size_t i = 0; i < out; ++i) {
    for (std::size_t j = 0; j < in; ++j) outer[i * in + j] = state.u[i] * state.v[j];
  }
  return sum(mul(weight, Tensor({out, in}, std::move(outer))));
}

Tensor spectral_scale(const Tensor& weight, const PowerIterationState& state, double coeff) {
  // coeff / max(sigma, coeff)
  return scale(reciprocal(clamp_min(rayleigh_sigma(weight, state), coeff)), coeff);
}

// ---------------------------------------------------------------------------

SpectralLinear::SpectralLinear(std::size_t in, std::size_t out, double c, std::uint64_t seed,
                               bool with_bias)
    : coeff(c) {
  if (!(c > 0.0)) throw ParameterError("SpectralLinear: coefficient must be positive");
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> uni(-bound, bound);
  std::vector<double> w(out * in);
  for (double& x : w) x = uni(rng);
  weight = Tensor({out, in}, std::move(w));
  if (with_bias) {
    std::vector<double> b(out);
    for (double& x : b) x = uni(rng);
    bias = Tensor({out}, std::move(b));
  }
  state = PowerIterationState::random(out, in, rng());
  power_iterate(100);
  // Start strictly inside the cap: the raw weights certify on their own, and
  // the normalization (non-differentiable at sigma = c) starts inactive.
  const double s = sigma();
  if (s > 0.95 * c) {
    weight = scale(weight, 0.95 * c / s);
    power_iterate(100);
  }
}

Tensor SpectralLinear::forward(const Tensor& x) const {
  if (x.last() != in_features()) {
    throw DimensionError("SpectralLinear: input width " + std::to_string(x.last()) +
                         " != " + std::to_string(in_features()));
  }
  const Shape in_shape = x.shape();
  Tensor x2 = x.rank() == 2 ? x : reshape(x, {x.numel() / x.last(), x.last()});
  Tensor w = normalize ? mul_scalar(weight, spectral_scale(weight, state, coeff)) : weight;
  Tensor y = matmul_nt(x2, w);
  if (bias.defined()) y = add_bias(y, bias);
  Shape out_shape = in_shape;
  out_shape.back() = out_features();
  return y.shape() == out_shape ? y : reshape(y, out_shape);
}

double SpectralLinear::power_iterate(int iters) {
  const double s = spectral_norm(weight, state, iters);
  refresh_buffers();
  return s;
}

double SpectralLinear::sigma() const {
  NoGradGuard guard;
  return rayleigh_sigma(weight.detach(), state).item();
}

double SpectralLinear::effective_norm() const {
  const double s = sigma();
  return normalize ? std::min(s, coeff) : s;
}

Tensor SpectralLinear::effective_weight() const {
  NoGradGuard guard;
  Tensor w = weight.detach();
  return normalize ? mul_scalar(w, spectral_scale(w, state, coeff)) : w;
}

void SpectralLinear::refresh_buffers() {
  u_buffer_ = Tensor({state.u.size()}, state.u);
  v_buffer_ = Tensor({state.v.size()}, state.v);
}

void SpectralLinear::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                             std::vector<NamedTensor>& buffers) {
  params.push_back({prefix + ".weight", &weight});
  if (bias.defined()) params.push_back({prefix + ".bias", &bias});
  if (!u_buffer_.defined()) refresh_buffers();
  buffers.push_back({prefix + ".u", &u_buffer_});
  buffers.push_back({prefix + ".v", &v_buffer_});
}

void SpectralLinear::sync_buffers_from_tensors() {
  if (u_buffer_.numel() != out_features() || v_buffer_.numel() != in_features()) {
    throw DimensionError("SpectralLinear: power-iteration buffers do not match weight");
  }
  state.u = u_buffer_.to_vector();
  state.v = v_buffer_.to_vector();
}

// ---------------------------------------------------------------------------

ActivationKind parse_activation(const std::string& name) {
  if (name == "relu") return ActivationKind::relu;
  if (name == "elu") return ActivationKind::elu;
  if (name == "lipswish") return ActivationKind::lipswish;
  if (name == "clipswish") return ActivationKind::clipswish;
  throw ParameterError("unknown activation '" + name + "'");
}

std::string to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::elu: return "elu";
    case ActivationKind::lipswish: return "lipswish";
    case ActivationKind::clipswish: return "clipswish";
  }
  return "?";
}

double clipswish_lipschitz() {
  static const double value = [] {
    double best = 0.0;
    // The slope profile is a function of beta * x; [-20, 20] covers where it varies.
    const int n = 400000;
    for (int i = 0; i <= n; ++i) {
      const double t = -20.0 + 40.0 * static_cast<double>(i) / n;
      const double a = lipswish_slope(t);
      const double b = lipswish_slope(-t);
      best = std::max(best, std::sqrt(a * a + b * b));
    }
    return best;
  }();
  return value;
}

Tensor apply_activation(ActivationKind kind, const Tensor& beta, const Tensor& x) {
  switch (kind) {
    case ActivationKind::relu: return relu(x);
    case ActivationKind::elu: return elu(x);
    case ActivationKind::lipswish:
    case ActivationKind::clipswish: break;
  }
  if (beta.numel() != 1 || !(beta.item() > 0.0)) {
    throw ParameterError("LipSwish beta must be a single positive value");
  }
  auto lipswish = [&beta](const Tensor& t) {
    return scale(mul(t, sigmoid(mul_scalar(t, beta))), 1.0 / 1.1);
  };
  if (kind == ActivationKind::lipswish) return lipswish(x);
  return scale(concat_last(lipswish(x), lipswish(neg(x))), 1.0 / clipswish_lipschitz());
}

Activation::Activation(ActivationKind k, double beta) : kind(k) {
  if (!(beta > 0.0)) throw ParameterError("Activation: beta must be positive");
  // softplus^{-1}(beta)
  beta_raw = Tensor::scalar(beta > 30.0 ? beta : std::log(std::expm1(beta)));
}

double Activation::beta() const { return softplus(beta_raw.item()); }

Tensor Activation::forward(const Tensor& x) const {
  if (!learnable()) return apply_activation(kind, Tensor::scalar(1.0), x);
  Tensor beta = log(add_scalar(exp(beta_raw), 1.0));
  return apply_activation(kind, beta, x);
}

void Activation::collect(const std::string& prefix, std::vector<NamedTensor>& params) {
  if (learnable()) params.push_back({prefix + ".beta_raw", &beta_raw});
}

}  // namespace acf

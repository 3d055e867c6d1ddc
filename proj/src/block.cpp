#include "acf/block.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "acf/random.hpp"

namespace acf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor apply_l2(const Tensor& h, const L2AttentionStage& st) {
  const std::size_t c = st.params.channels();
  const std::size_t b = h.extent(0), w = h.extent(1);
  Tensor h3 = reshape(h, {b, w / c, c});
  return reshape(attention_block(h3, st.params), {b, w});
}

Tensor apply_dot(const Tensor& h, const DotAttentionStage& st) {
  const std::size_t c = st.params.query_weight.extent(0);
  const std::size_t b = h.extent(0), w = h.extent(1);
  Tensor h3 = reshape(h, {b, w / c, c});
  return reshape(dot_attention_block(h3, st.params), {b, w});
}

void check_attention_width(std::size_t width, std::size_t channels) {
  if (channels == 0 || width % channels != 0) {
    throw ParameterError("attention: hidden width " + std::to_string(width) +
                         " is not a multiple of attn_channels " + std::to_string(channels));
  }
}

double live_gamma(const Tensor& gamma) { return std::abs(gamma.detach().item()); }

struct TwoD {
  Tensor z;
  bool squeeze = false;
};

TwoD as_rows(const Tensor& z, std::size_t d) {
  if (z.rank() == 1 && z.extent(0) == d) return {reshape(z, {1, d}), true};
  if (z.rank() == 2 && z.extent(1) == d) return {z, false};
  throw DimensionError("block: expected [B x " + std::to_string(d) + "] input, got " +
                       shape_str(z.shape()));
}

Tensor replicate_row(const Tensor& z, std::size_t d, std::size_t rows) {
  auto v = z.values();
  std::vector<double> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.begin(), v.begin() + d, out.begin() + r * d);
  return Tensor({rows, d}, std::move(out));
}

std::vector<double> power_series_traces(const std::vector<double>& j, std::size_t d,
                                        std::size_t n_terms) {
  std::vector<double> traces(n_terms);
  std::vector<double> m = j, next(d * d);
  for (std::size_t k = 0; k < n_terms; ++k) {
    double tr = 0.0;
    for (std::size_t i = 0; i < d; ++i) tr += m[i * d + i];
    traces[k] = tr;
    if (k + 1 == n_terms) break;
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t l = 0; l < d; ++l) {
        const double a = m[i * d + l];
        for (std::size_t c = 0; c < d; ++c) next[i * d + c] += a * j[l * d + c];
      }
    }
    m.swap(next);
  }
  return traces;
}

double series_value(const std::vector<double>& traces) {
  double s = 0.0;
  for (std::size_t k = 0; k < traces.size(); ++k) {
    const double sign = (k % 2 == 0) ? 1.0 : -1.0;
    s += sign * traces[k] / static_cast<double>(k + 1);
  }
  return s;
}

std::vector<double> draw_probe(std::mt19937_64& rng, std::size_t d, ProbeKind kind) {
  std::vector<double> v(d);
  if (kind == ProbeKind::gaussian) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& x : v) x = normal(rng);
  } else {
    std::bernoulli_distribution coin(0.5);
    for (double& x : v) x = coin(rng) ? 1.0 : -1.0;
  }
  return v;
}

LogDetEstimate summarize(const std::vector<double>& samples, LogDetKind kind,
                         std::size_t n_terms) {
  LogDetEstimate est;
  est.kind = kind;
  est.n_terms = n_terms;
  est.n_samples = samples.size();
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  est.value = mean;
  if (samples.size() > 1) {
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(samples.size() - 1);
    est.std_error = std::sqrt(var / static_cast<double>(samples.size()));
  }
  return est;
}

constexpr std::size_t kProbeChunk = 512;

}  // namespace

BlockKind parse_block_kind(const std::string& name) {
  if (name == "residual") return BlockKind::residual;
  if (name == "denseblock") return BlockKind::denseblock;
  throw ParameterError("unknown block kind '" + name + "'");
}

AttentionKind parse_attention(const std::string& name) {
  if (name == "none") return AttentionKind::none;
  if (name == "l2") return AttentionKind::l2;
  if (name == "dot") return AttentionKind::dot;
  throw ParameterError("unknown attention kind '" + name + "'");
}

std::string to_string(BlockKind kind) {
  return kind == BlockKind::residual ? "residual" : "denseblock";
}

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::none: return "none";
    case AttentionKind::l2: return "l2";
    case AttentionKind::dot: return "dot";
  }
  return "?";
}

std::string to_string(LogDetKind kind) {
  switch (kind) {
    case LogDetKind::exact: return "exact";
    case LogDetKind::series: return "series";
    case LogDetKind::hutchinson: return "hutchinson";
    case LogDetKind::roulette: return "roulette";
  }
  return "?";
}

double DenseStage::branch_budget() const {
  if (dot) return kInf;
  const double c = linear.normalize ? linear.coeff : linear.sigma();
  return l2 ? c * (1.0 + l2->gamma_max) : c;
}

double DenseStage::normalizer() const {
  const double b = branch_budget();
  return std::sqrt(1.0 + (std::isfinite(b) ? b * b : 1.0));
}

// ---------------------------------------------------------------------------

ContractiveBlock::ContractiveBlock(const BlockConfig& cfg, std::uint64_t seed) : dim_(cfg.dim) {
  if (cfg.dim == 0 || cfg.hidden_width == 0) throw ParameterError("block: empty width");
  if (!(cfg.lip_coeff > 0.0)) throw ParameterError("block: lip_coeff must be positive");
  if (!(cfg.gamma_max >= 0.0)) throw ParameterError("block: gamma_max must be nonnegative");
  const std::size_t c = cfg.attn_channels;
  const std::size_t proj = std::max<std::size_t>(1, c / std::max<std::size_t>(1, cfg.d_proj_ratio));

  auto make_l2 = [&](std::size_t width) {
    check_attention_width(width, c);
    L2AttentionStage st{L2AttentionParams(c, proj, derive_seed(seed, "attention")),
                        cfg.gamma_max};
    return st;
  };
  auto make_dot = [&](std::size_t width) {
    check_attention_width(width, c);
    return DotAttentionStage{DotAttentionParams(c, proj, derive_seed(seed, "attention"))};
  };

  if (cfg.kind == BlockKind::residual) {
    if (cfg.hidden_layers == 0) throw ParameterError("block: need at least one hidden layer");
    std::size_t width = cfg.dim;
    for (std::size_t l = 0; l < cfg.hidden_layers; ++l) {
      stages_.emplace_back(SpectralLinear(width, cfg.hidden_width, cfg.lip_coeff,
                                          derive_seed(seed, "linear", l)));
      Activation act(cfg.activation);
      width = act.output_width(cfg.hidden_width);
      stages_.emplace_back(std::move(act));
      if (l == 0 && cfg.attention == AttentionKind::l2) stages_.emplace_back(make_l2(width));
      if (l == 0 && cfg.attention == AttentionKind::dot) stages_.emplace_back(make_dot(width));
    }
    stages_.emplace_back(SpectralLinear(width, cfg.dim, cfg.lip_coeff,
                                        derive_seed(seed, "linear", cfg.hidden_layers)));
  } else {
    if (cfg.dense_stages == 0 || cfg.dense_growth == 0) {
      throw ParameterError("block: dense stages need positive count and growth");
    }
    std::size_t width = cfg.dim;
    for (std::size_t s = 0; s < cfg.dense_stages; ++s) {
      DenseStage st{SpectralLinear(width, cfg.dense_growth, cfg.lip_coeff,
                                   derive_seed(seed, "linear", s)),
                    Activation(cfg.activation), std::nullopt, std::nullopt};
      const std::size_t branch = st.activation.output_width(cfg.dense_growth);
      if (s == 0 && cfg.attention == AttentionKind::l2) st.l2 = make_l2(branch);
      if (s == 0 && cfg.attention == AttentionKind::dot) st.dot = make_dot(branch);
      width += branch;
      stages_.emplace_back(std::move(st));
    }
    stages_.emplace_back(SpectralLinear(width, cfg.dim, cfg.lip_coeff,
                                        derive_seed(seed, "linear", cfg.dense_stages)));
  }
  if (lip_budget() >= 1.0 && cfg.attention != AttentionKind::dot) {
    throw ParameterError("block: Lipschitz budget " + std::to_string(lip_budget()) +
                         " is not below 1; lower lip_coeff or gamma_max");
  }
}

ContractiveBlock::ContractiveBlock(std::size_t dim, std::vector<Stage> stages)
    : dim_(dim), stages_(std::move(stages)) {
  if (dim == 0 || stages_.empty()) throw ParameterError("block: need a width and stages");
  // Shape check with a probe row.
  NoGradGuard guard;
  Tensor out = g(Tensor::zeros({1, dim}));
  (void)out;
}

Tensor ContractiveBlock::g(const Tensor& z) const {
  TwoD in = as_rows(z, dim_);
  Tensor h = in.z;
  for (const Stage& stage : stages_) {
    std::visit(
        [&h](const auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            h = st.forward(h);
          } else if constexpr (std::is_same_v<T, Activation>) {
            h = st.forward(h);
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            h = apply_l2(h, st);
          } else if constexpr (std::is_same_v<T, DotAttentionStage>) {
            h = apply_dot(h, st);
          } else {
            Tensor branch = st.activation.forward(st.linear.forward(h));
            if (st.l2) branch = apply_l2(branch, *st.l2);
            if (st.dot) branch = apply_dot(branch, *st.dot);
            h = scale(concat_last(h, branch), 1.0 / st.normalizer());
          }
        },
        stage);
  }
  if (h.last() != dim_) {
    throw DimensionError("block: residual branch produces width " + std::to_string(h.last()) +
                         ", expected " + std::to_string(dim_));
  }
  return in.squeeze ? reshape(h, z.shape()) : h;
}

double ContractiveBlock::lip_budget() const {
  double budget = 1.0;
  for (const Stage& stage : stages_) {
    std::visit(
        [&budget](const auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            budget *= st.normalize ? st.coeff : st.sigma();
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            budget *= 1.0 + st.gamma_max;
          } else if constexpr (std::is_same_v<T, DotAttentionStage>) {
            budget = kInf;
          } else if constexpr (std::is_same_v<T, DenseStage>) {
            if (st.dot) budget = kInf;
          }
        },
        stage);
  }
  return budget;
}

double ContractiveBlock::composed_norm_bound() const {
  double bound = 1.0;
  for (const Stage& stage : stages_) {
    std::visit(
        [&bound](const auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            bound *= st.effective_norm();
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            bound *= 1.0 + live_gamma(st.params.gamma);
          } else if constexpr (std::is_same_v<T, DotAttentionStage>) {
            bound = kInf;
          } else if constexpr (std::is_same_v<T, DenseStage>) {
            if (st.dot) {
              bound = kInf;
              return;
            }
            double b = st.linear.effective_norm();
            if (st.l2) b *= 1.0 + live_gamma(st.l2->params.gamma);
            bound *= std::sqrt(1.0 + b * b) / st.normalizer();
          }
        },
        stage);
  }
  return bound;
}

void ContractiveBlock::power_iterate(int iters) {
  for (Stage& stage : stages_) {
    std::visit(
        [iters](auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            st.power_iterate(iters);
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            st.params.power_iterate(iters);
          } else if constexpr (std::is_same_v<T, DenseStage>) {
            st.linear.power_iterate(iters);
            if (st.l2) st.l2->params.power_iterate(iters);
          }
        },
        stage);
  }
}

void ContractiveBlock::set_normalization(bool enabled) {
  for (Stage& stage : stages_) {
    if (auto* lin = std::get_if<SpectralLinear>(&stage)) lin->normalize = enabled;
    if (auto* dense = std::get_if<DenseStage>(&stage)) dense->linear.normalize = enabled;
  }
}

void ContractiveBlock::clamp_gammas() {
  auto clamp = [](L2AttentionStage& st) {
    const double g = st.params.gamma.item();
    const double c = std::clamp(g, -st.gamma_max, st.gamma_max);
    if (c != g) st.params.gamma = Tensor::scalar(c);
  };
  for (Stage& stage : stages_) {
    if (auto* st = std::get_if<L2AttentionStage>(&stage)) clamp(*st);
    if (auto* dense = std::get_if<DenseStage>(&stage); dense && dense->l2) clamp(*dense->l2);
  }
}

std::vector<double> ContractiveBlock::gammas() const {
  std::vector<double> out;
  for (const Stage& stage : stages_) {
    if (auto* st = std::get_if<L2AttentionStage>(&stage)) out.push_back(st->params.gamma.item());
    if (auto* st = std::get_if<DotAttentionStage>(&stage)) out.push_back(st->params.gamma.item());
    if (auto* dense = std::get_if<DenseStage>(&stage)) {
      if (dense->l2) out.push_back(dense->l2->params.gamma.item());
      if (dense->dot) out.push_back(dense->dot->params.gamma.item());
    }
  }
  return out;
}

void ContractiveBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                               std::vector<NamedTensor>& buffers) {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = prefix + ".s" + std::to_string(i);
    std::visit(
        [&](auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            st.collect(p, params, buffers);
          } else if constexpr (std::is_same_v<T, Activation>) {
            st.collect(p, params);
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            st.params.collect(p, params, buffers);
          } else if constexpr (std::is_same_v<T, DotAttentionStage>) {
            st.params.collect(p, params);
          } else {
            st.linear.collect(p + ".linear", params, buffers);
            st.activation.collect(p + ".act", params);
            if (st.l2) st.l2->params.collect(p + ".attn", params, buffers);
            if (st.dot) st.dot->params.collect(p + ".attn", params);
          }
        },
        stages_[i]);
  }
}

void ContractiveBlock::sync_buffers_from_tensors() {
  for (Stage& stage : stages_) {
    std::visit(
        [](auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            st.sync_buffers_from_tensors();
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            st.params.sync_buffers_from_tensors();
          } else if constexpr (std::is_same_v<T, DenseStage>) {
            st.linear.sync_buffers_from_tensors();
            if (st.l2) st.l2->params.sync_buffers_from_tensors();
          }
        },
        stage);
  }
}

// ---------------------------------------------------------------------------

Tensor block_forward(const ContractiveBlock& block, const Tensor& z) {
  return add(z, block.g(z));
}

InverseResult block_inverse(const ContractiveBlock& block, const Tensor& z_prime, double tol,
                            std::size_t max_iter) {
  NoGradGuard guard;
  const std::size_t d = block.dim();
  TwoD in = as_rows(z_prime.detach(), d);
  const std::size_t rows = in.z.extent(0);
  auto target = in.z.values();

  InverseResult res;
  Tensor z = in.z;
  for (std::size_t it = 0; it < max_iter; ++it) {
    Tensor gz = block.g(z);
    auto zv = z.values();
    auto gv = gz.values();
    double worst = 0.0;
    std::vector<double> l2(rows, 0.0);
    std::vector<double> next(rows * d);
    bool finite = true;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t k = r * d + j;
        const double e = zv[k] + gv[k] - target[k];
        worst = std::max(worst, std::abs(e));
        s += e * e;
        next[k] = target[k] - gv[k];
        finite = finite && std::isfinite(e);
      }
      l2[r] = std::sqrt(s);
    }
    res.iterations = it + 1;
    res.residual_inf.push_back(finite ? worst : kInf);
    res.residual_l2.push_back(std::move(l2));
    if (!finite) break;
    if (worst <= tol) {
      res.z = in.squeeze ? reshape(z, z_prime.shape()) : z;
      return res;
    }
    z = Tensor({rows, d}, std::move(next));
  }
  const double last = res.residual_inf.empty() ? kInf : res.residual_inf.back();
  throw NonConvergenceError("block inverse did not converge: residual " + std::to_string(last) +
                                " after " + std::to_string(res.iterations) + " iterations",
                            last, res.iterations);
}

// ---------------------------------------------------------------------------

double log_det_lu(std::vector<double> a, std::size_t d, int* sign) {
  int sgn = 1;
  double logabs = 0.0;
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r) {
      if (std::abs(a[r * d + col]) > std::abs(a[piv * d + col])) piv = r;
    }
    if (a[piv * d + col] == 0.0) {
      if (sign) *sign = 0;
      return -kInf;
    }
    if (piv != col) {
      for (std::size_t c = 0; c < d; ++c) std::swap(a[piv * d + c], a[col * d + c]);
      sgn = -sgn;
    }
    const double p = a[col * d + col];
    if (p < 0.0) sgn = -sgn;
    logabs += std::log(std::abs(p));
    for (std::size_t r = col + 1; r < d; ++r) {
      const double f = a[r * d + col] / p;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < d; ++c) a[r * d + c] -= f * a[col * d + c];
    }
  }
  if (sign) *sign = sgn;
  return logabs;
}

Tensor jacobian_g(const ContractiveBlock& block, const Tensor& z) {
  const std::size_t d = block.dim();
  if (d > kMaxDenseDim) {
    throw DimensionError("dense Jacobian limited to dimension " + std::to_string(kMaxDenseDim));
  }
  TwoD in = as_rows(z.detach(), d);
  const std::size_t rows = in.z.extent(0);
  Tape tape;
  Tensor zt = tape.watch(in.z);
  Tensor gz = block.g(zt);
  std::vector<double> jac(rows * d * d);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> e(rows * d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) e[r * d + j] = 1.0;
    Tensor row = vjp(Tensor({rows, d}, std::move(e)), gz, zt);
    auto rv = row.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < d; ++c) jac[(r * d + j) * d + c] = rv[r * d + c];
    }
  }
  return Tensor({rows, d, d}, std::move(jac));
}

std::vector<double> logdet_exact_rows(const ContractiveBlock& block, const Tensor& z) {
  const std::size_t d = block.dim();
  Tensor jac = jacobian_g(block, z);
  const std::size_t rows = jac.extent(0);
  auto jv = jac.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> a(jv.begin() + r * d * d, jv.begin() + (r + 1) * d * d);
    for (std::size_t i = 0; i < d; ++i) a[i * d + i] += 1.0;
    int sign = 0;
    const double ld = log_det_lu(std::move(a), d, &sign);
    if (sign <= 0) {
      throw InvariantViolation("det(I + J_g) is not positive; the block is not contractive");
    }
    out[r] = ld;
  }
  return out;
}

std::vector<double> logdet_series_rows(const ContractiveBlock& block, const Tensor& z,
                                       std::size_t n_terms) {
  if (n_terms == 0) throw ParameterError("series log-det needs at least one term");
  const std::size_t d = block.dim();
  Tensor jac = jacobian_g(block, z);
  const std::size_t rows = jac.extent(0);
  auto jv = jac.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> j(jv.begin() + r * d * d, jv.begin() + (r + 1) * d * d);
    out[r] = series_value(power_series_traces(j, d, n_terms));
  }
  return out;
}

Tensor probe_power_series(const Tensor& g_out, const Tensor& z_in, const Tensor& probes,
                          const std::vector<std::vector<double>>& coef, bool create_graph) {
  if (probes.shape() != z_in.shape() || g_out.shape() != z_in.shape() || z_in.rank() != 2) {
    throw DimensionError("probe_power_series: g_out, z_in and probes must share a [B x d] shape");
  }
  const std::size_t rows = z_in.extent(0);
  Tensor w = probes;
  Tensor total;
  for (std::size_t k = 0; k < coef.size(); ++k) {
    if (coef[k].size() != rows) throw DimensionError("probe_power_series: coefficient rows");
    w = vjp(w, g_out, z_in, create_graph);
    Tensor term = mul(sum_last(mul(w, probes)), Tensor({rows}, coef[k]));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) total = Tensor::zeros({rows});
  return total;
}

LogDetEstimate logdet_exact(const ContractiveBlock& block, const Tensor& z) {
  TwoD in = as_rows(z.detach(), block.dim());
  if (in.z.extent(0) != 1) throw DimensionError("logdet_exact: expected a single point");
  LogDetEstimate est;
  est.kind = LogDetKind::exact;
  est.value = logdet_exact_rows(block, in.z)[0];
  return est;
}

LogDetEstimate logdet_series(const ContractiveBlock& block, const Tensor& z,
                             std::size_t n_terms) {
  TwoD in = as_rows(z.detach(), block.dim());
  if (in.z.extent(0) != 1) throw DimensionError("logdet_series: expected a single point");
  LogDetEstimate est;
  est.kind = LogDetKind::series;
  est.n_terms = n_terms;
  est.value = logdet_series_rows(block, in.z, n_terms)[0];
  return est;
}

LogDetEstimate logdet_hutchinson(const ContractiveBlock& block, const Tensor& z,
                                 std::size_t n_terms, std::size_t n_samples, std::uint64_t seed,
                                 ProbeKind probe) {
  if (n_terms == 0 || n_samples == 0) {
    throw ParameterError("hutchinson log-det needs positive n_terms and n_samples");
  }
  const std::size_t d = block.dim();
  TwoD in = as_rows(z.detach(), d);
  if (in.z.extent(0) != 1) throw DimensionError("logdet_hutchinson: expected a single point");
  std::vector<double> samples;
  samples.reserve(n_samples);
  for (std::size_t start = 0; start < n_samples; start += kProbeChunk) {
    const std::size_t rows = std::min(kProbeChunk, n_samples - start);
    std::vector<double> v(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      std::mt19937_64 rng(seed + start + r);
      auto p = draw_probe(rng, d, probe);
      std::copy(p.begin(), p.end(), v.begin() + r * d);
    }
    std::vector<std::vector<double>> coef(n_terms, std::vector<double>(rows));
    for (std::size_t k = 0; k < n_terms; ++k) {
      const double c = ((k % 2 == 0) ? 1.0 : -1.0) / static_cast<double>(k + 1);
      std::fill(coef[k].begin(), coef[k].end(), c);
    }
    Tape tape;
    Tensor zt = tape.watch(replicate_row(in.z, d, rows));
    Tensor gz = block.g(zt);
    Tensor est = probe_power_series(gz, zt, Tensor({rows, d}, std::move(v)), coef, false);
    for (double x : est.values()) samples.push_back(x);
  }
  return summarize(samples, LogDetKind::hutchinson, n_terms);
}

LogDetEstimate logdet_roulette(const ContractiveBlock& block, const Tensor& z, double p_geom,
                               std::size_t n_samples, std::uint64_t seed) {
  if (!(p_geom > 0.0 && p_geom < 1.0)) throw ParameterError("roulette: p_geom must be in (0, 1)");
  if (n_samples == 0) throw ParameterError("roulette: n_samples must be positive");
  const std::size_t d = block.dim();
  TwoD in = as_rows(z.detach(), d);
  if (in.z.extent(0) != 1) throw DimensionError("logdet_roulette: expected a single point");
  std::vector<double> samples;
  samples.reserve(n_samples);
  std::size_t max_terms = 0;
  for (std::size_t start = 0; start < n_samples; start += kProbeChunk) {
    const std::size_t rows = std::min(kProbeChunk, n_samples - start);
    std::vector<double> v(rows * d);
    std::vector<std::size_t> ks(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      std::mt19937_64 rng(seed + start + r);
      std::geometric_distribution<std::size_t> geom(p_geom);
      ks[r] = 1 + geom(rng);
      auto p = draw_probe(rng, d, ProbeKind::gaussian);
      std::copy(p.begin(), p.end(), v.begin() + r * d);
    }
    const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
    max_terms = std::max(max_terms, kmax);
    std::vector<std::vector<double>> coef(kmax, std::vector<double>(rows, 0.0));
    for (std::size_t k = 0; k < kmax; ++k) {
      // term k+1 survives with probability P(K >= k+1) = (1-p)^k
      const double w = ((k % 2 == 0) ? 1.0 : -1.0) / static_cast<double>(k + 1) /
                       std::pow(1.0 - p_geom, static_cast<double>(k));
      for (std::size_t r = 0; r < rows; ++r) {
        if (ks[r] > k) coef[k][r] = w;
      }
    }
    Tape tape;
    Tensor zt = tape.watch(replicate_row(in.z, d, rows));
    Tensor gz = block.g(zt);
    Tensor est = probe_power_series(gz, zt, Tensor({rows, d}, std::move(v)), coef, false);
    for (double x : est.values()) samples.push_back(x);
  }
  return summarize(samples, LogDetKind::roulette, max_terms);
}

}  // namespace acf

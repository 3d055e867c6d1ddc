#include "acf/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <type_traits>

#include "acf/random.hpp"

namespace acf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor as_row(const Tensor& x, std::size_t d, const char* what) {
  if (x.numel() != d || x.rank() > 2 || (x.rank() == 2 && x.extent(0) != 1)) {
    throw DimensionError(std::string(what) + ": expected one point of dimension " +
                         std::to_string(d) + ", got " + shape_str(x.shape()));
  }
  return x.rank() == 2 ? x : reshape(x, {1, d});
}

std::vector<double> normal_values(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

Interpolation interpolate(const FlowModel& model, const Tensor& x1, const Tensor& x2,
                          const InterpolationSpec& spec) {
  if (spec.n_steps == 0) throw ParameterError("interpolate: n_steps must be at least 1");
  if (!model.certified()) throw InvariantViolation("interpolate: model is not certified");
  const std::size_t d = model.dim();
  const Tensor z1 = model.forward(as_row(x1, d, "interpolate"));
  const Tensor z2 = model.forward(as_row(x2, d, "interpolate"));
  const std::size_t count = spec.n_steps + 1 + (spec.include_overshoot ? 1 : 0);
  std::vector<double> lat(count * d);
  for (std::size_t i = 0; i < count; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(spec.n_steps);
    for (std::size_t j = 0; j < d; ++j) {
      const double a = z1.values()[j], b = z2.values()[j];
      lat[i * d + j] = a + t * (b - a);
    }
  }
  Interpolation out;
  out.latents = Tensor({count, d}, std::move(lat));
  out.points = model.inverse(out.latents, spec.tol, spec.max_iter);
  return out;
}

// ---------------------------------------------------------------------------

SweepVariant parse_sweep_variant(const std::string& name) {
  if (name == "l2") return SweepVariant::l2;
  if (name == "dot") return SweepVariant::dot;
  throw ParameterError("unknown perturbation variant '" + name + "' (expected l2 or dot)");
}

std::string to_string(SweepVariant v) { return v == SweepVariant::l2 ? "l2" : "dot"; }

const std::vector<double>& default_sigmas() {
  static const std::vector<double> s = {1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  return s;
}

bool SweepResult::monotone() const {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (!(rows[i].mean >= rows[i - 1].mean)) return false;
  }
  return true;
}

SweepResult perturbation_sweep(const FlowModel& model, const Tensor& inputs,
                               const PerturbationSweep& sweep, std::size_t n_levels,
                               const std::optional<LogDetOptions>& opts) {
  if (sweep.sigmas.empty()) throw ParameterError("perturbation sweep: empty sigma list");
  for (std::size_t i = 0; i < sweep.sigmas.size(); ++i) {
    if (!(sweep.sigmas[i] > 0.0) || (i > 0 && !(sweep.sigmas[i] > sweep.sigmas[i - 1]))) {
      throw ParameterError("perturbation sweep: sigmas must be positive and strictly ascending");
    }
  }
  const bool dot_model = model.config().attention == AttentionKind::dot;
  if (dot_model != (sweep.variant == SweepVariant::dot)) {
    throw ParameterError("perturbation sweep: variant " + to_string(sweep.variant) +
                         " does not match a model with attention " +
                         to_string(model.config().attention));
  }
  const std::size_t d = model.dim();
  if (inputs.rank() != 2 || inputs.extent(1) != d) {
    throw DimensionError("perturbation sweep: inputs must be [n x " + std::to_string(d) + "]");
  }
  if (sweep.n_inputs == 0 || inputs.extent(0) == 0) {
    throw ParameterError("perturbation sweep: no inputs");
  }
  const std::size_t n = std::min(sweep.n_inputs, inputs.extent(0));
  const LogDetOptions lo = opts.value_or(LogDetOptions::evaluation(d));
  const auto x = inputs.values();
  const auto eps = normal_values(derive_seed(sweep.seed, "perturb"), n * d);

  auto statistic = [&](const std::vector<double>& pts) {
    auto lp = model.log_prob(Tensor({n, d}, pts), lo);
    for (double& v : lp) {
      v = n_levels > 0 ? (-v / std::numbers::ln2 + static_cast<double>(d) *
                                                       std::log2(static_cast<double>(n_levels))) /
                             static_cast<double>(d)
                       : -v;
    }
    return lp;
  };
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double a : v) s += a;
    return s / static_cast<double>(v.size());
  };

  SweepResult res;
  res.bits_per_dim = n_levels > 0;
  std::vector<double> clean(x.begin(), x.begin() + n * d);
  res.clean = mean_of(statistic(clean));
  for (double sigma : sweep.sigmas) {
    std::vector<double> plus(n * d), minus(n * d);
    for (std::size_t i = 0; i < n * d; ++i) {
      plus[i] = x[i] + sigma * eps[i];
      minus[i] = x[i] - sigma * eps[i];
    }
    const auto a = statistic(plus), b = statistic(minus);
    std::vector<double> per(n);
    for (std::size_t i = 0; i < n; ++i) per[i] = 0.5 * (a[i] + b[i]);
    SweepRow row;
    row.sigma = sigma;
    row.mean = mean_of(per);
    double ss = 0.0;
    for (double v : per) ss += (v - row.mean) * (v - row.mean);
    row.std = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    res.rows.push_back(row);
  }
  return res;
}

std::string sweep_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "sigma," << (result.bits_per_dim ? "bpd" : "nll") << ",std\n";
  for (const auto& r : result.rows) out << fmt(r.sigma) << ',' << fmt(r.mean) << ',' << fmt(r.std) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------

namespace {

void describe_stages(const ContractiveBlock& block, BlockCertificate& cert) {
  std::size_t width = block.dim();
  auto attention_bound = [&](const L2AttentionParams& p, std::size_t w) {
    cert.attention_bounds.push_back(lipschitz_bound(p, w / p.channels()));
    cert.gammas.push_back(p.gamma.item());
  };
  for (const Stage& stage : block.stages()) {
    std::visit(
        [&](const auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SpectralLinear>) {
            cert.spectral_norms.push_back(st.sigma());
            width = st.weight.extent(0);
          } else if constexpr (std::is_same_v<T, L2AttentionStage>) {
            attention_bound(st.params, width);
          } else if constexpr (std::is_same_v<T, DotAttentionStage>) {
            cert.attention_bounds.push_back(kInf);
            cert.gammas.push_back(st.params.gamma.item());
          } else if constexpr (std::is_same_v<T, DenseStage>) {
            cert.spectral_norms.push_back(st.linear.sigma());
            const std::size_t branch = st.linear.weight.extent(0);
            if (st.l2) attention_bound(st.l2->params, branch);
            if (st.dot) {
              cert.attention_bounds.push_back(kInf);
              cert.gammas.push_back(st.dot->params.gamma.item());
            }
            width += branch;
          }
        },
        stage);
  }
}

double sampled_lipschitz(const ContractiveBlock& block, std::size_t pairs, std::uint64_t seed) {
  if (pairs == 0) return 0.0;
  const std::size_t d = block.dim();
  auto a = normal_values(derive_seed(seed, "certify.a"), pairs * d);
  auto noise = normal_values(derive_seed(seed, "certify.b"), pairs * d);
  std::vector<double> b(pairs * d);
  for (std::size_t p = 0; p < pairs; ++p) {
    // Even pairs are independent draws; odd pairs are close neighbours.
    const double near = std::pow(10.0, -1.0 - static_cast<double>(p % 4));
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = p * d + j;
      a[i] *= 2.0;
      b[i] = p % 2 == 0 ? 2.0 * noise[i] : a[i] + near * noise[i];
    }
  }
  const Tensor ga = block.g(Tensor({pairs, d}, a)), gb = block.g(Tensor({pairs, d}, b));
  double worst = 0.0;
  for (std::size_t p = 0; p < pairs; ++p) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = p * d + j;
      num += (ga.values()[i] - gb.values()[i]) * (ga.values()[i] - gb.values()[i]);
      den += (a[i] - b[i]) * (a[i] - b[i]);
    }
    if (den > 0.0) worst = std::max(worst, std::sqrt(num / den));
  }
  return worst;
}

double roundtrip_error(const ContractiveBlock& block, std::size_t n, std::uint64_t seed) {
  if (n == 0) return 0.0;
  const std::size_t d = block.dim();
  const Tensor x({n, d}, normal_values(seed, n * d));
  try {
    const Tensor back = block_inverse(block, block_forward(block, x)).z;
    double err = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      err = std::max(err, std::abs(back.values()[i] - x.values()[i]));
    }
    return std::isfinite(err) ? err : kInf;
  } catch (const NonConvergenceError&) {
    return kInf;
  }
}

}  // namespace

CertificationReport certify(const FlowModel& model, const CertifyOptions& opts) {
  FlowModel m = model;
  CertificationReport report;
  report.pass = true;
  for (std::size_t k = 0; k < m.size(); ++k) {
    ContractiveBlock& block = m.blocks()[k];
    block.set_normalization(opts.normalize);
    block.power_iterate(opts.power_iters);

    BlockCertificate cert;
    cert.index = k;
    describe_stages(block, cert);
    cert.budget = block.lip_budget();
    cert.composed = block.composed_norm_bound();
    cert.empirical = sampled_lipschitz(block, opts.pairs, derive_seed(opts.seed, "certify", k));
    cert.roundtrip_error =
        roundtrip_error(block, opts.roundtrip_inputs, derive_seed(opts.seed, "certify.roundtrip", k));

    std::vector<std::string> reasons;
    if (!(cert.budget < 1.0)) reasons.push_back("budget " + short_fmt(cert.budget) + " >= 1");
    if (!(cert.composed < 1.0)) {
      reasons.push_back("composed norm bound " + short_fmt(cert.composed) + " >= 1");
    }
    if (!(cert.empirical <= std::min(cert.budget, cert.composed) + opts.slack)) {
      reasons.push_back("empirical Lipschitz " + short_fmt(cert.empirical) + " exceeds bound");
    }
    if (!(cert.roundtrip_error <= opts.roundtrip_tol)) {
      reasons.push_back("round-trip error " + short_fmt(cert.roundtrip_error));
    }
    cert.pass = reasons.empty();
    for (std::size_t i = 0; i < reasons.size(); ++i) cert.reason += (i ? "; " : "") + reasons[i];
    if (!cert.pass && report.pass) {
      report.pass = false;
      report.failure = "block " + std::to_string(k) + ": " + cert.reason;
    }
    report.blocks.push_back(std::move(cert));
  }
  return report;
}

std::string certification_text(const CertificationReport& report) {
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + short_fmt(v[i]);
    return s.empty() ? std::string("-") : s;
  };
  std::ostringstream out;
  for (const auto& b : report.blocks) {
    out << "block " << b.index << ": " << (b.pass ? "PASS" : "FAIL") << "\n"
        << "  spectral norms:   " << join(b.spectral_norms) << "\n"
        << "  attention bounds: " << join(b.attention_bounds) << "\n"
        << "  gammas:           " << join(b.gammas) << "\n"
        << "  budget:           " << short_fmt(b.budget) << "\n"
        << "  composed bound:   " << short_fmt(b.composed) << "\n"
        << "  empirical lip:    " << short_fmt(b.empirical) << "\n"
        << "  round-trip error: " << short_fmt(b.roundtrip_error) << "\n";
    if (!b.pass) out << "  reason:           " << b.reason << "\n";
  }
  out << (report.pass ? "certified" : "NOT certified: " + report.failure) << "\n";
  return out.str();
}

}  // namespace acf

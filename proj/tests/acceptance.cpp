// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4,9] [--out-dir DIR]
//
// Training-based criteria write their metrics and sweep tables to DIR.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "acf/analysis.hpp"
#include "acf/random.hpp"
#include "acf/training.hpp"
#include "test_util.hpp"

using namespace acf;
using testutil::empirical_lipschitz;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string g6(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::filesystem::path g_out_dir = "acceptance_artifacts";

void write_file(const std::string& name, const std::string& text) {
  std::filesystem::create_directories(g_out_dir);
  std::ofstream(g_out_dir / name, std::ios::trunc) << text;
}

// A model whose weights sit at (or past) their caps, with open attention gates
// and random biases, so that every block is far from the identity.
FlowModel random_model(std::size_t d, AttentionKind att, std::uint64_t seed,
                       std::size_t hidden = 64) {
  ModelConfig c;
  c.dim = d;
  c.hidden_width = hidden;
  c.attention = att;
  c.seed = seed;
  FlowModel m(c);
  std::vector<NamedTensor> params, buffers;
  m.collect(params, buffers);
  std::mt19937_64 rng(derive_seed(seed, "perturb"));
  std::uniform_real_distribution<double> mag(0.5, 4.0), uni(-1.0, 1.0);
  for (auto& p : params) {
    if (p.name.ends_with(".gamma")) *p.tensor = Tensor::scalar(c.gamma_max * uni(rng));
    else if (p.name.ends_with("weight")) *p.tensor = scale(*p.tensor, mag(rng));
    else if (p.name.ends_with("bias")) *p.tensor = testutil::random_tensor(p.tensor->shape(), rng, -1, 1);
  }
  m.power_iterate(100);
  return m;
}

L2AttentionParams random_attention(std::size_t channels, std::size_t proj, std::mt19937_64& rng) {
  L2AttentionParams p(channels, proj, rng());
  std::uniform_real_distribution<double> mag(0.3, 3.0);
  p.query_weight = scale(p.query_weight, mag(rng));
  p.out_weight = scale(p.out_weight, mag(rng));
  p.power_iterate(100);
  return p;
}

double density_integral(const FlowModel& m) {
  // Trapezoid rule on [-6, 6]^2, 400 x 400 nodes.
  const std::size_t n = 400;
  const double lo = -6.0, h = 12.0 / static_cast<double>(n - 1);
  double total = 0.0;
  std::vector<double> pts, weights;
  auto flush = [&] {
    if (weights.empty()) return;
    auto lp = m.log_prob(Tensor({weights.size(), 2}, pts), LogDetOptions::exact());
    for (std::size_t i = 0; i < lp.size(); ++i) total += weights[i] * std::exp(lp[i]);
    pts.clear();
    weights.clear();
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      pts.push_back(lo + h * static_cast<double>(i));
      pts.push_back(lo + h * static_cast<double>(j));
      weights.push_back(wi * wj * h * h);
      if (weights.size() == 4096) flush();
    }
  }
  flush();
  return total;
}

Tensor digits(std::size_t n, std::uint64_t seed) {
  ToyDataset spec{DatasetKind::tiny_digits, n, seed};
  return dequantize(generate_dataset(spec), spec.n_levels, derive_seed(seed, "dequantize"));
}

// ---------------------------------------------------------------------------

Outcome invertibility() {
  const std::size_t dims[] = {2, 10, 49, 2, 10};
  double worst_err = 0.0, worst_excess = -1.0;
  bool certified = true;
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t d = dims[i];
    FlowModel m = random_model(d, i % 2 ? AttentionKind::none : AttentionKind::l2, 10 + i);
    certified = certified && m.certified();
    std::mt19937_64 rng(derive_seed(10 + i, "inputs"));
    Tensor x = testutil::gaussian_tensor({100, d}, rng, 1.5);
    Tensor z = m.forward(x);
    for (std::size_t k = m.size(); k-- > 0;) {
      const auto& block = m.blocks()[k];
      auto inv = block_inverse(block, z);
      const double budget = block.lip_budget();
      for (std::size_t it = 0; it + 1 < inv.residual_l2.size(); ++it) {
        for (std::size_t r = 0; r < inv.residual_l2[it].size(); ++r) {
          const double a = inv.residual_l2[it][r], b = inv.residual_l2[it + 1][r];
          if (b < 1e-11) continue;  // below this the residual is rounding noise
          worst_excess = std::max(worst_excess, b / a - budget);
        }
      }
      z = inv.z;
    }
    worst_err = std::max(worst_err, testutil::max_abs_diff(z.values(), x.values()));
  }
  return {certified && worst_err <= 1e-6 && worst_excess <= 1e-3,
          "max round-trip error " + g6(worst_err) + " (<= 1e-6); max residual ratio - budget " +
              g6(worst_excess) + " (<= 1e-3)"};
}

Outcome logdet_agreement() {
  double worst_series = 0.0, worst_hz = 0.0, worst_rz = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    const std::size_t d = std::vector<std::size_t>{2, 5, 10}[i % 3];
    FlowModel m = random_model(d, i % 2 ? AttentionKind::l2 : AttentionKind::none, 100 + i);
    const auto& block = m.blocks()[i % m.size()];
    std::mt19937_64 rng(derive_seed(100 + i, "point"));
    Tensor z = testutil::gaussian_tensor({d}, rng);
    const double exact = logdet_exact(block, z).value;
    worst_series = std::max(worst_series, std::abs(logdet_series(block, z, 50).value - exact));
    auto h = logdet_hutchinson(block, z, 20, 10000, derive_seed(100 + i, "hutchinson"));
    auto r = logdet_roulette(block, z, 0.5, 100000, derive_seed(100 + i, "roulette"));
    worst_hz = std::max(worst_hz, std::abs(h.value - exact) / h.std_error);
    worst_rz = std::max(worst_rz, std::abs(r.value - exact) / r.std_error);
  }
  return {worst_series <= 1e-6 && worst_hz <= 4.0 && worst_rz <= 4.0,
          "series(50) max |err| " + g6(worst_series) + " (<= 1e-6); hutchinson max |z| " +
              g6(worst_hz) + ", roulette max |z| " + g6(worst_rz) + " (<= 4 SE)"};
}

Outcome analytic_series() {
  SpectralLinear lin(2, 2, 0.9, 1, false);
  lin.weight = Tensor({2, 2}, {0.5, 0.0, 0.0, 0.5});
  lin.power_iterate(200);
  std::vector<Stage> stages;
  stages.emplace_back(std::move(lin));
  ContractiveBlock block(2, std::move(stages));
  const double got = logdet_series(block, Tensor({2}, {0.3, -1.2}), 30).value;
  const double err = std::abs(got - 2.0 * std::log(1.5));
  return {err <= 1e-9, "|series(30) - 2 ln 1.5| = " + g6(err) + " (<= 1e-9)"};
}

Outcome lipschitz_certificates() {
  double excess_linear = -1.0, excess_attn = -1.0, excess_block = -1.0;
  for (std::size_t i = 0; i < 20; ++i) {
    std::mt19937_64 rng(derive_seed(4, "param", i));
    std::uniform_int_distribution<std::size_t> width(2, 40);
    std::uniform_real_distribution<double> coef(0.3, 0.99), mag(0.1, 10.0), gam(-0.5, 0.5);

    const std::size_t in = width(rng), out = width(rng);
    const double c = coef(rng);
    SpectralLinear lin(in, out, c, rng(), true);
    lin.weight = scale(lin.weight, mag(rng));
    lin.power_iterate(100);
    const double el = empirical_lipschitz([&](const Tensor& x) { return lin.forward(x); },
                                          {1, in}, 2000, rng);
    excess_linear = std::max(excess_linear, el - c);

    const std::size_t channels = 2 + i % 7, positions = std::vector<std::size_t>{1, 4, 16}[i % 3];
    L2AttentionParams p = random_attention(channels, std::max<std::size_t>(1, channels / 2), rng);
    p.gamma = Tensor::scalar(gam(rng));
    const double ea = empirical_lipschitz(
        [&](const Tensor& x) { return sub(attention_block(x, p), x); }, {positions, channels}, 2000,
        rng);
    excess_attn = std::max(excess_attn, ea - std::abs(p.gamma.item()));

    const std::size_t d = std::vector<std::size_t>{2, 5, 10}[i % 3];
    FlowModel m = random_model(d, i % 2 ? AttentionKind::l2 : AttentionKind::none, 400 + i);
    const auto& block = m.blocks()[i % m.size()];
    const double eb = empirical_lipschitz([&](const Tensor& x) { return block.g(x); }, {1, d},
                                          2000, rng);
    excess_block = std::max(excess_block, eb - block.lip_budget());
  }
  const double worst = std::max({excess_linear, excess_attn, excess_block});
  return {worst <= 1e-6, "max empirical - budget: linear " + g6(excess_linear) + ", attention " +
                             g6(excess_attn) + ", block " + g6(excess_block) + " (<= 1e-6)"};
}

Outcome attention_bound() {
  double worst_ratio = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    std::mt19937_64 rng(derive_seed(5, "param", i));
    const std::size_t channels = 2 + i % 7;
    std::uniform_int_distribution<std::size_t> proj(1, channels);
    L2AttentionParams p = random_attention(channels, proj(rng), rng);
    for (std::size_t n : {1, 4, 16, 49}) {
      const double bound = lipschitz_bound(p, n);
      const double emp = empirical_lipschitz(
          [&](const Tensor& x) { return l2_attention_forward(x, p); }, {n, channels}, 300, rng);
      worst_ratio = std::max(worst_ratio, emp / bound);
    }
  }
  std::vector<double> grid = {0.0};
  for (int e = -100; e <= 100; ++e) grid.push_back(std::pow(10.0, e / 10.0));
  for (int n = 1; n <= 1000; ++n) grid.push_back((n - 1) / std::numbers::e);
  double worst_res = 0.0;
  for (double y : grid) {
    const double w = lambert_w0(y);
    worst_res = std::max(worst_res, std::abs(w * std::exp(w) - y) / std::max(1.0, y));
  }
  return {worst_ratio <= 1.0 && worst_res <= 1e-12,
          "max empirical/bound " + g6(worst_ratio) + " (<= 1); lambert_w0 max residual " +
              g6(worst_res) + " (<= 1e-12, relative above y = 1)"};
}

Outcome gamma_zero_identity() {
  std::size_t shapes = 0, mismatches = 0;
  std::mt19937_64 rng(6);
  for (std::size_t c : {1, 2, 8}) {
    for (std::size_t n : {1, 3, 16, 49}) {
      for (std::size_t b : {0, 1, 4}) {
        L2AttentionParams p(c, std::max<std::size_t>(1, c / 8), rng());
        Shape shape = b ? Shape{b, n, c} : Shape{n, c};
        Tensor x = testutil::gaussian_tensor(shape, rng, 3.0);
        Tensor y = attention_block(x, p);
        ++shapes;
        if (y.shape() != x.shape() ||
            std::memcmp(y.values().data(), x.values().data(), x.numel() * sizeof(double)) != 0) {
          ++mismatches;
        }
      }
    }
  }
  // Whole blocks: a fresh attentive model computes bit-for-bit the same map as
  // the attention-free model with the same seed.
  for (std::size_t d : {2, 10, 49}) {
    ModelConfig c;
    c.dim = d;
    c.seed = 60 + d;
    FlowModel plain(c);
    c.attention = AttentionKind::l2;
    FlowModel attentive(c);
    Tensor x = testutil::gaussian_tensor({16, d}, rng);
    ++shapes;
    if (plain.forward(x).to_vector() != attentive.forward(x).to_vector()) ++mismatches;
  }
  return {mismatches == 0,
          std::to_string(shapes - mismatches) + "/" + std::to_string(shapes) + " shapes bit-identical"};
}

Outcome density_normalization() {
  std::vector<std::pair<std::string, double>> results;
  {
    ModelConfig c;
    c.dim = 2;
    c.attention = AttentionKind::l2;
    c.seed = 70;
    results.push_back({"fresh", density_integral(FlowModel(c))});
  }
  results.push_back({"random", density_integral(random_model(2, AttentionKind::l2, 71))});
  {
    ModelConfig c;
    c.dim = 2;
    c.attention = AttentionKind::l2;
    c.seed = 72;
    FlowModel m(c);
    TrainConfig tc;
    tc.epochs = 30;
    tc.seed = 72;
    tc.eval_every = 30;
    auto tr = generate_dataset({DatasetKind::eight_gaussians, 1280, 72});
    auto ev = generate_dataset({DatasetKind::eight_gaussians, 256, 73});
    auto res = train(m, tr, ev, tc);
    results.push_back({"trained (eval NLL " + g6(res.initial_eval_nll) + " -> " +
                           g6(res.final_eval_nll) + ")",
                       density_integral(m)});
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, v] : results) {
    ok = ok && std::abs(v - 1.0) <= 0.01;
    detail += (detail.empty() ? "" : "; ") + name + " " + g6(v, 7);
  }
  return {ok, detail + " (1 +- 0.01)"};
}

Outcome gradient_check() {
  FlowModel m = random_model(2, AttentionKind::l2, 80);
  std::vector<NamedTensor> params, buffers;
  m.collect(params, buffers);
  Tensor batch = generate_dataset({DatasetKind::two_moons, 64, 80});
  double worst = 0.0;
  for (const auto& opts : {default_training_estimator(2), LogDetOptions::training(81)}) {
    std::vector<Tensor> grads;
    loss_and_gradients(m, batch, opts, &grads);
    std::size_t total = 0;
    for (auto& p : params) total += p.tensor->numel();
    std::mt19937_64 rng(82);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (int t = 0; t < 10; ++t) {
      std::size_t flat = pick(rng), k = 0;
      while (flat >= params[k].tensor->numel()) flat -= params[k++].tensor->numel();
      const Tensor orig = *params[k].tensor;
      const double x0 = orig.values()[flat], h = 1e-5;
      *params[k].tensor = testutil::with_value(orig, flat, x0 + h);
      const double up = loss_and_gradients(m, batch, opts, nullptr);
      *params[k].tensor = testutil::with_value(orig, flat, x0 - h);
      const double down = loss_and_gradients(m, batch, opts, nullptr);
      *params[k].tensor = orig;
      const double fd = (up - down) / (2.0 * h), an = grads[k].values()[flat];
      // Absolute floor at the finite-difference rounding level.
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return {worst <= 1e-3, "max relative error " + g6(worst) +
                             " over 10 parameters x {exact, roulette} estimators (<= 1e-3)"};
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome paired_convergence() {
  bool ok = true;
  std::string detail;
  for (auto kind : {DatasetKind::two_moons, DatasetKind::eight_gaussians}) {
    std::vector<double> base, attn;
    bool same_start = true;
    for (std::uint64_t seed : {1, 2, 3}) {
      ModelConfig c;
      c.dim = 2;
      c.seed = seed;
      TrainConfig tc;
      tc.epochs = 200;
      tc.seed = seed;
      tc.eval_every = 10;
      auto tr = generate_dataset({kind, 1280, derive_seed(seed, "train")});
      auto ev = generate_dataset({kind, 512, derive_seed(seed, "eval")});
      auto res = paired_convergence_run(c, tr, ev, tc);
      same_start = same_start && res.baseline.initial_eval_nll == res.attentive.initial_eval_nll &&
                   !res.baseline.aborted && !res.attentive.aborted;
      base.push_back(res.baseline.final_eval_nll);
      attn.push_back(res.attentive.final_eval_nll);
      const std::string stem = "paired_" + to_string(kind) + "_seed" + std::to_string(seed);
      write_file(stem + "_baseline.csv", metrics_csv(res.baseline.metrics));
      write_file(stem + "_attentive.csv", metrics_csv(res.attentive.metrics));
    }
    const double mb = median3(base), ma = median3(attn);
    ok = ok && same_start && ma <= mb + 0.05;
    detail += (detail.empty() ? "" : "; ") + to_string(kind) + ": median final NLL ACF " + g6(ma) +
              " vs baseline " + g6(mb) + (same_start ? ", identical start" : ", START DIFFERS");
  }
  return {ok, detail};
}

Outcome perturbation_monotonicity() {
  Tensor tr = digits(1024, 90), ev = digits(512, 91), held = digits(256, 92);
  std::string detail;
  bool ok = false;
  for (auto att : {AttentionKind::l2, AttentionKind::dot}) {
    ModelConfig c;
    c.dim = 49;
    c.attention = att;
    c.seed = 93;
    FlowModel m(c);
    TrainConfig tc;
    tc.epochs = 40;
    tc.seed = 93;
    tc.eval_every = 10;
    tc.n_levels = 16;
    auto res = train(m, tr, ev, tc);
    PerturbationSweep sweep;
    sweep.seed = 94;
    sweep.variant = att == AttentionKind::l2 ? SweepVariant::l2 : SweepVariant::dot;
    auto table = perturbation_sweep(m, held, sweep, 16);
    write_file("perturb_" + to_string(att) + ".csv", sweep_csv(table));
    write_file("digits_" + to_string(att) + "_metrics.csv", metrics_csv(res.metrics));
    std::string row;
    for (const auto& r : table.rows) row += (row.empty() ? "" : " ") + g6(r.mean);
    if (att == AttentionKind::l2) {
      ok = table.monotone() && !res.aborted;
      for (const auto& r : table.rows) ok = ok && std::isfinite(r.mean);
      detail += "l2 bpd [" + row + "] " + (table.monotone() ? "nondecreasing" : "NOT monotone");
    } else {
      detail += "; dot bpd [" + row + "] " + (table.monotone() ? "nondecreasing" : "not monotone") +
                (res.aborted ? " (training aborted: non-finite loss)" : "") + " (reported only)";
    }
  }
  return {ok, detail};
}

Outcome interpolation_fidelity() {
  const std::size_t dims[] = {2, 49, 2, 10, 49};
  double worst_end = 0.0, worst_path = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t d = dims[i];
    FlowModel m = random_model(d, AttentionKind::l2, 110 + i);
    std::mt19937_64 rng(derive_seed(110 + i, "endpoints"));
    Tensor x1 = testutil::gaussian_tensor({1, d}, rng), x2 = testutil::gaussian_tensor({1, d}, rng);
    InterpolationSpec spec;
    spec.n_steps = 8;
    auto path = interpolate(m, x1, x2, spec);
    for (std::size_t j = 0; j < d; ++j) {
      worst_end = std::max(worst_end, std::abs(path.points.at(0, j) - x1.at(0, j)));
      worst_end = std::max(worst_end, std::abs(path.points.at(8, j) - x2.at(0, j)));
    }
    Tensor re = m.forward(path.points);
    worst_path = std::max(worst_path, testutil::max_abs_diff(re.values(), path.latents.values()));
  }
  return {worst_end <= 1e-5 && worst_path <= 1e-4,
          "max endpoint error " + g6(worst_end) + " (<= 1e-5); max re-encoded latent error " +
              g6(worst_path) + " (<= 1e-4)"};
}

Outcome determinism() {
  std::string ckpt[2], csv[2], samples[2], sweep[2];
  for (int run = 0; run < 2; ++run) {
    ModelConfig c;
    c.dim = 2;
    c.hidden_width = 32;
    c.attention = AttentionKind::l2;
    c.seed = 120;
    FlowModel m(c);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 128;
    tc.seed = 120;
    auto res = train(m, generate_dataset({DatasetKind::two_moons, 512, 121}),
                     generate_dataset({DatasetKind::two_moons, 256, 122}), tc);
    ckpt[run] = serialize_checkpoint(m);
    csv[run] = metrics_csv(res.metrics);
    const Tensor drawn = m.sample(64, 5);
    for (double v : drawn.values()) samples[run] += g6(v, 17) + "\n";
    PerturbationSweep s;
    s.seed = 9;
    sweep[run] = sweep_csv(perturbation_sweep(m, generate_dataset({DatasetKind::two_moons, 64, 123}), s, 0));
  }
  const bool ok = ckpt[0] == ckpt[1] && csv[0] == csv[1] && samples[0] == samples[1] &&
                  sweep[0] == sweep[1];
  return {ok, std::string("checkpoint ") + (ckpt[0] == ckpt[1] ? "identical" : "DIFFERS") +
                  " (" + std::to_string(ckpt[0].size()) + " bytes), metrics CSV " +
                  (csv[0] == csv[1] ? "identical" : "DIFFERS") + ", samples " +
                  (samples[0] == samples[1] ? "identical" : "DIFFERS") + ", sweep CSV " +
                  (sweep[0] == sweep[1] ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--out-dir" && i + 1 < argc) {
      g_out_dir = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only 1,2,...] [--out-dir DIR]\n");
      return 2;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"invertibility", invertibility},
      {"log-det oracle agreement", logdet_agreement},
      {"analytic series value", analytic_series},
      {"Lipschitz certificates", lipschitz_certificates},
      {"attention bound validity", attention_bound},
      {"gamma=0 identity", gamma_zero_identity},
      {"density normalization", density_normalization},
      {"gradient correctness", gradient_check},
      {"paired convergence (directional)", paired_convergence},
      {"perturbation monotonicity (directional)", perturbation_monotonicity},
      {"interpolation fidelity", interpolation_fidelity},
      {"determinism", determinism},
  };

  int passed = 0, run = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    ++run;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    passed += o.pass;
    std::printf("[%s] %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%d criteria passed\n", passed, run);
  return passed == run ? 0 : 1;
}

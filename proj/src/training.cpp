#include "acf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "acf/random.hpp"

namespace acf {

namespace {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

// Polyline strokes on the 7x7 grid, (column, row) coordinates.
const std::vector<std::vector<Stroke>>& digit_templates() {
  static const std::vector<std::vector<Stroke>> t = {
      {{{2, 1}, {4, 1}, {5, 2}, {5, 4}, {4, 5}, {2, 5}, {1, 4}, {1, 2}, {2, 1}}},
      {{{2, 2}, {3, 1}, {3, 5}}},
      {{{1, 2}, {2, 1}, {4, 1}, {5, 2}, {1, 5}, {5, 5}}},
      {{{1, 1}, {5, 1}, {3, 3}, {5, 4}, {4, 5}, {1, 5}}},
      {{{4, 5}, {4, 1}, {1, 4}, {5, 4}}},
      {{{5, 1}, {1, 1}, {1, 3}, {4, 3}, {5, 4}, {4, 5}, {1, 5}}},
      {{{4, 1}, {2, 1}, {1, 3}, {1, 5}, {5, 5}, {5, 3}, {1, 3}}},
      {{{1, 1}, {5, 1}, {2, 5}}},
      {{{1, 1}, {5, 1}, {5, 5}, {1, 5}, {1, 1}}, {{1, 3}, {5, 3}}},
      {{{5, 3}, {1, 3}, {1, 1}, {5, 1}, {5, 5}, {2, 5}}},
  };
  return t;
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

void render_digit(std::mt19937_64& rng, std::size_t n_levels, double* out) {
  std::uniform_int_distribution<int> pick(0, 9);
  std::uniform_real_distribution<double> shift(-0.6, 0.6), zoom(0.85, 1.1), width(0.4, 0.6);
  const auto& strokes = digit_templates()[static_cast<std::size_t>(pick(rng))];
  const double dx = shift(rng), dy = shift(rng), s = zoom(rng), w = width(rng);
  auto place = [&](Point p) { return Point{3.0 + s * (p.x - 3.0) + dx, 3.0 + s * (p.y - 3.0) + dy}; };
  for (std::size_t r = 0; r < kDigitSide; ++r) {
    for (std::size_t c = 0; c < kDigitSide; ++c) {
      const Point px{static_cast<double>(c), static_cast<double>(r)};
      double d = 1e9;
      for (const auto& stroke : strokes) {
        for (std::size_t i = 0; i + 1 < stroke.size(); ++i) {
          d = std::min(d, segment_distance(px, place(stroke[i]), place(stroke[i + 1])));
        }
      }
      const double intensity = std::exp(-d * d / (2.0 * w * w));
      const double levels = static_cast<double>(n_levels);
      const double k = std::min(levels - 1.0, std::floor(intensity * levels));
      out[r * kDigitSide + c] = k / levels;
    }
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor gather_rows(const Tensor& data, const std::vector<std::size_t>& idx, std::size_t begin,
                   std::size_t end) {
  const std::size_t d = data.extent(1);
  auto v = data.values();
  std::vector<double> out((end - begin) * d);
  for (std::size_t i = begin; i < end; ++i) {
    std::copy(v.begin() + idx[i] * d, v.begin() + (idx[i] + 1) * d, out.begin() + (i - begin) * d);
  }
  return Tensor({end - begin, d}, std::move(out));
}

bool all_finite(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    for (double v : t.values())
      if (!std::isfinite(v)) return false;
  return true;
}

// Restores the model's parameter handles when leaving scope.
class ParamBinding {
 public:
  explicit ParamBinding(std::vector<NamedTensor>& params) : params_(params) {
    for (auto& p : params_) originals_.push_back(*p.tensor);
  }
  ~ParamBinding() {
    for (std::size_t i = 0; i < params_.size(); ++i) *params_[i].tensor = originals_[i];
  }
  ParamBinding(const ParamBinding&) = delete;
  ParamBinding& operator=(const ParamBinding&) = delete;

 private:
  std::vector<NamedTensor>& params_;
  std::vector<Tensor> originals_;
};

}  // namespace

DatasetKind parse_dataset(const std::string& name) {
  if (name == "two_moons") return DatasetKind::two_moons;
  if (name == "checkerboard") return DatasetKind::checkerboard;
  if (name == "eight_gaussians") return DatasetKind::eight_gaussians;
  if (name == "tiny_digits") return DatasetKind::tiny_digits;
  throw ParameterError("unknown dataset '" + name + "'");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::checkerboard: return "checkerboard";
    case DatasetKind::eight_gaussians: return "eight_gaussians";
    case DatasetKind::tiny_digits: return "tiny_digits";
  }
  return "?";
}

Tensor generate_dataset(const ToyDataset& spec) {
  if (spec.n_samples == 0) throw ParameterError("dataset: n_samples must be positive");
  if (spec.kind == DatasetKind::tiny_digits && spec.n_levels < 2) {
    throw ParameterError("dataset: tiny_digits needs n_levels >= 2");
  }
  std::mt19937_64 rng(derive_seed(spec.seed, "dataset." + to_string(spec.kind)));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = spec.n_samples, d = spec.dim();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * d;
    switch (spec.kind) {
      case DatasetKind::two_moons: {
        // Upper arc centred at (0, 0), lower arc centred at (1, 0.5); shifted
        // so the pair is centred at the origin.
        const double t = std::numbers::pi * uni(rng);
        const bool upper = uni(rng) < 0.5;
        double x = upper ? std::cos(t) : 1.0 - std::cos(t);
        double y = upper ? std::sin(t) : 0.5 - std::sin(t);
        x += spec.noise * normal(rng) - 0.5;
        y += spec.noise * normal(rng) - 0.25;
        row[0] = x;
        row[1] = y;
        break;
      }
      case DatasetKind::checkerboard: {
        // Black cells: (column + row) even on the 4x4 unit grid over [-2, 2]^2.
        std::uniform_int_distribution<int> cell(0, 7);
        const int k = cell(rng);
        const int r = k / 2;
        const int c = 2 * (k % 2) + (r % 2);
        row[0] = -2.0 + c + uni(rng);
        row[1] = -2.0 + r + uni(rng);
        break;
      }
      case DatasetKind::eight_gaussians: {
        std::uniform_int_distribution<int> comp(0, 7);
        const double a = 2.0 * std::numbers::pi * comp(rng) / 8.0;
        row[0] = 2.0 * std::cos(a) + 0.15 * normal(rng);
        row[1] = 2.0 * std::sin(a) + 0.15 * normal(rng);
        break;
      }
      case DatasetKind::tiny_digits: render_digit(rng, spec.n_levels, row); break;
    }
  }
  return Tensor({n, d}, std::move(out));
}

Tensor dequantize(const Tensor& quantized, std::size_t n_levels, std::uint64_t seed) {
  if (n_levels == 0) throw ParameterError("dequantize: n_levels must be positive");
  std::mt19937_64 rng(derive_seed(seed, "dequantize"));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto v = quantized.to_vector();
  for (double& x : v) x += uni(rng) / static_cast<double>(n_levels);
  return Tensor(quantized.shape(), std::move(v));
}

// ---------------------------------------------------------------------------

void adam_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads,
               AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw DimensionError("adam: gradient count mismatch");
  if (!(cfg.lr > 0.0)) throw ParameterError("adam: learning rate must be positive");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    if (grads[i].shape() != p.shape()) {
      throw DimensionError("adam: gradient shape mismatch for " + params[i].name);
    }
    auto& m = state.m[params[i].name];
    auto& v = state.v[params[i].name];
    if (m.empty()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    auto g = grads[i].values();
    std::vector<double> w = p.to_vector();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    p = Tensor(p.shape(), std::move(w));
  }
}

double loss_and_gradients(FlowModel& model, const Tensor& batch, const LogDetOptions& opts,
                          std::vector<Tensor>* grads) {
  std::vector<NamedTensor> params, buffers;
  model.collect(params, buffers);
  ParamBinding binding(params);
  Tape tape;
  std::vector<Tensor> watched;
  watched.reserve(params.size());
  for (auto& p : params) {
    *p.tensor = tape.watch(*p.tensor);
    watched.push_back(*p.tensor);
  }
  Tensor loss = neg(mean(model.log_prob_tracked(batch, opts, tape)));
  if (grads) {
    Gradients g = backward(loss);
    grads->clear();
    for (const auto& w : watched) grads->push_back(g[w]);
  }
  return loss.item();
}

LogDetOptions default_training_estimator(std::size_t dim) {
  return dim <= kSmallDim ? LogDetOptions::exact() : LogDetOptions::training(0);
}

TrainResult train(FlowModel& model, const Tensor& train_data, const Tensor& eval_data,
                  const TrainConfig& cfg) {
  if (cfg.epochs == 0 || cfg.batch_size == 0 || cfg.eval_every == 0) {
    throw ParameterError("train: epochs, batch_size and eval_every must be positive");
  }
  if (!(cfg.adam.lr > 0.0)) throw ParameterError("train: learning rate must be positive");
  if (train_data.rank() != 2 || train_data.extent(1) != model.dim() || eval_data.rank() != 2 ||
      eval_data.extent(1) != model.dim()) {
    throw DimensionError("train: data width does not match the model");
  }
  const LogDetOptions eval_opts = cfg.eval_estimator.value_or(LogDetOptions::evaluation(model.dim()));
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!cfg.record_wallclock) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  TrainResult res;
  auto make_row = [&](std::size_t epoch, std::size_t step, double train_nll) {
    model.power_iterate(cfg.eval_power_iters);
    MetricsRow row;
    row.epoch = epoch;
    row.step = step;
    row.train_nll = train_nll;
    const auto lp = model.log_prob(eval_data, eval_opts);
    double s = 0.0;
    for (double v : lp) s += v;
    row.eval_nll = -s / static_cast<double>(lp.size());
    if (cfg.n_levels > 0) row.bpd = bits_per_dim(lp, model.dim(), cfg.n_levels);
    row.wallclock_s = elapsed();
    row.gammas = model.gammas();
    res.metrics.push_back(row);
    if (!cfg.metrics_path.empty()) write_metrics_csv(cfg.metrics_path, res.metrics);
  };

  make_row(0, 0, model.mean_nll(train_data, eval_opts));
  res.initial_eval_nll = res.metrics.back().eval_nll;

  std::vector<NamedTensor> params, buffers;
  model.collect(params, buffers);
  AdamState adam;
  const std::size_t n = train_data.extent(0);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::vector<Tensor> grads;

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !res.aborted; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      Tensor batch = gather_rows(train_data, order, begin, end);

      std::vector<Tensor> good_params, good_buffers;
      for (auto& p : params) good_params.push_back(*p.tensor);
      for (auto& b : buffers) good_buffers.push_back(*b.tensor);

      model.power_iterate(cfg.power_iters_per_step);
      LogDetOptions opts = cfg.estimator.value_or(default_training_estimator(model.dim()));
      opts.seed = derive_seed(cfg.seed, "logdet", step);
      double loss = 0.0;
      bool ok = true;
      try {
        loss = loss_and_gradients(model, batch, opts, &grads);
        ok = std::isfinite(loss) && all_finite(grads);
      } catch (const DomainError&) {
        ok = false;
      }
      if (!ok) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = good_params[i];
        for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].tensor = good_buffers[i];
        model.sync_buffers_from_tensors();
        res.aborted = true;
        res.message = "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                      std::to_string(step) + "; parameters restored to the previous step";
        break;
      }
      adam_step(params, grads, adam, cfg.adam);
      model.clamp_gammas();
      loss_sum += loss;
      ++loss_count;
      ++step;
    }
    if (res.aborted) break;
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      make_row(epoch, step, loss_sum / static_cast<double>(std::max<std::size_t>(1, loss_count)));
      loss_sum = 0.0;
      loss_count = 0;
    }
    if (cfg.on_epoch) cfg.on_epoch(epoch, model);
  }
  res.final_eval_nll = res.metrics.back().eval_nll;
  return res;
}

PairedResult paired_convergence_run(const ModelConfig& model_cfg, const Tensor& train_data,
                                    const Tensor& eval_data, const TrainConfig& cfg) {
  ModelConfig base = model_cfg, attn = model_cfg;
  base.attention = AttentionKind::none;
  attn.attention = AttentionKind::l2;
  TrainConfig tc = cfg;
  tc.metrics_path.clear();
  PairedResult out;
  FlowModel m0(base);
  out.baseline = train(m0, train_data, eval_data, tc);
  FlowModel m1(attn);
  out.attentive = train(m1, train_data, eval_data, tc);
  return out;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "epoch,step,train_nll,eval_nll,bpd,wallclock_s,gammas\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.step << ',' << fmt(r.train_nll) << ',' << fmt(r.eval_nll) << ','
        << (r.bpd ? fmt(*r.bpd) : "") << ',' << fmt(r.wallclock_s) << ',';
    for (std::size_t i = 0; i < r.gammas.size(); ++i) out << (i ? ";" : "") << fmt(r.gammas[i]);
    out << '\n';
  }
  return out.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << metrics_csv(rows);
}

}  // namespace acf

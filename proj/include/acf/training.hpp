#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acf/flow.hpp"

namespace acf {

enum class DatasetKind { two_moons, checkerboard, eight_gaussians, tiny_digits };

DatasetKind parse_dataset(const std::string& name);
std::string to_string(DatasetKind kind);

struct ToyDataset {
  DatasetKind kind = DatasetKind::two_moons;
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
  std::size_t n_levels = 16;  // tiny_digits only
  double noise = 0.05;        // two_moons only

  std::size_t dim() const { return kind == DatasetKind::tiny_digits ? 49 : 2; }
};

inline constexpr std::size_t kDigitSide = 7;

// tiny_digits values are quantized levels k / n_levels in [0, 1).
Tensor generate_dataset(const ToyDataset& spec);
// Adds U[0, 1/n_levels) noise: (k + u) / n_levels.
Tensor dequantize(const Tensor& quantized, std::size_t n_levels, std::uint64_t seed);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::size_t t = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One bias-corrected Adam update of every parameter in place.
void adam_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads,
               AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  AdamConfig adam;
  std::uint64_t seed = 0;
  // Default: exact Jacobian log-det up to kSmallDim, roulette above. The seed
  // is replaced per step.
  std::optional<LogDetOptions> estimator;
  std::optional<LogDetOptions> eval_estimator;  // default: LogDetOptions::evaluation
  std::size_t eval_every = 1;                            // epochs
  std::string metrics_path;                              // empty: no CSV
  std::size_t n_levels = 0;       // > 0: report bits/dim of eval data with this many levels
  bool record_wallclock = false;  // off keeps metrics byte-identical across runs
  int power_iters_per_step = 1;
  int eval_power_iters = 100;
  // Called after each epoch (after its metrics row, if any).
  std::function<void(std::size_t epoch, FlowModel&)> on_epoch;
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_nll = 0.0;
  double eval_nll = 0.0;
  std::optional<double> bpd;
  double wallclock_s = 0.0;
  std::vector<double> gammas;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  double initial_eval_nll = 0.0;
  double final_eval_nll = 0.0;
  bool aborted = false;  // non-finite loss; the model holds the last good parameters
  std::string message;
};

LogDetOptions default_training_estimator(std::size_t dim);

TrainResult train(FlowModel& model, const Tensor& train_data, const Tensor& eval_data,
                  const TrainConfig& cfg);

// Differentiable mean NLL of a batch at the model's current parameters, with
// the estimator seeded by `seed`; returns the loss and fills `grads` in the
// order of FlowModel::collect.
double loss_and_gradients(FlowModel& model, const Tensor& batch, const LogDetOptions& opts,
                          std::vector<Tensor>* grads);

struct PairedResult {
  TrainResult baseline;   // attention none
  TrainResult attentive;  // attention l2
};

PairedResult paired_convergence_run(const ModelConfig& model_cfg, const Tensor& train_data,
                                    const Tensor& eval_data, const TrainConfig& cfg);

std::string metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace acf

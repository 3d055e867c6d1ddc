// Command-line front end: training, evaluation, sampling and the analyses.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "acf/analysis.hpp"
#include "acf/random.hpp"
#include "acf/training.hpp"

using namespace acf;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string dashed(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return key;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t to_count(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long n = std::stoll(v, &pos);
    if (pos != v.size() || n <= 0) throw std::invalid_argument("");
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ParameterError(key + ": expected a positive integer, got '" + v + "'");
  }
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (const std::exception&) {
    throw ParameterError(key + ": expected a number, got '" + v + "'");
  }
}

// Training-side keys of the configuration document.
struct TrainSettings {
  std::optional<DatasetKind> dataset;
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t eval_every = 1;
  std::size_t n_train = 2560;
  std::size_t n_eval = 512;
  std::size_t n_levels = 16;
  std::string estimator = "auto";

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {"dataset",    "epochs",  "batch_size", "lr",
                                               "beta1",      "beta2",   "eps",        "eval_every",
                                               "n_train",    "n_eval",  "n_levels",   "estimator"};
    return k;
  }

  void set(const std::string& key, const std::string& v) {
    if (key == "dataset") dataset = parse_dataset(v);
    else if (key == "epochs") epochs = to_count(key, v);
    else if (key == "batch_size") batch_size = to_count(key, v);
    else if (key == "lr") lr = to_real(key, v);
    else if (key == "beta1") beta1 = to_real(key, v);
    else if (key == "beta2") beta2 = to_real(key, v);
    else if (key == "eps") eps = to_real(key, v);
    else if (key == "eval_every") eval_every = to_count(key, v);
    else if (key == "n_train") n_train = to_count(key, v);
    else if (key == "n_eval") n_eval = to_count(key, v);
    else if (key == "n_levels") n_levels = to_count(key, v);
    else if (key == "estimator") {
      if (v != "auto" && v != "exact" && v != "series" && v != "hutchinson" && v != "roulette") {
        throw ParameterError("estimator: expected auto|exact|series|hutchinson|roulette");
      }
      estimator = v;
    } else {
      throw ParameterError("unknown training key '" + key + "'");
    }
  }

  std::optional<LogDetOptions> estimator_options() const {
    if (estimator == "exact") return LogDetOptions::exact();
    if (estimator == "series") return LogDetOptions::series(20);
    if (estimator == "roulette") return LogDetOptions::training(0);
    if (estimator == "hutchinson") {
      LogDetOptions o;
      o.kind = LogDetKind::hutchinson;
      o.n_terms = 10;
      return o;
    }
    return std::nullopt;
  }

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.adam = {lr, beta1, beta2, eps};
    tc.seed = seed;
    tc.estimator = estimator_options();
    tc.eval_every = eval_every;
    if (dataset == DatasetKind::tiny_digits) tc.n_levels = n_levels;
    return tc;
  }
};

// Everything a subcommand may read from --config and the per-key flags.
struct Settings {
  std::string config_path;
  std::map<std::string, std::string> overrides;
  ModelConfig model;
  TrainSettings train;

  void register_keys(CLI::App* sub, bool model_keys, bool train_keys) {
    sub->add_option("--config", config_path, "key=value configuration document");
    if (model_keys) {
      for (const auto& k : ModelConfig::keys()) {
        if (k == "dim" || k == "seed") continue;  // taken from the dataset and --seed
        sub->add_option("--" + dashed(k), overrides[k], "model key " + k);
      }
    }
    if (train_keys) {
      for (const auto& k : TrainSettings::keys()) {
        if (k == "dataset") continue;
        sub->add_option("--" + dashed(k), overrides[k], "training key " + k);
      }
    }
  }

  void resolve() {
    auto apply = [this](const std::string& key, const std::string& value) {
      const auto& mk = ModelConfig::keys();
      if (std::find(mk.begin(), mk.end(), key) != mk.end()) model.set(key, value);
      else train.set(key, value);
    };
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw std::runtime_error("cannot read config '" + config_path + "'");
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
          throw ParameterError(config_path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      }
    }
    for (const auto& [k, v] : overrides) {
      if (!v.empty()) apply(k, v);
    }
  }
};

Tensor make_data(DatasetKind kind, std::size_t n, std::uint64_t seed, const std::string& purpose,
                 std::size_t n_levels) {
  ToyDataset spec{kind, n, derive_seed(seed, purpose)};
  spec.n_levels = n_levels;
  Tensor x = generate_dataset(spec);
  if (kind == DatasetKind::tiny_digits) {
    x = dequantize(x, n_levels, derive_seed(seed, purpose + ".dequantize"));
  }
  return x;
}

std::string points_csv(const Tensor& x) {
  std::ostringstream out;
  const std::size_t d = x.extent(1);
  for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << "x" << j;
  out << "\n";
  for (std::size_t i = 0; i < x.extent(0); ++i) {
    for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << fmt(x.at(i, j));
    out << "\n";
  }
  return out.str();
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_real(what, trim(item)));
  return out;
}

Tensor read_points_csv(const std::string& path, std::size_t d) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::string line;
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == 'x' || line[0] == '#') continue;
    auto row = parse_list(line, path);
    if (row.size() != d) {
      throw DimensionError(path + ": expected " + std::to_string(d) + " columns, got " +
                           std::to_string(row.size()));
    }
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  if (rows == 0) throw ParameterError(path + ": no points");
  return Tensor({rows, d}, std::move(values));
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

DatasetKind require_dataset(const Settings& s) {
  if (!s.train.dataset) throw UsageError("--dataset is required");
  return *s.train.dataset;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attentive contractive normalizing flows"};
  app.require_subcommand(1);

  Settings settings;
  std::string dataset_name, model_path, out_path, metrics_path, input_path, out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::size_t eval_n = 1024, sample_n = 1000, steps = 8, i1 = 0, i2 = 1, n_inputs = 256, pairs = 2000;
  std::string x1_text, x2_text, sigmas_text, variant = "l2";
  bool wallclock = false, overshoot = false, no_normalize = false;

  auto add_dataset = [&](CLI::App* sub) {
    sub->add_option("--dataset", dataset_name, "two_moons|checkerboard|eight_gaussians|tiny_digits");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_dataset(train_cmd);
  train_cmd->add_option("--seed", seed, "seed for data, initialization and training")->required();
  train_cmd->add_option("--out", out_path, "checkpoint path (default model.acf)");
  train_cmd->add_option("--metrics", metrics_path, "metrics CSV path");
  train_cmd->add_flag("--wallclock", wallclock, "record wall-clock seconds in the metrics");
  settings.register_keys(train_cmd, true, true);

  auto* eval_cmd = app.add_subcommand("eval", "mean NLL (and bits/dim) on generated data");
  add_dataset(eval_cmd);
  eval_cmd->add_option("--model", model_path)->required();
  eval_cmd->add_option("--seed", seed, "data seed")->required();
  eval_cmd->add_option("--n", eval_n, "number of points (default 1024)");
  settings.register_keys(eval_cmd, false, false);
  eval_cmd->add_option("--n-levels", settings.overrides["n_levels"]);

  auto* sample_cmd = app.add_subcommand("sample", "draw samples through the inverse map");
  sample_cmd->add_option("--model", model_path)->required();
  sample_cmd->add_option("--seed", seed)->required();
  sample_cmd->add_option("--n", sample_n, "number of samples (default 1000)");
  sample_cmd->add_option("--out", out_path, "CSV path (default stdout)");

  auto* invert_cmd = app.add_subcommand("invert", "map latent points back to data space");
  invert_cmd->add_option("--model", model_path)->required();
  invert_cmd->add_option("--input", input_path, "CSV of latent points")->required();
  invert_cmd->add_option("--out", out_path, "CSV path (default stdout)");

  auto* interp_cmd = app.add_subcommand("interpolate", "latent-space interpolation");
  interp_cmd->add_option("--model", model_path)->required();
  interp_cmd->add_option("--x1", x1_text, "comma-separated endpoint");
  interp_cmd->add_option("--x2", x2_text, "comma-separated endpoint");
  add_dataset(interp_cmd);
  interp_cmd->add_option("--seed", seed, "data seed when endpoints come from --dataset");
  interp_cmd->add_option("--i1", i1)->default_val(0);
  interp_cmd->add_option("--i2", i2)->default_val(1);
  interp_cmd->add_option("--steps", steps)->default_val(8);
  interp_cmd->add_flag("--include-overshoot", overshoot, "also emit i = N + 1");
  interp_cmd->add_option("--out", out_path, "CSV path (default stdout)");

  auto* perturb_cmd = app.add_subcommand("perturb", "Gaussian perturbation sweep");
  perturb_cmd->add_option("--model", model_path)->required();
  perturb_cmd->add_option("--seed", seed)->required();
  perturb_cmd->add_option("--variant", variant)->default_val("l2");
  add_dataset(perturb_cmd);
  perturb_cmd->add_option("--n-inputs", n_inputs)->default_val(256);
  perturb_cmd->add_option("--n-levels", settings.overrides["n_levels"]);
  perturb_cmd->add_option("--sigmas", sigmas_text, "comma-separated, ascending");
  perturb_cmd->add_option("--out", out_path, "CSV path (default stdout)");

  auto* certify_cmd = app.add_subcommand("certify", "contraction certificate per block");
  certify_cmd->add_option("--model", model_path)->required();
  certify_cmd->add_flag("--no-normalize", no_normalize, "audit raw weights");
  certify_cmd->add_option("--pairs", pairs)->default_val(2000);
  certify_cmd->add_option("--seed", seed, "audit sampling seed (default 0)");

  auto* paired_cmd = app.add_subcommand("paired-run", "train with and without attention");
  add_dataset(paired_cmd);
  paired_cmd->add_option("--seed", seed)->required();
  paired_cmd->add_option("--out-dir", out_dir)->default_val(".");
  settings.register_keys(paired_cmd, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    settings.resolve();
    if (!dataset_name.empty()) settings.train.set("dataset", dataset_name);

    if (*train_cmd || *paired_cmd) {
      const DatasetKind kind = require_dataset(settings);
      ModelConfig mc = settings.model;
      mc.dim = ToyDataset{kind}.dim();
      mc.seed = *seed;
      const auto& ts = settings.train;
      Tensor train_x = make_data(kind, ts.n_train, *seed, "train", ts.n_levels);
      Tensor eval_x = make_data(kind, ts.n_eval, *seed, "eval", ts.n_levels);
      TrainConfig tc = ts.train_config(*seed);
      tc.record_wallclock = wallclock;
      if (*train_cmd) {
        tc.metrics_path = metrics_path;
        FlowModel model(mc);
        auto res = train(model, train_x, eval_x, tc);
        save_checkpoint(model, out_path.empty() ? "model.acf" : out_path);
        std::cout << "initial_eval_nll " << fmt(res.initial_eval_nll) << "\n"
                  << "final_eval_nll " << fmt(res.final_eval_nll) << "\n";
        if (res.aborted) {
          std::cerr << "training aborted: " << res.message << "\n";
          return 1;
        }
        return 0;
      }
      auto res = paired_convergence_run(mc, train_x, eval_x, tc);
      std::filesystem::create_directories(out_dir);
      write_metrics_csv((std::filesystem::path(out_dir) / "baseline.csv").string(),
                        res.baseline.metrics);
      write_metrics_csv((std::filesystem::path(out_dir) / "attentive.csv").string(),
                        res.attentive.metrics);
      std::cout << "baseline_final_eval_nll " << fmt(res.baseline.final_eval_nll) << "\n"
                << "attentive_final_eval_nll " << fmt(res.attentive.final_eval_nll) << "\n";
      return res.baseline.aborted || res.attentive.aborted ? 1 : 0;
    }

    FlowModel model = load_checkpoint(model_path);

    if (*eval_cmd) {
      const DatasetKind kind = require_dataset(settings);
      if (ToyDataset{kind}.dim() != model.dim()) {
        throw DimensionError("dataset " + to_string(kind) + " does not match the model dimension");
      }
      Tensor x = make_data(kind, eval_n, *seed, "eval", settings.train.n_levels);
      const auto lp = model.log_prob(x, LogDetOptions::evaluation(model.dim()));
      double s = 0.0;
      for (double v : lp) s += v;
      std::cout << "nll " << fmt(-s / static_cast<double>(lp.size())) << "\n";
      if (kind == DatasetKind::tiny_digits) {
        std::cout << "bpd " << fmt(bits_per_dim(lp, model.dim(), settings.train.n_levels)) << "\n";
      }
      return 0;
    }
    if (*sample_cmd) {
      emit(out_path, points_csv(model.sample(sample_n, *seed)));
      return 0;
    }
    if (*invert_cmd) {
      emit(out_path, points_csv(model.inverse(read_points_csv(input_path, model.dim()))));
      return 0;
    }
    if (*interp_cmd) {
      Tensor a, b;
      if (!x1_text.empty() || !x2_text.empty()) {
        a = Tensor({model.dim()}, parse_list(x1_text, "--x1"));
        b = Tensor({model.dim()}, parse_list(x2_text, "--x2"));
      } else {
        const DatasetKind kind = require_dataset(settings);
        if (!seed) throw UsageError("--seed is required when endpoints come from --dataset");
        Tensor data = make_data(kind, std::max(i1, i2) + 1, *seed, "eval", settings.train.n_levels);
        if (data.extent(1) != model.dim()) throw DimensionError("dataset does not match the model");
        a = slice_last(reshape(data, {data.numel()}), i1 * model.dim(), model.dim());
        b = slice_last(reshape(data, {data.numel()}), i2 * model.dim(), model.dim());
      }
      InterpolationSpec spec;
      spec.n_steps = steps;
      spec.include_overshoot = overshoot;
      emit(out_path, points_csv(interpolate(model, a, b, spec).points));
      return 0;
    }
    if (*perturb_cmd) {
      PerturbationSweep sweep;
      sweep.seed = *seed;
      sweep.n_inputs = n_inputs;
      sweep.variant = parse_sweep_variant(variant);
      if (!sigmas_text.empty()) sweep.sigmas = parse_list(sigmas_text, "--sigmas");
      DatasetKind kind = DatasetKind::tiny_digits;
      if (settings.train.dataset) kind = *settings.train.dataset;
      else if (model.dim() != 49) throw UsageError("--dataset is required for 2-D models");
      if (ToyDataset{kind}.dim() != model.dim()) {
        throw DimensionError("dataset " + to_string(kind) + " does not match the model dimension");
      }
      const std::size_t levels = kind == DatasetKind::tiny_digits ? settings.train.n_levels : 0;
      Tensor x = make_data(kind, n_inputs, *seed, "heldout", settings.train.n_levels);
      emit(out_path, sweep_csv(perturbation_sweep(model, x, sweep, levels)));
      return 0;
    }
    if (*certify_cmd) {
      CertifyOptions opts;
      opts.pairs = pairs;
      opts.seed = seed.value_or(0);
      opts.normalize = !no_normalize;
      auto rep = certify(model, opts);
      std::cout << certification_text(rep);
      return rep.pass ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

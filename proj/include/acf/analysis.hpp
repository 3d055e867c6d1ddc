#pragma once

// Post-training analyses: latent interpolation, Gaussian-perturbation sweeps
// and contraction certificates.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "acf/flow.hpp"

namespace acf {

struct InterpolationSpec {
  std::size_t n_steps = 8;         // N: points i/N for i = 0..N
  bool include_overshoot = false;  // also emit i = N + 1 (one step past z2)
  double tol = 1e-8;
  std::size_t max_iter = 200;
};

struct Interpolation {
  Tensor latents;  // [(N+1 or N+2) x d], z1 + (i/N)(z2 - z1)
  Tensor points;   // decoded latents
};

// x1, x2: [d] or [1 x d]. The model must be certified.
Interpolation interpolate(const FlowModel& model, const Tensor& x1, const Tensor& x2,
                          const InterpolationSpec& spec = {});

enum class SweepVariant { l2, dot };

SweepVariant parse_sweep_variant(const std::string& name);
std::string to_string(SweepVariant v);

const std::vector<double>& default_sigmas();

struct PerturbationSweep {
  std::vector<double> sigmas = default_sigmas();
  std::size_t n_inputs = 256;
  std::uint64_t seed = 0;
  SweepVariant variant = SweepVariant::l2;
};

struct SweepRow {
  double sigma = 0.0;
  double mean = 0.0;  // bits/dim when n_levels > 0, NLL in nats otherwise
  double std = 0.0;   // across inputs
};

struct SweepResult {
  bool bits_per_dim = false;
  double clean = 0.0;  // same statistic on the unperturbed inputs
  std::vector<SweepRow> rows;
  bool monotone() const;
};

// Adds sigma * eps to the first n_inputs rows of `inputs`, with one noise draw
// eps per input shared by every sigma and its antithetic twin -eps averaged in.
SweepResult perturbation_sweep(const FlowModel& model, const Tensor& inputs,
                               const PerturbationSweep& sweep, std::size_t n_levels,
                               const std::optional<LogDetOptions>& opts = std::nullopt);

std::string sweep_csv(const SweepResult& result);

struct CertifyOptions {
  std::size_t pairs = 2000;
  std::size_t roundtrip_inputs = 100;
  std::uint64_t seed = 0;
  bool normalize = true;  // false: audit the raw weights
  int power_iters = 100;
  double slack = 1e-6;
  double roundtrip_tol = 1e-6;
};

struct BlockCertificate {
  std::size_t index = 0;
  std::vector<double> spectral_norms;     // full-strength sigma of each linear layer
  std::vector<double> attention_bounds;   // unscaled L2-attention Lipschitz bound per stage
  std::vector<double> gammas;
  double budget = 0.0;                    // certified cap
  double composed = 0.0;                  // composition of the measured stage norms
  double empirical = 0.0;                 // sampled-pair Lipschitz estimate of g
  double roundtrip_error = 0.0;           // max |x - f^-1(f(x))|
  bool pass = false;
  std::string reason;
};

struct CertificationReport {
  std::vector<BlockCertificate> blocks;
  bool pass = false;
  std::string failure;  // names the first failing block
};

CertificationReport certify(const FlowModel& model, const CertifyOptions& opts = {});

std::string certification_text(const CertificationReport& report);

}  // namespace acf

#pragma once

// A stack of contractive blocks mapping data to a standard-normal latent.
//
// Direction: log_prob pushes data through block_forward (data -> latent) and
// adds each block's log-determinant; sampling runs the fixed-point inverses in
// reverse order.

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "acf/block.hpp"

namespace acf {

struct ModelConfig {
  std::size_t dim = 2;
  std::size_t blocks = 4;
  std::size_t hidden_width = 64;
  std::size_t hidden_layers = 2;
  ActivationKind activation = ActivationKind::lipswish;
  AttentionKind attention = AttentionKind::none;
  double lip_budget = 0.9;  // per spectral linear layer
  double gamma_max = 0.2;
  std::size_t attn_channels = 8;
  std::size_t d_proj_ratio = 8;
  BlockKind block_kind = BlockKind::residual;
  std::size_t dense_stages = 3;
  std::size_t dense_growth = 32;
  std::uint64_t seed = 0;

  BlockConfig block_config() const;
  // Sets one key from its text form; unknown keys and bad values throw ParameterError.
  void set(const std::string& key, const std::string& value);
  // "key=value" lines; '#' starts a comment.
  static ModelConfig parse(const std::string& text);
  std::string to_text() const;
  static const std::vector<std::string>& keys();
};

struct LogDetOptions {
  LogDetKind kind = LogDetKind::series;
  std::size_t n_terms = 20;
  std::size_t n_samples = 1;
  double p_geom = 0.5;
  std::uint64_t seed = 0;
  ProbeKind probe = ProbeKind::gaussian;

  // Series(20) on small dimensions, one-probe Hutchinson(10) otherwise.
  static LogDetOptions evaluation(std::size_t dim);
  static LogDetOptions exact() { return {LogDetKind::exact}; }
  static LogDetOptions series(std::size_t n) { return {LogDetKind::series, n}; }
  static LogDetOptions training(std::uint64_t seed) {
    LogDetOptions o;
    o.kind = LogDetKind::roulette;
    o.seed = seed;
    return o;
  }
};

inline constexpr std::size_t kSmallDim = 10;

struct FlowPass {
  Tensor z;
  std::vector<double> logdet;  // per row, summed over the blocks of the pass
};

class FlowModel {
 public:
  FlowModel() = default;
  explicit FlowModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t dim() const { return config_.dim; }
  std::size_t size() const { return blocks_.size(); }
  std::vector<ContractiveBlock>& blocks() { return blocks_; }
  const std::vector<ContractiveBlock>& blocks() const { return blocks_; }

  Tensor forward(const Tensor& x) const;  // data -> latent
  Tensor inverse(const Tensor& z, double tol = 1e-8, std::size_t max_iter = 200) const;

  // Applies blocks [first, last) to x, adding each block's log-det to `initial`
  // (zeros when empty). Evaluation only: nothing is recorded on a tape.
  FlowPass pass(const Tensor& x, const LogDetOptions& opts, std::size_t first = 0,
                std::size_t last = std::numeric_limits<std::size_t>::max(),
                std::vector<double> initial = {}) const;

  std::vector<double> log_prob(const Tensor& x, const LogDetOptions& opts) const;
  double mean_nll(const Tensor& x, const LogDetOptions& opts) const;

  // Differentiable per-row log-probability for training. The log-det of each
  // block is a probe estimate (roulette, hutchinson, or series with basis
  // probes; probes and truncation fixed by opts.seed) or, for exact, the
  // log-determinant of the dense Jacobian. x must be untracked.
  Tensor log_prob_tracked(const Tensor& x, const LogDetOptions& opts, Tape& tape) const;

  Tensor sample(std::size_t n, std::uint64_t seed) const;

  void power_iterate(int iters);
  void clamp_gammas();
  std::vector<double> gammas() const;
  bool certified() const;
  void collect(std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers);
  void sync_buffers_from_tensors();

 private:
  ModelConfig config_;
  std::vector<ContractiveBlock> blocks_;
};

// Per-row log N(z; 0, I).
std::vector<double> standard_normal_log_prob(const Tensor& z);
Tensor standard_normal_log_prob_tracked(const Tensor& z);

// (-log p / ln 2 + D log2(n_levels)) / D averaged over rows.
double bits_per_dim(const std::vector<double>& log_probs, std::size_t dim, std::size_t n_levels);
double bits_per_dim(const FlowModel& model, const Tensor& x, std::size_t n_levels,
                    const LogDetOptions& opts);

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset(offset) {}
  std::uint64_t offset;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(FlowModel& model);
FlowModel deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(FlowModel& model, const std::string& path);
FlowModel load_checkpoint(const std::string& path);

}  // namespace acf

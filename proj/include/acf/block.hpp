#pragma once

// One invertible residual step f(z) = z + g(z) with a contractive g.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "acf/attention.hpp"
#include "acf/lipschitz.hpp"
#include "acf/tensor.hpp"

namespace acf {

enum class BlockKind { residual, denseblock };
enum class AttentionKind { none, l2, dot };

BlockKind parse_block_kind(const std::string& name);
AttentionKind parse_attention(const std::string& name);
std::string to_string(BlockKind kind);
std::string to_string(AttentionKind kind);

struct BlockConfig {
  std::size_t dim = 2;
  std::size_t hidden_width = 64;
  std::size_t hidden_layers = 2;
  ActivationKind activation = ActivationKind::lipswish;
  AttentionKind attention = AttentionKind::none;
  double lip_coeff = 0.9;  // operator-norm cap of every spectral linear layer
  double gamma_max = 0.2;  // |gamma| cap of L2 attention stages
  std::size_t attn_channels = 8;
  std::size_t d_proj_ratio = 8;
  BlockKind kind = BlockKind::residual;
  std::size_t dense_stages = 3;
  std::size_t dense_growth = 32;
};

// Reshapes [B x W] into [B x W/C x C] around the attention map.
struct L2AttentionStage {
  L2AttentionParams params;
  double gamma_max = 0.2;
};

struct DotAttentionStage {
  DotAttentionParams params;
};

// x -> concat(x, branch(x)) / sqrt(1 + b^2) where branch = act(linear(x)),
// optionally followed by attention, and b bounds the branch's Lipschitz constant.
struct DenseStage {
  SpectralLinear linear;
  Activation activation;
  std::optional<L2AttentionStage> l2;
  std::optional<DotAttentionStage> dot;

  double branch_budget() const;
  double normalizer() const;
};

using Stage = std::variant<SpectralLinear, Activation, L2AttentionStage, DotAttentionStage,
                           DenseStage>;

class InvariantViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(const std::string& what, double residual, std::size_t iterations)
      : std::runtime_error(what), residual(residual), iterations(iterations) {}
  double residual;
  std::size_t iterations;
};

class ContractiveBlock {
 public:
  ContractiveBlock() = default;
  ContractiveBlock(const BlockConfig& config, std::uint64_t seed);
  // Builds g from explicit stages; the last stage must produce `dim` outputs.
  ContractiveBlock(std::size_t dim, std::vector<Stage> stages);

  // z [B x d] or [d] -> g(z) of the same shape.
  Tensor g(const Tensor& z) const;
  std::size_t dim() const { return dim_; }

  // Certified Lipschitz constant of g from the per-stage caps (infinite when a
  // dot-product attention stage is present).
  double lip_budget() const;
  bool certified() const { return lip_budget() < 1.0; }
  // Composition of measured stage norms (full-strength sigma, live gamma).
  double composed_norm_bound() const;

  void power_iterate(int iters);
  void set_normalization(bool enabled);
  void clamp_gammas();
  std::vector<double> gammas() const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& params,
               std::vector<NamedTensor>& buffers);
  void sync_buffers_from_tensors();

  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  std::size_t dim_ = 0;
  std::vector<Stage> stages_;
};

Tensor block_forward(const ContractiveBlock& block, const Tensor& z);

struct InverseResult {
  Tensor z;
  std::size_t iterations = 0;           // evaluations of g
  std::vector<double> residual_inf;     // max over rows of ||z_k + g(z_k) - z'||_inf
  std::vector<std::vector<double>> residual_l2;  // per iteration, per row
};

// Banach fixed-point iteration z_{k+1} = z' - g(z_k) from z_0 = z'.
InverseResult block_inverse(const ContractiveBlock& block, const Tensor& z_prime,
                            double tol = 1e-8, std::size_t max_iter = 200);

enum class LogDetKind { exact, series, hutchinson, roulette };
enum class ProbeKind { gaussian, rademacher };

std::string to_string(LogDetKind kind);

struct LogDetEstimate {
  double value = 0.0;  // nats
  LogDetKind kind = LogDetKind::exact;
  std::size_t n_terms = 0;
  std::size_t n_samples = 0;
  double std_error = 0.0;
};

// Single point z ([d] or [1 x d]).
LogDetEstimate logdet_exact(const ContractiveBlock& block, const Tensor& z);
LogDetEstimate logdet_series(const ContractiveBlock& block, const Tensor& z,
                             std::size_t n_terms);
LogDetEstimate logdet_hutchinson(const ContractiveBlock& block, const Tensor& z,
                                 std::size_t n_terms, std::size_t n_samples,
                                 std::uint64_t seed, ProbeKind probe = ProbeKind::gaussian);
LogDetEstimate logdet_roulette(const ContractiveBlock& block, const Tensor& z, double p_geom,
                               std::size_t n_samples, std::uint64_t seed);

inline constexpr std::size_t kMaxDenseDim = 64;

// Batched helpers over rows of z [B x d].
Tensor jacobian_g(const ContractiveBlock& block, const Tensor& z);  // [B x d x d]
std::vector<double> logdet_exact_rows(const ContractiveBlock& block, const Tensor& z);
std::vector<double> logdet_series_rows(const ContractiveBlock& block, const Tensor& z,
                                       std::size_t n_terms);

// sum_k coef[k][b] * w_k^T v_b with w_k^T = v^T J_g^k, evaluated by repeated
// vector-Jacobian products through the recorded g_out = g(z_in).
// Tracked (differentiable) when create_graph is set.
Tensor probe_power_series(const Tensor& g_out, const Tensor& z_in, const Tensor& probes,
                          const std::vector<std::vector<double>>& coef, bool create_graph);

// Dense log det and power-series helpers for a d x d row-major matrix.
double log_det_lu(std::vector<double> a, std::size_t d, int* sign = nullptr);

}  // namespace acf

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "acf/tensor.hpp"

namespace acf {

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Named handle to a model tensor, used for binding to a tape, optimizer
// updates and checkpoints.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

// Power-iteration vectors for the leading singular pair of an (out x in) matrix.
struct PowerIterationState {
  std::vector<double> u;  // out
  std::vector<double> v;  // in

  static PowerIterationState random(std::size_t out, std::size_t in, std::uint64_t seed);
};

// Runs `iters` power iterations on `weight` (rank 2) and returns u^T W v.
// A zero matrix returns 0 and leaves the state untouched.
double spectral_norm(const Tensor& weight, PowerIterationState& state, int iters);

// u^T W v with the state held fixed; differentiable in W.
Tensor rayleigh_sigma(const Tensor& weight, const PowerIterationState& state);

// coeff / max(sigma, coeff): the factor that caps the operator norm at coeff.
Tensor spectral_scale(const Tensor& weight, const PowerIterationState& state, double coeff);

class SpectralLinear {
 public:
  SpectralLinear() = default;
  SpectralLinear(std::size_t in, std::size_t out, double coeff, std::uint64_t seed,
                 bool with_bias = true);

  // x [..., in] -> [..., out]; uses the stored power-iteration state.
  Tensor forward(const Tensor& x) const;
  // Updates u/v with `iters` iterations; returns the new estimate.
  double power_iterate(int iters);
  double sigma() const;
  // min(sigma, coeff) when normalizing, sigma otherwise.
  double effective_norm() const;
  Tensor effective_weight() const;

  std::size_t in_features() const { return weight.extent(1); }
  std::size_t out_features() const { return weight.extent(0); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params,
               std::vector<NamedTensor>& buffers);
  void sync_buffers_from_tensors();

  Tensor weight;  // [out x in]
  Tensor bias;    // [out], undefined when the layer has no bias
  double coeff = 0.9;
  bool normalize = true;
  PowerIterationState state;

 private:
  Tensor u_buffer_;
  Tensor v_buffer_;
  void refresh_buffers();
};

enum class ActivationKind { relu, elu, lipswish, clipswish };

ActivationKind parse_activation(const std::string& name);
std::string to_string(ActivationKind kind);

// LipSwish(x) = x * sigmoid(beta * x) / 1.1
// CLipSwish(x) = concat(LipSwish(x), LipSwish(-x)) / clipswish_lipschitz()
// beta must hold one positive value; it is ignored by relu/elu.
Tensor apply_activation(ActivationKind kind, const Tensor& beta, const Tensor& x);

// Largest gradient norm of x -> (LipSwish(x), LipSwish(-x)), measured on a dense
// grid once. Independent of beta because both components depend on beta * x only.
double clipswish_lipschitz();

class Activation {
 public:
  Activation() = default;
  explicit Activation(ActivationKind kind, double beta = 1.0);

  Tensor forward(const Tensor& x) const;
  double beta() const;
  std::size_t output_width(std::size_t in) const {
    return kind == ActivationKind::clipswish ? 2 * in : in;
  }
  bool learnable() const {
    return kind == ActivationKind::lipswish || kind == ActivationKind::clipswish;
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& params);

  ActivationKind kind = ActivationKind::lipswish;
  Tensor beta_raw;  // beta = softplus(beta_raw)
};

}  // namespace acf

#pragma once

// Single-head self-attention over N positions with C channels.
//
// Inputs are [N x C] or batched [B x N x C]; every batch element attends only
// over its own positions.

#include <cstdint>
#include <string>
#include <vector>

#include "acf/lipschitz.hpp"
#include "acf/tensor.hpp"

namespace acf {

// L2 self-attention with tied query/key weight and the merged output matrix.
//
// The query weight is spectral-normalized to operator norm <= 1: the closed-form
// bound below is linear in ||W_Q||_2 while F is quadratic in W_Q, so the bound
// only holds on that ball.
struct L2AttentionParams {
  L2AttentionParams() = default;
  L2AttentionParams(std::size_t channels, std::size_t proj, std::uint64_t seed);

  std::size_t channels() const { return query_weight.extent(0); }
  std::size_t proj() const { return query_weight.extent(1); }

  // W_Q / max(sigma_Q, 1)
  Tensor effective_query() const;
  void power_iterate(int iters);
  void collect(const std::string& prefix, std::vector<NamedTensor>& params,
               std::vector<NamedTensor>& buffers);
  void sync_buffers_from_tensors();

  Tensor query_weight;  // [C x proj], serves as query and key
  Tensor out_weight;    // [C x C], replaces W^V W^O
  Tensor gamma;         // {1}, starts at 0
  PowerIterationState query_state;
  PowerIterationState out_state;

 private:
  Tensor buffers_[4];
  void refresh_buffers();
};

// Standard dot-product attention. Carries no Lipschitz certificate.
struct DotAttentionParams {
  DotAttentionParams() = default;
  DotAttentionParams(std::size_t channels, std::size_t proj, std::uint64_t seed);

  void collect(const std::string& prefix, std::vector<NamedTensor>& params);

  Tensor query_weight;  // [C x proj]
  Tensor key_weight;    // [C x proj]
  Tensor value_weight;  // [C x C]
  Tensor gamma;         // {1}
};

// -||x_i W_Q - x_j W_Q||^2 / sqrt(C), via the row-norm expansion.
Tensor l2_logits(const Tensor& x, const L2AttentionParams& params);

// softmax(l2_logits) X A W_L with A = W_Q W_Q^T / sqrt(C).
Tensor l2_attention_forward(const Tensor& x, const L2AttentionParams& params);

// Principal branch of the Lambert W function on y >= 0.
double lambert_w0(double y);

// sqrt(N/C) (4 W0((N-1)/e) + 1) ||W_Q||_2 ||W_L||_2 using the stored
// power-iteration state; differentiable in the weights.
Tensor lipschitz_bound_tensor(const L2AttentionParams& params, std::size_t positions);
double lipschitz_bound(const L2AttentionParams& params, std::size_t positions);

// gamma * F / bound + X. Exactly X when gamma is an untracked zero.
Tensor attention_block(const Tensor& x, const L2AttentionParams& params);

// gamma * softmax(X W_Q (X W_K)^T / sqrt(proj)) X W_V + X
Tensor dot_attention_block(const Tensor& x, const DotAttentionParams& params);

}  // namespace acf

#pragma once

// Dense row-major tensors (rank <= 3) with a reverse-mode differentiation tape.
//
// Tensors are immutable values. A tensor created from tracked operands while
// gradient recording is enabled is appended to the operands' tape; backward
// closures are themselves written in terms of tensor ops, so a vector-Jacobian
// product computed with `create_graph = true` is again differentiable. That is
// what lets a training loss contain log-determinant estimates built from vjps.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace acf {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);

namespace detail {
struct TapeState;
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  std::size_t extent(std::size_t axis) const;
  std::size_t last() const { return shape_.back(); }

  std::span<const double> values() const;
  std::vector<double> to_vector() const { return {values().begin(), values().end()}; }
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool tracked() const { return static_cast<bool>(tape_); }
  std::optional<std::size_t> tape_node() const;
  Tensor detach() const;

 private:
  friend struct detail::TapeState;
  friend class Tape;
  friend struct TensorAccess;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::shared_ptr<detail::TapeState> tape_;
  std::size_t node_ = 0;
};

// Owns the ordered node records of one evaluation. Copies share the same tape.
class Tape {
 public:
  Tape();
  // Registers `value` as a leaf; the returned tensor shares its data.
  Tensor watch(const Tensor& value);
  std::size_t size() const;

 private:
  std::shared_ptr<detail::TapeState> state_;
};

// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

class Gradients {
 public:
  // Gradient for a watched leaf; zeros when the output does not depend on it.
  Tensor operator[](const Tensor& leaf) const;
  std::size_t size() const { return by_node_.size(); }

 private:
  friend Gradients backward(const Tensor& output);
  std::unordered_map<std::size_t, Tensor> by_node_;
};

// Gradient of a scalar output with respect to every leaf on its tape.
Gradients backward(const Tensor& output);

// seed^T d(output)/d(input) for each input. Inputs that do not influence the
// output receive zeros. With create_graph the results are tracked.
std::vector<Tensor> gradients(const Tensor& output, std::span<const Tensor> inputs,
                              const Tensor& seed, bool create_graph = false);

// v^T J where J = d(output)/d(input) at the recorded point.
Tensor vjp(const Tensor& v, const Tensor& output, const Tensor& input, bool create_graph = false);

// Elementwise and shape ops. Binary elementwise ops require equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
// a * s where s holds a single value (possibly tracked).
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor elu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

Tensor sum(const Tensor& a);  // -> {1}
Tensor mean(const Tensor& a);
Tensor sum_last(const Tensor& a);  // drops the last axis ({1} for rank 1)
Tensor bcast_last(const Tensor& a, const Shape& target);
Tensor sum_leading(const Tensor& a);  // [..., n] -> [n]
Tensor bcast_leading(const Tensor& v, const Shape& target);
Tensor expand(const Tensor& s, const Shape& target);
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor bmm(const Tensor& a, const Tensor& b);        // [B,m,k] x [B,k,n]
Tensor transpose(const Tensor& a);                   // swaps the last two axes
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor slice_last(const Tensor& a, std::size_t offset, std::size_t length);
Tensor pad_last(const Tensor& a, std::size_t offset, std::size_t total);

// Softmax over the last axis with row-max stabilization.
Tensor softmax_rows(const Tensor& logits);
// Squared Euclidean norm of each row (reduces the last axis).
Tensor row_sq_l2(const Tensor& a);
// out[..., i, j] = s[..., i] + s[..., j]
Tensor pairwise_sum(const Tensor& s);

// Batched [B,d,d] matrix inverse (partial pivoting); singular input -> DomainError.
Tensor inverse(const Tensor& a);
// log|det A| of each matrix of a [B,d,d] batch -> [B]; singular -> DomainError.
Tensor logabsdet(const Tensor& a);

}  // namespace acf

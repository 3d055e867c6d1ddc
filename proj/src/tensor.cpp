#include "acf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>
#include <utility>

namespace acf {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(shape));
  }
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_defined(const Tensor& a, const char* op) {
  if (!a.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

Shape drop_last(const Shape& s) {
  if (s.size() == 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape internals

using BackwardFn = std::function<std::vector<Tensor>(
    const std::vector<Tensor>& inputs, const Tensor& output, const Tensor& grad,
    const std::vector<bool>& needs)>;

struct TensorAccess {
  static Tensor make(Shape shape, std::shared_ptr<const std::vector<double>> data,
                     std::shared_ptr<detail::TapeState> tape, std::size_t node) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    t.tape_ = std::move(tape);
    t.node_ = node;
    return t;
  }
  static const std::shared_ptr<detail::TapeState>& tape(const Tensor& t) { return t.tape_; }
  static std::size_t node(const Tensor& t) { return t.node_; }
  static const std::shared_ptr<const std::vector<double>>& data(const Tensor& t) {
    return t.data_;
  }
};

namespace detail {

struct Operand {
  std::optional<std::size_t> node;
  Shape shape;
  std::shared_ptr<const std::vector<double>> data;
};

struct Node {
  std::vector<Operand> inputs;
  Shape shape;
  std::shared_ptr<const std::vector<double>> value;
  BackwardFn backward;  // empty for leaves
};

struct TapeState {
  std::deque<Node> nodes;
};

}  // namespace detail

namespace {

Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto data = std::make_shared<const std::vector<double>>(std::move(values));
  std::shared_ptr<detail::TapeState> tape;
  if (g_grad_enabled) {
    for (const Tensor* in : inputs) {
      const auto& t = TensorAccess::tape(*in);
      if (!t) continue;
      if (tape && tape != t) throw ContractError("operands recorded on different tapes");
      tape = t;
    }
  }
  if (!tape) return TensorAccess::make(std::move(shape), std::move(data), nullptr, 0);

  detail::Node node;
  node.shape = shape;
  node.value = data;
  node.backward = std::move(fn);
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    detail::Operand op;
    if (in->tracked()) op.node = TensorAccess::node(*in);
    op.shape = in->shape();
    op.data = TensorAccess::data(*in);
    node.inputs.push_back(std::move(op));
  }
  tape->nodes.push_back(std::move(node));
  const std::size_t id = tape->nodes.size() - 1;
  return TensorAccess::make(std::move(shape), std::move(data), std::move(tape), id);
}

Tensor handle(const std::shared_ptr<detail::TapeState>& tape, std::size_t id) {
  const detail::Node& n = tape->nodes[id];
  return TensorAccess::make(n.shape, n.value, tape, id);
}

Tensor operand_handle(const std::shared_ptr<detail::TapeState>& tape, const detail::Operand& op) {
  if (op.node) return TensorAccess::make(op.shape, op.data, tape, *op.node);
  return TensorAccess::make(op.shape, op.data, nullptr, 0);
}

struct BackwardRun {
  std::vector<Tensor> grads;
  std::vector<char> reach;
};

// Reverse sweep from `out_id`. Only nodes that depend on a target (or on any
// leaf when `targets` is empty) and feed the output are visited.
BackwardRun run_backward(const std::shared_ptr<detail::TapeState>& tape, std::size_t out_id,
                         const Tensor& seed, const std::vector<std::size_t>& targets,
                         bool create_graph) {
  std::size_t lo = 0;
  std::vector<char> is_target(out_id + 1, 0);
  if (!targets.empty()) {
    lo = *std::min_element(targets.begin(), targets.end());
    for (std::size_t t : targets) {
      if (t <= out_id) is_target[t] = 1;
    }
  }
  BackwardRun run;
  run.reach.assign(out_id + 1, 0);
  for (std::size_t i = lo; i <= out_id; ++i) {
    const detail::Node& n = tape->nodes[i];
    bool r = targets.empty() ? !n.backward : is_target[i] != 0;
    if (!r) {
      for (const auto& op : n.inputs) {
        if (op.node && *op.node >= lo && run.reach[*op.node]) {
          r = true;
          break;
        }
      }
    }
    run.reach[i] = r ? 1 : 0;
  }
  run.grads.assign(out_id + 1, Tensor{});
  if (!run.reach[out_id]) return run;

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();
  run.grads[out_id] = create_graph ? seed : seed.detach();

  for (std::size_t i = out_id + 1; i-- > lo;) {
    if (!run.reach[i] || !run.grads[i].defined()) continue;
    const detail::Node& n = tape->nodes[i];
    if (!n.backward) continue;
    std::vector<bool> needs(n.inputs.size(), false);
    bool any = false;
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      const auto& op = n.inputs[j];
      needs[j] = op.node && *op.node >= lo && run.reach[*op.node];
      any = any || needs[j];
    }
    if (!any) continue;
    std::vector<Tensor> ins;
    ins.reserve(n.inputs.size());
    for (const auto& op : n.inputs) ins.push_back(operand_handle(tape, op));
    const Tensor out = handle(tape, i);
    const Tensor g = run.grads[i];
    const BackwardFn fn = n.backward;  // the deque may grow while fn runs
    std::vector<Tensor> in_grads = fn(ins, out, g, needs);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      if (!needs[j] || !in_grads[j].defined()) continue;
      const std::size_t id = *n.inputs[j].node;
      Tensor gj = in_grads[j];
      if (gj.shape() != n.inputs[j].shape) gj = reshape(gj, n.inputs[j].shape);
      run.grads[id] = run.grads[id].defined() ? add(run.grads[id], gj) : gj;
    }
    if (!create_graph) run.grads[i] = Tensor{};
  }
  return run;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (product(shape) != values.size()) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  shape_ = std::move(shape);
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  if (m == 0) throw DimensionError("matrix: no rows");
  const std::size_t n = rows.begin()->size();
  std::vector<double> v;
  v.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("matrix: ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(v));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("extent: axis out of range");
  return shape_[axis];
}

std::span<const double> Tensor::values() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::size_t i) const { return (*data_)[i]; }

double Tensor::at(std::size_t i, std::size_t j) const { return (*data_)[i * shape_[1] + j]; }

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return (*data_)[(i * shape_[1] + j) * shape_[2] + k];
}

std::optional<std::size_t> Tensor::tape_node() const {
  if (!tape_) return std::nullopt;
  return node_;
}

Tensor Tensor::detach() const { return TensorAccess::make(shape_, data_, nullptr, 0); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) {}

Tensor Tape::watch(const Tensor& value) {
  require_defined(value, "watch");
  detail::Node node;
  node.shape = value.shape();
  node.value = TensorAccess::data(value);
  state_->nodes.push_back(std::move(node));
  return TensorAccess::make(value.shape(), TensorAccess::data(value), state_,
                            state_->nodes.size() - 1);
}

std::size_t Tape::size() const { return state_->nodes.size(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor Gradients::operator[](const Tensor& leaf) const {
  if (leaf.tracked()) {
    auto it = by_node_.find(*leaf.tape_node());
    if (it != by_node_.end()) return it->second;
  }
  return Tensor::zeros(leaf.shape());
}

Gradients backward(const Tensor& output) {
  require_defined(output, "backward");
  if (output.numel() != 1) {
    throw ContractError("backward: output must be scalar, got " + shape_str(output.shape()));
  }
  if (!output.tracked()) throw ContractError("backward: output is not on a tape");
  const auto& tape = TensorAccess::tape(output);
  const std::size_t out_id = TensorAccess::node(output);
  BackwardRun run = run_backward(tape, out_id, Tensor::full(output.shape(), 1.0), {}, false);
  Gradients g;
  for (std::size_t i = 0; i <= out_id; ++i) {
    if (!tape->nodes[i].backward && run.grads[i].defined()) g.by_node_.emplace(i, run.grads[i]);
  }
  return g;
}

std::vector<Tensor> gradients(const Tensor& output, std::span<const Tensor> inputs,
                              const Tensor& seed, bool create_graph) {
  require_defined(output, "gradients");
  require_same(seed, output, "gradients(seed)");
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  if (!output.tracked()) {
    for (const Tensor& in : inputs) result.push_back(Tensor::zeros(in.shape()));
    return result;
  }
  const auto& tape = TensorAccess::tape(output);
  const std::size_t out_id = TensorAccess::node(output);
  std::vector<std::size_t> targets;
  for (const Tensor& in : inputs) {
    if (!in.tracked()) continue;
    if (TensorAccess::tape(in) != tape) throw ContractError("gradients: input on another tape");
    targets.push_back(TensorAccess::node(in));
  }
  if (targets.empty()) {
    for (const Tensor& in : inputs) result.push_back(Tensor::zeros(in.shape()));
    return result;
  }
  BackwardRun run = run_backward(tape, out_id, seed, targets, create_graph);
  for (const Tensor& in : inputs) {
    const std::size_t id = TensorAccess::node(in);
    if (in.tracked() && id <= out_id && run.grads[id].defined()) {
      result.push_back(run.grads[id]);
    } else {
      result.push_back(Tensor::zeros(in.shape()));
    }
  }
  return result;
}

Tensor vjp(const Tensor& v, const Tensor& output, const Tensor& input, bool create_graph) {
  if (v.shape() != output.shape()) {
    throw DimensionError("vjp: vector shape " + shape_str(v.shape()) +
                         " does not match output shape " + shape_str(output.shape()));
  }
  const Tensor in[] = {input};
  return gradients(output, in, v, create_graph)[0];
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

template <typename F>
std::vector<double> map_values(const Tensor& a, F f) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return out;
}

template <typename F>
std::vector<double> zip_values(const Tensor& a, const Tensor& b, F f) {
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  return make_result(a.shape(), zip_values(a, b, [](double x, double y) { return x + y; }),
                     {&a, &b},
                     [](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  return make_result(a.shape(), zip_values(a, b, [](double x, double y) { return x - y; }),
                     {&a, &b},
                     [](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{g, needs[1] ? neg(g) : Tensor{}};
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  return make_result(a.shape(), zip_values(a, b, [](double x, double y) { return x * y; }),
                     {&a, &b},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{needs[0] ? mul(g, in[1]) : Tensor{},
                                                  needs[1] ? mul(g, in[0]) : Tensor{}};
                     });
}

Tensor scale(const Tensor& a, double s) {
  return make_result(a.shape(), map_values(a, [s](double x) { return x * s; }), {&a},
                     [s](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                         const std::vector<bool>&) { return std::vector<Tensor>{scale(g, s)}; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return make_result(a.shape(), map_values(a, [s](double x) { return x + s; }), {&a},
                     [](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) { return std::vector<Tensor>{g}; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: scalar operand has shape " +
                                           shape_str(s.shape()));
  const double sv = s.item();
  return make_result(a.shape(), map_values(a, [sv](double x) { return x * sv; }), {&a, &s},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{
                           needs[0] ? mul_scalar(g, in[1]) : Tensor{},
                           needs[1] ? reshape(sum(mul(g, in[0])), in[1].shape()) : Tensor{}};
                     });
}

Tensor exp(const Tensor& a) {
  return make_result(a.shape(), map_values(a, [](double x) { return std::exp(x); }), {&a},
                     [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g,
                        const std::vector<bool>&) { return std::vector<Tensor>{mul(g, out)}; });
}

Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw DomainError("log: nonpositive argument");
  }
  return make_result(a.shape(), map_values(a, [](double x) { return std::log(x); }), {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{mul(g, reciprocal(in[0]))};
                     });
}

Tensor reciprocal(const Tensor& a) {
  return make_result(a.shape(), map_values(a, [](double x) { return 1.0 / x; }), {&a},
                     [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{neg(mul(g, mul(out, out)))};
                     });
}

Tensor sigmoid(const Tensor& a) {
  auto f = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return make_result(a.shape(), map_values(a, f), {&a},
                     [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{mul(g, mul(out, add_scalar(neg(out), 1.0)))};
                     });
}

Tensor relu(const Tensor& a) {
  Tensor mask(a.shape(), map_values(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
  return make_result(a.shape(), map_values(a, [](double x) { return x > 0.0 ? x : 0.0; }), {&a},
                     [mask](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                            const std::vector<bool>&) { return std::vector<Tensor>{mul(g, mask)}; });
}

Tensor elu(const Tensor& a) {
  Tensor pos(a.shape(), map_values(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
  Tensor negmask(a.shape(), map_values(a, [](double x) { return x > 0.0 ? 0.0 : 1.0; }));
  return make_result(a.shape(),
                     map_values(a, [](double x) { return x > 0.0 ? x : std::expm1(x); }), {&a},
                     [pos, negmask](const std::vector<Tensor>&, const Tensor& out,
                                    const Tensor& g, const std::vector<bool>&) {
                       // elu'(x) = 1 for x > 0, exp(x) = elu(x) + 1 otherwise
                       Tensor d = add(pos, mul(negmask, add_scalar(out, 1.0)));
                       return std::vector<Tensor>{mul(g, d)};
                     });
}

Tensor clamp_min(const Tensor& a, double floor) {
  Tensor mask(a.shape(), map_values(a, [floor](double x) { return x > floor ? 1.0 : 0.0; }));
  return make_result(a.shape(), map_values(a, [floor](double x) { return std::max(x, floor); }),
                     {&a},
                     [mask](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                            const std::vector<bool>&) { return std::vector<Tensor>{mul(g, mask)}; });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_result({1}, {s}, {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{expand(g, in[0].shape())};
                     });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor expand(const Tensor& s, const Shape& target) {
  if (s.numel() != 1) throw DimensionError("expand: operand must hold one value");
  check_shape(target);
  return make_result(target, std::vector<double>(product(target), s.item()), {&s},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(sum(g), in[0].shape())};
                     });
}

Tensor sum_last(const Tensor& a) {
  const std::size_t n = a.last();
  const std::size_t rows = a.numel() / n;
  auto av = a.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[r * n + j];
    out[r] = s;
  }
  return make_result(drop_last(a.shape()), std::move(out), {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{bcast_last(g, in[0].shape())};
                     });
}

Tensor bcast_last(const Tensor& a, const Shape& target) {
  check_shape(target);
  const std::size_t n = target.back();
  const std::size_t rows = product(target) / n;
  if (a.numel() != rows) {
    throw DimensionError("bcast_last: " + shape_str(a.shape()) + " -> " + shape_str(target));
  }
  auto av = a.values();
  std::vector<double> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.begin() + r * n, n, av[r]);
  return make_result(target, std::move(out), {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(sum_last(g), in[0].shape())};
                     });
}

Tensor sum_leading(const Tensor& a) {
  const std::size_t n = a.last();
  const std::size_t rows = a.numel() / n;
  auto av = a.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[j] += av[r * n + j];
  }
  return make_result({n}, std::move(out), {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{bcast_leading(g, in[0].shape())};
                     });
}

Tensor bcast_leading(const Tensor& v, const Shape& target) {
  check_shape(target);
  const std::size_t n = target.back();
  if (v.numel() != n) {
    throw DimensionError("bcast_leading: " + shape_str(v.shape()) + " -> " + shape_str(target));
  }
  const std::size_t rows = product(target) / n;
  auto vv = v.values();
  std::vector<double> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) std::copy(vv.begin(), vv.end(), out.begin() + r * n);
  return make_result(target, std::move(out), {&v},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(sum_leading(g), in[0].shape())};
                     });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t n = a.last();
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(a.shape()));
  }
  auto av = a.values();
  auto bv = bias.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % n];
  return make_result(a.shape(), std::move(out), {&a, &bias},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{
                           g, needs[1] ? reshape(sum_leading(g), in[1].shape()) : Tensor{}};
                     });
}

// ---------------------------------------------------------------------------
// Matrix products and shape ops

namespace {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {&a, &b},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{
                           needs[0] ? matmul_nt(g, in[1]) : Tensor{},
                           needs[1] ? matmul(transpose(in[0]), g) : Tensor{}};
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1)) {
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         "^T");
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = av.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = bv.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      out[i * n + j] = s;
    }
  }
  return make_result({m, n}, std::move(out), {&a, &b},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{
                           needs[0] ? matmul(g, in[1]) : Tensor{},
                           needs[1] ? matmul(transpose(g), in[0]) : Tensor{}};
                     });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) ||
      a.extent(2) != b.extent(1)) {
    throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(av + s * m * k, bv + s * k * n, out.data() + s * m * n, m, k, n);
  }
  return make_result({batch, m, n}, std::move(out), {&a, &b},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>& needs) {
                       return std::vector<Tensor>{
                           needs[0] ? bmm(g, transpose(in[1])) : Tensor{},
                           needs[1] ? bmm(transpose(in[0]), g) : Tensor{}};
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose: rank must be 2 or 3");
  const std::size_t r = a.rank();
  const std::size_t m = a.extent(r - 2), n = a.extent(r - 1);
  const std::size_t batch = a.numel() / (m * n);
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t off = s * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[off + j * m + i] = av[off + i * n + j];
    }
  }
  Shape shape = a.shape();
  std::swap(shape[r - 2], shape[r - 1]);
  return make_result(std::move(shape), std::move(out), {&a},
                     [](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (product(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  if (shape == a.shape()) return a;
  // Shares storage: values are immutable.
  auto data = TensorAccess::data(a);
  if (!a.tracked() || !grad_enabled()) {
    return TensorAccess::make(std::move(shape), data, nullptr, 0);
  }
  Tensor out = make_result(shape, {}, {&a},
                           [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                              const std::vector<bool>&) {
                             return std::vector<Tensor>{reshape(g, in[0].shape())};
                           });
  // make_result allocated an empty buffer; point the node and handle at the shared data.
  auto& tape = TensorAccess::tape(out);
  const std::size_t id = TensorAccess::node(out);
  tape->nodes[id].value = data;
  return TensorAccess::make(std::move(shape), data, tape, id);
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.numel() / a.last() != b.numel() / b.last()) {
    throw DimensionError("concat_last: " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
    if (a.extent(i) != b.extent(i)) throw DimensionError("concat_last: leading extents differ");
  }
  const std::size_t na = a.last(), nb = b.last();
  const std::size_t rows = a.numel() / na;
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(rows * (na + nb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + r * na, na, out.begin() + r * (na + nb));
    std::copy_n(bv.begin() + r * nb, nb, out.begin() + r * (na + nb) + na);
  }
  Shape shape = a.shape();
  shape.back() = na + nb;
  return make_result(std::move(shape), std::move(out), {&a, &b},
                     [na, nb](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                              const std::vector<bool>& needs) {
                       return std::vector<Tensor>{needs[0] ? slice_last(g, 0, na) : Tensor{},
                                                  needs[1] ? slice_last(g, na, nb) : Tensor{}};
                     });
}

Tensor slice_last(const Tensor& a, std::size_t offset, std::size_t length) {
  const std::size_t n = a.last();
  if (length == 0 || offset + length > n) throw DimensionError("slice_last: range out of bounds");
  const std::size_t rows = a.numel() / n;
  auto av = a.values();
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + r * n + offset, length, out.begin() + r * length);
  }
  Shape shape = a.shape();
  shape.back() = length;
  return make_result(std::move(shape), std::move(out), {&a},
                     [offset, n](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                                 const std::vector<bool>&) {
                       return std::vector<Tensor>{pad_last(g, offset, n)};
                     });
}

Tensor pad_last(const Tensor& a, std::size_t offset, std::size_t total) {
  const std::size_t n = a.last();
  if (offset + n > total) throw DimensionError("pad_last: range out of bounds");
  const std::size_t rows = a.numel() / n;
  auto av = a.values();
  std::vector<double> out(rows * total, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + r * n, n, out.begin() + r * total + offset);
  }
  Shape shape = a.shape();
  shape.back() = total;
  return make_result(std::move(shape), std::move(out), {&a},
                     [offset, n](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
                                 const std::vector<bool>&) {
                       return std::vector<Tensor>{slice_last(g, offset, n)};
                     });
}

// ---------------------------------------------------------------------------
// Attention building blocks

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t n = logits.last();
  const std::size_t rows = logits.numel() / n;
  auto lv = logits.values();
  for (double x : lv) {
    if (!std::isfinite(x)) throw DomainError("softmax_rows: non-finite logit");
  }
  std::vector<double> out(lv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_result(logits.shape(), std::move(out), {&logits},
                     [](const std::vector<Tensor>&, const Tensor& p, const Tensor& g,
                        const std::vector<bool>&) {
                       Tensor inner = bcast_last(sum_last(mul(g, p)), p.shape());
                       return std::vector<Tensor>{mul(p, sub(g, inner))};
                     });
}

Tensor row_sq_l2(const Tensor& a) {
  const std::size_t n = a.last();
  const std::size_t rows = a.numel() / n;
  auto av = a.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[r * n + j] * av[r * n + j];
    out[r] = s;
  }
  return make_result(drop_last(a.shape()), std::move(out), {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{
                           scale(mul(in[0], bcast_last(g, in[0].shape())), 2.0)};
                     });
}

Tensor pairwise_sum(const Tensor& s) {
  if (s.rank() > 2) throw DimensionError("pairwise_sum: rank must be 1 or 2");
  const std::size_t n = s.last();
  const std::size_t batch = s.numel() / n;
  auto sv = s.values();
  std::vector<double> out(batch * n * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = sv.data() + b * n;
    double* o = out.data() + b * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] = row[i] + row[j];
    }
  }
  Shape shape = s.rank() == 1 ? Shape{n, n} : Shape{batch, n, n};
  return make_result(std::move(shape), std::move(out), {&s},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       Tensor gs = add(sum_last(g), sum_last(transpose(g)));
                       return std::vector<Tensor>{reshape(gs, in[0].shape())};
                     });
}

}  // namespace acf

namespace acf {

namespace {

void check_square_batch(const Tensor& a, const char* op) {
  if (a.rank() != 3 || a.extent(1) != a.extent(2) || a.extent(1) == 0) {
    throw DimensionError(std::string(op) + ": expected [B x d x d], got " + shape_str(a.shape()));
  }
}

}  // namespace

Tensor inverse(const Tensor& a) {
  check_square_batch(a, "inverse");
  const std::size_t batch = a.extent(0), d = a.extent(1);
  auto av = a.values();
  std::vector<double> out(av.size());
  std::vector<double> m(d * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(av.begin() + b * d * d, av.begin() + (b + 1) * d * d, m.begin());
    double* inv = out.data() + b * d * d;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) inv[i * d + j] = i == j ? 1.0 : 0.0;
    for (std::size_t col = 0; col < d; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < d; ++r)
        if (std::abs(m[r * d + col]) > std::abs(m[piv * d + col])) piv = r;
      if (m[piv * d + col] == 0.0 || !std::isfinite(m[piv * d + col])) {
        throw DomainError("inverse: singular matrix");
      }
      if (piv != col) {
        for (std::size_t j = 0; j < d; ++j) {
          std::swap(m[piv * d + j], m[col * d + j]);
          std::swap(inv[piv * d + j], inv[col * d + j]);
        }
      }
      const double p = m[col * d + col];
      for (std::size_t j = 0; j < d; ++j) {
        m[col * d + j] /= p;
        inv[col * d + j] /= p;
      }
      for (std::size_t r = 0; r < d; ++r) {
        if (r == col) continue;
        const double f = m[r * d + col];
        if (f == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          m[r * d + j] -= f * m[col * d + j];
          inv[r * d + j] -= f * inv[col * d + j];
        }
      }
    }
  }
  return make_result(a.shape(), std::move(out), {&a},
                     [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g,
                        const std::vector<bool>&) {
                       const Tensor it = transpose(out);
                       return std::vector<Tensor>{neg(bmm(bmm(it, g), it))};
                     });
}

Tensor logabsdet(const Tensor& a) {
  check_square_batch(a, "logabsdet");
  const std::size_t batch = a.extent(0), d = a.extent(1);
  auto av = a.values();
  std::vector<double> out(batch);
  std::vector<double> m(d * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(av.begin() + b * d * d, av.begin() + (b + 1) * d * d, m.begin());
    double acc = 0.0;
    for (std::size_t col = 0; col < d; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < d; ++r)
        if (std::abs(m[r * d + col]) > std::abs(m[piv * d + col])) piv = r;
      const double p = m[piv * d + col];
      if (p == 0.0 || !std::isfinite(p)) throw DomainError("logabsdet: singular matrix");
      if (piv != col)
        for (std::size_t j = 0; j < d; ++j) std::swap(m[piv * d + j], m[col * d + j]);
      acc += std::log(std::abs(p));
      for (std::size_t r = col + 1; r < d; ++r) {
        const double f = m[r * d + col] / p;
        for (std::size_t j = col; j < d; ++j) m[r * d + j] -= f * m[col * d + j];
      }
    }
    out[b] = acc;
  }
  return make_result({batch}, std::move(out), {&a},
                     [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<bool>&) {
                       const std::size_t n = in[0].extent(0), k = in[0].extent(1);
                       Tensor gb = reshape(bcast_last(reshape(g, {n, 1}), {n, k * k}), {n, k, k});
                       return std::vector<Tensor>{mul(transpose(inverse(in[0])), gb)};
                     });
}

}  // namespace acf

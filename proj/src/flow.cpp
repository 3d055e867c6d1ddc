#include "acf/flow.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "acf/random.hpp"

namespace acf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size() || value[0] == '-') {
    throw ParameterError("config: " + key + " expects a nonnegative integer, got '" + value + "'");
  }
  return static_cast<std::size_t>(v);
}

double parse_real(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size() || !std::isfinite(v)) {
    throw ParameterError("config: " + key + " expects a number, got '" + value + "'");
  }
  return v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double sign_coef(std::size_t k) { return ((k % 2 == 0) ? 1.0 : -1.0) / static_cast<double>(k + 1); }

std::vector<double> draw_normal(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

// Per-row probe estimate of log det(I + J_g) for block `index`, averaged over
// opts.n_samples probe draws.
// Differentiable log det(I + J_g) through the dense Jacobian, one vjp per
// coordinate; meant for small dimensions.
Tensor exact_logdet_tracked(const Tensor& z_in, const Tensor& g_out) {
  const std::size_t rows = z_in.extent(0), d = z_in.extent(1);
  if (d > kMaxDenseDim) {
    throw ParameterError("exact log-det limited to dimension " + std::to_string(kMaxDenseDim));
  }
  Tensor jac;
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> e(rows * d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) e[r * d + j] = 1.0;
    Tensor row = vjp(Tensor({rows, d}, std::move(e)), g_out, z_in, true);  // row j of J_g
    jac = jac.defined() ? concat_last(jac, row) : row;
  }
  std::vector<double> eye(rows * d * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) eye[(r * d + j) * d + j] = 1.0;
  return logabsdet(add(reshape(jac, {rows, d, d}), Tensor({rows, d, d}, std::move(eye))));
}

Tensor probe_logdet(std::size_t index, const Tensor& z_in, const Tensor& g_out,
                    const LogDetOptions& opts, bool create_graph) {
  const std::size_t rows = z_in.extent(0), d = z_in.extent(1);
  if (opts.kind == LogDetKind::exact) return exact_logdet_tracked(z_in, g_out);
  if (opts.kind == LogDetKind::series) {
    if (opts.n_terms == 0) throw ParameterError("series log-det needs at least one term");
    // Exact traces: tr(J^k) = sum_j e_j^T J^k e_j.
    std::vector<std::vector<double>> coef(opts.n_terms, std::vector<double>(rows));
    for (std::size_t k = 0; k < opts.n_terms; ++k) std::fill(coef[k].begin(), coef[k].end(), sign_coef(k));
    Tensor total;
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> e(rows * d, 0.0);
      for (std::size_t r = 0; r < rows; ++r) e[r * d + j] = 1.0;
      Tensor term = probe_power_series(g_out, z_in, Tensor({rows, d}, std::move(e)), coef,
                                       create_graph);
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  }
  if (opts.n_samples == 0) throw ParameterError("log-det estimate needs n_samples > 0");
  if (opts.kind == LogDetKind::roulette && !(opts.p_geom > 0.0 && opts.p_geom < 1.0)) {
    throw ParameterError("roulette: p_geom must be in (0, 1)");
  }
  Tensor total;
  for (std::size_t s = 0; s < opts.n_samples; ++s) {
    const std::string stream = "probe." + std::to_string(index) + "." + std::to_string(s);
    std::vector<double> v(rows * d);
    std::vector<std::size_t> ks(rows, opts.n_terms);
    for (std::size_t r = 0; r < rows; ++r) {
      std::mt19937_64 rng(derive_seed(opts.seed, stream, r));
      if (opts.kind == LogDetKind::roulette) {
        std::geometric_distribution<std::size_t> geom(opts.p_geom);
        ks[r] = 1 + geom(rng);
      }
      if (opts.probe == ProbeKind::gaussian) {
        auto p = draw_normal(rng, d);
        std::copy(p.begin(), p.end(), v.begin() + r * d);
      } else {
        std::bernoulli_distribution coin(0.5);
        for (std::size_t j = 0; j < d; ++j) v[r * d + j] = coin(rng) ? 1.0 : -1.0;
      }
    }
    const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
    if (kmax == 0) throw ParameterError("hutchinson log-det needs at least one term");
    std::vector<std::vector<double>> coef(kmax, std::vector<double>(rows, 0.0));
    for (std::size_t k = 0; k < kmax; ++k) {
      double w = sign_coef(k);
      if (opts.kind == LogDetKind::roulette) {
        w /= std::pow(1.0 - opts.p_geom, static_cast<double>(k));
      }
      for (std::size_t r = 0; r < rows; ++r) {
        if (ks[r] > k) coef[k][r] = w;
      }
    }
    Tensor est = probe_power_series(g_out, z_in, Tensor({rows, d}, std::move(v)), coef,
                                    create_graph);
    total = total.defined() ? add(total, est) : est;
  }
  return opts.n_samples == 1 ? total : scale(total, 1.0 / static_cast<double>(opts.n_samples));
}

std::vector<double> block_logdet_rows(const ContractiveBlock& block, std::size_t index,
                                      const Tensor& z, const LogDetOptions& opts) {
  switch (opts.kind) {
    case LogDetKind::exact: return logdet_exact_rows(block, z);
    case LogDetKind::series:
      if (block.dim() <= kMaxDenseDim) return logdet_series_rows(block, z, opts.n_terms);
      break;
    case LogDetKind::hutchinson:
    case LogDetKind::roulette: break;
  }
  Tape tape;
  Tensor zt = tape.watch(z);
  Tensor g = block.g(zt);
  return probe_logdet(index, zt, g, opts, false).to_vector();
}

// --- checkpoint byte helpers ---

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what, pos);
    }
  }
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

// ---------------------------------------------------------------------------

BlockConfig ModelConfig::block_config() const {
  BlockConfig b;
  b.dim = dim;
  b.hidden_width = hidden_width;
  b.hidden_layers = hidden_layers;
  b.activation = activation;
  b.attention = attention;
  b.lip_coeff = lip_budget;
  b.gamma_max = gamma_max;
  b.attn_channels = attn_channels;
  b.d_proj_ratio = d_proj_ratio;
  b.kind = block_kind;
  b.dense_stages = dense_stages;
  b.dense_growth = dense_growth;
  return b;
}

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k = {
      "dim",        "blocks",        "hidden_width",  "hidden_layers", "activation",
      "attention",  "lip_budget",    "gamma_max",     "attn_channels", "d_proj_ratio",
      "block_kind", "dense_stages",  "dense_growth",  "seed"};
  return k;
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "dim") dim = parse_count(key, value);
  else if (key == "blocks") blocks = parse_count(key, value);
  else if (key == "hidden_width") hidden_width = parse_count(key, value);
  else if (key == "hidden_layers") hidden_layers = parse_count(key, value);
  else if (key == "activation") activation = parse_activation(value);
  else if (key == "attention") attention = parse_attention(value);
  else if (key == "lip_budget") lip_budget = parse_real(key, value);
  else if (key == "gamma_max") gamma_max = parse_real(key, value);
  else if (key == "attn_channels") attn_channels = parse_count(key, value);
  else if (key == "d_proj_ratio") d_proj_ratio = parse_count(key, value);
  else if (key == "block_kind") block_kind = parse_block_kind(value);
  else if (key == "dense_stages") dense_stages = parse_count(key, value);
  else if (key == "dense_growth") dense_growth = parse_count(key, value);
  else if (key == "seed") seed = parse_count(key, value);
  else throw ParameterError("config: unknown key '" + key + "'");
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "dim=" << dim << "\n"
      << "blocks=" << blocks << "\n"
      << "hidden_width=" << hidden_width << "\n"
      << "hidden_layers=" << hidden_layers << "\n"
      << "activation=" << to_string(activation) << "\n"
      << "attention=" << to_string(attention) << "\n"
      << "lip_budget=" << format_double(lip_budget) << "\n"
      << "gamma_max=" << format_double(gamma_max) << "\n"
      << "attn_channels=" << attn_channels << "\n"
      << "d_proj_ratio=" << d_proj_ratio << "\n"
      << "block_kind=" << to_string(block_kind) << "\n"
      << "dense_stages=" << dense_stages << "\n"
      << "dense_growth=" << dense_growth << "\n"
      << "seed=" << seed << "\n";
  return out.str();
}

LogDetOptions LogDetOptions::evaluation(std::size_t dim) {
  if (dim <= kSmallDim) return series(20);
  LogDetOptions o;
  o.kind = LogDetKind::hutchinson;
  o.n_terms = 10;
  o.n_samples = 1;
  return o;
}

// ---------------------------------------------------------------------------

FlowModel::FlowModel(const ModelConfig& config) : config_(config) {
  if (config.blocks == 0) throw ParameterError("model: need at least one block");
  const BlockConfig bc = config.block_config();
  blocks_.reserve(config.blocks);
  for (std::size_t k = 0; k < config.blocks; ++k) {
    blocks_.emplace_back(bc, derive_seed(config.seed, "block", k));
  }
}

Tensor FlowModel::forward(const Tensor& x) const {
  NoGradGuard guard;
  Tensor z = x.detach();
  for (const auto& b : blocks_) z = block_forward(b, z);
  return z;
}

Tensor FlowModel::inverse(const Tensor& z, double tol, std::size_t max_iter) const {
  Tensor x = z.detach();
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    x = block_inverse(*it, x, tol, max_iter).z;
  }
  return x;
}

FlowPass FlowModel::pass(const Tensor& x, const LogDetOptions& opts, std::size_t first,
                         std::size_t last, std::vector<double> initial) const {
  if (x.rank() != 2 || x.extent(1) != dim()) {
    throw DimensionError("model: expected [B x " + std::to_string(dim()) + "], got " +
                         shape_str(x.shape()));
  }
  last = std::min(last, blocks_.size());
  const std::size_t rows = x.extent(0);
  FlowPass out;
  out.z = x.detach();
  out.logdet = initial.empty() ? std::vector<double>(rows, 0.0) : std::move(initial);
  if (out.logdet.size() != rows) throw DimensionError("model: initial log-det length");
  for (std::size_t k = first; k < last; ++k) {
    auto ld = block_logdet_rows(blocks_[k], k, out.z, opts);
    for (std::size_t r = 0; r < rows; ++r) out.logdet[r] += ld[r];
    NoGradGuard guard;
    out.z = block_forward(blocks_[k], out.z);
  }
  return out;
}

std::vector<double> FlowModel::log_prob(const Tensor& x, const LogDetOptions& opts) const {
  FlowPass p = pass(x, opts);
  std::vector<double> lp = standard_normal_log_prob(p.z);
  for (std::size_t r = 0; r < lp.size(); ++r) lp[r] += p.logdet[r];
  return lp;
}

double FlowModel::mean_nll(const Tensor& x, const LogDetOptions& opts) const {
  auto lp = log_prob(x, opts);
  double s = 0.0;
  for (double v : lp) s += v;
  return -s / static_cast<double>(lp.size());
}

Tensor FlowModel::log_prob_tracked(const Tensor& x, const LogDetOptions& opts,
                                   Tape& tape) const {
  if (x.rank() != 2 || x.extent(1) != dim()) throw DimensionError("model: bad training batch");
  Tensor z = tape.watch(x.detach());
  Tensor acc;
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    Tensor g = blocks_[k].g(z);
    Tensor ld = probe_logdet(k, z, g, opts, true);
    acc = acc.defined() ? add(acc, ld) : ld;
    z = add(z, g);
  }
  return add(standard_normal_log_prob_tracked(z), acc);
}

Tensor FlowModel::sample(std::size_t n, std::uint64_t seed) const {
  if (n == 0) throw ParameterError("sample: n must be positive");
  std::mt19937_64 rng(derive_seed(seed, "sample"));
  Tensor z({n, dim()}, draw_normal(rng, n * dim()));
  return inverse(z);
}

void FlowModel::power_iterate(int iters) {
  for (auto& b : blocks_) b.power_iterate(iters);
}

void FlowModel::clamp_gammas() {
  for (auto& b : blocks_) b.clamp_gammas();
}

std::vector<double> FlowModel::gammas() const {
  std::vector<double> out;
  for (const auto& b : blocks_) {
    auto g = b.gammas();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

bool FlowModel::certified() const {
  return std::all_of(blocks_.begin(), blocks_.end(),
                     [](const ContractiveBlock& b) { return b.certified(); });
}

void FlowModel::collect(std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers) {
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    blocks_[k].collect("block" + std::to_string(k), params, buffers);
  }
}

void FlowModel::sync_buffers_from_tensors() {
  for (auto& b : blocks_) b.sync_buffers_from_tensors();
}

// ---------------------------------------------------------------------------

std::vector<double> standard_normal_log_prob(const Tensor& z) {
  const std::size_t rows = z.extent(0), d = z.extent(1);
  auto v = z.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
    out[r] = -0.5 * s - 0.5 * static_cast<double>(d) * kLog2Pi;
  }
  return out;
}

Tensor standard_normal_log_prob_tracked(const Tensor& z) {
  const double d = static_cast<double>(z.extent(1));
  return add_scalar(scale(row_sq_l2(z), -0.5), -0.5 * d * kLog2Pi);
}

double bits_per_dim(const std::vector<double>& log_probs, std::size_t dim, std::size_t n_levels) {
  if (log_probs.empty() || dim == 0 || n_levels == 0) {
    throw ParameterError("bits_per_dim: empty input");
  }
  const double d = static_cast<double>(dim);
  double s = 0.0;
  for (double lp : log_probs) {
    s += (-lp / std::numbers::ln2 + d * std::log2(static_cast<double>(n_levels))) / d;
  }
  return s / static_cast<double>(log_probs.size());
}

double bits_per_dim(const FlowModel& model, const Tensor& x, std::size_t n_levels,
                    const LogDetOptions& opts) {
  return bits_per_dim(model.log_prob(x, opts), model.dim(), n_levels);
}

// ---------------------------------------------------------------------------

std::string serialize_checkpoint(FlowModel& model) {
  std::vector<NamedTensor> params, buffers;
  model.collect(params, buffers);
  params.insert(params.end(), buffers.begin(), buffers.end());
  const std::string manifest = model.config().to_text();

  std::string out = "ACF1";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
  out += manifest;
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Tensor& t = *p.tensor;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, e);
    for (double v : t.values()) put<double>(out, v);
  }
  return out;
}

FlowModel deserialize_checkpoint(const std::string& bytes) {
  Reader rd{bytes};
  if (rd.take(4, "format tag") != "ACF1") throw FormatError("not an ACF1 checkpoint", 0);
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const auto mlen = rd.get<std::uint32_t>("manifest length");
  const std::size_t manifest_at = rd.pos;
  const std::string manifest = rd.take(mlen, "manifest");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::parse(manifest);
  } catch (const ParameterError& e) {
    throw FormatError(std::string("bad manifest: ") + e.what(), manifest_at);
  }
  FlowModel model;
  try {
    model = FlowModel(cfg);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("manifest describes an invalid model: ") + e.what(), manifest_at);
  }
  std::vector<NamedTensor> params, buffers;
  model.collect(params, buffers);
  params.insert(params.end(), buffers.begin(), buffers.end());
  std::map<std::string, Tensor*> by_name;
  for (auto& p : params) by_name[p.name] = p.tensor;

  const std::size_t count_at = rd.pos;
  const auto count = rd.get<std::uint64_t>("entry count");
  if (count != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " entries, model needs " +
                          std::to_string(params.size()),
                      count_at);
  }
  std::map<std::string, bool> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t entry_at = rd.pos;
    const auto nlen = rd.get<std::uint32_t>("name length");
    const std::string name = rd.take(nlen, "name");
    auto it = by_name.find(name);
    if (it == by_name.end() || seen[name]) {
      throw FormatError("unexpected entry '" + name + "'", entry_at);
    }
    seen[name] = true;
    const auto rank = rd.get<std::uint32_t>("rank");
    if (rank != it->second->rank()) throw FormatError("rank mismatch for '" + name + "'", entry_at);
    Shape shape(rank);
    for (auto& e : shape) e = rd.get<std::uint64_t>("extent");
    if (shape != it->second->shape()) {
      throw FormatError("shape mismatch for '" + name + "': " + shape_str(shape), entry_at);
    }
    std::vector<double> values(it->second->numel());
    rd.need(values.size() * sizeof(double), "values");
    std::memcpy(values.data(), bytes.data() + rd.pos, values.size() * sizeof(double));
    rd.pos += values.size() * sizeof(double);
    *it->second = Tensor(shape, std::move(values));
  }
  if (rd.pos != bytes.size()) throw FormatError("trailing bytes after last entry", rd.pos);
  model.sync_buffers_from_tensors();
  return model;
}

void save_checkpoint(FlowModel& model, const std::string& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

FlowModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace acf

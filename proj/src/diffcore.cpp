#include "pnfrl/diffcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

namespace pnfrl {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), t.rows(), t.cols());
}
MatMap as_matrix(Tensor& t) {
  return MatMap(t.data().data(), t.rows(), t.cols());
}

// Eigen picks vectorized paths by the address alignment of its operands, so
// products over std::vector storage could differ in the last bit between two
// copies of the same data. Copying into Eigen-owned (aligned) storage keeps
// results a function of the values alone.
RowMatrix owned(const Tensor& t) { return as_matrix(t); }

template <typename A, typename B>
RowMatrix product(const A& a, const B& b) {
  RowMatrix out = a * b;
  return out;
}

size_t product(const std::vector<size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), size_t{1},
                         std::multiplies<>());
}

void apply_activation(Activation act, Tensor& t) {
  auto& d = t.data();
  switch (act) {
    case Activation::kIdentity:
      break;
    case Activation::kTanh:
      for (double& v : d) v = std::tanh(v);
      break;
    case Activation::kRelu:
      for (double& v : d) v = v > 0.0 ? v : 0.0;
      break;
  }
}

// upstream * act'(z), expressed through the post-activation output y
void activation_backward(Activation act, const Tensor& y, Tensor& grad) {
  auto& g = grad.data();
  const auto& out = y.data();
  switch (act) {
    case Activation::kIdentity:
      break;
    case Activation::kTanh:
      for (size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - out[i] * out[i];
      break;
    case Activation::kRelu:
      for (size_t i = 0; i < g.size(); ++i)
        if (out[i] <= 0.0) g[i] = 0.0;
      break;
  }
}

template <typename Fn>
void for_each_block(MlpParams& a, const MlpParams& b, Fn fn) {
  if (a.layers.size() != b.layers.size())
    throw DimensionError("parameter sets have different depth");
  for (size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].weight.shape() != b.layers[l].weight.shape() ||
        a.layers[l].bias.shape() != b.layers[l].bias.shape())
      throw DimensionError("parameter block shape mismatch", static_cast<int>(l));
    fn(a.layers[l].weight.data(), b.layers[l].weight.data());
    fn(a.layers[l].bias.data(), b.layers[l].bias.data());
  }
}

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("checkpoint truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error("checkpoint truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

Tensor::Tensor(std::vector<size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {
  for (size_t s : shape_)
    if (s == 0) throw DimensionError("tensor dimensions must be positive");
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (size_t s : shape_)
    if (s == 0) throw DimensionError("tensor dimensions must be positive");
  if (product(shape_) != data_.size())
    throw DimensionError("tensor data length does not match shape");
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows.front().empty())
    throw DimensionError("from_rows needs at least one non-empty row");
  const size_t cols = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()},
                std::vector<double>(values.begin(), values.end()));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity:
      return "identity";
    case Activation::kTanh:
      return "tanh";
    case Activation::kRelu:
      return "relu";
  }
  return "?";
}

std::vector<size_t> MlpParams::layer_sizes() const {
  std::vector<size_t> sizes;
  if (layers.empty()) return sizes;
  sizes.push_back(layers.front().in());
  for (const auto& layer : layers) sizes.push_back(layer.out());
  return sizes;
}

size_t MlpParams::parameter_count() const {
  size_t n = 0;
  for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
  return n;
}

MlpParams make_mlp(const std::vector<size_t>& layer_sizes, Activation hidden,
                   Rng& rng) {
  if (layer_sizes.size() < 2)
    throw DimensionError("an MLP needs at least input and output sizes");
  MlpParams params;
  const size_t n_layers = layer_sizes.size() - 1;
  for (size_t l = 0; l < n_layers; ++l) {
    const size_t in = layer_sizes[l];
    const size_t out = layer_sizes[l + 1];
    Layer layer;
    layer.activation = l + 1 == n_layers ? Activation::kIdentity : hidden;
    layer.weight = Tensor(out, in);
    layer.bias = Tensor(std::vector<size_t>{out});
    const double bound = layer.activation == Activation::kRelu
                             ? std::sqrt(6.0 / static_cast<double>(in))
                             : std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

MlpParams zeros_like(const MlpParams& params) {
  MlpParams z = params;
  for (auto& layer : z.layers) {
    std::fill(layer.weight.data().begin(), layer.weight.data().end(), 0.0);
    std::fill(layer.bias.data().begin(), layer.bias.data().end(), 0.0);
  }
  return z;
}

void validate(const MlpParams& params) {
  if (params.layers.empty()) throw DimensionError("MLP has no layers");
  for (size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (layer.weight.rank() != 2 || layer.bias.size() != layer.out())
      throw DimensionError("layer " + std::to_string(l) +
                               ": bias length differs from output width",
                           static_cast<int>(l));
    if (l > 0 && params.layers[l - 1].out() != layer.in())
      throw DimensionError("layer " + std::to_string(l) + ": expects input " +
                               std::to_string(layer.in()) + ", previous layer gives " +
                               std::to_string(params.layers[l - 1].out()),
                           static_cast<int>(l));
  }
  if (params.layers.back().activation != Activation::kIdentity)
    throw DimensionError("final layer activation must be identity",
                         static_cast<int>(params.layers.size() - 1));
}

Tensor mlp_forward(const MlpParams& params, const Tensor& x, MlpTape* tape) {
  if (x.rank() != 2)
    throw DimensionError("mlp_forward expects a [batch, features] tensor");
  if (tape) {
    tape->inputs.clear();
    tape->outputs.clear();
  }
  Tensor current = x;
  for (size_t l = 0; l < params.layers.size(); ++l) {
    const Layer& layer = params.layers[l];
    if (current.cols() != layer.in())
      throw DimensionError("layer " + std::to_string(l) + ": input has " +
                               std::to_string(current.cols()) +
                               " columns, layer expects " +
                               std::to_string(layer.in()),
                           static_cast<int>(l));
    Tensor out(current.rows(), layer.out());
    auto out_m = as_matrix(out);
    out_m = product(owned(current), owned(layer.weight).transpose());
    out_m.rowwise() += ConstVecMap(layer.bias.data().data(), layer.out());
    apply_activation(layer.activation, out);
    if (tape) {
      tape->inputs.push_back(std::move(current));
      tape->outputs.push_back(out);
    }
    current = std::move(out);
  }
  return current;
}

MlpGradients mlp_backward(const MlpParams& params, const MlpTape& tape,
                          const Tensor& upstream, bool want_params) {
  const size_t n_layers = params.layers.size();
  if (tape.outputs.size() != n_layers)
    throw DimensionError("tape does not match network depth");
  const Tensor& final_out = tape.outputs.back();
  if (upstream.shape() != final_out.shape())
    throw DimensionError("upstream shape differs from forward output shape",
                         static_cast<int>(n_layers - 1));

  MlpGradients grads;
  if (want_params) grads.params = params;
  Tensor delta = upstream;
  for (size_t l = n_layers; l-- > 0;) {
    const Layer& layer = params.layers[l];
    activation_backward(layer.activation, tape.outputs[l], delta);
    const auto delta_m = as_matrix(delta);
    if (want_params) {
      Layer& g = grads.params.layers[l];
      const RowMatrix delta_o = owned(delta);
      as_matrix(g.weight) = product(delta_o.transpose(), owned(tape.inputs[l]));
      auto& gb = g.bias.data();
      std::fill(gb.begin(), gb.end(), 0.0);
      for (size_t i = 0; i < delta.rows(); ++i)
        for (size_t j = 0; j < gb.size(); ++j) gb[j] += delta_m(i, j);
    }
    Tensor next(delta.rows(), layer.in());
    as_matrix(next) = product(owned(delta), owned(layer.weight));
    delta = std::move(next);
  }
  grads.input = std::move(delta);
  return grads;
}

MlpGradients mlp_backward(const MlpParams& params, const Tensor& x,
                          const Tensor& upstream) {
  MlpTape tape;
  mlp_forward(params, x, &tape);
  return mlp_backward(params, tape, upstream, true);
}

Tensor finite_diff_input_grad(const MlpParams& params, const Tensor& x,
                              const Tensor& upstream, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
  auto objective = [&](const Tensor& input) {
    const Tensor y = mlp_forward(params, input);
    if (y.shape() != upstream.shape())
      throw DimensionError("upstream shape differs from forward output shape");
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += upstream[i] * y[i];
    return acc;
  };
  Tensor grad(x.shape());
  Tensor probe = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double plus = objective(probe);
    probe[i] = orig - h;
    const double minus = objective(probe);
    probe[i] = orig;
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

AdamState make_adam(const MlpParams& params, double lr, double beta1,
                    double beta2, double eps) {
  AdamState s;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

void adam_update(MlpParams& params, const MlpParams& grads, AdamState& state) {
  if (grads.layers.size() != params.layers.size() ||
      state.m.layers.size() != params.layers.size())
    throw DimensionError("adam: parameter, gradient and state depth differ");
  for (size_t l = 0; l < grads.layers.size(); ++l) {
    const Layer& g = grads.layers[l];
    if (g.weight.shape() != params.layers[l].weight.shape() ||
        g.bias.shape() != params.layers[l].bias.shape())
      throw DimensionError("adam: gradient shape mismatch at layer " +
                               std::to_string(l),
                           static_cast<int>(l));
    if (!g.weight.all_finite())
      throw NonFiniteError("non-finite gradient in layer " + std::to_string(l) +
                           " weight");
    if (!g.bias.all_finite())
      throw NonFiniteError("non-finite gradient in layer " + std::to_string(l) +
                           " bias");
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                    std::vector<double>& m, std::vector<double>& v) {
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  };
  for (size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight.data(), grads.layers[l].weight.data(),
           state.m.layers[l].weight.data(), state.v.layers[l].weight.data());
    update(params.layers[l].bias.data(), grads.layers[l].bias.data(),
           state.m.layers[l].bias.data(), state.v.layers[l].bias.data());
  }
}

std::pair<MlpParams, AdamState> adam_step(MlpParams params,
                                          const MlpParams& grads,
                                          AdamState state) {
  adam_update(params, grads, state);
  return {std::move(params), std::move(state)};
}

void accumulate(MlpParams& acc, const MlpParams& other, double scale) {
  for_each_block(acc, other,
                 [scale](std::vector<double>& a, const std::vector<double>& b) {
                   for (size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
                 });
}

void polyak_update(MlpParams& target, const MlpParams& source, double tau) {
  for_each_block(target, source,
                 [tau](std::vector<double>& t, const std::vector<double>& s) {
                   for (size_t i = 0; i < t.size(); ++i)
                     t[i] = (1.0 - tau) * t[i] + tau * s[i];
                 });
}

double squared_norm(const MlpParams& params) {
  double acc = 0.0;
  for (const auto& layer : params.layers) {
    for (double w : layer.weight.data()) acc += w * w;
    for (double b : layer.bias.data()) acc += b * b;
  }
  return acc;
}

void write_checkpoint(std::ostream& os, const MlpParams& params) {
  validate(params);
  os.write("PNF1", 4);
  put_u32(os, static_cast<uint32_t>(params.layers.size()));
  for (size_t s : params.layer_sizes()) put_u32(os, static_cast<uint32_t>(s));
  for (const auto& layer : params.layers) {
    const char code = static_cast<char>(layer.activation);
    os.write(&code, 1);
  }
  for (const auto& layer : params.layers) {
    for (double w : layer.weight.data()) put_f64(os, w);
    for (double b : layer.bias.data()) put_f64(os, b);
  }
}

MlpParams read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "PNF1", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic, expected PNF1");
  const uint32_t n_layers = get_u32(is);
  if (n_layers == 0 || n_layers > 1024)
    throw std::runtime_error("checkpoint: implausible layer count " +
                             std::to_string(n_layers));
  std::vector<size_t> sizes(n_layers + 1);
  for (auto& s : sizes) {
    s = get_u32(is);
    if (s == 0) throw std::runtime_error("checkpoint: zero layer size");
  }
  MlpParams params;
  params.layers.resize(n_layers);
  for (auto& layer : params.layers) {
    char code = 0;
    if (!is.read(&code, 1)) throw std::runtime_error("checkpoint truncated");
    if (code < 0 || code > 2)
      throw std::runtime_error("checkpoint: unknown activation code");
    layer.activation = static_cast<Activation>(code);
  }
  for (uint32_t l = 0; l < n_layers; ++l) {
    Layer& layer = params.layers[l];
    layer.weight = Tensor(sizes[l + 1], sizes[l]);
    layer.bias = Tensor(std::vector<size_t>{sizes[l + 1]});
    for (double& w : layer.weight.data()) w = get_f64(is);
    for (double& b : layer.bias.data()) b = get_f64(is);
  }
  validate(params);
  return params;
}

void save_checkpoint(const std::filesystem::path& path,
                     const MlpParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, params);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

MlpParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace pnfrl

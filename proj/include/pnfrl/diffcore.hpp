#ifndef PNFRL_DIFFCORE_HPP_
#define PNFRL_DIFFCORE_HPP_

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pnfrl/rng.hpp"

namespace pnfrl {

// Raised on any shape disagreement. layer is -1 when the mismatch is not
// attributable to a specific layer.
class DimensionError : public std::runtime_error {
 public:
  DimensionError(const std::string& what, int layer = -1)
      : std::runtime_error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor of doubles. Most of the code only uses rank 1
// (vectors) and rank 2 (batch x features).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape, double fill = 0.0);
  Tensor(std::vector<size_t> shape, std::vector<double> data);
  Tensor(size_t rows, size_t cols, double fill = 0.0)
      : Tensor(std::vector<size_t>{rows, cols}, fill) {}

  // one row per inner vector; all rows must have equal length
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor row(std::span<const double> values);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double& operator()(size_t i, size_t j) { return data_[i * cols() + j]; }
  double operator()(size_t i, size_t j) const { return data_[i * cols() + j]; }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  std::span<double> row_span(size_t i) {
    return {data_.data() + i * cols(), cols()};
  }
  std::span<const double> row_span(size_t i) const {
    return {data_.data() + i * cols(), cols()};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;
  bool operator==(const Tensor&) const = default;

 private:
  std::vector<size_t> shape_;
  std::vector<double> data_;
};

enum class Activation { kIdentity = 0, kTanh = 1, kRelu = 2 };

const char* activation_name(Activation a);

struct Layer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  Activation activation = Activation::kIdentity;

  size_t in() const { return weight.cols(); }
  size_t out() const { return weight.rows(); }
  bool operator==(const Layer&) const = default;
};

// Fully connected network; layer l computes act_l(x W_l^T + b_l).
struct MlpParams {
  std::vector<Layer> layers;

  size_t in_dim() const { return layers.front().in(); }
  size_t out_dim() const { return layers.back().out(); }
  std::vector<size_t> layer_sizes() const;
  size_t parameter_count() const;
  bool operator==(const MlpParams&) const = default;
};

// Seeded fan-in initialization: Xavier-uniform for tanh/identity layers,
// He-uniform for relu layers; biases start at zero. The last layer is
// always identity.
MlpParams make_mlp(const std::vector<size_t>& layer_sizes, Activation hidden,
                   Rng& rng);

// Same architecture, every entry zero.
MlpParams zeros_like(const MlpParams& params);

// Throws DimensionError if layer shapes do not chain or the last layer is
// not identity.
void validate(const MlpParams& params);

// Per-layer activations retained for the backward pass.
struct MlpTape {
  std::vector<Tensor> inputs;   // input to layer l
  std::vector<Tensor> outputs;  // post-activation output of layer l
};

Tensor mlp_forward(const MlpParams& params, const Tensor& x,
                   MlpTape* tape = nullptr);

struct MlpGradients {
  MlpParams params;  // same shapes as the network
  Tensor input;      // d/dx of sum(upstream * forward(x))
};

MlpGradients mlp_backward(const MlpParams& params, const Tensor& x,
                          const Tensor& upstream);

// Backward from a recorded tape. With want_params = false only the input
// gradient is produced (params is left empty), which skips the weight
// outer products.
MlpGradients mlp_backward(const MlpParams& params, const MlpTape& tape,
                          const Tensor& upstream, bool want_params = true);

// Central differences of sum(upstream * forward(x)) one coordinate of x at a
// time. Test oracle for mlp_backward.
Tensor finite_diff_input_grad(const MlpParams& params, const Tensor& x,
                              const Tensor& upstream, double h);

struct AdamState {
  MlpParams m;
  MlpParams v;
  long step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(const MlpParams& params, double lr = 3e-4,
                    double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8);

// One bias-corrected Adam update. Throws NonFiniteError naming the offending
// block (e.g. "layer 1 weight") if any gradient entry is not finite.
std::pair<MlpParams, AdamState> adam_step(MlpParams params,
                                          const MlpParams& grads,
                                          AdamState state);

// In-place variant used by the training loops.
void adam_update(MlpParams& params, const MlpParams& grads, AdamState& state);

// acc += scale * other
void accumulate(MlpParams& acc, const MlpParams& other, double scale = 1.0);
// target <- (1 - tau) * target + tau * source
void polyak_update(MlpParams& target, const MlpParams& source, double tau);
double squared_norm(const MlpParams& params);

// Checkpoint layout (little-endian):
//   "PNF1" | u32 layer count L | u32 sizes[L + 1] | u8 activation[L]
//   | per layer: f64 weight[out * in] row-major, f64 bias[out]
void write_checkpoint(std::ostream& os, const MlpParams& params);
MlpParams read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path,
                     const MlpParams& params);
MlpParams load_checkpoint(const std::filesystem::path& path);

}  // namespace pnfrl

#endif  // PNFRL_DIFFCORE_HPP_

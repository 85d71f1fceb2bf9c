#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "natgrad/rng.hpp"

namespace natgrad {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Flat parameter-space vector in canonical layout: layer 0 weights
/// (row-major, one row per output unit), layer 0 biases, layer 1 weights, ...
using FlatGrad = Vector;

enum class Activation { tanh, relu };

std::string to_string(Activation activation);
Activation parse_activation(const std::string& name);

struct LayerParams {
  Matrix weights;  // d_out x d_in
  Vector biases;   // d_out
};

/// Activations recorded by a forward pass, consumed by backward.
struct ForwardTape {
  std::vector<Vector> activations;  // [input, hidden_1, ..., output]
};

/// Dense feedforward network. Hidden layers use `activation`, the output
/// layer is linear. All parameters live in one contiguous vector.
class Mlp {
 public:
  /// Network with all parameters zero.
  explicit Mlp(std::vector<int> layer_dims, Activation activation = Activation::tanh);

  /// Uniform initialisation in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static Mlp random(std::vector<int> layer_dims, Activation activation, Rng& rng);

  const std::vector<int>& layer_dims() const { return dims_; }
  Activation activation() const { return activation_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  int n_layers() const { return static_cast<int>(dims_.size()) - 1; }
  int param_count() const { return static_cast<int>(params_.size()); }

  const Vector& params() const { return params_; }
  void set_params(const Vector& params);

  Eigen::Map<const RowMatrix> weights(int layer) const;
  Eigen::Map<const Vector> biases(int layer) const;

  Vector forward(const Vector& input) const;
  Vector forward(const Vector& input, ForwardTape& tape) const;

  /// Gradient of <output_cograd, forward(input)> with respect to the parameters.
  FlatGrad backward(const Vector& input, const Vector& output_cograd) const;
  FlatGrad backward(const ForwardTape& tape, const Vector& output_cograd) const;

  /// params <- params + step * direction.
  void apply_update(const FlatGrad& direction, double step);

  bool operator==(const Mlp& other) const;

 private:
  std::vector<int> dims_;
  Activation activation_;
  std::vector<int> offsets_;  // start of each layer's weights
  Vector params_;
};

/// Number of parameters of a network with these layer sizes.
int param_count(std::span<const int> layer_dims);

FlatGrad flatten(std::span<const LayerParams> layers);
std::vector<LayerParams> reshape(const FlatGrad& flat, std::span<const int> layer_dims);

/// Text serialisation: a header with layer sizes and activation, then the
/// flat parameters in canonical layout, one per line at full precision.
void save_mlp(std::ostream& out, const Mlp& net);
Mlp load_mlp(std::istream& in);

}  // namespace natgrad

#include "natgrad/mlp.hpp"

#include <cmath>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "natgrad/errors.hpp"

namespace natgrad {

std::string to_string(Activation activation) { return activation == Activation::tanh ? "tanh" : "relu"; }

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw DomainError(fmt::format("unknown activation '{}'", name));
}

int param_count(std::span<const int> layer_dims) {
  int k = 0;
  for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) k += layer_dims[i] * layer_dims[i + 1] + layer_dims[i + 1];
  return k;
}

Mlp::Mlp(std::vector<int> layer_dims, Activation activation) : dims_(std::move(layer_dims)), activation_(activation) {
  if (dims_.size() < 2) throw DomainError("Mlp: need at least input and output sizes");
  for (int d : dims_)
    if (d < 1) throw DomainError("Mlp: layer sizes must be positive");
  int offset = 0;
  for (int l = 0; l < n_layers(); ++l) {
    offsets_.push_back(offset);
    offset += dims_[l] * dims_[l + 1] + dims_[l + 1];
  }
  params_ = Vector::Zero(offset);
}

Mlp Mlp::random(std::vector<int> layer_dims, Activation activation, Rng& rng) {
  Mlp net(std::move(layer_dims), activation);
  for (int l = 0; l < net.n_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(net.dims_[l]));
    const int count = net.dims_[l] * net.dims_[l + 1] + net.dims_[l + 1];
    for (int i = 0; i < count; ++i) net.params_(net.offsets_[l] + i) = rng.uniform(-bound, bound);
  }
  return net;
}

void Mlp::set_params(const Vector& params) {
  if (params.size() != params_.size())
    throw DomainError(fmt::format("Mlp::set_params: expected {} values, got {}", params_.size(), params.size()));
  params_ = params;
}

Eigen::Map<const RowMatrix> Mlp::weights(int layer) const {
  return {params_.data() + offsets_[layer], dims_[layer + 1], dims_[layer]};
}

Eigen::Map<const Vector> Mlp::biases(int layer) const {
  return {params_.data() + offsets_[layer] + dims_[layer] * dims_[layer + 1], dims_[layer + 1]};
}

Vector Mlp::forward(const Vector& input) const {
  if (input.size() != input_dim())
    throw DomainError(fmt::format("Mlp::forward: input has {} entries, expected {}", input.size(), input_dim()));
  Vector h = input;
  for (int l = 0; l < n_layers(); ++l) {
    Vector z = weights(l) * h + biases(l);
    if (l + 1 < n_layers()) {
      if (activation_ == Activation::tanh)
        z = z.array().tanh();
      else
        z = z.cwiseMax(0.0);
    }
    h = std::move(z);
  }
  return h;
}

Vector Mlp::forward(const Vector& input, ForwardTape& tape) const {
  if (input.size() != input_dim())
    throw DomainError(fmt::format("Mlp::forward: input has {} entries, expected {}", input.size(), input_dim()));
  tape.activations.resize(dims_.size());
  tape.activations[0] = input;
  for (int l = 0; l < n_layers(); ++l) {
    Vector z = weights(l) * tape.activations[l] + biases(l);
    if (l + 1 < n_layers()) {
      if (activation_ == Activation::tanh)
        z = z.array().tanh();
      else
        z = z.cwiseMax(0.0);
    }
    tape.activations[l + 1] = std::move(z);
  }
  return tape.activations.back();
}

FlatGrad Mlp::backward(const Vector& input, const Vector& output_cograd) const {
  ForwardTape tape;
  forward(input, tape);
  return backward(tape, output_cograd);
}

FlatGrad Mlp::backward(const ForwardTape& tape, const Vector& output_cograd) const {
  if (output_cograd.size() != output_dim())
    throw DomainError(
        fmt::format("Mlp::backward: cograd has {} entries, expected {}", output_cograd.size(), output_dim()));
  if (static_cast<int>(tape.activations.size()) != n_layers() + 1)
    throw DomainError("Mlp::backward: tape does not belong to this network");
  FlatGrad grad(params_.size());
  Vector upstream = output_cograd;  // d(objective)/d(pre-activation of layer l)
  for (int l = n_layers() - 1; l >= 0; --l) {
    const Vector& in = tape.activations[l];
    const int rows = dims_[l + 1], cols = dims_[l];
    Eigen::Map<RowMatrix> w_grad(grad.data() + offsets_[l], rows, cols);
    w_grad.noalias() = upstream * in.transpose();
    grad.segment(offsets_[l] + rows * cols, rows) = upstream;
    if (l == 0) break;
    Vector down = weights(l).transpose() * upstream;
    if (activation_ == Activation::tanh) {
      down.array() *= 1.0 - in.array().square();
    } else {
      down.array() *= (in.array() > 0.0).cast<double>();
    }
    upstream = std::move(down);
  }
  return grad;
}

void Mlp::apply_update(const FlatGrad& direction, double step) {
  if (direction.size() != params_.size())
    throw DomainError(
        fmt::format("Mlp::apply_update: direction has {} entries, expected {}", direction.size(), params_.size()));
  params_ += step * direction;
}

bool Mlp::operator==(const Mlp& other) const {
  return dims_ == other.dims_ && activation_ == other.activation_ && params_ == other.params_;
}

FlatGrad flatten(std::span<const LayerParams> layers) {
  Eigen::Index total = 0;
  for (const auto& layer : layers) {
    if (layer.biases.size() != layer.weights.rows()) throw DomainError("flatten: bias length does not match weights");
    total += layer.weights.size() + layer.biases.size();
  }
  FlatGrad flat(total);
  Eigen::Index offset = 0;
  for (const auto& layer : layers) {
    Eigen::Map<RowMatrix>(flat.data() + offset, layer.weights.rows(), layer.weights.cols()) = layer.weights;
    offset += layer.weights.size();
    flat.segment(offset, layer.biases.size()) = layer.biases;
    offset += layer.biases.size();
  }
  return flat;
}

std::vector<LayerParams> reshape(const FlatGrad& flat, std::span<const int> layer_dims) {
  if (layer_dims.size() < 2) throw DomainError("reshape: need at least two layer sizes");
  if (flat.size() != param_count(layer_dims))
    throw DomainError(fmt::format("reshape: {} values do not match {} parameters", flat.size(), param_count(layer_dims)));
  std::vector<LayerParams> layers;
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const int rows = layer_dims[l + 1], cols = layer_dims[l];
    LayerParams layer;
    layer.weights = Eigen::Map<const RowMatrix>(flat.data() + offset, rows, cols);
    offset += rows * cols;
    layer.biases = flat.segment(offset, rows);
    offset += rows;
    layers.push_back(std::move(layer));
  }
  return layers;
}

void save_mlp(std::ostream& out, const Mlp& net) {
  out << "natgrad-mlp 1\nlayers";
  for (int d : net.layer_dims()) out << ' ' << d;
  out << "\nactivation " << to_string(net.activation()) << "\nparams " << net.param_count() << '\n';
  for (Eigen::Index i = 0; i < net.params().size(); ++i) out << fmt::format("{:.17g}\n", net.params()(i));
}

Mlp load_mlp(std::istream& in) {
  std::string line, word;
  auto expect = [&](const std::string& key) {
    if (!std::getline(in, line)) throw DomainError("load_mlp: truncated header");
    std::istringstream row(line);
    row >> word;
    if (word != key) throw DomainError(fmt::format("load_mlp: expected '{}' in header", key));
    return row;
  };
  {
    auto row = expect("natgrad-mlp");
    int version = 0;
    row >> version;
    if (version != 1) throw DomainError("load_mlp: unsupported format version");
  }
  std::vector<int> dims;
  {
    auto row = expect("layers");
    int d;
    while (row >> d) dims.push_back(d);
  }
  std::string act;
  expect("activation") >> act;
  int count = 0;
  expect("params") >> count;
  Mlp net(dims, parse_activation(act));
  if (count != net.param_count()) throw DomainError("load_mlp: parameter count does not match layer sizes");
  Vector params(count);
  std::string token;
  for (int i = 0; i < count; ++i) {
    // strtod rather than operator>> so subnormal values survive the round trip
    if (!(in >> token)) throw DomainError("load_mlp: truncated parameter list");
    char* end = nullptr;
    params(i) = std::strtod(token.c_str(), &end);
    if (end != token.c_str() + token.size()) throw DomainError("load_mlp: malformed parameter value");
  }
  net.set_params(params);
  return net;
}

}  // namespace natgrad

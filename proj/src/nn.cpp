#include <agnocomm/nn.hpp>

#include <cmath>

namespace agnocomm::nn {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::identity:
      return "identity";
  }
  return "?";
}

std::size_t Mlp::input_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weights.cols());
}

std::size_t Mlp::output_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weights.rows());
}

std::size_t Mlp::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

Mlp Mlp::zeros_like() const {
  Mlp out;
  out.activations = activations;
  out.layers.reserve(layers.size());
  for (const auto& l : layers) {
    out.layers.push_back({Matrix::Zero(l.weights.rows(), l.weights.cols()), Vector::Zero(l.bias.size())});
  }
  return out;
}

Mlp make_mlp(std::span<const std::size_t> dims, Activation hidden, Activation output, Rng& rng,
             std::optional<double> final_layer_std) {
  if (dims.size() < 2) throw ConfigError("make_mlp: need at least input and output sizes");
  Mlp mlp;
  const std::size_t n_layers = dims.size() - 1;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto in = static_cast<Eigen::Index>(dims[i]);
    const auto out = static_cast<Eigen::Index>(dims[i + 1]);
    if (in == 0 || out == 0) throw ConfigError("make_mlp: zero-width layer");
    DenseParams layer{Matrix(out, in), Vector(out)};
    const bool last = i + 1 == n_layers;
    if (last && final_layer_std) {
      for (Eigen::Index k = 0; k < layer.weights.size(); ++k) {
        layer.weights.data()[k] = *final_layer_std * standard_normal(rng);
      }
      layer.bias.setZero();
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      for (Eigen::Index k = 0; k < layer.weights.size(); ++k) {
        layer.weights.data()[k] = uniform(rng, -bound, bound);
      }
      for (Eigen::Index k = 0; k < layer.bias.size(); ++k) layer.bias[k] = uniform(rng, -bound, bound);
    }
    mlp.layers.push_back(std::move(layer));
    mlp.activations.push_back(last ? output : hidden);
  }
  return mlp;
}

namespace {

void activate(Activation a, Matrix& z) {
  switch (a) {
    case Activation::relu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::tanh:
      z = z.array().tanh().matrix();
      break;
    case Activation::identity:
      break;
  }
}

// Multiplies `grad` in place by the activation derivative, expressed through
// the activation output y.
void activation_backward(Activation a, const Matrix& y, Matrix& grad) {
  switch (a) {
    case Activation::relu:
      grad = (y.array() > 0.0).select(grad, 0.0);
      break;
    case Activation::tanh:
      grad.array() *= 1.0 - y.array().square();
      break;
    case Activation::identity:
      break;
  }
}

}  // namespace

Matrix forward(const Mlp& mlp, const Matrix& x, MlpTape* tape) {
  if (mlp.layers.empty()) throw ConfigError("forward: empty MLP");
  if (static_cast<std::size_t>(x.rows()) != mlp.input_dim()) {
    throw ConfigError("forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                      std::to_string(mlp.input_dim()));
  }
  if (tape) tape->clear();
  Matrix h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& layer = mlp.layers[i];
    Matrix z = layer.weights * h;
    z.colwise() += layer.bias;
    activate(mlp.activations[i], z);
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->outputs.push_back(z);
    }
    h = std::move(z);
  }
  return h;
}

Vector forward(const Mlp& mlp, const Vector& x) {
  Matrix out = forward(mlp, Matrix(x));
  return out.col(0);
}

Matrix backward(const Mlp& mlp, const MlpTape& tape, const Matrix& upstream, Mlp& grads) {
  if (tape.empty()) throw UsageError("backward: no forward pass recorded");
  if (tape.inputs.size() != mlp.layers.size() || grads.layers.size() != mlp.layers.size()) {
    throw UsageError("backward: tape or gradient buffer does not match network");
  }
  if (upstream.rows() != tape.outputs.back().rows() || upstream.cols() != tape.outputs.back().cols()) {
    throw ConfigError("backward: upstream gradient shape mismatch");
  }
  Matrix g = upstream;
  for (std::size_t i = mlp.layers.size(); i-- > 0;) {
    activation_backward(mlp.activations[i], tape.outputs[i], g);
    grads.layers[i].weights.noalias() += g * tape.inputs[i].transpose();
    grads.layers[i].bias += g.rowwise().sum();
    g = mlp.layers[i].weights.transpose() * g;
  }
  return g;
}

}  // namespace agnocomm::nn

#pragma once

// Dense layers, MLPs and their reverse-mode gradients. Batches are stored
// column-wise: an input matrix of shape [in x B] holds B samples.

#include <agnocomm/common.hpp>

#include <concepts>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace agnocomm::nn {

enum class Activation { relu, tanh, identity };

const char* to_string(Activation a);

struct DenseParams {
  Matrix weights;  // [out x in]
  Vector bias;     // [out]
};

struct Mlp {
  std::vector<DenseParams> layers;
  std::vector<Activation> activations;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t num_parameters() const;

  // Same shapes, all entries zero. Used as a gradient accumulator.
  Mlp zeros_like() const;
};

// Visits every tensor as (name, Matrix& or Vector&). Works on const and
// non-const Mlp.
template <class M, class F>
  requires std::same_as<std::remove_const_t<M>, Mlp>
void visit_tensors(M& mlp, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    f(base + ".weight", mlp.layers[i].weights);
    f(base + ".bias", mlp.layers[i].bias);
  }
}

template <class M, class F>
  requires std::same_as<std::remove_const_t<M>, Mlp>
void visit_tensors(M& mlp, F&& f) {
  visit_tensors(mlp, std::string("mlp"), f);
}

// Builds an MLP with layer sizes dims[0] -> dims[1] -> ... -> dims.back().
// Hidden layers get U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; when
// final_layer_std is set the last layer is drawn from N(0, final_layer_std^2)
// with zero bias instead.
Mlp make_mlp(std::span<const std::size_t> dims, Activation hidden, Activation output, Rng& rng,
             std::optional<double> final_layer_std = std::nullopt);

// Everything backward() needs from a forward pass.
struct MlpTape {
  std::vector<Matrix> inputs;   // input to layer i
  std::vector<Matrix> outputs;  // post-activation output of layer i

  bool empty() const { return inputs.empty(); }
  void clear() {
    inputs.clear();
    outputs.clear();
  }
};

// Throws ConfigError if x.rows() != mlp.input_dim().
Matrix forward(const Mlp& mlp, const Matrix& x, MlpTape* tape = nullptr);
Vector forward(const Mlp& mlp, const Vector& x);

// Reverse pass for the batch recorded in `tape`. Parameter gradients are
// *added* to `grads` (so a network applied several times can accumulate); the
// gradient with respect to the input batch is returned.
// Throws UsageError if the tape holds no forward pass.
Matrix backward(const Mlp& mlp, const MlpTape& tape, const Matrix& upstream, Mlp& grads);

}  // namespace agnocomm::nn

#pragma once

// Permutation-invariant set autoencoder.
//
// Encoder: elements are put in canonical (lexicographic) order and the element
// at rank i gets the sinusoidal key k_i. The latent is
//
//   z = sum_i key_encoder(k_i) * value_encoder(x_i) + cardinality_embedding[n]
//
// Decoder: n_hat = argmax cardinality_decoder(z); element i is recovered as
// element_decoder(query_encoder(k_i) * z) for i < n_hat.

#include <agnocomm/nn.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace agnocomm::pisa {

// Unordered collection of equally sized vectors, stored as columns.
class ObservationSet {
 public:
  ObservationSet() = default;
  explicit ObservationSet(std::size_t dim) : elements_(static_cast<Eigen::Index>(dim), 0) {}
  explicit ObservationSet(Matrix elements) : elements_(std::move(elements)) {}
  static ObservationSet from_vectors(std::span<const Vector> elements, std::size_t dim);

  std::size_t size() const { return static_cast<std::size_t>(elements_.cols()); }
  std::size_t dim() const { return static_cast<std::size_t>(elements_.rows()); }
  bool empty() const { return elements_.cols() == 0; }

  Vector element(std::size_t i) const { return elements_.col(static_cast<Eigen::Index>(i)); }
  void push_back(const Vector& x);
  const Matrix& elements() const { return elements_; }
  Matrix& elements() { return elements_; }

  bool operator==(const ObservationSet& other) const;

 private:
  Matrix elements_;
};

struct SetAutoencoderConfig {
  std::size_t element_dim = 28;
  std::size_t latent_dim = 72;
  std::size_t key_dim = 16;
  std::size_t hidden_dim = 128;
  std::size_t max_cardinality = 10;
};

struct SetAutoencoderParams {
  nn::Mlp key_encoder;            // key -> latent_dim
  nn::Mlp value_encoder;          // element -> latent_dim
  Matrix cardinality_embedding;   // [(max_cardinality + 1) x latent_dim], row n embeds cardinality n
  nn::Mlp cardinality_decoder;    // latent -> logits over 0..max_cardinality
  nn::Mlp query_encoder;          // key -> latent_dim
  nn::Mlp element_decoder;        // latent_dim -> element

  std::size_t element_dim() const { return value_encoder.input_dim(); }
  std::size_t latent_dim() const { return static_cast<std::size_t>(cardinality_embedding.cols()); }
  std::size_t key_dim() const { return key_encoder.input_dim(); }
  std::size_t max_cardinality() const { return static_cast<std::size_t>(cardinality_embedding.rows()) - 1; }

  SetAutoencoderParams zeros_like() const;
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, SetAutoencoderParams>
void visit_tensors(P& p, F&& f) {
  nn::visit_tensors(p.key_encoder, "key_encoder", f);
  nn::visit_tensors(p.value_encoder, "value_encoder", f);
  f(std::string("cardinality_embedding"), p.cardinality_embedding);
  nn::visit_tensors(p.cardinality_decoder, "cardinality_decoder", f);
  nn::visit_tensors(p.query_encoder, "query_encoder", f);
  nn::visit_tensors(p.element_decoder, "element_decoder", f);
}

SetAutoencoderParams make_set_autoencoder(const SetAutoencoderConfig& config, Rng& rng);

void save(const SetAutoencoderParams& params, const std::filesystem::path& path);
// The skeleton fixes architecture and activations; shapes must match the file.
SetAutoencoderParams load(const std::filesystem::path& path, const SetAutoencoderConfig& config);

// ---- keys ----

// Sinusoidal encoding of an integer rank: [sin(r w_0), cos(r w_0), sin(r w_1), ...]
// with w_j = 10000^(-2j/dim).
Vector positional_key(std::size_t rank, std::size_t dim);
Matrix positional_keys(std::size_t count, std::size_t dim);

// Indices of the elements sorted lexicographically by component; ties keep
// input order.
std::vector<std::size_t> canonical_order(const ObservationSet& set);

struct KeyAssignment {
  std::vector<std::size_t> order;  // order[r] = input index of the element with rank r
  Matrix keys;                     // column r = positional_key(r)
};

KeyAssignment assign_keys(const ObservationSet& set, std::size_t key_dim);

// ---- batched evaluation ----

// Several sets flattened into one column matrix, each set contiguous and in
// canonical order.
struct SetBatch {
  Matrix elements;
  std::vector<std::size_t> rank;         // per element
  std::vector<std::size_t> owner;        // per element: index of its set
  std::vector<std::size_t> cardinality;  // per set
  std::vector<std::size_t> offset;       // per set: first element column

  std::size_t num_sets() const { return cardinality.size(); }
  std::size_t num_elements() const { return rank.size(); }
};

SetBatch make_batch(std::span<const ObservationSet> sets);
SetBatch make_batch(std::span<const ObservationSet* const> sets);

struct EncoderTape {
  nn::MlpTape key_tape;
  Matrix rank_keys;  // [latent x max_cardinality]
  nn::MlpTape value_tape;
  Matrix values;     // [latent x elements]
};

// Latents for every set in the batch, [latent_dim x num_sets].
// Throws CapacityError if any set exceeds max_cardinality.
Matrix encode(const SetAutoencoderParams& params, const SetBatch& batch, EncoderTape* tape = nullptr);
Vector encode(const SetAutoencoderParams& params, const ObservationSet& set);

// Accumulates encoder gradients (key/value encoders and cardinality
// embedding) for the upstream gradient on the latents.
void encode_backward(const SetAutoencoderParams& params, const SetBatch& batch, const EncoderTape& tape,
                     const Matrix& latent_grad, SetAutoencoderParams& grads);

std::size_t predict_cardinality(const SetAutoencoderParams& params, const Vector& latent);

// Elements in key order; empty when the predicted cardinality is zero.
ObservationSet decode(const SetAutoencoderParams& params, const Vector& latent);

// ---- loss ----

struct LossBreakdown {
  double total = 0.0;
  double element = 0.0;      // MSE over the n * element_dim entries (0 for the empty set)
  double cardinality = 0.0;  // cross-entropy of the cardinality logits against n
  double total_std = 0.0;    // batch means only: population std of the per-set totals
};

struct BatchLoss {
  LossBreakdown mean;                  // averaged over sets
  std::vector<LossBreakdown> per_set;
  double squared_error_sum = 0.0;      // over every element entry in the batch
  std::size_t cardinality_hits = 0;    // sets whose argmax cardinality is correct
  Matrix latents;                      // [latent_dim x num_sets]
};

// Teacher-forced reconstruction loss: elements are decoded at the true
// cardinality. When `grads` is given, gradients of mean.total are added to it.
BatchLoss reconstruction_loss(const SetAutoencoderParams& params, const SetBatch& batch,
                              SetAutoencoderParams* grads = nullptr);
LossBreakdown reconstruction_loss(const SetAutoencoderParams& params, const ObservationSet& set);

// ---- training ----

struct TrainOptions {
  std::size_t iterations = 15000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  // Cosine decay from learning_rate to learning_rate * final_lr_fraction.
  double final_lr_fraction = 1.0;
  std::uint64_t seed = 0;
  std::function<void(std::size_t, const LossBreakdown&)> on_iteration;
};

struct TrainResult {
  SetAutoencoderParams params;
  std::vector<LossBreakdown> history;  // per-iteration minibatch mean
};

// Minibatch Adam on the reconstruction loss. Throws NumericalError on a
// non-finite loss, naming the iteration.
TrainResult train(SetAutoencoderParams params, std::span<const ObservationSet> dataset,
                  const TrainOptions& options);

struct EvaluationSummary {
  double mean_total_loss = 0.0;
  double element_rmse = 0.0;
  double cardinality_accuracy = 0.0;
};

EvaluationSummary evaluate(const SetAutoencoderParams& params, std::span<const ObservationSet> sets,
                           std::size_t batch_size = 512);

// Columns: iteration,total_loss,element_loss,card_loss,total_loss_std
void write_loss_trace(const std::filesystem::path& path, std::span<const LossBreakdown> history);
std::vector<LossBreakdown> read_loss_trace(const std::filesystem::path& path);

}  // namespace agnocomm::pisa

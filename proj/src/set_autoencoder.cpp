#include <agnocomm/set_autoencoder.hpp>

#include <agnocomm/adam.hpp>
#include <agnocomm/checkpoint.hpp>
#include <agnocomm/csv.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace agnocomm::pisa {

ObservationSet ObservationSet::from_vectors(std::span<const Vector> elements, std::size_t dim) {
  Matrix m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(elements.size()));
  for (std::size_t i = 0; i < elements.size(); ++i) {
    if (static_cast<std::size_t>(elements[i].size()) != dim) {
      throw ConfigError("ObservationSet: element dimension mismatch");
    }
    m.col(static_cast<Eigen::Index>(i)) = elements[i];
  }
  return ObservationSet(std::move(m));
}

void ObservationSet::push_back(const Vector& x) {
  if (elements_.rows() == 0 && elements_.cols() == 0) elements_.resize(x.size(), 0);
  if (x.size() != elements_.rows()) throw ConfigError("ObservationSet: element dimension mismatch");
  elements_.conservativeResize(Eigen::NoChange, elements_.cols() + 1);
  elements_.col(elements_.cols() - 1) = x;
}

bool ObservationSet::operator==(const ObservationSet& other) const {
  return elements_.rows() == other.elements_.rows() && elements_.cols() == other.elements_.cols() &&
         elements_ == other.elements_;
}

SetAutoencoderParams SetAutoencoderParams::zeros_like() const {
  SetAutoencoderParams z;
  z.key_encoder = key_encoder.zeros_like();
  z.value_encoder = value_encoder.zeros_like();
  z.cardinality_embedding = Matrix::Zero(cardinality_embedding.rows(), cardinality_embedding.cols());
  z.cardinality_decoder = cardinality_decoder.zeros_like();
  z.query_encoder = query_encoder.zeros_like();
  z.element_decoder = element_decoder.zeros_like();
  return z;
}

SetAutoencoderParams make_set_autoencoder(const SetAutoencoderConfig& c, Rng& rng) {
  if (c.element_dim == 0 || c.latent_dim == 0 || c.key_dim == 0 || c.hidden_dim == 0 || c.max_cardinality == 0) {
    throw ConfigError("set autoencoder: all dimensions must be positive");
  }
  using nn::Activation;
  SetAutoencoderParams p;
  const std::size_t key_dims[] = {c.key_dim, c.hidden_dim, c.latent_dim};
  const std::size_t value_dims[] = {c.element_dim, c.hidden_dim, c.latent_dim};
  const std::size_t card_dims[] = {c.latent_dim, c.hidden_dim, c.max_cardinality + 1};
  const std::size_t decoder_dims[] = {c.latent_dim, c.hidden_dim, c.element_dim};
  p.key_encoder = nn::make_mlp(key_dims, Activation::relu, Activation::identity, rng);
  p.value_encoder = nn::make_mlp(value_dims, Activation::relu, Activation::identity, rng);
  p.cardinality_embedding.resize(static_cast<Eigen::Index>(c.max_cardinality + 1),
                                 static_cast<Eigen::Index>(c.latent_dim));
  for (Eigen::Index i = 0; i < p.cardinality_embedding.size(); ++i) {
    p.cardinality_embedding.data()[i] = 0.01 * standard_normal(rng);
  }
  p.cardinality_decoder = nn::make_mlp(card_dims, Activation::relu, Activation::identity, rng);
  p.query_encoder = nn::make_mlp(key_dims, Activation::relu, Activation::identity, rng);
  p.element_decoder = nn::make_mlp(decoder_dims, Activation::relu, Activation::identity, rng);
  return p;
}

void save(const SetAutoencoderParams& params, const std::filesystem::path& path) {
  write_checkpoint(path, to_tensors(params));
}

SetAutoencoderParams load(const std::filesystem::path& path, const SetAutoencoderConfig& config) {
  Rng rng(0);
  auto params = make_set_autoencoder(config, rng);
  const auto tensors = read_checkpoint(path);
  from_tensors(params, tensors);
  return params;
}

// ---- keys ----

Vector positional_key(std::size_t rank, std::size_t dim) {
  Vector k(static_cast<Eigen::Index>(dim));
  for (std::size_t j = 0; j < dim; ++j) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(dim));
    const double angle = static_cast<double>(rank) * freq;
    k[static_cast<Eigen::Index>(j)] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return k;
}

Matrix positional_keys(std::size_t count, std::size_t dim) {
  Matrix keys(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(count));
  for (std::size_t r = 0; r < count; ++r) keys.col(static_cast<Eigen::Index>(r)) = positional_key(r, dim);
  return keys;
}

std::vector<std::size_t> canonical_order(const ObservationSet& set) {
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Matrix& m = set.elements();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double x = m(r, static_cast<Eigen::Index>(a));
      const double y = m(r, static_cast<Eigen::Index>(b));
      if (x < y) return true;
      if (y < x) return false;
    }
    return false;
  });
  return order;
}

KeyAssignment assign_keys(const ObservationSet& set, std::size_t key_dim) {
  return {canonical_order(set), positional_keys(set.size(), key_dim)};
}

// ---- batching ----

SetBatch make_batch(std::span<const ObservationSet* const> sets) {
  SetBatch b;
  std::size_t total = 0;
  std::size_t dim = 0;
  for (const auto* s : sets) {
    total += s->size();
    if (s->size() > 0) {
      if (dim != 0 && s->dim() != dim) throw ConfigError("make_batch: sets have different element dimensions");
      dim = s->dim();
    }
  }
  b.elements.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(total));
  b.rank.reserve(total);
  b.owner.reserve(total);
  std::size_t col = 0;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const auto& set = *sets[s];
    b.cardinality.push_back(set.size());
    b.offset.push_back(col);
    const auto order = canonical_order(set);
    for (std::size_t r = 0; r < order.size(); ++r) {
      b.elements.col(static_cast<Eigen::Index>(col++)) = set.elements().col(static_cast<Eigen::Index>(order[r]));
      b.rank.push_back(r);
      b.owner.push_back(s);
    }
  }
  return b;
}

SetBatch make_batch(std::span<const ObservationSet> sets) {
  std::vector<const ObservationSet*> ptrs;
  ptrs.reserve(sets.size());
  for (const auto& s : sets) ptrs.push_back(&s);
  return make_batch(std::span<const ObservationSet* const>(ptrs));
}

// ---- encoder ----

namespace {

void check_capacity(const SetAutoencoderParams& params, const SetBatch& batch) {
  for (auto n : batch.cardinality) {
    if (n > params.max_cardinality()) {
      throw CapacityError("set of cardinality " + std::to_string(n) + " exceeds the maximum of " +
                          std::to_string(params.max_cardinality()));
    }
  }
  if (batch.num_elements() > 0 && static_cast<std::size_t>(batch.elements.rows()) != params.element_dim()) {
    throw ConfigError("set elements have dimension " + std::to_string(batch.elements.rows()) +
                      ", autoencoder expects " + std::to_string(params.element_dim()));
  }
}

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

Matrix encode(const SetAutoencoderParams& params, const SetBatch& batch, EncoderTape* tape) {
  check_capacity(params, batch);
  const auto latent = idx(params.latent_dim());
  const Matrix keys = positional_keys(params.max_cardinality(), params.key_dim());
  Matrix rank_keys = nn::forward(params.key_encoder, keys, tape ? &tape->key_tape : nullptr);
  Matrix values(latent, 0);
  if (batch.num_elements() > 0) {
    values = nn::forward(params.value_encoder, batch.elements, tape ? &tape->value_tape : nullptr);
  } else if (tape) {
    tape->value_tape.clear();
  }

  Matrix z = Matrix::Zero(latent, idx(batch.num_sets()));
  for (std::size_t i = 0; i < batch.num_elements(); ++i) {
    z.col(idx(batch.owner[i])) += rank_keys.col(idx(batch.rank[i])).cwiseProduct(values.col(idx(i)));
  }
  for (std::size_t s = 0; s < batch.num_sets(); ++s) {
    z.col(idx(s)) += params.cardinality_embedding.row(idx(batch.cardinality[s])).transpose();
  }
  if (tape) {
    tape->rank_keys = std::move(rank_keys);
    tape->values = std::move(values);
  }
  return z;
}

Vector encode(const SetAutoencoderParams& params, const ObservationSet& set) {
  const ObservationSet* one[] = {&set};
  return encode(params, make_batch(std::span<const ObservationSet* const>(one))).col(0);
}

void encode_backward(const SetAutoencoderParams& params, const SetBatch& batch, const EncoderTape& tape,
                     const Matrix& latent_grad, SetAutoencoderParams& grads) {
  if (tape.key_tape.empty()) throw UsageError("encode_backward: no forward pass recorded");
  Matrix d_rank_keys = Matrix::Zero(tape.rank_keys.rows(), tape.rank_keys.cols());
  Matrix d_values(tape.values.rows(), tape.values.cols());
  for (std::size_t i = 0; i < batch.num_elements(); ++i) {
    const auto g = latent_grad.col(idx(batch.owner[i]));
    d_rank_keys.col(idx(batch.rank[i])) += g.cwiseProduct(tape.values.col(idx(i)));
    d_values.col(idx(i)) = g.cwiseProduct(tape.rank_keys.col(idx(batch.rank[i])));
  }
  for (std::size_t s = 0; s < batch.num_sets(); ++s) {
    grads.cardinality_embedding.row(idx(batch.cardinality[s])) += latent_grad.col(idx(s)).transpose();
  }
  nn::backward(params.key_encoder, tape.key_tape, d_rank_keys, grads.key_encoder);
  if (batch.num_elements() > 0) nn::backward(params.value_encoder, tape.value_tape, d_values, grads.value_encoder);
}

// ---- decoder ----

std::size_t predict_cardinality(const SetAutoencoderParams& params, const Vector& latent) {
  const Vector logits = nn::forward(params.cardinality_decoder, latent);
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<std::size_t>(best);
}

ObservationSet decode(const SetAutoencoderParams& params, const Vector& latent) {
  const std::size_t n = predict_cardinality(params, latent);
  if (n == 0) return ObservationSet(params.element_dim());
  const Matrix keys = positional_keys(params.max_cardinality(), params.key_dim());
  const Matrix queries = nn::forward(params.query_encoder, keys);
  Matrix h(queries.rows(), idx(n));
  for (std::size_t i = 0; i < n; ++i) h.col(idx(i)) = queries.col(idx(i)).cwiseProduct(latent);
  return ObservationSet(nn::forward(params.element_decoder, h));
}

// ---- loss ----

BatchLoss reconstruction_loss(const SetAutoencoderParams& params, const SetBatch& batch,
                              SetAutoencoderParams* grads) {
  const std::size_t n_sets = batch.num_sets();
  if (n_sets == 0) throw ConfigError("reconstruction_loss: empty batch");
  EncoderTape enc_tape;
  const Matrix z = encode(params, batch, grads ? &enc_tape : nullptr);

  nn::MlpTape card_tape;
  const Matrix logits = nn::forward(params.cardinality_decoder, z, grads ? &card_tape : nullptr);

  const Matrix keys = positional_keys(params.max_cardinality(), params.key_dim());
  nn::MlpTape query_tape;
  const Matrix queries = nn::forward(params.query_encoder, keys, grads ? &query_tape : nullptr);

  const std::size_t n_elem = batch.num_elements();
  Matrix h(z.rows(), idx(n_elem));
  for (std::size_t i = 0; i < n_elem; ++i) {
    h.col(idx(i)) = queries.col(idx(batch.rank[i])).cwiseProduct(z.col(idx(batch.owner[i])));
  }
  nn::MlpTape dec_tape;
  Matrix recon;
  if (n_elem > 0) recon = nn::forward(params.element_decoder, h, grads ? &dec_tape : nullptr);

  BatchLoss out;
  out.per_set.resize(n_sets);
  const double dim = static_cast<double>(params.element_dim());
  const double inv_sets = 1.0 / static_cast<double>(n_sets);

  Matrix d_recon;
  if (n_elem > 0) {
    const Matrix diff = recon - batch.elements;
    for (std::size_t s = 0; s < n_sets; ++s) {
      const auto n = batch.cardinality[s];
      if (n == 0) continue;
      const double sq = diff.middleCols(idx(batch.offset[s]), idx(n)).squaredNorm();
      out.squared_error_sum += sq;
      out.per_set[s].element = sq / (static_cast<double>(n) * dim);
    }
    if (grads) {
      d_recon = diff;
      for (std::size_t s = 0; s < n_sets; ++s) {
        const auto n = batch.cardinality[s];
        if (n == 0) continue;
        d_recon.middleCols(idx(batch.offset[s]), idx(n)) *= 2.0 * inv_sets / (static_cast<double>(n) * dim);
      }
    }
  }

  Matrix d_logits(logits.rows(), logits.cols());
  for (std::size_t s = 0; s < n_sets; ++s) {
    const auto col = logits.col(idx(s));
    const double m = col.maxCoeff();
    const Vector e = (col.array() - m).exp().matrix();
    const double sum = e.sum();
    const auto target = idx(batch.cardinality[s]);
    out.per_set[s].cardinality = (m + std::log(sum)) - col[target];
    Eigen::Index best = 0;
    col.maxCoeff(&best);
    if (best == target) ++out.cardinality_hits;
    if (grads) {
      d_logits.col(idx(s)) = e / sum;
      d_logits(target, idx(s)) -= 1.0;
      d_logits.col(idx(s)) *= inv_sets;
    }
  }

  for (auto& l : out.per_set) {
    l.total = l.element + l.cardinality;
    out.mean.element += l.element * inv_sets;
    out.mean.cardinality += l.cardinality * inv_sets;
  }
  out.mean.total = out.mean.element + out.mean.cardinality;
  double spread = 0.0;
  for (const auto& l : out.per_set) spread += (l.total - out.mean.total) * (l.total - out.mean.total) * inv_sets;
  out.mean.total_std = std::sqrt(spread);

  if (grads) {
    Matrix d_z = nn::backward(params.cardinality_decoder, card_tape, d_logits, grads->cardinality_decoder);
    if (n_elem > 0) {
      const Matrix d_h = nn::backward(params.element_decoder, dec_tape, d_recon, grads->element_decoder);
      Matrix d_queries = Matrix::Zero(queries.rows(), queries.cols());
      for (std::size_t i = 0; i < n_elem; ++i) {
        const auto r = idx(batch.rank[i]);
        const auto s = idx(batch.owner[i]);
        d_queries.col(r) += d_h.col(idx(i)).cwiseProduct(z.col(s));
        d_z.col(s) += d_h.col(idx(i)).cwiseProduct(queries.col(r));
      }
      nn::backward(params.query_encoder, query_tape, d_queries, grads->query_encoder);
    }
    encode_backward(params, batch, enc_tape, d_z, *grads);
  }
  out.latents = z;
  return out;
}

LossBreakdown reconstruction_loss(const SetAutoencoderParams& params, const ObservationSet& set) {
  const ObservationSet* one[] = {&set};
  return reconstruction_loss(params, make_batch(std::span<const ObservationSet* const>(one))).per_set[0];
}

// ---- training ----

TrainResult train(SetAutoencoderParams params, std::span<const ObservationSet> dataset,
                  const TrainOptions& options) {
  if (dataset.empty()) throw ConfigError("set autoencoder training: empty dataset");
  if (options.batch_size == 0) throw ConfigError("set autoencoder training: batch size must be positive");
  Rng rng(options.seed);
  nn::AdamState adam(nn::AdamConfig{.lr = options.learning_rate});
  TrainResult result;
  result.history.reserve(options.iterations);
  std::vector<const ObservationSet*> picks(options.batch_size);
  SetAutoencoderParams grads = params.zeros_like();
  constexpr double kPi = 3.14159265358979323846;
  for (std::size_t it = 0; it < options.iterations; ++it) {
    for (auto& p : picks) p = &dataset[uniform_index(rng, dataset.size())];
    const SetBatch batch = make_batch(std::span<const ObservationSet* const>(picks));
    set_zero(grads);
    const BatchLoss loss = reconstruction_loss(params, batch, &grads);
    if (!std::isfinite(loss.mean.total)) {
      throw NumericalError("set autoencoder training diverged at iteration " + std::to_string(it) +
                           " (element loss " + format_double(loss.mean.element) + ", cardinality loss " +
                           format_double(loss.mean.cardinality) + ")");
    }
    const double progress = options.iterations > 1 ? static_cast<double>(it) / static_cast<double>(options.iterations - 1) : 0.0;
    const double f = options.final_lr_fraction;
    adam.config.lr = options.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(kPi * progress)));
    nn::adam_step(params, grads, adam);
    result.history.push_back(loss.mean);
    if (options.on_iteration) options.on_iteration(it, loss.mean);
  }
  result.params = std::move(params);
  return result;
}

EvaluationSummary evaluate(const SetAutoencoderParams& params, std::span<const ObservationSet> sets,
                           std::size_t batch_size) {
  EvaluationSummary out;
  if (sets.empty()) return out;
  double loss_sum = 0.0;
  double sq_sum = 0.0;
  std::size_t entries = 0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < sets.size(); start += batch_size) {
    const auto chunk = sets.subspan(start, std::min(batch_size, sets.size() - start));
    const SetBatch batch = make_batch(chunk);
    const BatchLoss loss = reconstruction_loss(params, batch);
    loss_sum += loss.mean.total * static_cast<double>(chunk.size());
    sq_sum += loss.squared_error_sum;
    entries += batch.num_elements() * params.element_dim();
    hits += loss.cardinality_hits;
  }
  out.mean_total_loss = loss_sum / static_cast<double>(sets.size());
  out.element_rmse = entries ? std::sqrt(sq_sum / static_cast<double>(entries)) : 0.0;
  out.cardinality_accuracy = static_cast<double>(hits) / static_cast<double>(sets.size());
  return out;
}

void write_loss_trace(const std::filesystem::path& path, std::span<const LossBreakdown> history) {
  CsvTable t;
  t.header = {"iteration", "total_loss", "element_loss", "card_loss", "total_loss_std"};
  t.rows.reserve(history.size());
  for (std::size_t i = 0; i < history.size(); ++i) {
    t.rows.push_back({std::to_string(i), format_double(history[i].total), format_double(history[i].element),
                      format_double(history[i].cardinality), format_double(history[i].total_std)});
  }
  write_csv(path, t);
}

std::vector<LossBreakdown> read_loss_trace(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  std::vector<LossBreakdown> out;
  out.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out.push_back({t.number(r, "total_loss"), t.number(r, "element_loss"), t.number(r, "card_loss"),
                   t.number(r, "total_loss_std")});
  }
  return out;
}

}  // namespace agnocomm::pisa

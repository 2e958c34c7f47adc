#include <agnocomm/comms.hpp>

namespace agnocomm::comms {

Neighborhood neighborhood(std::span<const Vec2> positions, double epsilon, std::size_t i) {
  if (i >= positions.size()) throw ConfigError("neighborhood: agent index out of range");
  if (epsilon < 0) throw ConfigError("neighborhood: epsilon must be >= 0");
  Neighborhood n{i, {}};
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (j != i && (positions[i] - positions[j]).norm() <= epsilon) n.members.push_back(j);
  }
  return n;
}

ObservationSet assemble_observation_set(std::size_t i, const ObservationSet& joint, const Neighborhood& nbhd) {
  if (i >= joint.size()) throw ConfigError("assemble_observation_set: agent index out of range");
  Matrix m(static_cast<Eigen::Index>(joint.dim()), static_cast<Eigen::Index>(nbhd.members.size() + 1));
  m.col(0) = joint.elements().col(static_cast<Eigen::Index>(i));
  for (std::size_t k = 0; k < nbhd.members.size(); ++k) {
    m.col(static_cast<Eigen::Index>(k + 1)) = joint.elements().col(static_cast<Eigen::Index>(nbhd.members[k]));
  }
  return ObservationSet(std::move(m));
}

AgentSets agent_observation_sets(const ObservationSet& joint, std::span<const Vec2> positions, double epsilon) {
  AgentSets out;
  const std::size_t n = joint.size();
  if (std::isinf(epsilon)) {
    out.sets.push_back(joint);
    out.set_of_agent.assign(n, 0);
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.sets.push_back(assemble_observation_set(i, joint, neighborhood(positions, epsilon, i)));
    out.set_of_agent.push_back(i);
  }
  return out;
}

Vector policy_input(const Vector& latent, const Vector& own_obs) {
  Vector v(latent.size() + own_obs.size());
  v << latent, own_obs;
  return v;
}

void LossWindow::record(double loss) {
  pending_sum_ += loss;
  ++pending_count_;
}

void LossWindow::record(std::span<const double> losses) {
  for (double l : losses) record(l);
}

void LossWindow::end_iteration() {
  if (pending_count_ == 0) return;
  history_.push_back(pending_sum_ / static_cast<double>(pending_count_));
  while (history_.size() > capacity_) history_.pop_front();
  pending_sum_ = 0.0;
  pending_count_ = 0;
}

double LossWindow::pending_mean() const {
  return pending_count_ ? pending_sum_ / static_cast<double>(pending_count_) : 0.0;
}

CommLayer::CommLayer(CommConfig config, std::shared_ptr<const pisa::SetAutoencoderParams> encoder,
                     std::size_t window)
    : config_(config), encoder_(std::move(encoder)), window_(window) {
  if (!encoder_) throw ConfigError("CommLayer: no encoder");
  if (config_.epsilon < 0) throw ConfigError("comm.epsilon must be >= 0");
}

Vector CommLayer::encode_state(const ObservationSet& set) {
  auto enc = encode_states(std::span<const ObservationSet>(&set, 1), true);
  return enc.latents.col(0);
}

CommLayer::Encoded CommLayer::encode_states(std::span<const ObservationSet> sets, bool record_loss) {
  Encoded out;
  if (sets.empty()) {
    out.latents.resize(static_cast<Eigen::Index>(latent_dim()), 0);
    return out;
  }
  const auto batch = pisa::make_batch(sets);
  if (!record_loss) {
    out.latents = pisa::encode(*encoder_, batch);
    return out;
  }
  auto loss = pisa::reconstruction_loss(*encoder_, batch);
  out.latents = std::move(loss.latents);
  out.losses = std::move(loss.per_set);
  for (const auto& l : out.losses) window_.record(l.total);
  return out;
}

}  // namespace agnocomm::comms

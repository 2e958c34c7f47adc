#include <agnocomm/world.hpp>

#include <agnocomm/csv.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace agnocomm::world {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

Vec2 random_point(const EnvConfig& c, Rng& rng) {
  return {uniform(rng, -c.arena_half_width, c.arena_half_width), uniform(rng, -c.arena_half_width, c.arena_half_width)};
}

// Clamps to the arena and zeroes the velocity component pushing into a wall.
void clamp_to_arena(Vec2& p, Vec2* v, double half_width) {
  for (int k = 0; k < 2; ++k) {
    if (p[k] > half_width) {
      p[k] = half_width;
      if (v && (*v)[k] > 0) (*v)[k] = 0;
    } else if (p[k] < -half_width) {
      p[k] = -half_width;
      if (v && (*v)[k] < 0) (*v)[k] = 0;
    }
  }
}

}  // namespace

std::string_view to_string(TaskId task) {
  switch (task) {
    case TaskId::discovery:
      return "discovery";
    case TaskId::flocking:
      return "flocking";
    case TaskId::pursuit_evasion:
      return "pursuit_evasion";
  }
  return "?";
}

TaskId parse_task(std::string_view name) {
  if (name == "discovery") return TaskId::discovery;
  if (name == "flocking") return TaskId::flocking;
  if (name == "pursuit_evasion") return TaskId::pursuit_evasion;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

void EnvConfig::validate() const {
  if (n_agents < 1) throw ConfigError("env.n_agents must be >= 1");
  if (n_lidar_rays < 1) throw ConfigError("env.n_lidar_rays must be >= 1");
  if (!(arena_half_width > 0) || !(dt > 0) || !(max_speed > 0) || !(lidar_range > 0) || !(discovery_radius > 0) ||
      !(agent_radius > 0) || !(target_radius > 0) || !(contact_distance > 0)) {
    throw ConfigError("env: all lengths and dt must be positive");
  }
  if (drag < 0 || drag >= 1) throw ConfigError("env.drag must be in [0, 1)");
  if (episode_length < 1) throw ConfigError("env.episode_length must be >= 1");
  if (n_targets < 1) throw ConfigError("env.n_targets must be >= 1");
  if (agents_per_target < 1) throw ConfigError("env.agents_per_target must be >= 1");
}

WorldState random_initial_state(const EnvConfig& c, Rng& rng) {
  WorldState s;
  for (std::size_t i = 0; i < c.n_agents; ++i) {
    s.positions.push_back(random_point(c, rng));
    s.velocities.push_back(Vec2::Zero());
  }
  for (std::size_t t = 0; t < c.n_targets; ++t) s.targets.push_back(random_point(c, rng));
  const double heading = uniform(rng, 0.0, kTwoPi);
  s.lead_velocity = c.lead_speed * Vec2(std::cos(heading), std::sin(heading));
  return s;
}

WorldState sample_state(const EnvConfig& c, Rng& rng) {
  WorldState s = random_initial_state(c, rng);
  for (auto& v : s.velocities) {
    const double r = c.max_speed * std::sqrt(uniform(rng, 0.0, 1.0));
    const double a = uniform(rng, 0.0, kTwoPi);
    v = r * Vec2(std::cos(a), std::sin(a));
  }
  return s;
}

ForageWorld::ForageWorld(EnvConfig config, TaskId task) : config_(config), task_(task), rng_(config.seed) {
  config_.validate();
  state_ = random_initial_state(config_, rng_);
}

ObservationSet ForageWorld::reset() {
  state_ = random_initial_state(config_, rng_);
  return observe_all(state_, config_);
}

StepResult ForageWorld::step(const Matrix& actions) {
  const auto& c = config_;
  if (actions.rows() != 2 || static_cast<std::size_t>(actions.cols()) != c.n_agents) {
    throw ConfigError("step: actions must be [2 x n_agents]");
  }
  if (!actions.allFinite()) throw NumericalError("step: non-finite action");

  for (std::size_t i = 0; i < c.n_agents; ++i) {
    const Vec2 a = actions.col(static_cast<Eigen::Index>(i)).cwiseMax(-1.0).cwiseMin(1.0);
    Vec2& v = state_.velocities[i];
    Vec2& p = state_.positions[i];
    v = (1.0 - c.drag) * v + a * c.dt;
    const double speed = v.norm();
    if (speed > c.max_speed) v *= c.max_speed / speed;
    p += v * c.dt;
    clamp_to_arena(p, &v, c.arena_half_width);
  }

  StepResult out;
  switch (task_) {
    case TaskId::discovery: {
      const auto covered = covered_targets(state_, c);
      out.reward = static_cast<double>(covered.size());
      for (auto t : covered) state_.targets[t] = random_point(c, rng_);
      break;
    }
    case TaskId::flocking: {
      // Lead target: constant speed, slowly wandering heading, reflects off walls.
      Vec2& lead = state_.targets[0];
      Vec2& lv = state_.lead_velocity;
      const double turn = 0.2 * standard_normal(rng_);
      lv = Eigen::Rotation2Dd(turn) * lv;
      lead += lv * c.dt;
      for (int k = 0; k < 2; ++k) {
        if (std::abs(lead[k]) > c.arena_half_width) {
          lead[k] = std::copysign(c.arena_half_width, lead[k]);
          lv[k] = -lv[k];
        }
      }
      out.reward = reward_flocking(state_, c);
      break;
    }
    case TaskId::pursuit_evasion: {
      Vec2& evader = state_.targets[0];
      evader += c.evader_speed * c.dt * evader_heading(state_);
      clamp_to_arena(evader, nullptr, c.arena_half_width);
      out.reward = reward_pursuit_evasion(state_, c);
      out.done = evader_captured(state_, c);
      break;
    }
  }
  ++state_.step;
  out.done = out.done || state_.step >= c.episode_length;
  out.observations = observe_all(state_, c);
  return out;
}

double ray_distance(const Vec2& origin, const Vec2& direction, std::span<const Vec2> centers, double radius,
                    double range) {
  double best = range;
  const double r2 = radius * radius;
  for (const auto& center : centers) {
    const Vec2 f = center - origin;
    const double along = f.dot(direction);
    const double perp2 = f.squaredNorm() - along * along;
    if (perp2 > r2) continue;
    const double half_chord = std::sqrt(r2 - perp2);
    const double entry = along - half_chord;
    double hit;
    if (entry >= 0.0) {
      hit = entry;
    } else if (along + half_chord >= 0.0) {
      hit = 0.0;  // origin inside the disc
    } else {
      continue;  // disc behind the ray
    }
    best = std::min(best, hit);
  }
  return best;
}

Vector lidar_scan(const WorldState& state, const EnvConfig& c, std::size_t agent, LidarLayer layer) {
  if (agent >= state.positions.size()) throw ConfigError("lidar_scan: agent index out of range");
  std::vector<Vec2> others;
  double radius;
  if (layer == LidarLayer::targets) {
    others = state.targets;
    radius = c.target_radius;
  } else {
    for (std::size_t j = 0; j < state.positions.size(); ++j) {
      if (j != agent) others.push_back(state.positions[j]);
    }
    radius = c.agent_radius;
  }
  Vector out(static_cast<Eigen::Index>(c.n_lidar_rays));
  const Vec2& origin = state.positions[agent];
  for (std::size_t r = 0; r < c.n_lidar_rays; ++r) {
    const double angle = kTwoPi * static_cast<double>(r) / static_cast<double>(c.n_lidar_rays);
    out[static_cast<Eigen::Index>(r)] =
        ray_distance(origin, Vec2(std::cos(angle), std::sin(angle)), others, radius, c.lidar_range);
  }
  return out;
}

Vector observe(const WorldState& state, const EnvConfig& c, std::size_t agent) {
  const auto rays = static_cast<Eigen::Index>(c.n_lidar_rays);
  Vector o(static_cast<Eigen::Index>(c.observation_dim()));
  o.segment<2>(0) = state.positions[agent];
  o.segment<2>(2) = state.velocities[agent];
  o.segment(4, rays) = lidar_scan(state, c, agent, LidarLayer::targets);
  o.segment(4 + rays, rays) = lidar_scan(state, c, agent, LidarLayer::agents);
  return o;
}

ObservationSet observe_all(const WorldState& state, const EnvConfig& c) {
  Matrix m(static_cast<Eigen::Index>(c.observation_dim()), static_cast<Eigen::Index>(state.positions.size()));
  for (std::size_t i = 0; i < state.positions.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = observe(state, c, i);
  return ObservationSet(std::move(m));
}

std::vector<std::size_t> covered_targets(const WorldState& state, const EnvConfig& c) {
  std::vector<std::size_t> out;
  const double r2 = c.discovery_radius * c.discovery_radius;
  for (std::size_t t = 0; t < state.targets.size(); ++t) {
    std::size_t count = 0;
    for (const auto& p : state.positions) {
      if ((p - state.targets[t]).squaredNorm() <= r2) ++count;
    }
    if (count >= c.agents_per_target) out.push_back(t);
  }
  return out;
}

double reward_discovery(const WorldState& next, const EnvConfig& c) {
  return static_cast<double>(covered_targets(next, c).size());
}

double reward_flocking(const WorldState& s, const EnvConfig& c) {
  const Vec2& lead = s.targets[0];
  double dist = 0.0;
  for (const auto& p : s.positions) dist += (p - lead).norm();
  dist /= static_cast<double>(s.positions.size());
  std::size_t contacts = 0;
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    for (std::size_t j = i + 1; j < s.positions.size(); ++j) {
      if ((s.positions[i] - s.positions[j]).norm() < c.contact_distance) ++contacts;
    }
  }
  return -dist - c.collision_penalty * static_cast<double>(contacts);
}

bool evader_captured(const WorldState& s, const EnvConfig& c) {
  for (const auto& p : s.positions) {
    if ((p - s.targets[0]).norm() <= c.discovery_radius) return true;
  }
  return false;
}

double reward_pursuit_evasion(const WorldState& s, const EnvConfig& c) {
  return evader_captured(s, c) ? 10.0 : -0.01;
}

Vec2 evader_heading(const WorldState& s) {
  const Vec2& e = s.targets[0];
  double best = std::numeric_limits<double>::infinity();
  Vec2 away = Vec2::Zero();
  for (const auto& p : s.positions) {
    const Vec2 d = e - p;
    const double n = d.norm();
    if (n < best) {
      best = n;
      away = n > 0 ? Vec2(d / n) : Vec2(1.0, 0.0);
    }
  }
  return away;
}

void write_trajectory(const std::filesystem::path& path, std::span<const TrajectoryRow> rows) {
  CsvTable t;
  t.header = {"step", "agent", "x", "y", "vx", "vy", "reward"};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.step), std::to_string(r.agent), format_double(r.position.x()),
                      format_double(r.position.y()), format_double(r.velocity.x()), format_double(r.velocity.y()),
                      format_double(r.reward)});
  }
  write_csv(path, t);
}

}  // namespace agnocomm::world

#pragma once

// ForageWorld: a 2D double-integrator swarm arena. Three tasks share the same
// dynamics and observation layout and differ only in their global reward:
//
//   discovery        +1 per target with >= agents_per_target agents inside
//                    discovery_radius; covered targets respawn at random
//   flocking         -mean distance to a drifting lead target, minus a penalty
//                    per agent pair closer than contact_distance
//   pursuit_evasion  targets[0] is a scripted evader fleeing the nearest agent;
//                    +10 and episode end on capture, -0.01 per step otherwise
//
// Observation of agent i: [x, y, vx, vy, lidar to targets (n_rays),
// lidar to other agents (n_rays)].

#include <agnocomm/set_autoencoder.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace agnocomm::world {

using pisa::ObservationSet;

enum class TaskId { discovery, flocking, pursuit_evasion };

std::string_view to_string(TaskId task);
TaskId parse_task(std::string_view name);

struct EnvConfig {
  std::size_t n_agents = 3;
  double arena_half_width = 1.0;
  double dt = 0.1;
  double max_speed = 1.0;
  double drag = 0.1;  // fraction of velocity lost per step
  std::size_t n_lidar_rays = 12;
  double lidar_range = 0.5;
  std::size_t n_targets = 4;
  double discovery_radius = 0.35;
  std::size_t agents_per_target = 2;
  std::size_t episode_length = 100;
  double agent_radius = 0.05;
  double target_radius = 0.05;
  double contact_distance = 0.1;
  double collision_penalty = 0.1;
  double lead_speed = 0.3;
  double evader_speed = 0.5;
  std::uint64_t seed = 0;

  std::size_t observation_dim() const { return 4 + 2 * n_lidar_rays; }
  // Throws ConfigError on out-of-range values.
  void validate() const;
};

struct WorldState {
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
  std::vector<Vec2> targets;
  Vec2 lead_velocity = Vec2::Zero();
  std::size_t step = 0;
};

struct StepResult {
  ObservationSet observations;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual ObservationSet reset() = 0;
  // actions: [2 x num_agents] accelerations, clipped to the unit box.
  virtual StepResult step(const Matrix& actions) = 0;
  virtual const WorldState& state() const = 0;
  virtual std::size_t num_agents() const = 0;
  virtual std::size_t observation_dim() const = 0;
};

class ForageWorld final : public Environment {
 public:
  ForageWorld(EnvConfig config, TaskId task);

  ObservationSet reset() override;
  StepResult step(const Matrix& actions) override;
  const WorldState& state() const override { return state_; }
  std::size_t num_agents() const override { return config_.n_agents; }
  std::size_t observation_dim() const override { return config_.observation_dim(); }

  const EnvConfig& config() const { return config_; }
  TaskId task() const { return task_; }
  // Replaces the state, e.g. to set up a scripted scenario.
  void set_state(WorldState state) { state_ = std::move(state); }

 private:
  EnvConfig config_;
  TaskId task_;
  WorldState state_;
  Rng rng_;
};

// Uniformly random agent/target positions, zero velocities.
WorldState random_initial_state(const EnvConfig& config, Rng& rng);
// Like random_initial_state but velocities uniform over the max_speed disc;
// used to sample the observation space without dynamics.
WorldState sample_state(const EnvConfig& config, Rng& rng);

// Distance along the ray to the nearest entity disc, capped at `range`;
// 0 if the origin is inside a disc.
double ray_distance(const Vec2& origin, const Vec2& direction, std::span<const Vec2> centers, double radius,
                    double range);

enum class LidarLayer { targets, agents };

// Ray i points at angle 2*pi*i/n_rays. The agents layer skips the scanning
// agent itself.
Vector lidar_scan(const WorldState& state, const EnvConfig& config, std::size_t agent, LidarLayer layer);

Vector observe(const WorldState& state, const EnvConfig& config, std::size_t agent);
ObservationSet observe_all(const WorldState& state, const EnvConfig& config);

std::vector<std::size_t> covered_targets(const WorldState& state, const EnvConfig& config);
double reward_discovery(const WorldState& next, const EnvConfig& config);
double reward_flocking(const WorldState& state, const EnvConfig& config);
bool evader_captured(const WorldState& state, const EnvConfig& config);
double reward_pursuit_evasion(const WorldState& state, const EnvConfig& config);
// Unit vector the evader will move along: away from the nearest agent.
Vec2 evader_heading(const WorldState& state);

struct TrajectoryRow {
  std::size_t step;
  std::size_t agent;
  Vec2 position;
  Vec2 velocity;
  double reward;
};

// Columns: step,agent,x,y,vx,vy,reward
void write_trajectory(const std::filesystem::path& path, std::span<const TrajectoryRow> rows);

}  // namespace agnocomm::world

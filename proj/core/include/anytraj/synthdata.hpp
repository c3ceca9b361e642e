#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anytraj/rng.hpp"
#include "anytraj/types.hpp"

namespace anytraj::synth {

enum class DynamicsFamily : uint32_t {
  linear_push = 0,
  arc_transport = 1,
  two_phase_pick_place = 2,
};

const char* family_name(DynamicsFamily f);

struct DomainSpec {
  int domain_id = 0;
  int instruction_id = 0;
  DynamicsFamily family = DynamicsFamily::linear_push;
  double speed_scale = 1.0;  // embodiment analog: px per frame multiplier
  std::array<double, 3> background = {0.08, 0.08, 0.10};
  std::array<double, 3> target_color = {0.95, 0.75, 0.15};
  int distractor_count = 2;
  int image_size = 32;
  int episode_len = 24;
  bool in_domain = false;  // action labels recorded iff true
  // Optional fixed endpoints (pixel coords); NaN means sample from the seed.
  double fixed_start_x = std::numeric_limits<double>::quiet_NaN();
  double fixed_start_y = std::numeric_limits<double>::quiet_NaN();
  double fixed_goal_x = std::numeric_limits<double>::quiet_NaN();
  double fixed_goal_y = std::numeric_limits<double>::quiet_NaN();
};

struct ObjectState {
  double x = 0.0, y = 0.0;
  double grasp = 0.0;
};

// One synthetic rollout. Frames are H x W x 3 in [0,1], row-major
// (y, x, channel). Object states are exact analytic poses; tracks derive
// from them, never from pixels.
struct Episode {
  uint32_t domain_id = 0;
  uint32_t instruction_id = 0;
  uint32_t family = 0;
  uint64_t seed = 0;
  int32_t length = 0;  // T
  int32_t height = 0, width = 0;
  double goal_x = 0.0, goal_y = 0.0;
  double radius = 1.5;  // target half-extent, px
  double speed_scale = 1.0;
  std::vector<std::vector<double>> frames;  // T of H*W*3
  std::vector<ObjectState> states;          // T
  std::vector<Action> actions;              // T-1 when in-domain, else empty
  bool has_actions() const { return !actions.empty(); }
};

// Closed-loop analog of the generator: owns scene layout and object state,
// applies actions, renders frames. generate_episode() drives it with a
// scripted controller, so recorded actions replayed through step() reproduce
// the analytic states exactly.
class World {
 public:
  World(const DomainSpec& spec, uint64_t seed);

  const DomainSpec& spec() const { return spec_; }
  const ObjectState& state() const { return state_; }
  double goal_x() const { return goal_x_; }
  double goal_y() const { return goal_y_; }
  double pick_x() const { return pick_x_; }
  double pick_y() const { return pick_y_; }
  double radius() const { return radius_; }

  std::vector<double> render() const;
  // Background + distractors + goal marker, no target.
  std::vector<double> render_static() const;

  void step(const Action& a);
  // Target center within 2 px of the goal center.
  bool success() const;
  double goal_distance() const;

  // Scripted expert: the action that moves the object along its family's
  // nominal path for the current state.
  Action expert_action() const;

 private:
  DomainSpec spec_;
  ObjectState state_;
  double goal_x_, goal_y_;
  double pick_x_, pick_y_;  // two-phase waypoint; arc uses it as arc apex
  double radius_ = 1.5;
  double step_len_;  // nominal px per frame
  std::vector<std::array<double, 5>> distractors_;  // x, y, r, g, b
};

// action_noise > 0 adds Gaussian jitter (std in pixels) to the executed
// dx/dy, so the demonstration visits off-path states and the recorded
// expert reactions teach recovery. The recorded actions are the executed
// (jittered) ones, so replaying them still reproduces the episode's states;
// the noise is zero-mean, so their conditional mean remains the expert
// action. grasp is never jittered because it drives the expert's phase
// switch.
Episode generate_episode(const DomainSpec& spec, uint64_t task_seed,
                         double action_noise = 0.0);

// Analytic ground-truth tracks: points on the target footprint at the query
// frame are advected rigidly with it; everything else stays put.
TrajectoryPrediction ground_truth_tracks(const Episode& ep,
                                         const TrajectoryQuery& query,
                                         int64_t horizon);

// Samples K points with probability proportional to per-pixel temporal
// intensity variance over the clip (epsilon floor 1e-6, with replacement).
TrajectoryQuery sample_points_variance_filter(
    const std::vector<std::vector<double>>& frames, int height, int width,
    int64_t k, Rng& rng);

// sqrt(K) x sqrt(K) lattice cell centers; non-square K uses the nearest
// factorization rows >= cols (K=32 -> 8 rows x 4 cols).
TrajectoryQuery sample_points_grid(int64_t k, int height, int width);

// Binary episode file, little-endian: magic "ATEP", version, header fields,
// float32 frames, float64 states and actions.
void save_episode(const Episode& ep, const std::filesystem::path& path);
Episode load_episode(const std::filesystem::path& path);

struct ManifestEntry {
  std::string file;
  uint32_t domain_id = 0;
  uint32_t instruction_id = 0;
  std::string family;
  std::string split;        // "train" or "validation"
  std::string domain_kind;  // "in_domain" or "out_of_domain"
  uint64_t seed = 0;
};

struct DatasetManifest {
  uint64_t seed = 0;
  int in_domain_tasks = 0;
  int out_of_domain_tasks = 0;
  int episodes_per_task = 0;
  int image_size = 0;
  int episode_len = 0;
  std::string digest;  // fnv1a-64 over episode file bytes, hex
  std::vector<ManifestEntry> episodes;
  nlohmann::json params;  // full generation parameters, echoed

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct DatasetOptions {
  int in_domain_tasks = 2;
  int out_of_domain_tasks = 9;
  int episodes_per_task = 20;
  int validation_per_task = 4;
  int image_size = 32;
  int episode_len = 24;
  bool include_ood = true;  // false -> pure in-domain manifest
};

// Desk-preset domain specs: in-domain pick-place tasks first, then the
// out-of-domain mix of pushes and arc transports.
std::vector<DomainSpec> desk_domains(const DatasetOptions& opts);

DatasetManifest build_dataset(const std::vector<DomainSpec>& specs,
                              const DatasetOptions& opts, uint64_t seed,
                              const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

}  // namespace anytraj::synth

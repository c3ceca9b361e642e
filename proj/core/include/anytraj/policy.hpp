#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anytraj/block.hpp"
#include "anytraj/synthdata.hpp"
#include "anytraj/trackformer.hpp"
#include "anytraj/types.hpp"

namespace anytraj::policy {

enum class Conditioning { none, hand_drawn, adaptive };

const char* conditioning_name(Conditioning c);
Conditioning parse_conditioning(const std::string& s);

struct PolicyConfig {
  int frame_stack = 10;
  int fusion_depth = 2;
  int fusion_dim = 64;
  int fusion_heads = 4;
  int fusion_ff = 256;
  double dropout = 0.1;
  Conditioning mode = Conditioning::adaptive;
  int action_dim = 3;  // dx, dy, grasp logit
  int head_hidden = 64;
  int image_size = 32;
  int patch_size = 8;
  int horizon = 16;
  int num_points = 32;
  // Condition on analytic ground-truth tracks instead of the frozen model's
  // predictions during training (deployment always uses predictions).
  bool use_ground_truth_tracks = false;

  int n_patches() const {
    int g = image_size / patch_size;
    return g * g;
  }
  void validate() const;
  static PolicyConfig desk_preset();
};

void to_json(nlohmann::json& j, const PolicyConfig& c);
void from_json(const nlohmann::json& j, PolicyConfig& c);

// Fixed-value trajectory raster: first half of the horizon painted 128/255,
// second half 1.0; later timesteps overwrite earlier ones.
nn::Tensor render_hand_drawn_mask(const TrajectoryPrediction& traj, int h_img,
                                  int w_img);

// Each trajectory point at horizon step h carries the learnable scalar
// table[h]; gradient flows into the entries whose writes survive overlap.
nn::Tensor render_adaptive_mask(const TrajectoryPrediction& traj,
                                const nn::Tensor& table, int h_img, int w_img);

// Trajectory-guided behavior-cloning policy: track tokens and
// mask-conditioned image tokens fuse early in a small transformer; the
// pooled feature late-fuses with the raw flattened trajectory before the
// action head.
class PolicyNet {
 public:
  PolicyNet(PolicyConfig cfg, Rng& init_rng);

  const nn::Tensor& mask_table() const { return mask_table_; }

  // stacked_obs: frame_stack frames, oldest first, each image_size^2*3.
  nn::Tensor forward(const std::vector<std::vector<double>>& stacked_obs,
                     const TrajectoryPrediction& traj, Rng& rng,
                     bool training) const;
  Action act(const std::vector<std::vector<double>>& stacked_obs,
             const TrajectoryPrediction& traj) const;

  nn::NamedParams named_params() const;
  const PolicyConfig& config() const { return cfg_; }

 private:
  PolicyConfig cfg_;
  nn::Tensor img_w_, img_b_;  // 3-channel patch embedding
  nn::Tensor mask_w_;         // mask-channel patch embedding (4th channel)
  nn::Tensor pos_enc_;        // [frame_stack * n_patches, fusion_dim]
  nn::Tensor track_w_, track_b_, slot_enc_;
  std::vector<TransformerLayer> fusion_;
  nn::Tensor final_g_, final_b_;
  nn::Tensor head_w1_, head_b1_, head_w2_, head_b2_;
  nn::Tensor mask_table_;  // [horizon]
};

struct PolicyTrainOptions {
  int epochs = 12;
  int batch_size = 8;
  double lr = 5e-4;
  double weight_decay = 1e-4;
  int warmup_epochs = 1;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PolicyTrainOptions& o);
void from_json(const nlohmann::json& j, PolicyTrainOptions& o);

using MetricsFn = std::function<void(const nlohmann::json&)>;

struct PolicyTrainResult {
  double final_action_mse = 0.0;
};

// Behavior cloning on action-labeled demos; the trajectory model stays
// frozen (its parameters are not registered with the optimizer and its
// predictions enter the policy graph as constants). Queries use grid
// sampling.
PolicyTrainResult train_policy(PolicyNet& policy,
                               const track::Trackformer& frozen_traj,
                               const std::vector<synth::Episode>& demos,
                               const PolicyTrainOptions& opts,
                               const MetricsFn& on_metrics = nullptr);

// Extra noise-injected expert demonstrations for behavior cloning: per_task
// episodes per in-domain spec, executed with Gaussian action jitter so the
// demos cover off-path states (and more start/goal geometries) than the
// fixed dataset provides. Deterministic in seed.
std::vector<synth::Episode> augment_demos(
    const std::vector<synth::DomainSpec>& specs, int per_task,
    double action_noise, uint64_t seed);

// Predict tracks for an arbitrary number of query points through a model
// whose track-slot count is fixed: the query is split into model-sized
// chunks (the last chunk padded by repeating its final point) and the chunk
// predictions are stitched back together. Lets the policy condition on a
// denser grid than the trajectory model's native K.
TrajectoryPrediction predict_chunked(const track::Trackformer& model,
                                     const std::vector<double>& image,
                                     const TrajectoryQuery& query,
                                     int instruction_id);

struct RolloutRecord {
  int task_id = 0;
  uint64_t seed = 0;
  int steps = 0;
  bool success = false;
  double final_distance = 0.0;

  nlohmann::json to_json() const;
};

RolloutRecord rollout(const PolicyNet& policy,
                      const track::Trackformer& traj_model,
                      synth::World& world, int max_steps);

// Scripted-expert baseline through the same loop.
RolloutRecord rollout_expert(synth::World& world, int max_steps);

}  // namespace anytraj::policy

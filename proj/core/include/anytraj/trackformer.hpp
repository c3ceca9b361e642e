#pragma once

#include <functional>
#include <vector>

#include <json.hpp>

#include "anytraj/block.hpp"
#include "anytraj/synthdata.hpp"
#include "anytraj/types.hpp"

namespace anytraj::track {

struct TrackformerConfig {
  int depth = 8;
  int model_dim = 384;
  int heads = 6;
  int ff_dim = 1536;
  double dropout = 0.2;
  std::vector<int> moe_layer_indices = {1, 5, 8};  // 1-based
  int num_experts = 4;
  int top_k = 1;
  int horizon = 16;     // H
  int num_points = 32;  // K
  double lambda_tra = 1.0;
  double lambda_lo_ba = 0.0;
  double lambda_z = 1e-4;
  int image_size = 128;
  int patch_size = 16;
  int num_instructions = 16;
  bool use_slot_encoding = true;
  bool gate_noise = false;
  double gate_noise_scale = 1.0;

  int n_patches() const {
    int g = image_size / patch_size;
    return g * g;
  }
  int seq_len() const { return 1 + n_patches() + num_points; }
  bool layer_is_moe(int layer_1based) const;
  void validate() const;

  static TrackformerConfig paper_preset();
  static TrackformerConfig desk_preset();
  // Harder-mix placement: adds layers 2 and 7 to the default {1,5,8}.
  static std::vector<int> extended_moe_layers() { return {1, 2, 5, 7, 8}; }
};

void to_json(nlohmann::json& j, const TrackformerConfig& c);
void from_json(const nlohmann::json& j, TrackformerConfig& c);

// Exact parameter count of a model built from cfg (closed form).
int64_t trackformer_param_count(const TrackformerConfig& cfg);

// Any-point trajectory prediction transformer. Token sequence is
// [instruction | image patches | track queries]; layers listed in
// moe_layer_indices use a sparsely-gated MoE FFN. The decode head predicts
// per-point displacement from the query position for each horizon step.
class Trackformer {
 public:
  Trackformer(TrackformerConfig cfg, Rng& init_rng);

  struct ForwardResult {
    nn::Tensor pred;  // [K, 2H] absolute normalized coordinates
    TrajectoryPrediction prediction;
    std::vector<moe::MoEForwardResult> moe_outs;
  };

  ForwardResult forward(const std::vector<double>& image,
                        const TrajectoryQuery& query, int instruction_id,
                        Rng& rng, bool training) const;

  TrajectoryPrediction predict(const std::vector<double>& image,
                               const TrajectoryQuery& query,
                               int instruction_id) const;

  // Overrides the routing-noise std of every MoE gate; the training loop
  // uses this to anneal exploration noise to zero over the schedule.
  void set_gate_noise_scale(double scale);

  struct LossBreakdown {
    nn::Tensor total;
    nn::Tensor tra, lo_ba, z;  // unweighted components
  };
  LossBreakdown total_loss(const nn::Tensor& pred, const nn::Tensor& target,
                           const std::vector<moe::MoEForwardResult>& moe_outs)
      const;

  nn::NamedParams named_params() const;
  int64_t param_count() const;
  const TrackformerConfig& config() const { return cfg_; }
  const std::vector<TransformerLayer>& layers() const { return layers_; }
  std::vector<TransformerLayer>& layers() { return layers_; }

 private:
  TrackformerConfig cfg_;
  nn::Tensor patch_w_, patch_b_, pos_enc_;
  nn::Tensor instr_table_;
  nn::Tensor track_w_, track_b_, slot_enc_;
  std::vector<TransformerLayer> layers_;
  nn::Tensor final_g_, final_b_;
  nn::Tensor head_w_, head_b_;
};

// Ground-truth tracks laid out to match the decode head: [K, 2H].
nn::Tensor tracks_to_target(const TrajectoryPrediction& gt);

struct TrackTrainOptions {
  int epochs = 40;
  int batch_size = 8;
  int steps_per_epoch = 0;  // 0: one pass over the training episodes
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int warmup_epochs = 5;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrackTrainOptions& o);
void from_json(const nlohmann::json& j, TrackTrainOptions& o);

struct EpochMetrics {
  int epoch = 0;
  double l_tra = 0.0, l_lo_ba = 0.0, l_z = 0.0, lr = 0.0;
  std::vector<std::vector<double>> q_per_layer, p_per_layer;
};

using MetricsFn = std::function<void(const nlohmann::json&)>;

// AdamW + cosine schedule with linear warm-up. Deterministic under a fixed
// seed: all sampling, dropout, and gating noise derive from named streams.
EpochMetrics train_trackformer(Trackformer& model,
                               const std::vector<synth::Episode>& episodes,
                               const std::vector<size_t>& train_idx,
                               const TrackTrainOptions& opts,
                               const MetricsFn& on_metrics = nullptr);

}  // namespace anytraj::track

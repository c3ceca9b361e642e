#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "anytraj/policy.hpp"
#include "anytraj/synthdata.hpp"
#include "anytraj/trackformer.hpp"

namespace anytraj::exp {

// Fully resolved run configuration. Parsing rejects unknown keys at every
// level; the resolved form is echoed into each run directory so a run can be
// reproduced from its own output.
struct ExperimentConfig {
  uint64_t seed = 0;
  std::string out_dir = "run";
  synth::DatasetOptions dataset;
  track::TrackformerConfig trackformer = track::TrackformerConfig::desk_preset();
  track::TrackTrainOptions track_train;
  policy::PolicyConfig policy = policy::PolicyConfig::desk_preset();
  policy::PolicyTrainOptions policy_train;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

nlohmann::json dataset_options_to_json(const synth::DatasetOptions& o);
synth::DatasetOptions dataset_options_from_json(const nlohmann::json& j);

// Parameters exercised for one token's forward pass: shared layers plus k of
// the N experts at each MoE layer (the whole gate always runs).
int64_t trackformer_active_param_count(const track::TrackformerConfig& cfg);

struct ScaledConfig {
  track::TrackformerConfig config;
  int64_t target_params = 0;
  int64_t achieved_params = 0;
  double overshoot_pct = 0.0;
};

// Smallest width (model_dim, stepping by one head's worth with ff scaled
// proportionally) or depth whose exact dense parameter count reaches
// target_params. Throws when the target cannot be reached.
ScaledConfig scale_dense_to_match(const track::TrackformerConfig& base,
                                  int64_t target_params,
                                  const std::string& axis);

struct TrajEval {
  double overall_mse = 0.0;
  double stationary_mse = 0.0;  // predict-no-motion reference
  std::map<int, double> per_domain_mse;
  std::map<int, double> per_domain_stationary;
  int64_t windows = 0;

  nlohmann::json to_json() const;
};

// Deterministic protocol: variance-filtered queries (seeded per window) at
// fixed window offsets over the given episodes; MSE in normalized
// coordinates over all H*K*2 entries. The stationary reference predicts no
// motion for the same queries.
TrajEval eval_traj(const track::Trackformer& model,
                   const std::vector<synth::Episode>& episodes,
                   const std::vector<size_t>& eval_idx);

// One line of JSON per record; used for all metrics logs.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& record);

 private:
  std::ofstream os_;
};

// Minimal polyline plot of one or more series over their index.
void write_loss_svg(
    const std::filesystem::path& path,
    const std::vector<std::pair<std::string, std::vector<double>>>& series);

struct ArmResult {
  std::string name;
  int64_t param_count = 0;
  int64_t active_params_per_token = 0;
  std::vector<uint64_t> seeds;
  std::vector<double> seed_val_mse;  // in-domain validation, one per seed
  double median_mse = 0.0, min_mse = 0.0, max_mse = 0.0;
  double stationary_mse = 0.0;
  std::map<int, double> per_domain_mse;  // from the median seed
  // domain id -> per-expert token fractions (rows sum to 1), MoE arms only.
  std::map<int, std::vector<double>> utilization;
  double mean_utilization_entropy = 0.0;
  bool failed = false;
  std::string error;

  nlohmann::json to_json() const;
};

struct ComparisonReport {
  std::string dataset_digest;
  std::vector<uint64_t> seeds;
  std::vector<ArmResult> arms;

  nlohmann::json to_json() const;
};

struct CompareOptions {
  std::vector<uint64_t> seeds = {1, 2, 3};
  bool full_grid = true;  // false: only the two in+ood arms
};

// Parameter-matched dense-vs-MoE study over {dense, moe} x {in-only,
// in+ood}. All arms train on subsets of one generated dataset, so they share
// its digest by construction. A failing arm is recorded and flagged; the
// report is still emitted.
ComparisonReport compare(const ExperimentConfig& cfg,
                         const CompareOptions& copts);

void write_report_csv(const ComparisonReport& report,
                      const std::filesystem::path& path);
void write_report_text(const ComparisonReport& report,
                       const std::filesystem::path& path);

}  // namespace anytraj::exp

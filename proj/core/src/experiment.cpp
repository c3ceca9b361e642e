#include "anytraj/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "anytraj/checkpoint.hpp"

namespace anytraj::exp {

namespace fs = std::filesystem;

namespace {

void check_keys(const nlohmann::json& j,
                const std::vector<std::string>& allowed,
                const std::string& section) {
  if (!j.is_object())
    throw std::invalid_argument("config section '" + section +
                                "' must be an object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw std::invalid_argument("unknown config key '" + key + "' in " +
                                  section);
}

std::string fmt(double v) { return nlohmann::json(v).dump(); }

}  // namespace

nlohmann::json dataset_options_to_json(const synth::DatasetOptions& o) {
  return nlohmann::json{{"in_domain_tasks", o.in_domain_tasks},
                        {"out_of_domain_tasks", o.out_of_domain_tasks},
                        {"episodes_per_task", o.episodes_per_task},
                        {"validation_per_task", o.validation_per_task},
                        {"image_size", o.image_size},
                        {"episode_len", o.episode_len},
                        {"include_ood", o.include_ood}};
}

synth::DatasetOptions dataset_options_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"in_domain_tasks", "out_of_domain_tasks", "episodes_per_task",
              "validation_per_task", "image_size", "episode_len",
              "include_ood"},
             "dataset");
  synth::DatasetOptions o;
  o.in_domain_tasks = j.value("in_domain_tasks", o.in_domain_tasks);
  o.out_of_domain_tasks = j.value("out_of_domain_tasks", o.out_of_domain_tasks);
  o.episodes_per_task = j.value("episodes_per_task", o.episodes_per_task);
  o.validation_per_task = j.value("validation_per_task", o.validation_per_task);
  o.image_size = j.value("image_size", o.image_size);
  o.episode_len = j.value("episode_len", o.episode_len);
  o.include_ood = j.value("include_ood", o.include_ood);
  return o;
}

nlohmann::json ExperimentConfig::to_json() const {
  return nlohmann::json{{"seed", seed},
                        {"out_dir", out_dir},
                        {"dataset", dataset_options_to_json(dataset)},
                        {"trackformer", trackformer},
                        {"track_train", track_train},
                        {"policy", policy},
                        {"policy_train", policy_train}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  check_keys(j,
             {"seed", "out_dir", "dataset", "trackformer", "track_train",
              "policy", "policy_train"},
             "experiment config");
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("dataset"))
    c.dataset = dataset_options_from_json(j.at("dataset"));
  if (j.contains("trackformer")) {
    check_keys(j.at("trackformer"),
               {"depth", "model_dim", "heads", "ff_dim", "dropout",
                "moe_layer_indices", "num_experts", "top_k", "horizon",
                "num_points", "lambda_tra", "lambda_lo_ba", "lambda_z",
                "image_size", "patch_size", "num_instructions",
                "use_slot_encoding", "gate_noise", "gate_noise_scale"},
               "trackformer");
    // section defaults stay at the desk preset, not the struct defaults
    auto t = c.trackformer;
    nlohmann::json merged = t;
    merged.update(j.at("trackformer"));
    c.trackformer = merged.get<track::TrackformerConfig>();
  }
  if (j.contains("track_train")) {
    check_keys(j.at("track_train"),
               {"epochs", "batch_size", "steps_per_epoch", "lr",
                "weight_decay", "warmup_epochs", "seed"},
               "track_train");
    c.track_train = j.at("track_train").get<track::TrackTrainOptions>();
  }
  if (j.contains("policy")) {
    check_keys(j.at("policy"),
               {"frame_stack", "fusion_depth", "fusion_dim", "fusion_heads",
                "fusion_ff", "dropout", "mode", "action_dim", "head_hidden",
                "image_size", "patch_size", "horizon", "num_points",
                "use_ground_truth_tracks"},
               "policy");
    nlohmann::json merged = c.policy;
    merged.update(j.at("policy"));
    c.policy = merged.get<policy::PolicyConfig>();
  }
  if (j.contains("policy_train")) {
    check_keys(j.at("policy_train"),
               {"epochs", "batch_size", "lr", "weight_decay", "warmup_epochs",
                "seed"},
               "policy_train");
    c.policy_train = j.at("policy_train").get<policy::PolicyTrainOptions>();
  }
  c.trackformer.validate();
  c.policy.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  is >> j;
  return from_json(j);
}

void ExperimentConfig::save(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config " + path.string());
  os << to_json().dump(2) << "\n";
}

int64_t trackformer_active_param_count(const track::TrackformerConfig& cfg) {
  int64_t d = cfg.model_dim, ff = cfg.ff_dim;
  int64_t expert = d * ff + ff + ff * d + d;
  int64_t inactive = 0;
  for (int l = 1; l <= cfg.depth; ++l)
    if (cfg.layer_is_moe(l))
      inactive += (cfg.num_experts - cfg.top_k) * expert;
  return track::trackformer_param_count(cfg) - inactive;
}

ScaledConfig scale_dense_to_match(const track::TrackformerConfig& base,
                                  int64_t target_params,
                                  const std::string& axis) {
  if (axis != "width" && axis != "depth")
    throw std::invalid_argument("scale_dense_to_match: axis must be width or "
                                "depth");
  track::TrackformerConfig cand = base;
  cand.moe_layer_indices.clear();
  if (target_params < track::trackformer_param_count(cand))
    throw std::invalid_argument(
        "scale_dense_to_match: target below base parameter count");
  int head_dim = base.model_dim / base.heads;
  int ff_ratio = base.ff_dim / base.model_dim;
  if (head_dim < 1 || ff_ratio < 1)
    throw std::invalid_argument("scale_dense_to_match: degenerate base dims");
  for (int iter = 0; iter < 100000; ++iter) {
    int64_t count = track::trackformer_param_count(cand);
    if (count >= target_params) {
      ScaledConfig out;
      out.config = cand;
      out.target_params = target_params;
      out.achieved_params = count;
      out.overshoot_pct =
          100.0 * (static_cast<double>(count) - target_params) / target_params;
      return out;
    }
    if (axis == "width") {
      cand.model_dim += head_dim;
      cand.heads = cand.model_dim / head_dim;
      cand.ff_dim = cand.model_dim * ff_ratio;
    } else {
      cand.depth += 1;
    }
  }
  throw std::runtime_error("scale_dense_to_match: target unreachable on " +
                           axis);
}

nlohmann::json TrajEval::to_json() const {
  nlohmann::json pd = nlohmann::json::object(), ps = nlohmann::json::object();
  for (const auto& [k, v] : per_domain_mse) pd[std::to_string(k)] = v;
  for (const auto& [k, v] : per_domain_stationary) ps[std::to_string(k)] = v;
  return nlohmann::json{{"overall_mse", overall_mse},
                        {"stationary_mse", stationary_mse},
                        {"per_domain_mse", pd},
                        {"per_domain_stationary", ps},
                        {"windows", windows}};
}

TrajEval eval_traj(const track::Trackformer& model,
                   const std::vector<synth::Episode>& episodes,
                   const std::vector<size_t>& eval_idx) {
  if (eval_idx.empty())
    throw std::invalid_argument("eval_traj: empty evaluation split");
  const auto& cfg = model.config();
  int h = cfg.horizon;

  std::map<int, double> dom_sum, dom_stat;
  std::map<int, int64_t> dom_n;
  TrajEval ev;
  double sum = 0.0, stat_sum = 0.0;

  for (size_t idx : eval_idx) {
    const auto& ep = episodes[idx];
    if (ep.length <= h)
      throw std::invalid_argument("eval_traj: episode shorter than horizon");
    int last = ep.length - 1 - h;
    std::vector<int> offsets = {0};
    if (last > 0) offsets.push_back(last);
    for (int t0 : offsets) {
      // Variance-filtered queries over the evaluation window concentrate on
      // points that actually move, so the stationary reference measures the
      // motion scale the model has to predict.
      std::vector<std::vector<double>> window(
          ep.frames.begin() + t0, ep.frames.begin() + t0 + h + 1);
      Rng qrng(0x9e3779b97f4a7c15ULL ^ (idx * 2654435761ULL) ^
               static_cast<uint64_t>(t0));
      auto query = synth::sample_points_variance_filter(
          window, ep.height, ep.width, cfg.num_points, qrng);
      query.timestep = t0;
      auto gt = synth::ground_truth_tracks(ep, query, h);
      auto pred = model.predict(ep.frames[static_cast<size_t>(t0)], query,
                                static_cast<int>(ep.instruction_id));
      double se = 0.0, se_stat = 0.0;
      for (int64_t hh = 0; hh < gt.horizon; ++hh)
        for (int64_t k = 0; k < gt.num_points; ++k)
          for (int64_t a = 0; a < 2; ++a) {
            double g = gt.at(hh, k, a);
            double dp = pred.at(hh, k, a) - g;
            double ds = query.points[static_cast<size_t>(k)][a] - g;
            se += dp * dp;
            se_stat += ds * ds;
          }
      double n = static_cast<double>(gt.horizon * gt.num_points * 2);
      sum += se / n;
      stat_sum += se_stat / n;
      dom_sum[static_cast<int>(ep.domain_id)] += se / n;
      dom_stat[static_cast<int>(ep.domain_id)] += se_stat / n;
      dom_n[static_cast<int>(ep.domain_id)] += 1;
      ev.windows += 1;
    }
  }
  ev.overall_mse = sum / static_cast<double>(ev.windows);
  ev.stationary_mse = stat_sum / static_cast<double>(ev.windows);
  for (const auto& [dom, s] : dom_sum) {
    ev.per_domain_mse[dom] = s / static_cast<double>(dom_n[dom]);
    ev.per_domain_stationary[dom] =
        dom_stat[dom] / static_cast<double>(dom_n[dom]);
  }
  return ev;
}

JsonlWriter::JsonlWriter(const fs::path& path) : os_(path) {
  if (!os_) throw std::runtime_error("cannot open " + path.string());
}

void JsonlWriter::write(const nlohmann::json& record) {
  os_ << record.dump() << "\n";
  os_.flush();
}

void write_loss_svg(
    const fs::path& path,
    const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  constexpr int kW = 640, kH = 360, kM = 40;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b"};
  double lo = 0.0, hi = 1.0;
  bool any = false;
  size_t max_len = 1;
  for (const auto& [_, ys] : series)
    for (double y : ys) {
      if (!any) {
        lo = hi = y;
        any = true;
      }
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  for (const auto& [_, ys] : series) max_len = std::max(max_len, ys.size());
  if (hi <= lo) hi = lo + 1.0;

  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW
     << "\" height=\"" << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << kM << "\" y1=\"" << kH - kM << "\" x2=\"" << kW - kM
     << "\" y2=\"" << kH - kM << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kM << "\" y1=\"" << kM << "\" x2=\"" << kM
     << "\" y2=\"" << kH - kM << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kM << "\" y=\"" << kM - 8 << "\" font-size=\"11\">"
     << fmt(hi) << "</text>\n";
  os << "<text x=\"" << kM << "\" y=\"" << kH - kM + 14
     << "\" font-size=\"11\">" << fmt(lo) << "</text>\n";
  int ci = 0;
  for (const auto& [name, ys] : series) {
    const char* color = kColors[ci % 6];
    if (!ys.empty()) {
      os << "<polyline fill=\"none\" stroke=\"" << color
         << "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < ys.size(); ++i) {
        double fx = max_len > 1 ? static_cast<double>(i) / (max_len - 1) : 0.0;
        double fy = (ys[i] - lo) / (hi - lo);
        os << kM + fx * (kW - 2 * kM) << "," << (kH - kM) - fy * (kH - 2 * kM)
           << " ";
      }
      os << "\"/>\n";
    }
    os << "<text x=\"" << kW - kM - 120 << "\" y=\"" << kM + 14 * (ci + 1)
       << "\" font-size=\"11\" fill=\"" << color << "\">" << name
       << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
}

nlohmann::json ArmResult::to_json() const {
  nlohmann::json util = nlohmann::json::object();
  for (const auto& [dom, u] : utilization) util[std::to_string(dom)] = u;
  nlohmann::json pd = nlohmann::json::object();
  for (const auto& [dom, v] : per_domain_mse) pd[std::to_string(dom)] = v;
  return nlohmann::json{{"arm", name},
                        {"param_count", param_count},
                        {"active_params_per_token", active_params_per_token},
                        {"seeds", seeds},
                        {"seed_val_mse", seed_val_mse},
                        {"median_val_mse", median_mse},
                        {"min_val_mse", min_mse},
                        {"max_val_mse", max_mse},
                        {"stationary_mse", stationary_mse},
                        {"per_domain_mse", pd},
                        {"expert_utilization", util},
                        {"mean_utilization_entropy", mean_utilization_entropy},
                        {"failed", failed},
                        {"error", error}};
}

nlohmann::json ComparisonReport::to_json() const {
  nlohmann::json arms_j = nlohmann::json::array();
  for (const auto& a : arms) arms_j.push_back(a.to_json());
  return nlohmann::json{{"dataset_digest", dataset_digest},
                        {"seeds", seeds},
                        {"arms", arms_j}};
}

namespace {

struct ArmSpec {
  std::string name;
  track::TrackformerConfig model_cfg;
  bool in_domain_only = false;
};

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// Per-domain fraction of tokens routed to each expert, pooled over all MoE
// layers, on deterministic eval-mode forwards over the given episodes.
std::map<int, std::vector<double>> utilization_histograms(
    const track::Trackformer& model,
    const std::vector<synth::Episode>& episodes,
    const std::vector<size_t>& idx) {
  const auto& cfg = model.config();
  std::map<int, std::vector<double>> counts;
  for (size_t i : idx) {
    const auto& ep = episodes[i];
    auto query = synth::sample_points_grid(cfg.num_points, ep.height,
                                           ep.width);
    Rng rng(0);
    auto fwd = model.forward(ep.frames[0], query,
                             static_cast<int>(ep.instruction_id), rng, false);
    auto& c = counts[static_cast<int>(ep.domain_id)];
    if (c.empty()) c.assign(static_cast<size_t>(cfg.num_experts), 0.0);
    for (const auto& out : fwd.moe_outs)
      for (int e = 0; e < cfg.num_experts; ++e)
        c[static_cast<size_t>(e)] +=
            out.stats.q[static_cast<size_t>(e)] *
            static_cast<double>(out.stats.token_count);
  }
  for (auto& [dom, c] : counts) {
    double total = std::accumulate(c.begin(), c.end(), 0.0);
    if (total > 0.0)
      for (auto& v : c) v /= total;
  }
  return counts;
}

}  // namespace

ComparisonReport compare(const ExperimentConfig& cfg,
                         const CompareOptions& copts) {
  if (copts.seeds.empty())
    throw std::invalid_argument("compare: at least one seed required");
  fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir / "data");

  auto dopts = cfg.dataset;
  dopts.include_ood = true;  // arms pick subsets of one shared dataset
  auto manifest = synth::build_dataset(synth::desk_domains(dopts), dopts,
                                       cfg.seed, out_dir / "data");

  std::vector<synth::Episode> episodes;
  std::vector<size_t> train_in, train_all, val_in, val_all;
  for (const auto& entry : manifest.episodes) {
    size_t idx = episodes.size();
    episodes.push_back(synth::load_episode(out_dir / "data" / entry.file));
    bool in_dom = entry.domain_kind == "in_domain";
    if (entry.split == "train") {
      train_all.push_back(idx);
      if (in_dom) train_in.push_back(idx);
    } else {
      val_all.push_back(idx);
      if (in_dom) val_in.push_back(idx);
    }
  }

  auto moe_cfg = cfg.trackformer;
  auto dense_cfg = cfg.trackformer;
  dense_cfg.moe_layer_indices.clear();

  std::vector<ArmSpec> specs = {{"moe_in_ood", moe_cfg, false},
                                {"dense_in_ood", dense_cfg, false}};
  if (copts.full_grid) {
    specs.push_back({"moe_in_only", moe_cfg, true});
    specs.push_back({"dense_in_only", dense_cfg, true});
  }

  ComparisonReport report;
  report.dataset_digest = manifest.digest;
  report.seeds = copts.seeds;

  for (const auto& spec : specs) {
    ArmResult arm;
    arm.name = spec.name;
    arm.param_count = track::trackformer_param_count(spec.model_cfg);
    arm.active_params_per_token =
        trackformer_active_param_count(spec.model_cfg);
    arm.seeds = copts.seeds;
    fs::path arm_dir = out_dir / spec.name;
    try {
      const auto& train_idx = spec.in_domain_only ? train_in : train_all;
      std::vector<track::Trackformer> models;
      std::vector<TrajEval> evals;
      std::vector<std::vector<double>> loss_curves;
      for (uint64_t s : copts.seeds) {
        fs::path run_dir = arm_dir / ("seed" + std::to_string(s));
        fs::create_directories(run_dir);

        auto topts = cfg.track_train;
        topts.seed = s;
        nlohmann::json echo = cfg.to_json();
        echo["arm"] = spec.name;
        echo["trackformer"] = spec.model_cfg;
        echo["track_train"] = topts;
        echo["in_domain_only"] = spec.in_domain_only;
        std::ofstream(run_dir / "config.json") << echo.dump(2) << "\n";

        Rng init = Rng(s).stream("init");
        track::Trackformer model(spec.model_cfg, init);
        JsonlWriter metrics(run_dir / "metrics.jsonl");
        std::vector<double> curve;
        track::train_trackformer(model, episodes, train_idx, topts,
                                 [&](const nlohmann::json& rec) {
                                   metrics.write(rec);
                                   curve.push_back(
                                       rec.at("l_tra").get<double>());
                                 });
        loss_curves.push_back(std::move(curve));

        auto ev = eval_traj(model, episodes, val_in);
        arm.seed_val_mse.push_back(ev.overall_mse);
        std::ofstream(run_dir / "eval.json") << ev.to_json().dump(2) << "\n";
        ckpt::save_checkpoint(run_dir / "model.ckpt",
                              nlohmann::json(spec.model_cfg),
                              model.named_params());
        evals.push_back(std::move(ev));
        models.push_back(std::move(model));
      }
      std::vector<std::pair<std::string, std::vector<double>>> series;
      for (size_t i = 0; i < loss_curves.size(); ++i)
        series.emplace_back("seed " + std::to_string(copts.seeds[i]),
                            std::move(loss_curves[i]));
      write_loss_svg(arm_dir / "loss.svg", series);

      std::vector<size_t> order(arm.seed_val_mse.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return arm.seed_val_mse[a] < arm.seed_val_mse[b];
      });
      size_t med = order[(order.size() - 1) / 2];
      arm.median_mse = arm.seed_val_mse[med];
      arm.min_mse = arm.seed_val_mse[order.front()];
      arm.max_mse = arm.seed_val_mse[order.back()];
      arm.stationary_mse = evals[med].stationary_mse;

      auto full_ev = eval_traj(models[med], episodes, val_all);
      arm.per_domain_mse = full_ev.per_domain_mse;
      if (!spec.model_cfg.moe_layer_indices.empty()) {
        arm.utilization = utilization_histograms(models[med], episodes,
                                                 val_all);
        double ent = 0.0;
        for (const auto& [dom, u] : arm.utilization) ent += entropy(u);
        arm.mean_utilization_entropy =
            arm.utilization.empty() ? 0.0 : ent / arm.utilization.size();
        std::ofstream util_csv(arm_dir / "utilization.csv");
        util_csv << "domain";
        for (int e = 0; e < spec.model_cfg.num_experts; ++e)
          util_csv << ",expert" << e;
        util_csv << "\n";
        for (const auto& [dom, u] : arm.utilization) {
          util_csv << dom;
          for (double v : u) util_csv << "," << fmt(v);
          util_csv << "\n";
        }
      }
    } catch (const std::exception& e) {
      arm.failed = true;
      arm.error = e.what();
    }
    report.arms.push_back(std::move(arm));
  }

  write_report_csv(report, out_dir / "report.csv");
  write_report_text(report, out_dir / "report.txt");
  std::ofstream(out_dir / "report.json") << report.to_json().dump(2) << "\n";
  return report;
}

void write_report_csv(const ComparisonReport& report, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "arm,param_count,active_params_per_token,median_val_mse,min_val_mse,"
        "max_val_mse,stationary_mse,mean_utilization_entropy,failed\n";
  for (const auto& a : report.arms) {
    os << a.name << "," << a.param_count << "," << a.active_params_per_token
       << ",";
    if (a.failed)
      os << ",,,,," << 1 << "\n";
    else
      os << fmt(a.median_mse) << "," << fmt(a.min_mse) << "," << fmt(a.max_mse)
         << "," << fmt(a.stationary_mse) << ","
         << fmt(a.mean_utilization_entropy) << ",0\n";
  }
}

void write_report_text(const ComparisonReport& report, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "dense vs MoE comparison\n";
  os << "dataset digest: " << report.dataset_digest << "\nseeds:";
  for (uint64_t s : report.seeds) os << " " << s;
  os << "\n\n";
  for (const auto& a : report.arms) {
    os << "arm " << a.name << "\n";
    os << "  params " << a.param_count << " (active per token "
       << a.active_params_per_token << ")\n";
    if (a.failed) {
      os << "  FAILED: " << a.error << " (results missing from this report)\n";
      continue;
    }
    os << "  in-domain val mse: median " << fmt(a.median_mse) << "  min "
       << fmt(a.min_mse) << "  max " << fmt(a.max_mse) << "\n";
    os << "  stationary reference mse: " << fmt(a.stationary_mse) << "\n";
    os << "  per-domain val mse:";
    for (const auto& [dom, v] : a.per_domain_mse)
      os << " d" << dom << "=" << fmt(v);
    os << "\n";
    if (!a.utilization.empty()) {
      os << "  expert utilization (rows sum to 1):\n";
      for (const auto& [dom, u] : a.utilization) {
        os << "    domain " << dom << ":";
        for (double v : u) os << " " << fmt(v);
        os << "\n";
      }
      os << "  mean utilization entropy " << fmt(a.mean_utilization_entropy)
         << " nats\n";
    }
    os << "\n";
  }
}

}  // namespace anytraj::exp

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "anytraj/checkpoint.hpp"
#include "anytraj/experiment.hpp"
#include "anytraj/policy.hpp"
#include "anytraj/synthdata.hpp"
#include "anytraj/trackformer.hpp"

namespace fs = std::filesystem;
using namespace anytraj;

namespace {

struct LoadedDataset {
  synth::DatasetManifest manifest;
  std::vector<synth::Episode> episodes;
  std::vector<size_t> train_in, train_all, val_in, val_all;
};

LoadedDataset load_dataset(const fs::path& dir) {
  LoadedDataset d;
  d.manifest = synth::load_manifest(dir / "manifest.json");
  for (const auto& entry : d.manifest.episodes) {
    size_t idx = d.episodes.size();
    d.episodes.push_back(synth::load_episode(dir / entry.file));
    bool in_dom = entry.domain_kind == "in_domain";
    if (entry.split == "train") {
      d.train_all.push_back(idx);
      if (in_dom) d.train_in.push_back(idx);
    } else {
      d.val_all.push_back(idx);
      if (in_dom) d.val_in.push_back(idx);
    }
  }
  return d;
}

track::Trackformer load_trackformer(const fs::path& ckpt_path) {
  auto ck = ckpt::load_checkpoint(ckpt_path);
  auto cfg = ck.config.get<track::TrackformerConfig>();
  Rng init(0);
  track::Trackformer model(cfg, init);
  auto params = model.named_params();
  ckpt::load_into(params, ck);
  return model;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stoi(tok));
  return out;
}

exp::ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return exp::ExperimentConfig{};
  return exp::ExperimentConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anytraj: sparse-MoE trajectory prediction and "
               "trajectory-guided policies on a synthetic desk world"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, ckpt_path, traj_ckpt;
  uint64_t seed = 0;
  bool seed_set = false;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the episode dataset");
  std::string preset = "desk";
  bool no_ood = false;
  gen->add_option("--preset", preset, "Dataset preset")
      ->check(CLI::IsMember({"desk"}));
  gen->add_option("--config", config_path, "Experiment config JSON");
  gen->add_option("--seed", seed, "Root seed");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_flag("--no-ood", no_ood, "In-domain episodes only");

  // train-traj
  auto* tt = app.add_subcommand("train-traj", "Train the trajectory model");
  std::string moe_layers_s, experts_s;
  int epochs_override = -1;
  bool in_only = false;
  tt->add_option("--config", config_path, "Experiment config JSON");
  tt->add_option("--data", data_dir, "Dataset directory")->required();
  tt->add_option("--out", out_dir, "Output directory")->required();
  tt->add_option("--seed", seed, "Training seed");
  tt->add_option("--moe-layers", moe_layers_s,
                 "Comma-separated 1-based MoE layer indices (empty: dense)");
  tt->add_option("--experts", experts_s, "Number of experts");
  tt->add_option("--epochs", epochs_override, "Epoch count override");
  tt->add_flag("--in-only", in_only, "Train on in-domain episodes only");

  // train-policy
  auto* tp = app.add_subcommand("train-policy",
                                "Behavior-clone the trajectory-guided policy");
  std::string mode_s;
  tp->add_option("--config", config_path, "Experiment config JSON");
  tp->add_option("--data", data_dir, "Dataset directory")->required();
  tp->add_option("--traj-ckpt", traj_ckpt, "Frozen trajectory model")
      ->required();
  tp->add_option("--out", out_dir, "Output directory")->required();
  tp->add_option("--seed", seed, "Training seed");
  tp->add_option("--mode", mode_s, "Conditioning mode")
      ->check(CLI::IsMember({"none", "hand_drawn", "adaptive"}));
  tp->add_option("--epochs", epochs_override, "Epoch count override");

  // eval-traj
  auto* et = app.add_subcommand("eval-traj",
                                "Evaluate a trajectory model on validation");
  et->add_option("--ckpt", ckpt_path, "Model checkpoint")->required();
  et->add_option("--data", data_dir, "Dataset directory")->required();
  et->add_option("--out", out_dir, "Optional directory for eval.json");

  // eval-policy
  auto* ep = app.add_subcommand("eval-policy", "Closed-loop policy rollouts");
  int rollouts = 20, max_steps = 60;
  ep->add_option("--ckpt", ckpt_path, "Policy checkpoint")->required();
  ep->add_option("--traj-ckpt", traj_ckpt, "Trajectory model checkpoint")
      ->required();
  ep->add_option("--seed", seed, "Rollout seed");
  ep->add_option("--rollouts", rollouts, "Episodes per in-domain task");
  ep->add_option("--max-steps", max_steps, "Step budget per rollout");
  ep->add_option("--out", out_dir, "Optional directory for rollouts.jsonl");

  // compare
  auto* cmp = app.add_subcommand(
      "compare", "Parameter-matched dense-vs-MoE co-training study");
  std::string seeds_s = "1,2,3";
  bool no_grid = false;
  cmp->add_option("--config", config_path, "Experiment config JSON");
  cmp->add_option("--out", out_dir, "Output directory")->required();
  cmp->add_option("--seed", seed, "Dataset seed");
  cmp->add_option("--seeds", seeds_s, "Comma-separated training seeds");
  cmp->add_flag("--no-grid", no_grid,
                "Only the two in+ood arms instead of the 2x2 grid");

  // report
  auto* rep = app.add_subcommand("report",
                                 "Print the report of a finished compare run");
  rep->add_option("--run", out_dir, "Compare run directory")->required();

  for (auto* sc : {gen, tt, tp, ep, cmp})
    for (auto* opt : sc->get_options())
      if (opt->get_name() == "--seed")
        opt->each([&](const std::string&) { seed_set = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    auto cfg = load_config_or_default(config_path);
    if (seed_set) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;

    if (*gen) {
      fs::create_directories(out_dir);
      auto opts = cfg.dataset;
      if (no_ood) opts.include_ood = false;
      auto manifest =
          synth::build_dataset(synth::desk_domains(opts), opts, cfg.seed,
                               out_dir);
      std::cout << "wrote " << manifest.episodes.size()
                << " episodes to " << out_dir << " (digest "
                << manifest.digest << ")\n";
    } else if (*tt) {
      auto data = load_dataset(data_dir);
      auto mcfg = cfg.trackformer;
      if (tt->count("--moe-layers"))
        mcfg.moe_layer_indices = parse_int_list(moe_layers_s);
      if (!experts_s.empty()) mcfg.num_experts = std::stoi(experts_s);
      mcfg.validate();
      auto topts = cfg.track_train;
      if (epochs_override >= 0) topts.epochs = epochs_override;
      topts.seed = cfg.seed;

      fs::create_directories(out_dir);
      nlohmann::json echo = cfg.to_json();
      echo["trackformer"] = mcfg;
      echo["track_train"] = topts;
      std::ofstream(fs::path(out_dir) / "config.json") << echo.dump(2) << "\n";

      Rng init = Rng(cfg.seed).stream("init");
      track::Trackformer model(mcfg, init);
      exp::JsonlWriter metrics(fs::path(out_dir) / "metrics.jsonl");
      std::vector<double> curve;
      track::train_trackformer(model, data.episodes,
                               in_only ? data.train_in : data.train_all, topts,
                               [&](const nlohmann::json& rec) {
                                 metrics.write(rec);
                                 curve.push_back(rec.at("l_tra").get<double>());
                               });
      exp::write_loss_svg(fs::path(out_dir) / "loss.svg", {{"l_tra", curve}});
      ckpt::save_checkpoint(fs::path(out_dir) / "model.ckpt",
                            nlohmann::json(mcfg), model.named_params());
      auto ev = exp::eval_traj(model, data.episodes, data.val_in);
      std::ofstream(fs::path(out_dir) / "eval.json")
          << ev.to_json().dump(2) << "\n";
      std::cout << "in-domain val mse " << ev.overall_mse
                << " (stationary reference " << ev.stationary_mse << ")\n";
    } else if (*tp) {
      auto data = load_dataset(data_dir);
      auto frozen = load_trackformer(traj_ckpt);
      auto pcfg = cfg.policy;
      if (!mode_s.empty()) pcfg.mode = policy::parse_conditioning(mode_s);
      auto popts = cfg.policy_train;
      if (epochs_override >= 0) popts.epochs = epochs_override;
      popts.seed = cfg.seed;

      std::vector<synth::Episode> demos;
      for (size_t i : data.train_in)
        demos.push_back(data.episodes[i]);

      fs::create_directories(out_dir);
      nlohmann::json echo = cfg.to_json();
      echo["policy"] = pcfg;
      echo["policy_train"] = popts;
      std::ofstream(fs::path(out_dir) / "config.json") << echo.dump(2) << "\n";

      Rng init = Rng(cfg.seed).stream("init");
      policy::PolicyNet net(pcfg, init);
      exp::JsonlWriter metrics(fs::path(out_dir) / "metrics.jsonl");
      auto result = policy::train_policy(
          net, frozen, demos, popts,
          [&](const nlohmann::json& rec) { metrics.write(rec); });
      ckpt::save_checkpoint(fs::path(out_dir) / "policy.ckpt",
                            nlohmann::json(pcfg), net.named_params());
      std::cout << "final action mse " << result.final_action_mse << "\n";
    } else if (*et) {
      auto data = load_dataset(data_dir);
      auto model = load_trackformer(ckpt_path);
      auto ev = exp::eval_traj(model, data.episodes, data.val_all);
      std::cout << ev.to_json().dump(2) << "\n";
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream(fs::path(out_dir) / "eval.json")
            << ev.to_json().dump(2) << "\n";
      }
    } else if (*ep) {
      auto traj_model = load_trackformer(traj_ckpt);
      auto ck = ckpt::load_checkpoint(ckpt_path);
      auto pcfg = ck.config.get<policy::PolicyConfig>();
      Rng init(0);
      policy::PolicyNet net(pcfg, init);
      auto params = net.named_params();
      ckpt::load_into(params, ck);

      synth::DatasetOptions dopts = cfg.dataset;
      auto specs = synth::desk_domains(dopts);
      int successes = 0, total = 0;
      nlohmann::json records = nlohmann::json::array();
      for (const auto& spec : specs) {
        if (!spec.in_domain) continue;
        for (int i = 0; i < rollouts; ++i) {
          uint64_t x = cfg.seed + 0x51edULL * (static_cast<uint64_t>(total) + 1);
          uint64_t ep_seed = Rng::splitmix64(x);
          synth::World world(spec, ep_seed);
          auto rec = policy::rollout(net, traj_model, world, max_steps);
          rec.seed = ep_seed;
          successes += rec.success ? 1 : 0;
          ++total;
          records.push_back(rec.to_json());
        }
      }
      double rate = total > 0 ? static_cast<double>(successes) / total : 0.0;
      std::cout << "success " << successes << "/" << total << " ("
                << rate << ")\n";
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        exp::JsonlWriter w(fs::path(out_dir) / "rollouts.jsonl");
        for (const auto& r : records) w.write(r);
      }
    } else if (*cmp) {
      exp::CompareOptions copts;
      copts.seeds.clear();
      for (int s : parse_int_list(seeds_s))
        copts.seeds.push_back(static_cast<uint64_t>(s));
      copts.full_grid = !no_grid;
      auto report = exp::compare(cfg, copts);
      std::ifstream is(fs::path(cfg.out_dir) / "report.txt");
      std::cout << is.rdbuf();
      for (const auto& arm : report.arms)
        if (arm.failed) return 1;
    } else if (*rep) {
      std::ifstream is(fs::path(out_dir) / "report.txt");
      if (!is) {
        std::cerr << "no report.txt under " << out_dir << "\n";
        return 1;
      }
      std::cout << is.rdbuf();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

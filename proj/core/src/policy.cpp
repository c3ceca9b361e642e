#include "anytraj/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace anytraj::policy {

using nn::Tensor;

const char* conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::none: return "none";
    case Conditioning::hand_drawn: return "hand_drawn";
    case Conditioning::adaptive: return "adaptive";
  }
  return "unknown";
}

Conditioning parse_conditioning(const std::string& s) {
  if (s == "none") return Conditioning::none;
  if (s == "hand_drawn") return Conditioning::hand_drawn;
  if (s == "adaptive") return Conditioning::adaptive;
  throw std::invalid_argument("unknown conditioning mode: " + s);
}

void PolicyConfig::validate() const {
  if (frame_stack < 1)
    throw std::invalid_argument("policy config: frame_stack must be >= 1");
  if (image_size % patch_size != 0)
    throw std::invalid_argument("policy config: image/patch size mismatch");
  if (fusion_dim % fusion_heads != 0)
    throw std::invalid_argument("policy config: fusion_dim/heads mismatch");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("policy config: dropout out of range");
}

PolicyConfig PolicyConfig::desk_preset() {
  PolicyConfig c;
  c.frame_stack = 4;  // desk-scale stack; paper-scale default stays 10
  return c;
}

void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = nlohmann::json{{"frame_stack", c.frame_stack},
                     {"fusion_depth", c.fusion_depth},
                     {"fusion_dim", c.fusion_dim},
                     {"fusion_heads", c.fusion_heads},
                     {"fusion_ff", c.fusion_ff},
                     {"dropout", c.dropout},
                     {"mode", conditioning_name(c.mode)},
                     {"action_dim", c.action_dim},
                     {"head_hidden", c.head_hidden},
                     {"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"horizon", c.horizon},
                     {"num_points", c.num_points},
                     {"use_ground_truth_tracks", c.use_ground_truth_tracks}};
}

void from_json(const nlohmann::json& j, PolicyConfig& c) {
  c = PolicyConfig{};
  c.frame_stack = j.value("frame_stack", c.frame_stack);
  c.fusion_depth = j.value("fusion_depth", c.fusion_depth);
  c.fusion_dim = j.value("fusion_dim", c.fusion_dim);
  c.fusion_heads = j.value("fusion_heads", c.fusion_heads);
  c.fusion_ff = j.value("fusion_ff", c.fusion_ff);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("mode"))
    c.mode = parse_conditioning(j.at("mode").get<std::string>());
  c.action_dim = j.value("action_dim", c.action_dim);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.horizon = j.value("horizon", c.horizon);
  c.num_points = j.value("num_points", c.num_points);
  c.use_ground_truth_tracks =
      j.value("use_ground_truth_tracks", c.use_ground_truth_tracks);
}

namespace {

// Nearest pixel under the cell-center convention; coordinates clip to frame.
int64_t to_pixel(double u, int extent) {
  auto j = static_cast<int64_t>(std::floor(u * extent));
  return std::clamp<int64_t>(j, 0, extent - 1);
}

// Last write wins: later timesteps overwrite earlier ones; among the K
// points of a timestep, the higher point index overwrites.
std::vector<int64_t> winner_map(const TrajectoryPrediction& traj, int h_img,
                                int w_img) {
  std::vector<int64_t> winner(static_cast<size_t>(h_img) * w_img, -1);
  for (int64_t h = 0; h < traj.horizon; ++h)
    for (int64_t k = 0; k < traj.num_points; ++k) {
      int64_t px = to_pixel(traj.at(h, k, 0), w_img);
      int64_t py = to_pixel(traj.at(h, k, 1), h_img);
      winner[py * w_img + px] = h;
    }
  return winner;
}

}  // namespace

Tensor render_hand_drawn_mask(const TrajectoryPrediction& traj, int h_img,
                              int w_img) {
  constexpr double kFirstHalf = 128.0 / 255.0;
  std::vector<double> raster(static_cast<size_t>(h_img) * w_img, 0.0);
  int64_t half = (traj.horizon + 1) / 2;
  for (int64_t h = 0; h < traj.horizon; ++h) {
    double value = h < half ? kFirstHalf : 1.0;
    for (int64_t k = 0; k < traj.num_points; ++k) {
      int64_t px = to_pixel(traj.at(h, k, 0), w_img);
      int64_t py = to_pixel(traj.at(h, k, 1), h_img);
      raster[py * w_img + px] = value;
    }
  }
  return Tensor::from({h_img, w_img}, std::move(raster));
}

Tensor render_adaptive_mask(const TrajectoryPrediction& traj,
                            const Tensor& table, int h_img, int w_img) {
  if (table.size() != traj.horizon)
    throw std::invalid_argument(
        "adaptive mask: table length must equal the horizon");
  auto winner = winner_map(traj, h_img, w_img);
  std::vector<int64_t> pixels, steps;
  for (size_t i = 0; i < winner.size(); ++i)
    if (winner[i] >= 0) {
      pixels.push_back(static_cast<int64_t>(i));
      steps.push_back(winner[i]);
    }
  Tensor flat = Tensor::zeros({static_cast<int64_t>(h_img) * w_img, 1});
  if (!pixels.empty()) {
    Tensor rows = gather_rows(reshape(table, {traj.horizon, 1}), steps);
    flat = scatter_add_rows(flat, pixels, rows);
  }
  return reshape(flat, {h_img, w_img});
}

PolicyNet::PolicyNet(PolicyConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  int64_t d = cfg_.fusion_dim;
  int64_t p = cfg_.patch_size;
  int64_t np = cfg_.n_patches();
  int64_t th = 2LL * cfg_.horizon;
  double ib = 1.0 / std::sqrt(static_cast<double>(p * p * 3));
  double mb = 1.0 / std::sqrt(static_cast<double>(p * p));
  double tb = 1.0 / std::sqrt(static_cast<double>(th));
  img_w_ = Tensor::uniform({p * p * 3, d}, -ib, ib, init_rng, true);
  img_b_ = Tensor::zeros({d}, true);
  mask_w_ = Tensor::uniform({p * p, d}, -mb, mb, init_rng, true);
  pos_enc_ =
      Tensor::uniform({cfg_.frame_stack * np, d}, -0.02, 0.02, init_rng, true);
  track_w_ = Tensor::uniform({th, d}, -tb, tb, init_rng, true);
  track_b_ = Tensor::zeros({d}, true);
  slot_enc_ =
      Tensor::uniform({cfg_.num_points, d}, -0.02, 0.02, init_rng, true);
  for (int l = 0; l < cfg_.fusion_depth; ++l)
    fusion_.push_back(TransformerLayer::init_dense(d, cfg_.fusion_ff,
                                                   cfg_.fusion_heads,
                                                   init_rng));
  final_g_ = Tensor::full({d}, 1.0, true);
  final_b_ = Tensor::zeros({d}, true);
  int64_t late = d + th * cfg_.num_points;
  double hb = 1.0 / std::sqrt(static_cast<double>(late));
  double ob = 1.0 / std::sqrt(static_cast<double>(cfg_.head_hidden));
  head_w1_ = Tensor::uniform({late, cfg_.head_hidden}, -hb, hb, init_rng, true);
  head_b1_ = Tensor::zeros({cfg_.head_hidden}, true);
  head_w2_ = Tensor::uniform({cfg_.head_hidden, cfg_.action_dim}, -ob, ob,
                             init_rng, true);
  head_b2_ = Tensor::zeros({cfg_.action_dim}, true);
  // Ramp init so an untrained adaptive mask already distinguishes early
  // from late horizon steps, like the hand-drawn baseline does.
  std::vector<double> ramp(static_cast<size_t>(cfg_.horizon));
  for (int h = 0; h < cfg_.horizon; ++h)
    ramp[h] = cfg_.horizon > 1 ? 0.5 + 0.5 * h / (cfg_.horizon - 1) : 1.0;
  mask_table_ = Tensor::from({cfg_.horizon}, std::move(ramp), true);
}

Tensor PolicyNet::forward(const std::vector<std::vector<double>>& stacked_obs,
                          const TrajectoryPrediction& traj, Rng& rng,
                          bool training) const {
  if (static_cast<int>(stacked_obs.size()) != cfg_.frame_stack)
    throw std::invalid_argument("policy forward: frame stack size mismatch");
  if (traj.horizon != cfg_.horizon || traj.num_points != cfg_.num_points)
    throw std::invalid_argument("policy forward: trajectory shape mismatch");
  int64_t sz = cfg_.image_size, p = cfg_.patch_size;
  int64_t grid = sz / p;
  int64_t np = grid * grid;

  // The conditioned input always has 4 channels: RGB plus the mask channel
  // (all-zero in "none" mode), encoded as img_w (3ch) + mask_w (1ch).
  Tensor mask;
  switch (cfg_.mode) {
    case Conditioning::none:
      mask = Tensor::zeros({sz, sz});
      break;
    case Conditioning::hand_drawn:
      mask = render_hand_drawn_mask(traj, static_cast<int>(sz),
                                    static_cast<int>(sz));
      break;
    case Conditioning::adaptive:
      mask = render_adaptive_mask(traj, mask_table_, static_cast<int>(sz),
                                  static_cast<int>(sz));
      break;
  }
  std::vector<int64_t> patch_idx(static_cast<size_t>(np * p * p));
  for (int64_t gy = 0; gy < grid; ++gy)
    for (int64_t gx = 0; gx < grid; ++gx)
      for (int64_t yy = 0; yy < p; ++yy)
        for (int64_t xx = 0; xx < p; ++xx)
          patch_idx[(gy * grid + gx) * p * p + yy * p + xx] =
              (gy * p + yy) * sz + gx * p + xx;
  Tensor mask_patches = gather_elems(mask, patch_idx, {np, p * p});
  Tensor mask_tok = matmul(mask_patches, mask_w_);

  std::vector<Tensor> frame_toks;
  for (const auto& obs : stacked_obs) {
    if (static_cast<int64_t>(obs.size()) != sz * sz * 3)
      throw std::invalid_argument("policy forward: observation size mismatch");
    std::vector<double> patches(static_cast<size_t>(np * p * p * 3));
    for (int64_t i = 0; i < np * p * p; ++i)
      for (int64_t c = 0; c < 3; ++c)
        patches[i * 3 + c] = obs[patch_idx[i] * 3 + c];
    Tensor pm = Tensor::from({np, p * p * 3}, std::move(patches));
    frame_toks.push_back(add(matmul(pm, img_w_), mask_tok));
  }
  Tensor img_tokens =
      add(add_rowwise(concat(frame_toks, 0), img_b_), pos_enc_);

  std::vector<double> traj_flat(static_cast<size_t>(cfg_.num_points) * 2 *
                                cfg_.horizon);
  for (int64_t k = 0; k < cfg_.num_points; ++k)
    for (int64_t h = 0; h < cfg_.horizon; ++h) {
      traj_flat[k * 2 * cfg_.horizon + 2 * h] = traj.at(h, k, 0);
      traj_flat[k * 2 * cfg_.horizon + 2 * h + 1] = traj.at(h, k, 1);
    }
  Tensor traj_mat =
      Tensor::from({cfg_.num_points, 2LL * cfg_.horizon}, traj_flat);
  Tensor track_tokens =
      add(add_rowwise(matmul(traj_mat, track_w_), track_b_), slot_enc_);

  Tensor x = nn::concat({track_tokens, img_tokens}, 0);
  for (const auto& layer : fusion_)
    x = layer.forward(x, cfg_.dropout, rng, training).x;
  x = layer_norm(x, final_g_, final_b_);
  Tensor pooled = matmul(Tensor::full({1, x.rows()}, 1.0 / x.rows()), x);

  // late fusion: pooled feature next to the raw flattened trajectory
  Tensor traj_row = Tensor::from({1, 2LL * cfg_.horizon * cfg_.num_points},
                                 std::move(traj_flat));
  Tensor late = nn::concat({pooled, traj_row}, 1);
  Tensor hidden = gelu(add_rowwise(matmul(late, head_w1_), head_b1_));
  return add_rowwise(matmul(hidden, head_w2_), head_b2_);
}

Action PolicyNet::act(const std::vector<std::vector<double>>& stacked_obs,
                      const TrajectoryPrediction& traj) const {
  Rng rng(0);
  Tensor out = forward(stacked_obs, traj, rng, false);
  return Action{out.at(0), out.at(1), out.at(2)};
}

nn::NamedParams PolicyNet::named_params() const {
  nn::NamedParams out;
  out.emplace_back("img_w", img_w_);
  out.emplace_back("img_b", img_b_);
  out.emplace_back("mask_w", mask_w_);
  out.emplace_back("pos_enc", pos_enc_);
  out.emplace_back("track_w", track_w_);
  out.emplace_back("track_b", track_b_);
  out.emplace_back("slot_enc", slot_enc_);
  for (size_t i = 0; i < fusion_.size(); ++i)
    fusion_[i].collect_params("fusion" + std::to_string(i + 1), out);
  out.emplace_back("final_g", final_g_);
  out.emplace_back("final_b", final_b_);
  out.emplace_back("head_w1", head_w1_);
  out.emplace_back("head_b1", head_b1_);
  out.emplace_back("head_w2", head_w2_);
  out.emplace_back("head_b2", head_b2_);
  out.emplace_back("mask_table", mask_table_);
  return out;
}

void to_json(nlohmann::json& j, const PolicyTrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs},       {"batch_size", o.batch_size},
                     {"lr", o.lr},               {"weight_decay", o.weight_decay},
                     {"warmup_epochs", o.warmup_epochs}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, PolicyTrainOptions& o) {
  o = PolicyTrainOptions{};
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.lr = j.value("lr", o.lr);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.warmup_epochs = j.value("warmup_epochs", o.warmup_epochs);
  o.seed = j.value("seed", o.seed);
}

namespace {

std::vector<std::vector<double>> stack_frames(const synth::Episode& ep, int t,
                                              int frame_stack) {
  // repeat-pad at episode start
  std::vector<std::vector<double>> out;
  for (int f = frame_stack - 1; f >= 0; --f)
    out.push_back(ep.frames[static_cast<size_t>(std::max(0, t - f))]);
  return out;
}

}  // namespace

std::vector<synth::Episode> augment_demos(
    const std::vector<synth::DomainSpec>& specs, int per_task,
    double action_noise, uint64_t seed) {
  std::vector<synth::Episode> out;
  Rng root(seed);
  for (size_t d = 0; d < specs.size(); ++d) {
    if (!specs[d].in_domain) continue;
    Rng task = root.stream("aug-demos", d);
    for (int i = 0; i < per_task; ++i)
      out.push_back(
          synth::generate_episode(specs[d], task.next_u64(), action_noise));
  }
  return out;
}

TrajectoryPrediction predict_chunked(const track::Trackformer& model,
                                     const std::vector<double>& image,
                                     const TrajectoryQuery& query,
                                     int instruction_id) {
  int64_t mk = model.config().num_points;
  int64_t k = query.num_points();
  if (k == mk) return model.predict(image, query, instruction_id);
  auto out = TrajectoryPrediction::zeros(model.config().horizon, k);
  for (int64_t base = 0; base < k; base += mk) {
    TrajectoryQuery chunk;
    chunk.timestep = query.timestep;
    for (int64_t i = 0; i < mk; ++i)
      chunk.points.push_back(query.points[static_cast<size_t>(
          std::min(base + i, k - 1))]);
    auto pred = model.predict(image, chunk, instruction_id);
    for (int64_t i = 0; i < mk && base + i < k; ++i)
      for (int64_t h = 0; h < pred.horizon; ++h)
        for (int ax = 0; ax < 2; ++ax)
          out.at(h, base + i, ax) = pred.at(h, i, ax);
  }
  return out;
}

PolicyTrainResult train_policy(PolicyNet& policy,
                               const track::Trackformer& frozen_traj,
                               const std::vector<synth::Episode>& demos,
                               const PolicyTrainOptions& opts,
                               const MetricsFn& on_metrics) {
  if (demos.empty()) throw std::invalid_argument("train_policy: no demos");
  const auto& cfg = policy.config();
  int h = cfg.horizon;

  struct Sample {
    const synth::Episode* ep;
    int t;
    TrajectoryPrediction traj;
    Action target;
  };
  std::vector<Sample> samples;
  auto grid_query = synth::sample_points_grid(cfg.num_points, cfg.image_size,
                                              cfg.image_size);
  for (const auto& ep : demos) {
    if (!ep.has_actions())
      throw std::invalid_argument("train_policy: demo without action labels");
    // Ground-truth conditioning needs the full horizon inside the episode;
    // predicted conditioning only needs the current frame, so every
    // action-labelled step is usable.
    int t_end = cfg.use_ground_truth_tracks
                    ? std::min(ep.length - h, ep.length - 1)
                    : ep.length - 1;
    for (int t = 0; t + 1 <= t_end; ++t) {
      Sample s;
      s.ep = &ep;
      s.t = t;
      auto q = grid_query;
      q.timestep = t;
      // The trajectory model is frozen; its output enters as a constant.
      s.traj = cfg.use_ground_truth_tracks
                   ? synth::ground_truth_tracks(ep, q, h)
                   : predict_chunked(frozen_traj, ep.frames[t], q,
                                     static_cast<int>(ep.instruction_id));
      s.target = ep.actions[static_cast<size_t>(t)];
      samples.push_back(std::move(s));
    }
  }
  if (samples.empty())
    throw std::invalid_argument("train_policy: no usable timesteps");

  nn::AdamWConfig acfg;
  acfg.lr = opts.lr;
  acfg.weight_decay = opts.weight_decay;
  nn::AdamW opt(policy.named_params(), acfg);
  nn::LrSchedule sched;
  sched.base_lr = opts.lr;
  sched.warmup_epochs = opts.warmup_epochs;
  sched.total_epochs = opts.epochs;

  Rng root(opts.seed);
  int steps = static_cast<int>((samples.size() + opts.batch_size - 1) /
                               opts.batch_size);
  PolicyTrainResult result;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    double lr = sched.lr_at(epoch);
    double mse_acc = 0.0;
    for (int step = 0; step < steps; ++step) {
      Rng data_rng = root.stream("data", (uint64_t)epoch * 1000003 + step);
      Rng drop_rng = root.stream("dropout", (uint64_t)epoch * 1000003 + step);
      Tensor batch_loss;
      for (int b = 0; b < opts.batch_size; ++b) {
        const auto& s = samples[data_rng.below(samples.size())];
        Tensor pred = policy.forward(stack_frames(*s.ep, s.t, cfg.frame_stack),
                                     s.traj, drop_rng, true);
        Tensor target = Tensor::from(
            {1, 3}, {s.target.dx, s.target.dy, s.target.grasp});
        Tensor l = mse(pred, target);
        batch_loss = batch_loss.defined() ? add(batch_loss, l) : l;
      }
      Tensor step_loss = scale(batch_loss, 1.0 / opts.batch_size);
      check_finite(step_loss, "policy training loss (step aborted)");
      mse_acc += step_loss.item();
      backward(step_loss);
      opt.step(lr);
    }
    result.final_action_mse = mse_acc / steps;
    if (on_metrics)
      on_metrics(nlohmann::json{{"epoch", epoch},
                                {"action_mse", result.final_action_mse},
                                {"lr", lr}});
  }
  return result;
}

nlohmann::json RolloutRecord::to_json() const {
  return nlohmann::json{{"task_id", task_id},
                        {"seed", seed},
                        {"steps", steps},
                        {"success", success},
                        {"final_distance", final_distance}};
}

RolloutRecord rollout(const PolicyNet& policy,
                      const track::Trackformer& traj_model,
                      synth::World& world, int max_steps) {
  const auto& cfg = policy.config();
  RolloutRecord rec;
  rec.task_id = world.spec().instruction_id;
  rec.final_distance = world.goal_distance();
  auto query = synth::sample_points_grid(cfg.num_points, cfg.image_size,
                                         cfg.image_size);
  std::vector<std::vector<double>> history;
  for (int t = 0; t < max_steps; ++t) {
    auto obs = world.render();
    if (history.empty())
      history.assign(static_cast<size_t>(cfg.frame_stack), obs);
    else {
      history.erase(history.begin());
      history.push_back(obs);
    }
    auto traj = predict_chunked(traj_model, obs, query,
                                world.spec().instruction_id);
    Action a = policy.act(history, traj);
    world.step(a);
    rec.steps = t + 1;
    rec.final_distance = world.goal_distance();
    if (world.success()) {
      rec.success = true;
      break;
    }
  }
  return rec;
}

RolloutRecord rollout_expert(synth::World& world, int max_steps) {
  RolloutRecord rec;
  rec.task_id = world.spec().instruction_id;
  rec.final_distance = world.goal_distance();
  for (int t = 0; t < max_steps; ++t) {
    world.step(world.expert_action());
    rec.steps = t + 1;
    rec.final_distance = world.goal_distance();
    if (world.success()) {
      rec.success = true;
      break;
    }
  }
  return rec;
}

}  // namespace anytraj::policy

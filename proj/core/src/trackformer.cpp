#include "anytraj/trackformer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace anytraj::track {

using nn::Tensor;

bool TrackformerConfig::layer_is_moe(int layer_1based) const {
  return std::find(moe_layer_indices.begin(), moe_layer_indices.end(),
                   layer_1based) != moe_layer_indices.end();
}

void TrackformerConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("config: depth must be >= 1");
  if (model_dim % heads != 0)
    throw std::invalid_argument("config: model_dim must divide by heads");
  if (image_size % patch_size != 0)
    throw std::invalid_argument("config: image_size must divide by patch_size");
  for (int idx : moe_layer_indices)
    if (idx < 1 || idx > depth)
      throw std::invalid_argument("config: moe layer index out of range");
  if (top_k < 1 || top_k > num_experts)
    throw std::invalid_argument("config: top_k out of range");
  if (horizon < 1 || num_points < 1)
    throw std::invalid_argument("config: horizon/num_points must be positive");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("config: dropout out of range");
}

TrackformerConfig TrackformerConfig::paper_preset() { return {}; }

TrackformerConfig TrackformerConfig::desk_preset() {
  TrackformerConfig c;
  c.model_dim = 64;
  c.heads = 4;
  c.ff_dim = 256;
  c.image_size = 32;
  c.patch_size = 8;
  return c;
}

void to_json(nlohmann::json& j, const TrackformerConfig& c) {
  j = nlohmann::json{{"depth", c.depth},
                     {"model_dim", c.model_dim},
                     {"heads", c.heads},
                     {"ff_dim", c.ff_dim},
                     {"dropout", c.dropout},
                     {"moe_layer_indices", c.moe_layer_indices},
                     {"num_experts", c.num_experts},
                     {"top_k", c.top_k},
                     {"horizon", c.horizon},
                     {"num_points", c.num_points},
                     {"lambda_tra", c.lambda_tra},
                     {"lambda_lo_ba", c.lambda_lo_ba},
                     {"lambda_z", c.lambda_z},
                     {"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"num_instructions", c.num_instructions},
                     {"use_slot_encoding", c.use_slot_encoding},
                     {"gate_noise", c.gate_noise},
                     {"gate_noise_scale", c.gate_noise_scale}};
}

void from_json(const nlohmann::json& j, TrackformerConfig& c) {
  c = TrackformerConfig{};
  c.depth = j.value("depth", c.depth);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.heads = j.value("heads", c.heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.moe_layer_indices =
      j.value("moe_layer_indices", c.moe_layer_indices);
  c.num_experts = j.value("num_experts", c.num_experts);
  c.top_k = j.value("top_k", c.top_k);
  c.horizon = j.value("horizon", c.horizon);
  c.num_points = j.value("num_points", c.num_points);
  c.lambda_tra = j.value("lambda_tra", c.lambda_tra);
  c.lambda_lo_ba = j.value("lambda_lo_ba", c.lambda_lo_ba);
  c.lambda_z = j.value("lambda_z", c.lambda_z);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.num_instructions = j.value("num_instructions", c.num_instructions);
  c.use_slot_encoding = j.value("use_slot_encoding", c.use_slot_encoding);
  c.gate_noise = j.value("gate_noise", c.gate_noise);
  c.gate_noise_scale = j.value("gate_noise_scale", c.gate_noise_scale);
}

int64_t trackformer_param_count(const TrackformerConfig& cfg) {
  int64_t d = cfg.model_dim, ff = cfg.ff_dim;
  int64_t h2 = 2LL * cfg.horizon;
  int64_t expert = d * ff + ff + ff * d + d;
  int64_t fixed = (int64_t)cfg.patch_size * cfg.patch_size * 3 * d + d  // patch
                  + (int64_t)cfg.n_patches() * d                        // pos
                  + (int64_t)cfg.num_instructions * d                   // instr
                  + 5 * d + d                                           // track
                  + (int64_t)cfg.num_points * d                         // slot
                  + 2 * d                                               // final ln
                  + d * h2 + h2;                                        // head
  int64_t total = fixed;
  for (int l = 1; l <= cfg.depth; ++l) {
    total += 4 * d;                // two layer norms
    total += 4 * (d * d + d);     // attention
    if (cfg.layer_is_moe(l)) {
      total += d * cfg.num_experts + cfg.num_experts;  // gate
      total += cfg.num_experts * expert;
    } else {
      total += expert;
    }
  }
  return total;
}

Trackformer::Trackformer(TrackformerConfig cfg, Rng& init_rng)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  int64_t d = cfg_.model_dim;
  int64_t p = cfg_.patch_size;
  double pb = 1.0 / std::sqrt(static_cast<double>(p * p * 3));
  patch_w_ = Tensor::uniform({p * p * 3, d}, -pb, pb, init_rng, true);
  patch_b_ = Tensor::zeros({d}, true);
  pos_enc_ = Tensor::uniform({cfg_.n_patches(), d}, -0.02, 0.02, init_rng, true);
  instr_table_ =
      Tensor::uniform({cfg_.num_instructions, d}, -0.02, 0.02, init_rng, true);
  track_w_ = Tensor::uniform({5, d}, -0.5, 0.5, init_rng, true);
  track_b_ = Tensor::zeros({d}, true);
  slot_enc_ =
      Tensor::uniform({cfg_.num_points, d}, -0.02, 0.02, init_rng, true);
  for (int l = 1; l <= cfg_.depth; ++l) {
    if (cfg_.layer_is_moe(l)) {
      auto layer = TransformerLayer::init_moe(d, cfg_.ff_dim, cfg_.heads,
                                              cfg_.num_experts, cfg_.top_k,
                                              init_rng);
      layer.moe_ffn.gate.noise_enabled = cfg_.gate_noise;
      layer.moe_ffn.gate.noise_scale = cfg_.gate_noise_scale;
      // Tied expert init (upcycling): every expert starts from expert 0's
      // weights, so the layer is initially equivalent to its dense
      // counterpart and experts diverge only through routing.
      for (size_t e = 1; e < layer.moe_ffn.experts.size(); ++e) {
        auto& src = layer.moe_ffn.experts[0];
        auto& dst = layer.moe_ffn.experts[e];
        dst.w1.data() = src.w1.data();
        dst.b1.data() = src.b1.data();
        dst.w2.data() = src.w2.data();
        dst.b2.data() = src.b2.data();
      }
      layers_.push_back(std::move(layer));
    } else {
      layers_.push_back(
          TransformerLayer::init_dense(d, cfg_.ff_dim, cfg_.heads, init_rng));
    }
  }
  final_g_ = Tensor::full({d}, 1.0, true);
  final_b_ = Tensor::zeros({d}, true);
  // Zero-init head: an untrained model predicts stationary tracks.
  head_w_ = Tensor::zeros({d, 2LL * cfg_.horizon}, true);
  head_b_ = Tensor::zeros({2LL * cfg_.horizon}, true);
}

void Trackformer::set_gate_noise_scale(double scale) {
  for (auto& layer : layers_)
    if (layer.is_moe) layer.moe_ffn.gate.noise_scale = scale;
}

Trackformer::ForwardResult Trackformer::forward(
    const std::vector<double>& image, const TrajectoryQuery& query,
    int instruction_id, Rng& rng, bool training) const {
  int64_t sz = cfg_.image_size, p = cfg_.patch_size;
  if (static_cast<int64_t>(image.size()) != sz * sz * 3)
    throw std::invalid_argument("forward: image size mismatch");
  if (query.num_points() != cfg_.num_points)
    throw std::invalid_argument("forward: query point count mismatch");
  if (instruction_id < 0 || instruction_id >= cfg_.num_instructions)
    throw std::invalid_argument("forward: instruction id out of range");

  int64_t grid = sz / p;
  int64_t np = grid * grid;
  std::vector<double> patches(static_cast<size_t>(np * p * p * 3));
  for (int64_t gy = 0; gy < grid; ++gy)
    for (int64_t gx = 0; gx < grid; ++gx) {
      int64_t row = gy * grid + gx;
      int64_t o = row * p * p * 3;
      for (int64_t yy = 0; yy < p; ++yy)
        for (int64_t xx = 0; xx < p; ++xx)
          for (int64_t c = 0; c < 3; ++c)
            patches[o + (yy * p + xx) * 3 + c] =
                image[(((gy * p + yy) * sz) + gx * p + xx) * 3 + c];
    }
  Tensor patch_mat = Tensor::from({np, p * p * 3}, std::move(patches));
  Tensor img_tokens =
      add(add_rowwise(matmul(patch_mat, patch_w_), patch_b_), pos_enc_);

  Tensor instr_tok = gather_rows(instr_table_, {instruction_id});

  // Track-token features: normalized coordinates plus the image color
  // bilinearly sampled at the point, so point-on-object membership is
  // readable directly from the token.
  auto sample_channel = [&](double u, double v, int64_t c) {
    double fx = std::clamp(u * static_cast<double>(sz) - 0.5, 0.0,
                           static_cast<double>(sz - 1));
    double fy = std::clamp(v * static_cast<double>(sz) - 0.5, 0.0,
                           static_cast<double>(sz - 1));
    int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
    int64_t x1 = std::min(x0 + 1, sz - 1), y1 = std::min(y0 + 1, sz - 1);
    double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
    auto at = [&](int64_t y, int64_t x) { return image[(y * sz + x) * 3 + c]; };
    return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
           ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
  };
  std::vector<double> coords(static_cast<size_t>(cfg_.num_points) * 5);
  for (int64_t i = 0; i < cfg_.num_points; ++i) {
    double u = query.points[i][0], v = query.points[i][1];
    coords[i * 5] = u;
    coords[i * 5 + 1] = v;
    for (int64_t c = 0; c < 3; ++c)
      coords[i * 5 + 2 + c] = sample_channel(u, v, c);
  }
  Tensor coord_mat = Tensor::from({cfg_.num_points, 5}, coords);
  Tensor track_tokens = add_rowwise(matmul(coord_mat, track_w_), track_b_);
  if (cfg_.use_slot_encoding) track_tokens = add(track_tokens, slot_enc_);

  Tensor x = nn::concat({instr_tok, img_tokens, track_tokens}, 0);

  ForwardResult res;
  for (const auto& layer : layers_) {
    auto out = layer.forward(x, cfg_.dropout, rng, training);
    x = out.x;
    if (out.moe) res.moe_outs.push_back(std::move(*out.moe));
  }
  x = layer_norm(x, final_g_, final_b_);
  Tensor track_states = slice_rows(x, 1 + np, cfg_.num_points);
  Tensor offsets = add_rowwise(matmul(track_states, head_w_), head_b_);

  // residual parameterization: offsets are added to the query coordinates
  std::vector<double> tiled(static_cast<size_t>(cfg_.num_points) * 2 *
                            cfg_.horizon);
  for (int64_t i = 0; i < cfg_.num_points; ++i)
    for (int64_t h = 0; h < cfg_.horizon; ++h) {
      tiled[i * 2 * cfg_.horizon + 2 * h] = query.points[i][0];
      tiled[i * 2 * cfg_.horizon + 2 * h + 1] = query.points[i][1];
    }
  res.pred = add(offsets, Tensor::from({cfg_.num_points, 2LL * cfg_.horizon},
                                       std::move(tiled)));

  res.prediction = TrajectoryPrediction::zeros(cfg_.horizon, cfg_.num_points);
  for (int64_t h = 0; h < cfg_.horizon; ++h)
    for (int64_t i = 0; i < cfg_.num_points; ++i) {
      res.prediction.at(h, i, 0) = res.pred.at(i, 2 * h);
      res.prediction.at(h, i, 1) = res.pred.at(i, 2 * h + 1);
    }
  return res;
}

TrajectoryPrediction Trackformer::predict(const std::vector<double>& image,
                                          const TrajectoryQuery& query,
                                          int instruction_id) const {
  Rng rng(0);  // unused: dropout and gating noise are off in eval mode
  return forward(image, query, instruction_id, rng, false).prediction;
}

Trackformer::LossBreakdown Trackformer::total_loss(
    const Tensor& pred, const Tensor& target,
    const std::vector<moe::MoEForwardResult>& moe_outs) const {
  LossBreakdown lb;
  lb.tra = mse(pred, target);
  if (moe_outs.empty()) {
    lb.lo_ba = Tensor::scalar(0.0);
    lb.z = Tensor::scalar(0.0);
  } else {
    Tensor lbs, zs;
    for (const auto& out : moe_outs) {
      Tensor l = moe::load_balance_loss(out.stats);
      Tensor z = moe::router_z_loss(out.logits);
      lbs = lbs.defined() ? add(lbs, l) : l;
      zs = zs.defined() ? add(zs, z) : z;
    }
    double inv = 1.0 / static_cast<double>(moe_outs.size());
    lb.lo_ba = scale(lbs, inv);
    lb.z = scale(zs, inv);
  }
  lb.total = add(add(scale(lb.tra, cfg_.lambda_tra),
                     scale(lb.lo_ba, cfg_.lambda_lo_ba)),
                 scale(lb.z, cfg_.lambda_z));
  return lb;
}

nn::NamedParams Trackformer::named_params() const {
  nn::NamedParams out;
  out.emplace_back("patch_w", patch_w_);
  out.emplace_back("patch_b", patch_b_);
  out.emplace_back("pos_enc", pos_enc_);
  out.emplace_back("instr_table", instr_table_);
  out.emplace_back("track_w", track_w_);
  out.emplace_back("track_b", track_b_);
  out.emplace_back("slot_enc", slot_enc_);
  for (size_t i = 0; i < layers_.size(); ++i)
    layers_[i].collect_params("layer" + std::to_string(i + 1), out);
  out.emplace_back("final_g", final_g_);
  out.emplace_back("final_b", final_b_);
  out.emplace_back("head_w", head_w_);
  out.emplace_back("head_b", head_b_);
  return out;
}

int64_t Trackformer::param_count() const {
  int64_t n = 0;
  for (const auto& [name, p] : named_params()) n += p.size();
  return n;
}

Tensor tracks_to_target(const TrajectoryPrediction& gt) {
  std::vector<double> data(static_cast<size_t>(gt.num_points) * 2 *
                           gt.horizon);
  for (int64_t h = 0; h < gt.horizon; ++h)
    for (int64_t k = 0; k < gt.num_points; ++k) {
      data[k * 2 * gt.horizon + 2 * h] = gt.at(h, k, 0);
      data[k * 2 * gt.horizon + 2 * h + 1] = gt.at(h, k, 1);
    }
  return Tensor::from({gt.num_points, 2 * gt.horizon}, std::move(data));
}

void to_json(nlohmann::json& j, const TrackTrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs},
                     {"batch_size", o.batch_size},
                     {"steps_per_epoch", o.steps_per_epoch},
                     {"lr", o.lr},
                     {"weight_decay", o.weight_decay},
                     {"warmup_epochs", o.warmup_epochs},
                     {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, TrackTrainOptions& o) {
  o = TrackTrainOptions{};
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.steps_per_epoch = j.value("steps_per_epoch", o.steps_per_epoch);
  o.lr = j.value("lr", o.lr);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.warmup_epochs = j.value("warmup_epochs", o.warmup_epochs);
  o.seed = j.value("seed", o.seed);
}

EpochMetrics train_trackformer(Trackformer& model,
                               const std::vector<synth::Episode>& episodes,
                               const std::vector<size_t>& train_idx,
                               const TrackTrainOptions& opts,
                               const MetricsFn& on_metrics) {
  if (train_idx.empty())
    throw std::invalid_argument("train: empty training set");
  const auto& cfg = model.config();
  int h = cfg.horizon;

  nn::AdamWConfig acfg;
  acfg.lr = opts.lr;
  acfg.weight_decay = opts.weight_decay;
  nn::AdamW opt(model.named_params(), acfg);
  nn::LrSchedule sched;
  sched.base_lr = opts.lr;
  sched.warmup_epochs = opts.warmup_epochs;
  sched.total_epochs = opts.epochs;

  Rng root(opts.seed);
  int steps = opts.steps_per_epoch > 0
                  ? opts.steps_per_epoch
                  : static_cast<int>((train_idx.size() + opts.batch_size - 1) /
                                     opts.batch_size);

  size_t n_moe_layers = cfg.moe_layer_indices.size();
  EpochMetrics last;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    double lr = sched.lr_at(epoch);
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.q_per_layer.assign(n_moe_layers,
                          std::vector<double>(cfg.num_experts, 0.0));
    em.p_per_layer.assign(n_moe_layers,
                          std::vector<double>(cfg.num_experts, 0.0));
    int64_t stat_batches = 0;

    for (int step = 0; step < steps; ++step) {
      Rng data_rng = root.stream("data", (uint64_t)epoch * 1000003 + step);
      Rng drop_rng = root.stream("dropout", (uint64_t)epoch * 1000003 + step);

      Tensor batch_total, first;
      double tra_acc = 0, lb_acc = 0, z_acc = 0;
      for (int b = 0; b < opts.batch_size; ++b) {
        const auto& ep =
            episodes[train_idx[data_rng.below(train_idx.size())]];
        if (ep.length <= h)
          throw std::invalid_argument("train: episode shorter than horizon");
        int t0 = static_cast<int>(data_rng.below(ep.length - h));
        std::vector<std::vector<double>> clip(ep.frames.begin() + t0,
                                              ep.frames.begin() + t0 + h + 1);
        auto query = synth::sample_points_variance_filter(
            clip, ep.height, ep.width, cfg.num_points, data_rng);
        query.timestep = t0;
        auto gt = synth::ground_truth_tracks(ep, query, h);

        auto fwd = model.forward(ep.frames[t0], query,
                                 static_cast<int>(ep.instruction_id),
                                 drop_rng, true);
        auto loss =
            model.total_loss(fwd.pred, tracks_to_target(gt), fwd.moe_outs);
        tra_acc += loss.tra.item();
        lb_acc += loss.lo_ba.item();
        z_acc += loss.z.item();
        for (size_t li = 0; li < fwd.moe_outs.size(); ++li) {
          const auto& st = fwd.moe_outs[li].stats;
          for (int e = 0; e < cfg.num_experts; ++e) {
            em.q_per_layer[li][e] += st.q[e];
            em.p_per_layer[li][e] += st.p.at(0, e);
          }
        }
        ++stat_batches;
        batch_total =
            batch_total.defined() ? add(batch_total, loss.total) : loss.total;
      }
      Tensor step_loss = scale(batch_total, 1.0 / opts.batch_size);
      check_finite(step_loss, "training loss (step aborted)");
      backward(step_loss);
      opt.step(lr);

      em.l_tra += tra_acc / opts.batch_size;
      em.l_lo_ba += lb_acc / opts.batch_size;
      em.l_z += z_acc / opts.batch_size;
    }
    em.l_tra /= steps;
    em.l_lo_ba /= steps;
    em.l_z /= steps;
    if (stat_batches > 0) {
      for (auto& v : em.q_per_layer)
        for (auto& q : v) q /= static_cast<double>(stat_batches);
      for (auto& v : em.p_per_layer)
        for (auto& p : v) p /= static_cast<double>(stat_batches);
    }
    if (on_metrics) {
      on_metrics(nlohmann::json{{"epoch", em.epoch},
                                {"step", (em.epoch + 1) * steps},
                                {"l_tra", em.l_tra},
                                {"l_lo_ba", em.l_lo_ba},
                                {"l_z", em.l_z},
                                {"lr", em.lr},
                                {"q_per_layer", em.q_per_layer},
                                {"p_per_layer", em.p_per_layer}});
    }
    last = std::move(em);
  }
  return last;
}

}  // namespace anytraj::track

#include <benchmark/benchmark.h>

#include "anytraj/moe.hpp"
#include "anytraj/rng.hpp"
#include "anytraj/synthdata.hpp"
#include "anytraj/tensor.hpp"
#include "anytraj/trackformer.hpp"

using namespace anytraj;

static void BM_matmul(benchmark::State& state) {
  int64_t n = state.range(0);
  Rng rng(1);
  nn::Tensor a = nn::Tensor::uniform({n, n}, -1, 1, rng);
  nn::Tensor b = nn::Tensor::uniform({n, n}, -1, 1, rng);
  for (auto _ : state) benchmark::DoNotOptimize(nn::matmul(a, b).data());
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_moe_forward(benchmark::State& state) {
  int64_t n_experts = state.range(0);
  Rng rng(2);
  moe::MoELayer layer =
      moe::MoELayer::init(64, 256, static_cast<int>(n_experts), 1, rng);
  nn::Tensor tokens = nn::Tensor::uniform({48, 64}, -1, 1, rng);
  for (auto _ : state) {
    Rng fr(0);
    benchmark::DoNotOptimize(
        moe::moe_forward(tokens, layer, fr, false).output.data());
  }
}
BENCHMARK(BM_moe_forward)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

static void BM_trackformer_predict(benchmark::State& state) {
  Rng rng(3);
  auto cfg = track::TrackformerConfig::desk_preset();
  track::Trackformer model(cfg, rng);
  synth::DomainSpec spec;
  spec.image_size = cfg.image_size;
  spec.episode_len = 8;
  auto ep = synth::generate_episode(spec, 4);
  auto query =
      synth::sample_points_grid(cfg.num_points, cfg.image_size, cfg.image_size);
  for (auto _ : state)
    benchmark::DoNotOptimize(model.predict(ep.frames[0], query, 0).coords);
}
BENCHMARK(BM_trackformer_predict);

static void BM_train_step(benchmark::State& state) {
  Rng rng(5);
  auto cfg = track::TrackformerConfig::desk_preset();
  track::Trackformer model(cfg, rng);
  synth::DomainSpec spec;
  spec.image_size = cfg.image_size;
  spec.episode_len = cfg.horizon + 4;
  spec.in_domain = true;
  auto ep = synth::generate_episode(spec, 6);
  auto query =
      synth::sample_points_grid(cfg.num_points, cfg.image_size, cfg.image_size);
  auto target = track::tracks_to_target(
      synth::ground_truth_tracks(ep, query, cfg.horizon));
  for (auto _ : state) {
    Rng fr(0);
    auto fwd = model.forward(ep.frames[0], query, 0, fr, true);
    auto loss = model.total_loss(fwd.pred, target, fwd.moe_outs);
    nn::backward(loss.total);
    for (auto& [name, p] : model.named_params()) p.zero_grad();
    benchmark::DoNotOptimize(loss.total.item());
  }
}
BENCHMARK(BM_train_step);

BENCHMARK_MAIN();

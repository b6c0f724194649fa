#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "alct/model.hpp"

namespace {

using namespace alct;

ModelConfig small_config(int latent_max) {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.latent_max = latent_max;
  c.max_seq_len = 12;
  return c;
}

std::vector<std::vector<int>> tokens_of(std::initializer_list<std::vector<int>> seqs) { return seqs; }

TEST(ModelConfig, Validation) {
  auto c = small_config(2);
  EXPECT_EQ(c.k_max(), 3);
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config(2);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config(-1);
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, KeyValueRoundTrip) {
  auto c = small_config(3);
  c.router = RouterKind::kPerStepTwoLayer;
  c.feed = FeedKind::kAffine;
  c.tau = 0.25;
  KeyValues kv;
  c.write(kv, "model.");
  const auto back = ModelConfig::from(KeyValues::parse(kv.str()), "model.");
  EXPECT_EQ(back.latent_max, 3);
  EXPECT_EQ(back.router, RouterKind::kPerStepTwoLayer);
  EXPECT_EQ(back.feed, FeedKind::kAffine);
  EXPECT_EQ(back.tau, 0.25);
}

TEST(LatentModel, ParametersAndRouterInit) {
  auto c = small_config(3);
  c.router = RouterKind::kPerStepAffine;
  LatentModel<double> m(c, 1);
  EXPECT_EQ(m.parameter("router.2.w2").var->value.rows(), 16);
  EXPECT_THROW(m.parameter("router.3.w2"), InvalidInput);
  EXPECT_EQ(m.router_parameter_count(), 17u);
  const std::size_t per_layer = 2 * 16 + 4 * 16 * 16 + 3 * 16 * 24;
  EXPECT_EQ(m.compute_parameter_count(), 2 * per_layer + 16 + 16 * 20);
  // Zero weights and a +2 bias: every token starts with g = sigmoid(2).
  Tape<double> tape(false);
  const auto r = m.unroll(tape, tokens_of({{1, 2, 3}}), {});
  for (const auto& g : r.steps[0].gates) EXPECT_NEAR(g, 1.0 / (1.0 + std::exp(-2.0)), 1e-12);
}

TEST(LatentModel, SameSeedSameWeights) {
  LatentModel<float> a(small_config(1), 9), b(small_config(1), 9), c(small_config(1), 10);
  EXPECT_EQ(a.parameter("layers.1.wq").var->value, b.parameter("layers.1.wq").var->value);
  EXPECT_NE(a.parameter("layers.1.wq").var->value, c.parameter("layers.1.wq").var->value);
}

TEST(EmbedStepInput, Contract) {
  LatentModel<double> m(small_config(2), 2);
  Tape<double> tape(false);
  const auto e = m.embed_step_input(tape, 1, {7}, nullptr);
  EXPECT_EQ(e->value.row(0), m.embedding_table()->value.row(7));
  auto prev = make_var<double>(Matrix<double>::Constant(1, 16, 0.3));
  EXPECT_EQ(m.embed_step_input(tape, 2, {}, prev)->value, prev->value);
  EXPECT_THROW(m.embed_step_input(tape, 3, {}, nullptr), InvalidInput);
}

TEST(AffineFeed, StartsAsIdentity) {
  auto c = small_config(2);
  c.feed = FeedKind::kAffine;
  LatentModel<double> affine(c, 4);
  LatentModel<double> ident(small_config(2), 4);
  Tape<double> tape(false);
  UnrollOptions<double> opt;
  opt.prune = false;
  const auto a = affine.unroll(tape, tokens_of({{1, 4, 2}}), {}, opt);
  const auto b = ident.unroll(tape, tokens_of({{1, 4, 2}}), {}, opt);
  EXPECT_LE((a.z_final->value - b.z_final->value).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ForwardStep, EmptyActiveSetIsNoop) {
  LatentModel<double> m(small_config(1), 3);
  KVCache<double> cache(2, 2);
  Tape<double> tape(false);
  std::vector<mask::Occupancy> occ{mask::Occupancy::full(2, 2)};
  const auto out = m.forward_step(tape, 1, {}, cache, occ, nullptr);
  EXPECT_FALSE(out.z);
  EXPECT_EQ(cache.size(), 0u);
}

TEST(ForwardStep, RequiresEarlierSteps) {
  LatentModel<double> m(small_config(1), 3);
  KVCache<double> cache(2, 2);
  Tape<double> tape(false);
  std::vector<mask::Occupancy> occ{mask::Occupancy::full(2, 2)};
  auto in = make_var<double>(Matrix<double>::Zero(2, 16));
  EXPECT_THROW(m.forward_step(tape, 2, {{0, 1}, {0, 2}}, cache, occ, in), InvalidInput);
}

TEST(ForwardStep, CacheOccupancyMismatchIsDetected) {
  LatentModel<double> m(small_config(1), 3);
  KVCache<double> cache(2, 2);
  Tape<double> tape(false);
  std::vector<mask::Occupancy> occ{mask::Occupancy::full(2, 2)};
  // Only token 1 runs step 1, but the occupancy claims both are active.
  auto in = m.embed_step_input(tape, 1, {3}, nullptr);
  EXPECT_THROW(m.forward_step(tape, 1, {{0, 1}}, cache, occ, in), InvalidInput);
}

TEST(ForwardStep, StepOneMatchesVanilla) {
  LatentModel<double> m(small_config(2), 5);
  KVCache<double> cache(2, 3);
  Tape<double> tape(false);
  std::vector<mask::Occupancy> occ{mask::Occupancy::full(4, 3)};
  std::vector<Entry> rows{{0, 1}, {0, 2}, {0, 3}, {0, 4}};
  const auto out = m.forward_step(tape, 1, rows, cache, occ, m.embed_step_input(tape, 1, {5, 1, 1, 9}, nullptr));
  const auto vanilla = m.forward_vanilla(tape, tokens_of({{5, 1, 1, 9}}));
  EXPECT_LE((out.z->value - vanilla->value).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(cache.size(), 4u);
  EXPECT_EQ(out.gate_logits->value.rows(), 4);
}

TEST(Unroll, ConstantHalfGatesRunTwoSteps) {
  auto c = small_config(3);
  LatentModel<double> m(c, 6);
  Tape<double> tape(false);
  UnrollOptions<double> opt;
  opt.tau = 0.3;
  opt.gate_override = [](int, int, int, double) { return 0.5; };
  const auto r = m.unroll(tape, tokens_of({{1, 2, 3, 4}, {5, 6, 7, 8}}), {}, opt);
  for (int s = 0; s < 2; ++s) {
    for (int t = 1; t <= 4; ++t) {
      EXPECT_EQ(r.schedule(s, t).k_star, 2);
      EXPECT_EQ(r.schedule(s, t).hat_exit, (std::vector<double>{0.5, 0.5}));
    }
  }
  EXPECT_EQ(r.active_counts, (std::vector<int>{8, 8}));
  EXPECT_DOUBLE_EQ(r.mean_executed_length(), 1.0);
}

// Token 3 halts after step 1, token 2 after step 2, token 1 runs all four.
UnrollOptions<double> scripted_pruning() {
  UnrollOptions<double> opt;
  opt.gate_override = [](int, int t, int k, double) {
    if (t == 3) return 0.01;
    if (t == 2 && k == 2) return 0.01;
    return 0.9;
  };
  return opt;
}

TEST(Unroll, ScriptedPruningActiveCounts) {
  LatentModel<double> m(small_config(3), 7);
  Tape<double> tape(false);
  const auto r = m.unroll(tape, tokens_of({{4, 8, 15}}), {}, scripted_pruning());
  EXPECT_EQ(r.active_counts, (std::vector<int>{3, 2, 1, 1}));
  EXPECT_EQ(r.executed_lengths(), (std::vector<int>{3, 1, 0}));
  const auto flops = count_active_flops(r.active_counts, m);
  EXPECT_NEAR(flops.backbone / vanilla_flops(3, m), 7.0 / 3.0, 1e-12);
  // Monotone active set.
  for (std::size_t k = 1; k < r.steps.size(); ++k) {
    std::set<std::pair<int, int>> prev;
    for (const auto& e : r.steps[k - 1].entries) prev.insert({e.seq, e.t});
    for (const auto& e : r.steps[k].entries) EXPECT_TRUE(prev.count({e.seq, e.t}));
  }
}

TEST(Unroll, NoPruningCostsKMaxTimesVanilla) {
  for (int latent = 0; latent <= 4; ++latent) {
    LatentModel<double> m(small_config(latent), 8);
    Tape<double> tape(false);
    UnrollOptions<double> opt;
    opt.prune = false;
    const auto r = m.unroll(tape, tokens_of({{1, 2, 3}, {3, 2, 1}}), {}, opt);
    const auto f = count_active_flops(r.active_counts, m);
    EXPECT_EQ(f.backbone, double(m.k_max()) * vanilla_flops(6, m));
    EXPECT_EQ(f.router, 6.0 * double(m.router_parameter_count()) * 6.0 * double(latent));
  }
}

TEST(Unroll, RouterNoneRunsEveryStepAndUsesTheLastState) {
  auto c = small_config(2);
  c.router = RouterKind::kNone;
  LatentModel<double> m(c, 9);
  Tape<double> tape(false);
  const auto r = m.unroll(tape, tokens_of({{1, 2, 3}}), {});
  EXPECT_EQ(r.active_counts, (std::vector<int>{3, 3, 3}));
  EXPECT_EQ(r.z_final->value, r.steps[2].z->value);
  EXPECT_EQ(m.router_parameter_count(), 0u);
}

TEST(Unroll, PTargetIsTheLabelProbability) {
  LatentModel<double> m(small_config(1), 10);
  Tape<double> tape(false);
  const auto toks = tokens_of({{1, 2, 3}});
  const auto r = m.unroll(tape, toks, next_token_targets(toks));
  const Matrix<double> lg = r.steps[0].z->value * m.lm_head()->value;
  const double p = std::exp(lg(0, 2)) / lg.row(0).array().exp().sum();
  EXPECT_NEAR(r.steps[0].p_target[0], p, 1e-14);
  EXPECT_EQ(r.steps[0].p_target[2], -1.0);
  EXPECT_EQ(r.p_target_trajectory(0, 1).size(), std::size_t(r.schedule(0, 1).k_star));
}

TEST(Unroll, InputErrors) {
  LatentModel<double> m(small_config(1), 11);
  Tape<double> tape(false);
  EXPECT_THROW(m.unroll(tape, tokens_of({{1, 2}, {1}}), {}), InvalidInput);
  EXPECT_THROW(m.unroll(tape, {std::vector<int>(13, 1)}, {}), InvalidInput);
  UnrollOptions<double> opt;
  opt.tau = 0.0;
  EXPECT_THROW(m.unroll(tape, tokens_of({{1}}), {}, opt), InvalidInput);
  const auto empty = m.unroll(tape, {}, {});
  EXPECT_EQ(empty.z_final->value.rows(), 0);
}

TEST(KVCache, RejectsOutOfOrderRows) {
  KVCache<double> cache(1, 2);
  const std::vector<Entry> a{{0, 2}}, b{{0, 1}};
  cache.add_entries(1, a);
  EXPECT_THROW(cache.add_entries(1, b), InvalidInput);
}

TEST(Flops, Accounting) {
  const std::vector<int> counts{3, 2, 1, 1};
  const auto f = count_active_flops(counts, 100, 10, 4);
  EXPECT_EQ(f.backbone, 6.0 * 100 * 7);
  EXPECT_EQ(f.router, 6.0 * 10 * 6);
  EXPECT_EQ(f.total(), f.backbone + f.router);
  // Paper-scale sanity: the reported budget sits below K_max x vanilla.
  EXPECT_LT(7.47 / 2.18, 4.0);
  EXPECT_NEAR(7.47 / 2.18, 3.43, 5e-3);
}

}  // namespace

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "alct/checkpoint.hpp"
#include "alct/corpus.hpp"
#include "alct/optim.hpp"
#include "alct/tokenizer.hpp"

namespace {

using namespace alct;
namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "alct_test_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

Corpus counting_corpus(std::size_t n, std::uint32_t vocab) {
  Corpus c;
  c.vocab_size = vocab;
  for (std::size_t i = 0; i < n; ++i) c.tokens.push_back(std::uint32_t(i % vocab));
  return c;
}

TEST(Corpus, RoundTrip) {
  const auto path = temp_path("roundtrip.bin");
  const auto c = counting_corpus(1000, 37);
  write_corpus(path.string(), c);
  const auto r = read_corpus(path.string());
  EXPECT_EQ(r.vocab_size, 37u);
  EXPECT_EQ(r.tokens, c.tokens);
}

TEST(Corpus, RejectsMalformedFiles) {
  const auto good = temp_path("good.bin");
  write_corpus(good.string(), counting_corpus(64, 10));
  const std::string bytes = slurp(good);
  const auto bad = temp_path("bad.bin");

  auto expect_format_error = [&](std::string b) {
    spit(bad, b);
    EXPECT_THROW(read_corpus(bad.string()), FormatError);
  };
  std::string b = bytes;
  b[0] = 'X';
  expect_format_error(b);  // magic
  b = bytes;
  b[4] = 9;
  expect_format_error(b);  // version
  b = bytes;
  b[8] = b[9] = b[10] = b[11] = 0;
  expect_format_error(b);  // zero vocab
  expect_format_error(bytes.substr(0, bytes.size() - 3));  // truncated payload
  expect_format_error(bytes.substr(0, 10));                // truncated header
  b = bytes;
  b[20] = 50;  // first token id >= vocab
  expect_format_error(b);

  Corpus empty;
  empty.vocab_size = 4;
  write_corpus(bad.string(), empty);
  EXPECT_THROW(read_corpus(bad.string()), FormatError);
  EXPECT_THROW(read_corpus(temp_path("missing.bin").string()), Error);

  Corpus invalid = counting_corpus(8, 4);
  invalid.tokens[3] = 4;
  EXPECT_THROW(write_corpus(bad.string(), invalid), InvalidInput);
}

TEST(WindowSampler, UnshuffledVisitsWindowsInOrder) {
  const int L = 16;
  const auto c = counting_corpus(10 * L + 5, 1000);
  WindowSampler s(c, L, 7, false);
  ASSERT_EQ(s.window_count(), 10u);
  const auto batch = s.next_batch(10);
  for (int i = 0; i < 10; ++i) {
    ASSERT_EQ(batch[std::size_t(i)].size(), std::size_t(L));
    EXPECT_EQ(batch[std::size_t(i)].front(), i * L);
    EXPECT_EQ(batch[std::size_t(i)].back(), i * L + L - 1);
  }
  EXPECT_EQ(s.next_batch(1)[0].front(), 0);  // wraps into the next epoch
  EXPECT_EQ(s.state().epoch, 1u);
}

TEST(WindowSampler, ShuffledEpochIsAPermutationAndDeterministic) {
  const int L = 8;
  const auto c = counting_corpus(50 * L, 100000);
  WindowSampler a(c, L, 3), b(c, L, 3), other(c, L, 4);
  const auto ba = a.next_batch(50), bb = b.next_batch(50), bo = other.next_batch(50);
  EXPECT_EQ(ba, bb);
  EXPECT_NE(ba, bo);
  std::set<int> starts;
  for (const auto& w : ba) starts.insert(w.front());
  EXPECT_EQ(starts.size(), 50u);
  EXPECT_NE(a.next_batch(50), ba);  // a new permutation each epoch
}

TEST(WindowSampler, StateRestoresTheStream) {
  const auto c = counting_corpus(40 * 8, 1000);
  WindowSampler a(c, 8, 11);
  a.next_batch(55);
  const auto saved = a.state();
  const auto expected = a.next_batch(30);
  WindowSampler b(c, 8, 11);
  b.set_state(saved);
  EXPECT_EQ(b.next_batch(30), expected);
}

TEST(WindowSampler, Errors) {
  const auto c = counting_corpus(10, 5);
  EXPECT_THROW(WindowSampler(c, 11, 0), InvalidInput);
  EXPECT_THROW(WindowSampler(c, 1, 0), InvalidInput);
  WindowSampler s(c, 5, 0);
  EXPECT_THROW(s.set_state({0, 3}), InvalidInput);
}

TEST(SyntheticText, DeterministicAndSized) {
  const auto a = synthetic_text(5000, 1), b = synthetic_text(5000, 1), c = synthetic_text(5000, 2);
  EXPECT_EQ(a.size(), 5000u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_NE(a.find('+'), std::string::npos);
  EXPECT_NE(a.find(". "), std::string::npos);
}

TEST(Tokenizer, RoundTripAndSpecials) {
  const std::string text = "a+b=c;\n\xff";
  const auto ids = ByteTokenizer::encode(text, true);
  ASSERT_EQ(ids.size(), text.size() + 1);
  EXPECT_EQ(ids[0], ByteTokenizer::kBos);
  EXPECT_EQ(ids.back(), 255);
  EXPECT_EQ(ByteTokenizer::decode(ids), text);
  EXPECT_EQ(ByteTokenizer::display('\n'), "\\n");
  EXPECT_EQ(ByteTokenizer::display(ByteTokenizer::kEos), "<eos>");
  EXPECT_EQ(ByteTokenizer::display(0x01), "<01>");
  EXPECT_THROW(ByteTokenizer::decode({300}), InvalidInput);
  EXPECT_THROW(ByteTokenizer::display(-1), InvalidInput);
}

TEST(LrSchedule, WarmupThenCosine) {
  TrainConfig t;
  t.lr = 1e-3;
  t.steps = 100;
  t.warmup_frac = 0.1;
  t.min_lr_frac = 0.1;
  const auto s = LrSchedule::from(t);
  EXPECT_EQ(s.warmup_steps, 10);
  EXPECT_NEAR(s(0), 1e-4, 1e-15);
  EXPECT_NEAR(s(9), 1e-3, 1e-15);
  EXPECT_NEAR(s(10), 1e-3, 1e-15);
  EXPECT_NEAR(s(55), 1e-4 + 0.9e-3 * 0.5, 1e-12);
  EXPECT_NEAR(s(100), 1e-4, 1e-15);
  EXPECT_NEAR(s(500), 1e-4, 1e-15);
  for (int i = 10; i < 100; ++i) EXPECT_LE(s(i + 1), s(i) + 1e-18);

  t.decay = DecayShape::kLinear;
  EXPECT_NEAR(LrSchedule::from(t)(55), 1e-4 + 0.9e-3 * 0.5, 1e-12);
  t.decay = DecayShape::kConstant;
  EXPECT_EQ(LrSchedule::from(t)(90), 1e-3);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.latent_max = 2;
  c.router_hidden = 4;
  c.max_seq_len = 8;
  return c;
}

TEST(Optim, ClipGradNorm) {
  LatentModel<double> m(tiny_config(), 1);
  for (const auto& p : m.parameters()) p.var->grad = Matrix<double>::Constant(p.var->value.rows(), p.var->value.cols(), 1.0);
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += std::size_t(p.var->value.size());
  const double norm = clip_grad_norm(m.parameters(), 1.0);
  EXPECT_NEAR(norm, std::sqrt(double(n)), 1e-9);
  EXPECT_NEAR(clip_grad_norm(m.parameters(), 0.0), 1.0, 1e-9);
}

TEST(Optim, AdamWMatchesHandComputedUpdate) {
  LatentModel<double> m(tiny_config(), 1);
  const auto& params = m.parameters();
  AdamW<double> opt(params, {0.9, 0.95, 1e-8, 0.1});
  const auto& p0 = params[0];
  const double w = p0.var->value(0, 0);
  for (const auto& p : params) p.var->grad = Matrix<double>::Constant(p.var->value.rows(), p.var->value.cols(), 0.5);
  opt.step(params, 0.01);
  // First step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  const double decayed = p0.decay ? w * (1.0 - 0.01 * 0.1) : w;
  EXPECT_NEAR(p0.var->value(0, 0), decayed - 0.01 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_EQ(opt.steps_taken(), 1);

  std::vector<Parameter<double>> fewer(params.begin(), params.end() - 1);
  EXPECT_THROW(opt.step(fewer, 0.01), InvalidInput);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TrainConfig t;
  t.model = tiny_config();
  t.corpus = "some/path.bin";
  LatentModel<float> m(t.model, 5);
  AdamW<float> opt(m.parameters(), {});
  for (const auto& p : m.parameters()) p.var->grad = Matrix<float>::Random(p.var->value.rows(), p.var->value.cols());
  opt.step(m.parameters(), 1e-3);
  TrainingState state{7, {2, 3}, 1234, 5.5e9};

  const auto path = temp_path("ckpt.alck");
  save_checkpoint(path.string(), make_training_checkpoint(t, m, opt, state));
  const auto c = load_checkpoint(path.string());
  EXPECT_EQ(c.header.get("train.corpus"), "some/path.bin");

  LatentModel<float> m2(t.model, 99);
  AdamW<float> opt2(m2.parameters(), {});
  const auto s2 = restore_training_state(c, m2, opt2);
  EXPECT_EQ(s2.step, 7);
  EXPECT_EQ(s2.sampler.epoch, 2u);
  EXPECT_EQ(s2.sampler.cursor, 3u);
  EXPECT_EQ(s2.tokens_seen, 1234);
  EXPECT_EQ(s2.flops_cum, 5.5e9);
  EXPECT_EQ(opt2.steps_taken(), 1);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(m.parameters()[i].var->value, m2.parameters()[i].var->value) << m.parameters()[i].name;
    EXPECT_EQ(opt.first_moments()[i], opt2.first_moments()[i]);
    EXPECT_EQ(opt.second_moments()[i], opt2.second_moments()[i]);
  }

  const auto again = temp_path("ckpt2.alck");
  save_checkpoint(again.string(), make_training_checkpoint(t, m2, opt2, s2));
  EXPECT_EQ(slurp(path), slurp(again));

  const auto loaded = load_model<double>(path.string());
  EXPECT_EQ(loaded.config().d_model, t.model.d_model);
  EXPECT_EQ(loaded.parameters()[0].var->value, m.parameters()[0].var->value.cast<double>());
}

TEST(Checkpoint, RejectsMalformedFiles) {
  LatentModel<float> m(tiny_config(), 5);
  Checkpoint c;
  tiny_config().write(c.header);
  add_model_blobs(c, m);
  const auto path = temp_path("model.alck");
  save_checkpoint(path.string(), c);
  const std::string bytes = slurp(path);
  const auto bad = temp_path("bad.alck");

  std::string b = bytes;
  b[1] = 'X';
  spit(bad, b);
  EXPECT_THROW(load_checkpoint(bad.string()), FormatError);
  b = bytes;
  b[4] = 2;
  spit(bad, b);
  EXPECT_THROW(load_checkpoint(bad.string()), FormatError);
  spit(bad, bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_checkpoint(bad.string()), FormatError);

  auto other = tiny_config();
  other.d_model = 12;
  other.n_heads = 3;
  LatentModel<float> wrong(other, 1);
  EXPECT_THROW(load_model_weights(c, wrong), FormatError);
  Checkpoint missing = c;
  missing.blobs.pop_back();
  EXPECT_THROW(load_model<float>(missing), FormatError);
}

}  // namespace

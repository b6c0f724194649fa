#pragma once

// Pretraining loop: windows from a token corpus, unroll, objective, AdamW.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "alct/checkpoint.hpp"
#include "alct/config.hpp"
#include "alct/corpus.hpp"
#include "alct/model.hpp"
#include "alct/objective.hpp"
#include "alct/optim.hpp"

namespace alct {

struct TrainMetrics {
  long long step = 0;  // optimization steps completed
  long long tokens = 0;
  double lr = 0.0;
  double ce = 0.0;
  double adaptive = 0.0;
  double total = 0.0;
  double prune_ratio = 0.0;
  double mean_len = 0.0;
  std::vector<int> active_counts;
  double flops_step = 0.0;
  double flops_cum = 0.0;
  double grad_norm = 0.0;
  std::optional<double> eval_ce;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step},         {"tokens", tokens},     {"lr", lr},
                     {"ce", ce},             {"adaptive", adaptive}, {"total", total},
                     {"prune_ratio", prune_ratio}, {"mean_len", mean_len}, {"active_counts", active_counts},
                     {"flops_step", flops_step},   {"flops_cum", flops_cum}, {"grad_norm", grad_norm}};
    if (eval_ce) j["eval_ce"] = *eval_ce;
    return j;
  }
};

/// 1 - E[l] / l_max, defined as 0 when there is no latent budget.
inline double prune_ratio_of(double mean_len, int latent_max) {
  return latent_max > 0 ? 1.0 - mean_len / double(latent_max) : 0.0;
}

struct EvalResult {
  double ce = 0.0;  // mean nats per supervised token
  double ppl = 0.0;
  long long tokens = 0;
  double mean_len = 0.0;
  double prune_ratio = 0.0;
};

/// Teacher-forced evaluation over consecutive corpus windows with the full
/// adaptive path (truncation and mixing). max_windows = 0 uses every window.
template <class T>
EvalResult evaluate(const LatentModel<T>& model, const Corpus& corpus, int seq_len, std::size_t max_windows = 0,
                    int batch_size = 8, bool vanilla = false) {
  if (corpus.vocab_size > std::uint32_t(model.config().vocab_size)) {
    throw InvalidInput("corpus vocabulary (" + std::to_string(corpus.vocab_size) + ") exceeds the model's (" +
                       std::to_string(model.config().vocab_size) + ")");
  }
  WindowSampler windows(corpus, seq_len, 0, false);
  UnrollOptions<T> no_p_target;
  no_p_target.compute_p_target = false;
  std::size_t n = windows.window_count();
  if (max_windows > 0) n = std::min(n, max_windows);
  double nats = 0.0, len_sum = 0.0;
  long long count = 0, len_count = 0;
  for (std::size_t start = 0; start < n; start += std::size_t(batch_size)) {
    std::vector<std::vector<int>> batch;
    for (std::size_t i = start; i < std::min(n, start + std::size_t(batch_size)); ++i) batch.push_back(windows.window(i));
    const auto targets = next_token_targets(batch);
    const auto flat = objective::flatten_targets(targets);
    Tape<T> tape(false);
    Var<T> z;
    if (vanilla) {
      z = model.forward_vanilla(tape, batch);
    } else {
      const auto r = model.unroll(tape, batch, targets, no_p_target);
      z = r.z_final;
      for (int l : r.executed_lengths()) len_sum += l;
      len_count += (long long)r.schedules.size();
    }
    const auto ce = objective::ce_loss(tape, model, z, flat, Reduction::kSum);
    nats += double(ce->value(0, 0));
    for (int y : flat) count += y >= 0;
  }
  EvalResult e;
  e.tokens = count;
  e.ce = count ? nats / double(count) : 0.0;
  e.ppl = std::exp(e.ce);
  e.mean_len = len_count ? len_sum / double(len_count) : 0.0;
  e.prune_ratio = prune_ratio_of(e.mean_len, model.config().latent_max);
  return e;
}

template <class T>
class Trainer {
 public:
  using Callback = std::function<void(const TrainMetrics&)>;

  Trainer(TrainConfig config, Corpus corpus, std::optional<Corpus> eval_corpus = std::nullopt)
      : config_(std::move(config)),
        corpus_(std::move(corpus)),
        eval_corpus_(std::move(eval_corpus)),
        model_((config_.validate(), config_.model), config_.seed),
        optimizer_(model_.parameters(), {config_.beta1, config_.beta2, config_.adam_eps, config_.weight_decay}),
        sampler_(corpus_, config_.seq_len, config_.seed, config_.shuffle),
        schedule_(LrSchedule::from(config_)) {
    if (corpus_.vocab_size > std::uint32_t(config_.model.vocab_size)) {
      throw ConfigError("corpus vocabulary (" + std::to_string(corpus_.vocab_size) + ") exceeds model.vocab_size (" +
                        std::to_string(config_.model.vocab_size) + ")");
    }
    if (config_.vanilla && config_.model.latent_max != 0) throw ConfigError("the vanilla path requires latent_max = 0");
  }

  /// Reads the corpora named in the config.
  static Trainer from_config(const TrainConfig& config) {
    if (config.corpus.empty()) throw ConfigError("train.corpus is required");
    std::optional<Corpus> eval;
    if (!config.eval_corpus.empty()) eval = read_corpus(config.eval_corpus);
    return Trainer(config, read_corpus(config.corpus), std::move(eval));
  }

  const TrainConfig& config() const { return config_; }
  LatentModel<T>& model() { return model_; }
  const LatentModel<T>& model() const { return model_; }
  const TrainingState& state() const { return state_; }

  /// One optimization step.
  TrainMetrics step() {
    check_finite("before step " + std::to_string(state_.step + 1));
    const auto batch = sampler_.next_batch(config_.batch_size);
    const auto targets = next_token_targets(batch);
    Tape<T> tape(true);
    TrainMetrics m;
    Var<T> total;
    if (config_.vanilla) {
      auto z = model_.forward_vanilla(tape, batch);
      total = objective::ce_loss(tape, model_, z, objective::flatten_targets(targets), config_.loss.ce_reduction);
      m.ce = double(total->value(0, 0));
      m.active_counts = {config_.batch_size * config_.seq_len};
      m.flops_step = vanilla_flops(std::size_t(config_.batch_size) * std::size_t(config_.seq_len), model_);
    } else {
      const auto r = model_.unroll(tape, batch, targets);
      const auto losses = objective::compute_losses(tape, model_, r, targets, config_.loss);
      total = losses.total;
      m.ce = double(losses.ce->value(0, 0));
      m.adaptive = double(losses.adaptive->value(0, 0));
      m.mean_len = r.mean_executed_length();
      m.active_counts = r.active_counts;
      m.flops_step = count_active_flops(r.active_counts, model_).total();
    }
    m.total = double(total->value(0, 0));
    if (!std::isfinite(m.total)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << state_.step + 1 << " (ce=" << m.ce << ", adaptive=" << m.adaptive << ")";
      throw DivergenceError(msg.str());
    }
    model_.zero_grad();
    tape.backward(total);
    tape.clear();
    m.grad_norm = clip_grad_norm(model_.parameters(), config_.grad_clip);
    if (!std::isfinite(m.grad_norm)) {
      throw DivergenceError("non-finite gradient norm at step " + std::to_string(state_.step + 1));
    }
    m.lr = schedule_(int(state_.step));
    optimizer_.step(model_.parameters(), m.lr);
    check_finite("after step " + std::to_string(state_.step + 1));

    ++state_.step;
    state_.tokens_seen += (long long)config_.batch_size * config_.seq_len;
    state_.flops_cum += m.flops_step;
    state_.sampler = sampler_.state();
    m.step = state_.step;
    m.tokens = state_.tokens_seen;
    m.flops_cum = state_.flops_cum;
    m.prune_ratio = prune_ratio_of(m.mean_len, config_.model.latent_max);
    return m;
  }

  EvalResult evaluate_held_out(std::size_t max_windows = 0) const {
    const Corpus& c = eval_corpus_ ? *eval_corpus_ : corpus_;
    if (max_windows == 0) max_windows = std::size_t(config_.eval_batches) * std::size_t(config_.batch_size);
    return evaluate(model_, c, config_.seq_len, max_windows, config_.batch_size, config_.vanilla);
  }

  /// Trains until config.steps. With write_files, the run directory receives
  /// the resolved config, metrics.jsonl and checkpoints. Returns the logged
  /// records (every log_interval steps and the last step).
  std::vector<TrainMetrics> run(bool write_files = true, const Callback& on_log = {}) {
    std::vector<TrainMetrics> log;
    std::ofstream metrics;
    const std::filesystem::path dir(config_.out_dir);
    if (write_files) {
      std::filesystem::create_directories(dir);
      std::ofstream(dir / "config.txt") << config_.to_key_values().str();
      metrics.open(dir / "metrics.jsonl", state_.step > 0 ? std::ios::app : std::ios::trunc);
    }
    while (state_.step < config_.steps) {
      auto m = step();
      const bool last = state_.step == config_.steps;
      if (config_.eval_interval > 0 && (state_.step % config_.eval_interval == 0 || last)) {
        m.eval_ce = evaluate_held_out().ce;
      }
      if (state_.step % config_.log_interval == 0 || last) {
        log.push_back(m);
        if (write_files) metrics << m.to_json().dump() << '\n' << std::flush;
        if (on_log) on_log(m);
      }
      if (write_files && config_.ckpt_interval > 0 && state_.step % config_.ckpt_interval == 0 && !last) {
        save((dir / ("ckpt_" + std::to_string(state_.step) + ".alck")).string());
      }
    }
    if (write_files) save((dir / "final.alck").string());
    return log;
  }

  void save(const std::string& path) const {
    save_checkpoint(path, make_training_checkpoint(config_, model_, optimizer_, state_));
  }

  /// Continues from a checkpoint written by save(). The model shape must match.
  void resume(const std::string& path) {
    const auto c = load_checkpoint(path);
    const auto saved = ModelConfig::from(c.header, "model.");
    KeyValues a, b;
    saved.write(a);
    config_.model.write(b);
    if (a.str() != b.str()) throw ConfigError("checkpoint model config differs from the training config");
    state_ = restore_training_state(c, model_, optimizer_);
    sampler_.set_state(state_.sampler);
  }

 private:
  void check_finite(const std::string& when) const {
    for (const auto& p : model_.parameters()) {
      if (!p.var->value.allFinite()) throw DivergenceError("non-finite values in " + p.name + " " + when);
    }
  }

  TrainConfig config_;
  Corpus corpus_;
  std::optional<Corpus> eval_corpus_;
  LatentModel<T> model_;
  AdamW<T> optimizer_;
  WindowSampler sampler_;
  LrSchedule schedule_;
  TrainingState state_;
};

}  // namespace alct

#pragma once

// Token-wise adaptive decoding over an incrementally grown 2D KV cache.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "alct/errors.hpp"
#include "alct/halting.hpp"
#include "alct/model.hpp"

namespace alct {

template <class T>
struct DecodeTrace {
  int position = 0;  // 1-based position of the consumed token
  int input_token = -1;
  int latent_length = 0;      // executed latent steps, K* - 1
  std::vector<T> gates;       // sanitized gates of the executed steps
  std::vector<T> hat_exit;    // mixing weights, sum to 1
  std::vector<T> p_target;    // per executed step, empty without a reference
  int next_token = -1;        // chosen or teacher-forced next token
  T next_probability = T(0);  // model probability of next_token

  nlohmann::json to_json() const {
    return {{"position", position}, {"input", input_token},   {"latent", latent_length},
            {"gates", gates},       {"weights", hat_exit},    {"p_target", p_target},
            {"next", next_token},   {"p_next", next_probability}};
  }
};

template <class T>
struct DecodeStep {
  Matrix<T> logits;  // [1, vocab]
  halting::Schedule<T> schedule;
  std::vector<Matrix<T>> states;  // executed z^(k), each [1, d]
  Matrix<T> z_final;
};

/// One sequence's decoding state. The session owns its cache; the model is
/// only read.
template <class T>
class DecodeSession {
 public:
  explicit DecodeSession(const LatentModel<T>& model, int max_length = 0, std::optional<T> tau = std::nullopt)
      : model_(&model),
        max_length_(max_length > 0 ? max_length : model.config().max_seq_len),
        tau_(tau.value_or(T(model.config().tau))),
        cache_(model.config().n_layers, model.k_max()),
        occupancy_{mask::Occupancy::empty(max_length_, model.k_max())} {
    if (max_length_ > model.config().max_seq_len) throw InvalidInput("session length exceeds model max_seq_len");
    if (!(tau_ > T(0) && tau_ <= T(1))) throw InvalidInput("threshold must lie in (0, 1]");
  }

  int position() const { return position_; }
  int max_length() const { return max_length_; }
  const KVCache<T>& cache() const { return cache_; }
  const mask::Occupancy& occupancy() const { return occupancy_[0]; }

  /// Consumes one token at the next position: runs latent steps until the
  /// next-step reach drops below tau or K_max is reached, then mixes.
  DecodeStep<T> feed(int token) {
    const auto& cfg = model_->config();
    if (token < 0 || token >= cfg.vocab_size) throw InvalidInput("unknown token id " + std::to_string(token));
    if (position_ >= max_length_) {
      throw InvalidInput("context length exceeded (" + std::to_string(max_length_) + " positions)");
    }
    const int t = ++position_;
    const std::vector<Entry> row{{0, t}};
    DecodeStep<T> out;
    std::vector<T> gates;
    T reach = T(1);
    Var<T> previous;
    for (int k = 1; k <= model_->k_max(); ++k) {
      occupancy_[0].activate({t, k});
      Var<T> input = model_->embed_step_input(tape_, k, {token}, previous);
      auto step = model_->forward_step(tape_, k, row, cache_, occupancy_, input);
      out.states.push_back(step.z->value);
      T sigmoid = T(1);
      if (step.gate_logits) sigmoid = LatentModel<T>::gate_sigmoid(step.gate_logits->value(0, 0));
      const T g = model_->gate_value(sigmoid, k);
      gates.push_back(g);
      reach *= g;
      previous = step.z;
      if (k == model_->k_max() || reach < tau_) break;
    }
    out.schedule = halting::make_executed_schedule<T>(gates, model_->k_max(), tau_);
    if (out.schedule.k_star != int(gates.size())) throw std::logic_error("decode halting disagrees with the schedule");
    out.z_final = Matrix<T>::Zero(1, cfg.d_model);
    for (std::size_t k = 0; k < out.states.size(); ++k) out.z_final.row(0) += out.schedule.hat_exit[k] * out.states[k].row(0);
    out.logits = out.z_final * model_->lm_head()->value;
    return out;
  }

 private:
  const LatentModel<T>* model_;
  int max_length_;
  T tau_;
  Tape<T> tape_{false};
  KVCache<T> cache_;
  std::vector<mask::Occupancy> occupancy_;
  int position_ = 0;
};

struct SamplingConfig {
  double temperature = 0.0;  // 0: greedy
  std::uint64_t seed = 0;
  int max_new_tokens = 64;
  std::optional<int> stop_token;
};

template <class T>
std::vector<double> softmax_row(const Matrix<T>& logits, double temperature = 1.0) {
  const Eigen::Index v = logits.cols();
  std::vector<double> p(static_cast<std::size_t>(v));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < v; ++j) mx = std::max(mx, double(logits(0, j)) / temperature);
  double sum = 0.0;
  for (Eigen::Index j = 0; j < v; ++j) sum += p[std::size_t(j)] = std::exp(double(logits(0, j)) / temperature - mx);
  for (auto& x : p) x /= sum;
  return p;
}

/// First index of the maximum logit.
template <class T>
int argmax_row(const Matrix<T>& logits) {
  Eigen::Index best = 0;
  logits.row(0).maxCoeff(&best);
  return int(best);
}

class TokenSampler {
 public:
  explicit TokenSampler(const SamplingConfig& config) : temperature_(config.temperature), rng_(config.seed) {
    if (temperature_ < 0.0) throw InvalidInput("temperature must be >= 0");
  }

  template <class T>
  int operator()(const Matrix<T>& logits) {
    if (temperature_ == 0.0) return argmax_row(logits);
    const auto p = softmax_row(logits, temperature_);
    std::discrete_distribution<int> pick(p.begin(), p.end());
    return pick(rng_);
  }

 private:
  double temperature_;
  std::mt19937_64 rng_;
};

template <class T>
DecodeTrace<T> make_trace(int position, int input, const DecodeStep<T>& step, int next) {
  DecodeTrace<T> tr;
  tr.position = position;
  tr.input_token = input;
  tr.latent_length = step.schedule.executed_length();
  tr.gates.assign(step.schedule.gates.begin(), step.schedule.gates.begin() + step.schedule.k_star);
  tr.hat_exit = step.schedule.hat_exit;
  tr.next_token = next;
  tr.next_probability = T(softmax_row(step.logits)[std::size_t(next)]);
  return tr;
}

template <class T>
struct Generation {
  std::vector<int> tokens;  // generated ids only
  std::vector<DecodeTrace<T>> trace;  // one record per generated token

  double mean_latent_length() const {
    if (trace.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : trace) s += r.latent_length;
    return s / double(trace.size());
  }
};

/// Autoregressive generation. The trace records the latent computation spent
/// on the position whose output produced each generated token.
template <class T>
Generation<T> generate(const LatentModel<T>& model, const std::vector<int>& prompt, const SamplingConfig& sampling,
                       std::optional<std::type_identity_t<T>> tau = std::nullopt) {
  if (prompt.empty()) throw InvalidInput("prompt must contain at least one token");
  if (sampling.max_new_tokens < 0) throw InvalidInput("max_new_tokens must be >= 0");
  for (int id : prompt) {
    if (id < 0 || id >= model.config().vocab_size) throw InvalidInput("unknown token in prompt: " + std::to_string(id));
  }
  Generation<T> gen;
  if (sampling.max_new_tokens == 0) return gen;
  const int needed = int(prompt.size()) + sampling.max_new_tokens - 1;
  if (needed > model.config().max_seq_len) {
    throw InvalidInput("prompt plus max_new_tokens exceeds the context length (" +
                       std::to_string(model.config().max_seq_len) + ")");
  }
  DecodeSession<T> session(model, 0, tau);
  TokenSampler sampler(sampling);
  DecodeStep<T> last;
  for (int id : prompt) last = session.feed(id);
  int input = prompt.back();
  while (true) {
    const int next = sampler(last.logits);
    gen.tokens.push_back(next);
    gen.trace.push_back(make_trace(session.position(), input, last, next));
    if (int(gen.tokens.size()) == sampling.max_new_tokens) break;
    if (sampling.stop_token && next == *sampling.stop_token) break;
    last = session.feed(next);
    input = next;
  }
  return gen;
}

/// Decodes a known sequence token by token. Record t describes position t
/// and, when t < length, the probability of token t + 1.
template <class T>
std::vector<DecodeTrace<T>> teacher_forced_trace(const LatentModel<T>& model, const std::vector<int>& tokens,
                                                 std::optional<std::type_identity_t<T>> tau = std::nullopt,
                                                 std::vector<Matrix<T>>* logits = nullptr) {
  DecodeSession<T> session(model, int(tokens.size()), tau);
  std::vector<DecodeTrace<T>> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto step = session.feed(tokens[i]);
    const bool has_next = i + 1 < tokens.size();
    auto tr = make_trace(int(i) + 1, tokens[i], step, has_next ? tokens[i + 1] : argmax_row(step.logits));
    if (has_next) {
      const auto& lm = model.lm_head()->value;
      const int y = tokens[i + 1];
      for (const auto& z : step.states) tr.p_target.push_back(T(softmax_row<T>(z * lm)[std::size_t(y)]));
    } else {
      tr.next_token = -1;
      tr.next_probability = T(0);
    }
    if (logits) logits->push_back(step.logits);
    out.push_back(std::move(tr));
  }
  return out;
}

template <class T>
void write_trace_jsonl(std::ostream& out, const std::vector<DecodeTrace<T>>& trace) {
  for (const auto& r : trace) out << r.to_json().dump() << '\n';
}

}  // namespace alct

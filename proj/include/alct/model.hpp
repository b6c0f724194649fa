#pragma once

// Decoder-only transformer with unrolled latent steps.
//
// Step 1 of every token is the ordinary transformer pass over token
// embeddings. Step k > 1 feeds the final-layer state of step k - 1 back in as
// input at the same position id. All active tokens of a step run together;
// their keys/values are appended to a per-step cache block so later steps
// attend to everything executed so far under the 2D causal rule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "alct/config.hpp"
#include "alct/errors.hpp"
#include "alct/halting.hpp"
#include "alct/ops.hpp"
#include "alct/parallel_mask.hpp"
#include "alct/tensor.hpp"

namespace alct {

/// One grid row: sequence index within the batch and 1-based position.
struct Entry {
  int seq = 0;
  int t = 1;

  friend bool operator==(const Entry&, const Entry&) = default;
  friend auto operator<=>(const Entry&, const Entry&) = default;
};

enum class ParamRole { kEmbedding, kBackbone, kHead, kRouter };

template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
  ParamRole role;
  bool decay;  // weight decay applies (matrices only)
};

/// Per-layer key/value blocks indexed by latent step.
template <class T>
class KVCache {
 public:
  KVCache(int n_layers, int k_max)
      : entries_(std::size_t(k_max)), keys_(std::size_t(n_layers), std::vector<Var<T>>(std::size_t(k_max))),
        values_(std::size_t(n_layers), std::vector<Var<T>>(std::size_t(k_max))) {}

  int k_max() const { return int(entries_.size()); }
  int n_layers() const { return int(keys_.size()); }
  bool has_step(int k) const { return !entries_[std::size_t(k - 1)].empty(); }
  const std::vector<Entry>& entries(int k) const { return entries_[std::size_t(k - 1)]; }
  const Var<T>& keys(int layer, int k) const { return keys_[std::size_t(layer)][std::size_t(k - 1)]; }
  const Var<T>& values(int layer, int k) const { return values_[std::size_t(layer)][std::size_t(k - 1)]; }

  /// Number of cached (t, k) entries across all steps.
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.size();
    return n;
  }

  /// Registers the rows a step is about to add. Rows of a step stay sorted by
  /// (seq, t) so each sequence occupies a contiguous run.
  void add_entries(int k, std::span<const Entry> rows) {
    auto& dst = entries_[std::size_t(k - 1)];
    if (!dst.empty() && !rows.empty() && !(dst.back() < rows.front())) {
      throw InvalidInput("cache rows must be appended in (seq, t) order");
    }
    dst.insert(dst.end(), rows.begin(), rows.end());
  }

  void store(int layer, int k, const Var<T>& key, const Var<T>& value) {
    auto& kb = keys_[std::size_t(layer)][std::size_t(k - 1)];
    auto& vb = values_[std::size_t(layer)][std::size_t(k - 1)];
    if (!kb) {
      kb = key;
      vb = value;
      return;
    }
    // Incremental decoding grows an existing block in place.
    append_rows(kb->value, key->value);
    append_rows(vb->value, value->value);
  }

 private:
  static void append_rows(Matrix<T>& dst, const Matrix<T>& rows) {
    const auto old = dst.rows();
    dst.conservativeResize(old + rows.rows(), dst.cols());
    dst.bottomRows(rows.rows()) = rows;
  }

  std::vector<std::vector<Entry>> entries_;
  std::vector<std::vector<Var<T>>> keys_;
  std::vector<std::vector<Var<T>>> values_;
};

template <class T>
struct StepOutput {
  Var<T> z;            // [n, d] final-layer states
  Var<T> gate_logits;  // [n, 1], null when no router runs at this step
};

/// Everything one latent step produced for its active rows.
template <class T>
struct StepBlock {
  int step = 1;
  std::vector<Entry> entries;
  Var<T> z;
  Var<T> gate_logits;
  std::vector<T> sigmoid;   // raw router probabilities (1 when no router)
  std::vector<T> gates;     // sanitized gates actually used
  std::vector<bool> scripted;  // gate came from an override; no gradient
  std::vector<T> p_target;  // probability of the next token, -1 when unsupervised
};

template <class T>
struct UnrollOptions {
  bool prune = true;  // false: every token runs all K_max steps (the tau -> 0+ limit)
  std::optional<T> tau;
  bool compute_p_target = true;
  /// Replaces the router probability of (seq, t) at step k.
  std::function<T(int seq, int t, int k, T gate)> gate_override;
  /// May modify the step-k input rows before the step runs.
  std::function<void(int k, const std::vector<Entry>& rows, Matrix<T>& inputs)> input_hook;
};

template <class T>
struct UnrollResult {
  int batch = 0;
  int length = 0;
  int k_max = 1;
  std::vector<StepBlock<T>> steps;
  std::vector<halting::Schedule<T>> schedules;  // index seq * length + t - 1
  std::vector<std::vector<int>> row_of;         // [k-1][token] -> row in step block, -1 if not executed
  std::vector<int> active_counts;               // per executed step, summed over the batch
  Var<T> z_final;                               // [batch * length, d]

  int token_index(int seq, int t) const { return seq * length + t - 1; }
  const halting::Schedule<T>& schedule(int seq, int t) const { return schedules[std::size_t(token_index(seq, t))]; }
  int executed_length(int seq, int t) const { return schedule(seq, t).executed_length(); }

  std::vector<int> executed_lengths() const {
    std::vector<int> out;
    out.reserve(schedules.size());
    for (const auto& s : schedules) out.push_back(s.executed_length());
    return out;
  }

  double mean_executed_length() const {
    double sum = 0.0;
    for (const auto& s : schedules) sum += s.executed_length();
    return schedules.empty() ? 0.0 : sum / double(schedules.size());
  }

  /// p_target of (seq, t) at each executed step.
  std::vector<T> p_target_trajectory(int seq, int t) const {
    std::vector<T> out;
    const int tok = token_index(seq, t);
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const int row = row_of[k][std::size_t(tok)];
      if (row >= 0) out.push_back(steps[k].p_target[std::size_t(row)]);
    }
    return out;
  }
};

/// Next-token targets for each position; the last position is unsupervised.
inline std::vector<std::vector<int>> next_token_targets(const std::vector<std::vector<int>>& tokens) {
  std::vector<std::vector<int>> out;
  out.reserve(tokens.size());
  for (const auto& seq : tokens) {
    std::vector<int> y(seq.size(), -1);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) y[i] = seq[i + 1];
    out.push_back(std::move(y));
  }
  return out;
}

/// Row-wise softmax probability of each row's target (or -1 when target < 0).
template <class T>
std::vector<T> target_probabilities(const Matrix<T>& logits, std::span<const int> targets) {
  std::vector<T> out(targets.size(), T(-1));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = targets[std::size_t(i)];
    if (y < 0) continue;
    const T mx = logits.row(i).maxCoeff();
    const T z = (logits.row(i).array() - mx).exp().sum();
    out[std::size_t(i)] = std::exp(logits(i, y) - mx) / z;
  }
  return out;
}

template <class T>
class LatentModel {
 public:
  using Scalar = T;

  struct Layer {
    Var<T> attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
  };
  struct Router {
    Var<T> w1, b1, w2, b2;  // affine routers use only w2/b2
  };

  LatentModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int d = config_.d_model;
    auto randn = [&](const std::string& name, int rows, int cols, double std, ParamRole role) {
      Matrix<T> m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(normal(rng) * std);
      return add_param(name, std::move(m), role, true);
    };
    auto constant = [&](const std::string& name, int rows, int cols, double v, ParamRole role) {
      return add_param(name, Matrix<T>::Constant(rows, cols, T(v)), role, false);
    };
    const double proj_std = config_.init_std / std::sqrt(2.0 * config_.n_layers);
    embedding_ = randn("embed", config_.vocab_size, d, config_.embed_std, ParamRole::kEmbedding);
    for (int l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Layer layer;
      layer.attn_norm = constant(p + "attn_norm", 1, d, 1.0, ParamRole::kBackbone);
      layer.wq = randn(p + "wq", d, d, config_.init_std, ParamRole::kBackbone);
      layer.wk = randn(p + "wk", d, d, config_.init_std, ParamRole::kBackbone);
      layer.wv = randn(p + "wv", d, d, config_.init_std, ParamRole::kBackbone);
      layer.wo = randn(p + "wo", d, d, proj_std, ParamRole::kBackbone);
      layer.mlp_norm = constant(p + "mlp_norm", 1, d, 1.0, ParamRole::kBackbone);
      layer.w_gate = randn(p + "w_gate", d, config_.d_ff, config_.init_std, ParamRole::kBackbone);
      layer.w_up = randn(p + "w_up", d, config_.d_ff, config_.init_std, ParamRole::kBackbone);
      layer.w_down = randn(p + "w_down", config_.d_ff, d, proj_std, ParamRole::kBackbone);
      layers_.push_back(layer);
    }
    final_norm_ = constant("final_norm", 1, d, 1.0, ParamRole::kBackbone);
    lm_head_ = randn("lm_head", d, config_.vocab_size, config_.init_std, ParamRole::kHead);
    if (config_.feed == FeedKind::kAffine) {
      // Starts as the identity feed.
      feed_w_ = add_param("feed.w", Matrix<T>::Identity(d, d), ParamRole::kBackbone, true);
      feed_b_ = constant("feed.b", 1, d, 0.0, ParamRole::kBackbone);
    }
    if (config_.routed()) {
      const int n_routers = config_.per_step_router() ? std::max(1, config_.latent_max) : 1;
      for (int r = 0; r < n_routers; ++r) {
        const std::string p = "router." + std::to_string(r) + ".";
        Router router;
        int in = d;
        if (config_.two_layer_router()) {
          router.w1 = randn(p + "w1", d, config_.router_hidden, config_.init_std, ParamRole::kRouter);
          router.b1 = constant(p + "b1", 1, config_.router_hidden, 0.0, ParamRole::kRouter);
          in = config_.router_hidden;
        }
        router.w2 = add_param(p + "w2", Matrix<T>::Zero(in, 1), ParamRole::kRouter, true);
        router.b2 = constant(p + "b2", 1, 1, config_.router_init_bias, ParamRole::kRouter);
        routers_.push_back(router);
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  int k_max() const { return config_.k_max(); }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  const Parameter<T>& parameter(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p;
    }
    throw InvalidInput("no parameter named " + name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += std::size_t(p.var->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
  }

  const Var<T>& embedding_table() const { return embedding_; }
  const Var<T>& lm_head() const { return lm_head_; }

  /// Step-k input for the given rows: token embeddings at step 1, otherwise
  /// the previous step's states passed through the feed transform.
  Var<T> embed_step_input(Tape<T>& tape, int k, std::vector<int> token_ids, const Var<T>& previous) const {
    if (k == 1) return ops::embedding(tape, embedding_, std::move(token_ids));
    if (!previous) throw InvalidInput("step " + std::to_string(k) + " requires the state of step " + std::to_string(k - 1));
    return feed(tape, previous);
  }

  Var<T> feed(Tape<T>& tape, const Var<T>& previous) const {
    if (config_.feed == FeedKind::kIdentity) return previous;
    return ops::add_bias(tape, ops::matmul(tape, previous, feed_w_), feed_b_);
  }

  /// Runs one latent step for `rows` (sorted by (seq, t)), appending their
  /// keys/values to the cache. occupancy[s] must already mark these rows
  /// active at step k.
  StepOutput<T> forward_step(Tape<T>& tape, int k, const std::vector<Entry>& rows, KVCache<T>& cache,
                             std::span<const mask::Occupancy> occupancy, const Var<T>& inputs) const {
    if (rows.empty()) return {};
    if (k < 1 || k > k_max()) throw InvalidInput("latent step out of range");
    for (int j = 1; j < k; ++j) {
      if (!cache.has_step(j)) throw InvalidInput("cache is missing step " + std::to_string(j));
    }
    if (inputs->value.rows() != Eigen::Index(rows.size())) throw InvalidInput("input rows mismatch");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (!(rows[i - 1] < rows[i])) throw InvalidInput("rows must be sorted by (seq, t)");
    }

    cache.add_entries(k, rows);
    auto groups = build_groups(k, rows, cache, occupancy);

    std::vector<int> positions;
    positions.reserve(rows.size());
    for (const auto& e : rows) positions.push_back(mask::position_id({e.t, k}));

    const T base = T(config_.rope_base);
    Var<T> x = inputs;
    for (int l = 0; l < config_.n_layers; ++l) {
      const auto& L = layers_[std::size_t(l)];
      auto h = ops::rmsnorm(tape, x, L.attn_norm);
      auto q = ops::rope(tape, ops::matmul(tape, h, L.wq), positions, config_.n_heads, base);
      auto key = ops::rope(tape, ops::matmul(tape, h, L.wk), positions, config_.n_heads, base);
      auto value = ops::matmul(tape, h, L.wv);
      cache.store(l, k, key, value);
      std::vector<Var<T>> kb, vb;
      for (int j = 1; j <= k; ++j) {
        kb.push_back(cache.keys(l, j));
        vb.push_back(cache.values(l, j));
      }
      auto att = ops::attention(tape, q, kb, vb, groups, config_.n_heads);
      x = ops::add(tape, x, ops::matmul(tape, att, L.wo));
      x = ops::add(tape, x, mlp(tape, L, ops::rmsnorm(tape, x, L.mlp_norm)));
    }
    StepOutput<T> out;
    out.z = ops::rmsnorm(tape, x, final_norm_);
    if (config_.routed() && k < k_max()) out.gate_logits = router_logits(tape, k, out.z);
    return out;
  }

  /// Router logit for states produced at step k (k < K_max).
  Var<T> router_logits(Tape<T>& tape, int k, const Var<T>& z) const {
    const auto& r = routers_[config_.per_step_router() ? std::size_t(k - 1) : 0];
    Var<T> in = config_.detach_router_input ? detach(z) : z;
    if (config_.two_layer_router()) in = ops::silu(tape, ops::add_bias(tape, ops::matmul(tape, in, r.w1), r.b1));
    return ops::add_bias(tape, ops::matmul(tape, in, r.w2), r.b2);
  }

  Var<T> logits(Tape<T>& tape, const Var<T>& z) const { return ops::matmul(tape, z, lm_head_); }

  /// Unrolls latent steps 1..K_max for a batch of equal-length sequences,
  /// pruning tokens whose next-step reach falls below tau, then mixes the
  /// executed states of every token into z_final.
  UnrollResult<T> unroll(Tape<T>& tape, const std::vector<std::vector<int>>& tokens,
                         const std::vector<std::vector<int>>& targets, const UnrollOptions<T>& options = {}) const {
    UnrollResult<T> res;
    res.batch = int(tokens.size());
    res.length = tokens.empty() ? 0 : int(tokens[0].size());
    res.k_max = k_max();
    for (const auto& s : tokens) {
      if (int(s.size()) != res.length) throw InvalidInput("all sequences in a batch must have equal length");
    }
    if (res.length > config_.max_seq_len) throw InvalidInput("sequence exceeds max_seq_len");
    if (!targets.empty() && targets.size() != tokens.size()) throw InvalidInput("targets shape mismatch");
    const T tau = options.tau.value_or(T(config_.tau));
    if (!(tau > T(0) && tau <= T(1))) throw InvalidInput("threshold must lie in (0, 1]");
    const int n_tokens = res.batch * res.length;
    if (n_tokens == 0) {
      res.z_final = make_var<T>(Matrix<T>(0, config_.d_model));
      return res;
    }

    std::vector<mask::Occupancy> occupancy;
    for (int s = 0; s < res.batch; ++s) occupancy.push_back(mask::Occupancy::full(res.length, k_max()));
    KVCache<T> cache(config_.n_layers, k_max());

    std::vector<Entry> rows;
    std::vector<int> ids;
    for (int s = 0; s < res.batch; ++s) {
      for (int t = 1; t <= res.length; ++t) {
        rows.push_back({s, t});
        ids.push_back(tokens[std::size_t(s)][std::size_t(t - 1)]);
      }
    }
    std::vector<T> reach(std::size_t(n_tokens), T(1));
    std::vector<std::vector<T>> executed_gates(static_cast<std::size_t>(n_tokens));
    std::vector<int> k_star(std::size_t(n_tokens), 1);
    res.row_of.assign(std::size_t(k_max()), std::vector<int>(std::size_t(n_tokens), -1));

    Var<T> previous;
    std::vector<int> gather;
    for (int k = 1; k <= k_max() && !rows.empty(); ++k) {
      Var<T> input = k == 1 ? embed_step_input(tape, 1, ids, nullptr)
                            : embed_step_input(tape, k, {}, ops::gather_rows(tape, previous, gather));
      if (options.input_hook) options.input_hook(k, rows, input->value);
      auto out = forward_step(tape, k, rows, cache, occupancy, input);

      StepBlock<T> block;
      block.step = k;
      block.entries = rows;
      block.z = out.z;
      block.gate_logits = out.gate_logits;
      const std::size_t n = rows.size();
      block.sigmoid.assign(n, T(1));
      block.gates.assign(n, T(1));
      block.scripted.assign(n, false);
      const bool terminal = (k == k_max());
      for (std::size_t i = 0; i < n; ++i) {
        T p = T(1);
        if (out.gate_logits) p = gate_sigmoid(out.gate_logits->value(Eigen::Index(i), 0));
        if (options.gate_override && !terminal) {
          p = options.gate_override(rows[i].seq, rows[i].t, k, p);
          block.scripted[i] = true;
        }
        block.sigmoid[i] = p;
        block.gates[i] = gate_value(p, k, bool(options.gate_override));
      }
      if (options.compute_p_target && !targets.empty()) {
        std::vector<int> y;
        y.reserve(n);
        for (const auto& e : rows) y.push_back(targets[std::size_t(e.seq)][std::size_t(e.t - 1)]);
        const Matrix<T> lg = out.z->value * lm_head_->value;
        block.p_target = target_probabilities<T>(lg, y);
      } else {
        block.p_target.assign(n, T(-1));
      }

      std::vector<Entry> next_rows;
      std::vector<int> next_gather;
      for (std::size_t i = 0; i < n; ++i) {
        const int tok = res.token_index(rows[i].seq, rows[i].t);
        res.row_of[std::size_t(k - 1)][std::size_t(tok)] = int(i);
        executed_gates[std::size_t(tok)].push_back(block.gates[i]);
        k_star[std::size_t(tok)] = k;
        const T next_reach = reach[std::size_t(tok)] * block.gates[i];
        reach[std::size_t(tok)] = next_reach;
        const bool continues = !terminal && (!options.prune || next_reach >= tau);
        if (continues) {
          next_rows.push_back(rows[i]);
          next_gather.push_back(int(i));
        } else {
          occupancy[std::size_t(rows[i].seq)].prune_after(rows[i].t, k);
        }
      }
      res.active_counts.push_back(int(n));
      res.steps.push_back(std::move(block));
      previous = out.z;
      rows = std::move(next_rows);
      gather = std::move(next_gather);
    }

    res.schedules.reserve(std::size_t(n_tokens));
    for (int tok = 0; tok < n_tokens; ++tok) {
      const auto& g = executed_gates[std::size_t(tok)];
      auto sched = options.prune ? halting::make_executed_schedule<T>(g, k_max(), tau)
                                 : halting::make_untruncated_schedule<T>(g, k_max());
      if (sched.k_star != k_star[std::size_t(tok)]) {
        throw std::logic_error("halting schedule disagrees with executed steps");
      }
      res.schedules.push_back(std::move(sched));
    }
    res.z_final = mix(tape, res);
    return res;
  }

  /// Plain causal transformer over token embeddings, sharing this model's
  /// weights. Used as the baseline path and reference for the latent unroll.
  Var<T> forward_vanilla(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const {
    const int batch = int(tokens.size());
    const int length = batch ? int(tokens[0].size()) : 0;
    std::vector<int> ids;
    std::vector<int> positions;
    for (const auto& s : tokens) {
      if (int(s.size()) != length) throw InvalidInput("all sequences in a batch must have equal length");
      for (int t = 1; t <= length; ++t) {
        ids.push_back(s[std::size_t(t - 1)]);
        positions.push_back(t);
      }
    }
    auto groups = std::make_shared<std::vector<ops::AttentionGroup<T>>>();
    for (int s = 0; s < batch; ++s) {
      ops::AttentionGroup<T> g;
      for (int i = 0; i < length; ++i) {
        g.query_rows.push_back(s * length + i);
        g.keys.push_back({0, s * length + i});
      }
      g.mask.assign(std::size_t(length) * std::size_t(length), mask::masked_value<T>());
      for (int i = 0; i < length; ++i) {
        for (int j = 0; j <= i; ++j) g.mask[std::size_t(i * length + j)] = T(0);
      }
      groups->push_back(std::move(g));
    }
    const T base = T(config_.rope_base);
    Var<T> x = ops::embedding(tape, embedding_, ids);
    for (const auto& L : layers_) {
      auto h = ops::rmsnorm(tape, x, L.attn_norm);
      auto q = ops::rope(tape, ops::matmul(tape, h, L.wq), positions, config_.n_heads, base);
      auto key = ops::rope(tape, ops::matmul(tape, h, L.wk), positions, config_.n_heads, base);
      auto value = ops::matmul(tape, h, L.wv);
      auto att = ops::attention(tape, q, {key}, {value}, groups, config_.n_heads);
      x = ops::add(tape, x, ops::matmul(tape, att, L.wo));
      x = ops::add(tape, x, mlp(tape, L, ops::rmsnorm(tape, x, L.mlp_norm)));
    }
    return ops::rmsnorm(tape, x, final_norm_);
  }

  /// Convex mixture of each token's executed states under its truncated
  /// halting weights. Gradients reach the states and, through the weights,
  /// the router logits.
  Var<T> mix(Tape<T>& tape, const UnrollResult<T>& res) const {
    const int d = config_.d_model;
    const int n_tokens = res.batch * res.length;
    Matrix<T> out = Matrix<T>::Zero(n_tokens, d);
    for (int tok = 0; tok < n_tokens; ++tok) {
      const auto& w = res.schedules[std::size_t(tok)].hat_exit;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const int row = res.row_of[k][std::size_t(tok)];
        out.row(tok) += w[k] * res.steps[k].z->value.row(row);
      }
    }
    auto z_final = make_var<T>(std::move(out));
    bool grad = false;
    for (const auto& b : res.steps) grad = grad || tape.needs_grad(b.z) || tape.needs_grad(b.gate_logits);
    if (!grad) return z_final;
    z_final->requires_grad = true;
    // The closure reads the step blocks and schedules by value-shared handles.
    std::vector<Var<T>> zs, logits;
    std::vector<std::vector<T>> sig;
    std::vector<std::vector<bool>> scripted;
    for (const auto& b : res.steps) {
      zs.push_back(b.z);
      logits.push_back(b.gate_logits);
      sig.push_back(b.sigmoid);
      scripted.push_back(b.scripted);
    }
    auto schedules = std::make_shared<std::vector<halting::Schedule<T>>>(res.schedules);
    auto row_of = std::make_shared<std::vector<std::vector<int>>>(res.row_of);
    const int kmax = res.k_max;
    tape.record([z_final, zs, logits, sig, scripted, schedules, row_of, n_tokens, kmax] {
      if (!z_final->has_grad()) return;
      for (int tok = 0; tok < n_tokens; ++tok) {
        const auto& s = (*schedules)[std::size_t(tok)];
        const auto g_out = z_final->grad.row(tok);
        std::vector<T> upstream(s.hat_exit.size());
        for (std::size_t k = 0; k < s.hat_exit.size(); ++k) {
          const int row = (*row_of)[k][std::size_t(tok)];
          if (zs[k]->requires_grad) zs[k]->grad_buffer().row(row) += s.hat_exit[k] * g_out;
          upstream[k] = g_out.dot(zs[k]->value.row(row));
        }
        const auto dgate = halting::hat_exit_vjp<T>(s.gates, s.k_star, upstream);
        for (int k = 0; k < s.k_star && k < kmax - 1; ++k) {
          const auto& lg = logits[std::size_t(k)];
          const int row = (*row_of)[std::size_t(k)][std::size_t(tok)];
          if (!lg || !lg->requires_grad || scripted[std::size_t(k)][std::size_t(row)]) continue;
          lg->grad_buffer()(row, 0) += dgate[std::size_t(k)] * gate_derivative(sig[std::size_t(k)][std::size_t(row)]);
        }
      }
    });
    return z_final;
  }

  static T gate_sigmoid(T logit) { return T(1) / (T(1) + std::exp(-logit)); }

  /// Gate used for halting from the router probability at step k.
  T gate_value(T sigmoid, int k, bool scripted = false) const {
    const bool terminal = k == k_max();
    if (config_.routed() || scripted) return halting::sanitize_gate(sigmoid, terminal);
    return terminal ? T(0) : T(1);
  }

  /// d(sanitized gate) / d(logit) for a non-terminal step.
  static T gate_derivative(T sigmoid) {
    const T eps = T(halting::kGateEpsilon);
    if (sigmoid <= eps || sigmoid >= T(1) - eps) return T(0);
    return sigmoid * (T(1) - sigmoid);
  }

  /// Parameters per active token-step for compute accounting: everything
  /// except the token embedding and the router.
  std::size_t compute_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.role == ParamRole::kBackbone || p.role == ParamRole::kHead) n += std::size_t(p.var->value.size());
    }
    return n;
  }

  /// Parameters of a single router evaluation.
  std::size_t router_parameter_count() const {
    if (routers_.empty()) return 0;
    std::size_t n = 0;
    for (const auto& v : {routers_[0].w1, routers_[0].b1, routers_[0].w2, routers_[0].b2}) {
      if (v) n += std::size_t(v->value.size());
    }
    return n;
  }

 private:
  Var<T> add_param(const std::string& name, Matrix<T> value, ParamRole role, bool decay) {
    auto v = make_var<T>(std::move(value), true);
    params_.push_back({name, v, role, decay});
    return v;
  }

  Var<T> mlp(Tape<T>& tape, const Layer& L, const Var<T>& h) const {
    auto gate = ops::silu(tape, ops::matmul(tape, h, L.w_gate));
    auto up = ops::matmul(tape, h, L.w_up);
    return ops::matmul(tape, ops::mul(tape, gate, up), L.w_down);
  }

  /// Attention groups for step k: per sequence, its step-k queries and every
  /// cached key it may see, laid out step-major as the mask expects.
  std::shared_ptr<const std::vector<ops::AttentionGroup<T>>> build_groups(
      int k, const std::vector<Entry>& rows, const KVCache<T>& cache,
      std::span<const mask::Occupancy> occupancy) const {
    auto groups = std::make_shared<std::vector<ops::AttentionGroup<T>>>();
    std::size_t i = 0;
    while (i < rows.size()) {
      const int seq = rows[i].seq;
      if (seq < 0 || std::size_t(seq) >= occupancy.size()) throw InvalidInput("row sequence index out of range");
      ops::AttentionGroup<T> g;
      std::vector<int> queries;
      for (; i < rows.size() && rows[i].seq == seq; ++i) {
        g.query_rows.push_back(int(i));
        queries.push_back(rows[i].t);
      }
      const auto& occ = occupancy[std::size_t(seq)];
      auto m = mask::build_step_mask<T>(occ, k, queries);
      std::size_t key_cursor = 0;
      for (int j = 1; j <= k; ++j) {
        const auto& ents = cache.entries(j);
        for (std::size_t r = 0; r < ents.size(); ++r) {
          if (ents[r].seq != seq) continue;
          if (key_cursor >= m.keys.size() || m.keys[key_cursor] != mask::GridIndex{ents[r].t, j}) {
            throw InvalidInput("cache and occupancy disagree at step " + std::to_string(j));
          }
          g.keys.push_back({j - 1, int(r)});
          ++key_cursor;
        }
      }
      if (key_cursor != m.keys.size()) throw InvalidInput("occupancy lists keys missing from the cache");
      g.mask = std::move(m.values);
      groups->push_back(std::move(g));
    }
    return groups;
  }

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  Var<T> embedding_;
  std::vector<Layer> layers_;
  Var<T> final_norm_;
  Var<T> lm_head_;
  Var<T> feed_w_, feed_b_;
  std::vector<Router> routers_;
};

/// Estimated training compute, 6 x parameters x token-steps.
struct FlopsEstimate {
  double backbone = 0.0;
  double router = 0.0;
  double total() const { return backbone + router; }
};

/// Compute for one unroll given the per-step active counts. The router runs at
/// every step except the last.
inline FlopsEstimate count_active_flops(std::span<const int> active_counts, std::size_t compute_params,
                                        std::size_t router_params, int k_max) {
  FlopsEstimate f;
  for (std::size_t k = 0; k < active_counts.size(); ++k) {
    f.backbone += 6.0 * double(compute_params) * double(active_counts[k]);
    if (int(k) + 1 < k_max) f.router += 6.0 * double(router_params) * double(active_counts[k]);
  }
  return f;
}

template <class T>
FlopsEstimate count_active_flops(std::span<const int> active_counts, const LatentModel<T>& model) {
  return count_active_flops(active_counts, model.compute_parameter_count(), model.router_parameter_count(),
                            model.k_max());
}

/// Baseline compute of a plain transformer over the same tokens.
template <class T>
double vanilla_flops(std::size_t tokens, const LatentModel<T>& model) {
  return 6.0 * double(model.compute_parameter_count()) * double(tokens);
}

}  // namespace alct

#pragma once

// Model, loss and training configuration plus the `key = value` text format
// shared by config files and checkpoint headers.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "alct/errors.hpp"

namespace alct {

enum class RouterKind { kSharedAffine, kSharedTwoLayer, kPerStepAffine, kPerStepTwoLayer, kNone };
enum class FeedKind { kIdentity, kAffine };
enum class Reduction { kMean, kSum };
enum class DecayShape { kCosine, kLinear, kConstant };

inline std::string to_string(RouterKind k) {
  switch (k) {
    case RouterKind::kSharedAffine: return "shared-affine";
    case RouterKind::kSharedTwoLayer: return "shared-two-layer";
    case RouterKind::kPerStepAffine: return "per-step-affine";
    case RouterKind::kPerStepTwoLayer: return "per-step-two-layer";
    case RouterKind::kNone: return "none";
  }
  return "?";
}

inline RouterKind parse_router_kind(std::string_view s) {
  for (auto k : {RouterKind::kSharedAffine, RouterKind::kSharedTwoLayer, RouterKind::kPerStepAffine,
                 RouterKind::kPerStepTwoLayer, RouterKind::kNone}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown router kind: " + std::string(s));
}

inline std::string to_string(FeedKind k) { return k == FeedKind::kIdentity ? "identity" : "affine"; }
inline FeedKind parse_feed_kind(std::string_view s) {
  if (s == "identity") return FeedKind::kIdentity;
  if (s == "affine") return FeedKind::kAffine;
  throw ConfigError("unknown feed kind: " + std::string(s));
}

inline std::string to_string(Reduction r) { return r == Reduction::kMean ? "mean" : "sum"; }
inline Reduction parse_reduction(std::string_view s) {
  if (s == "mean") return Reduction::kMean;
  if (s == "sum") return Reduction::kSum;
  throw ConfigError("unknown reduction: " + std::string(s));
}

inline std::string to_string(DecayShape d) {
  switch (d) {
    case DecayShape::kCosine: return "cosine";
    case DecayShape::kLinear: return "linear";
    case DecayShape::kConstant: return "constant";
  }
  return "?";
}
inline DecayShape parse_decay(std::string_view s) {
  if (s == "cosine") return DecayShape::kCosine;
  if (s == "linear") return DecayShape::kLinear;
  if (s == "constant") return DecayShape::kConstant;
  throw ConfigError("unknown decay shape: " + std::string(s));
}

/// Ordered `key = value` record.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      }
      const auto key = trim(trimmed.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      kv.set(std::string(key), std::string(trim(trimmed.substr(eq + 1))));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(value));
  }

  bool contains(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return true;
    }
    return false;
  }

  const std::string& get(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return v;
    }
    throw ConfigError("missing key: " + std::string(key));
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

namespace detail {

template <class N>
N parse_number(std::string_view key, const std::string& text) {
  N value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + std::string(key) + ": " + text);
  return value;
}

inline bool parse_bool(std::string_view key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad boolean for " + std::string(key) + ": " + text);
}

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

struct ModelConfig {
  int vocab_size = 258;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 172;
  int latent_max = 3;  // maximum latent CoT length; K_max = latent_max + 1
  double tau = 0.1;
  RouterKind router = RouterKind::kSharedAffine;
  int router_hidden = 64;
  double router_init_bias = 2.0;
  bool detach_router_input = true;
  FeedKind feed = FeedKind::kIdentity;
  double rope_base = 10000.0;
  int max_seq_len = 256;
  double init_std = 0.02;
  double embed_std = 1.0;
  std::string precision = "float32";

  int k_max() const { return latent_max + 1; }
  bool routed() const { return router != RouterKind::kNone; }
  bool per_step_router() const {
    return router == RouterKind::kPerStepAffine || router == RouterKind::kPerStepTwoLayer;
  }
  bool two_layer_router() const {
    return router == RouterKind::kSharedTwoLayer || router == RouterKind::kPerStepTwoLayer;
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (d_model < 2 || n_layers < 1 || n_heads < 1 || d_ff < 1) throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0) {
      throw ConfigError("d_model / n_heads must be a positive even integer");
    }
    if (latent_max < 0) throw ConfigError("latent_max must be >= 0");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (router_hidden < 1) throw ConfigError("router_hidden must be positive");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be positive");
    if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
  }

  void write(KeyValues& kv, const std::string& prefix = "model.") const {
    kv.set(prefix + "vocab_size", std::to_string(vocab_size));
    kv.set(prefix + "d_model", std::to_string(d_model));
    kv.set(prefix + "n_layers", std::to_string(n_layers));
    kv.set(prefix + "n_heads", std::to_string(n_heads));
    kv.set(prefix + "d_ff", std::to_string(d_ff));
    kv.set(prefix + "latent_max", std::to_string(latent_max));
    kv.set(prefix + "tau", detail::format_double(tau));
    kv.set(prefix + "router", to_string(router));
    kv.set(prefix + "router_hidden", std::to_string(router_hidden));
    kv.set(prefix + "router_init_bias", detail::format_double(router_init_bias));
    kv.set(prefix + "detach_router_input", detach_router_input ? "true" : "false");
    kv.set(prefix + "feed", to_string(feed));
    kv.set(prefix + "rope_base", detail::format_double(rope_base));
    kv.set(prefix + "max_seq_len", std::to_string(max_seq_len));
    kv.set(prefix + "init_std", detail::format_double(init_std));
    kv.set(prefix + "embed_std", detail::format_double(embed_std));
    kv.set(prefix + "precision", precision);
  }

  /// Applies one key (without prefix). Returns false if the key is unknown.
  bool apply(std::string_view key, const std::string& v) {
    using detail::parse_number;
    if (key == "vocab_size") vocab_size = parse_number<int>(key, v);
    else if (key == "d_model") d_model = parse_number<int>(key, v);
    else if (key == "n_layers") n_layers = parse_number<int>(key, v);
    else if (key == "n_heads") n_heads = parse_number<int>(key, v);
    else if (key == "d_ff") d_ff = parse_number<int>(key, v);
    else if (key == "latent_max") latent_max = parse_number<int>(key, v);
    else if (key == "tau") tau = parse_number<double>(key, v);
    else if (key == "router") router = parse_router_kind(v);
    else if (key == "router_hidden") router_hidden = parse_number<int>(key, v);
    else if (key == "router_init_bias") router_init_bias = parse_number<double>(key, v);
    else if (key == "detach_router_input") detach_router_input = detail::parse_bool(key, v);
    else if (key == "feed") feed = parse_feed_kind(v);
    else if (key == "rope_base") rope_base = parse_number<double>(key, v);
    else if (key == "max_seq_len") max_seq_len = parse_number<int>(key, v);
    else if (key == "init_std") init_std = parse_number<double>(key, v);
    else if (key == "embed_std") embed_std = parse_number<double>(key, v);
    else if (key == "precision") precision = v;
    else return false;
    return true;
  }

  static ModelConfig from(const KeyValues& kv, const std::string& prefix = "model.") {
    ModelConfig c;
    for (const auto& [k, v] : kv.entries()) {
      if (k.rfind(prefix, 0) != 0) continue;
      if (!c.apply(std::string_view(k).substr(prefix.size()), v)) throw ConfigError("unknown key: " + k);
    }
    c.validate();
    return c;
  }
};

struct AdaptiveLossConfig {
  double lambda = 0.4;
  double beta = 10.0;
  Reduction ce_reduction = Reduction::kMean;
  Reduction adaptive_reduction = Reduction::kMean;  // over tokens; steps are always summed

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(beta >= 1.0)) throw ConfigError("beta must be >= 1");
  }

  void write(KeyValues& kv, const std::string& prefix = "loss.") const {
    kv.set(prefix + "lambda", detail::format_double(lambda));
    kv.set(prefix + "beta", detail::format_double(beta));
    kv.set(prefix + "ce_reduction", to_string(ce_reduction));
    kv.set(prefix + "adaptive_reduction", to_string(adaptive_reduction));
  }

  bool apply(std::string_view key, const std::string& v) {
    using detail::parse_number;
    if (key == "lambda") lambda = parse_number<double>(key, v);
    else if (key == "beta") beta = parse_number<double>(key, v);
    else if (key == "ce_reduction") ce_reduction = parse_reduction(v);
    else if (key == "adaptive_reduction") adaptive_reduction = parse_reduction(v);
    else return false;
    return true;
  }
};

struct TrainConfig {
  std::string corpus;
  std::string eval_corpus;
  std::string out_dir = "run";
  std::string resume;
  int batch_size = 16;
  int seq_len = 64;
  int steps = 1000;
  double lr = 3e-3;
  double warmup_frac = 0.05;
  double min_lr_frac = 0.1;
  DecayShape decay = DecayShape::kCosine;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  int log_interval = 10;
  int ckpt_interval = 0;  // 0: only the final checkpoint
  int eval_interval = 0;
  int eval_batches = 8;
  bool vanilla = false;   // plain causal transformer baseline path
  bool shuffle = true;    // false: windows in file order
  ModelConfig model;
  AdaptiveLossConfig loss;

  void validate() const {
    model.validate();
    loss.validate();
    if (batch_size < 1 || seq_len < 2 || steps < 0) throw ConfigError("batch_size, seq_len, steps must be positive");
    if (seq_len > model.max_seq_len) throw ConfigError("seq_len exceeds model.max_seq_len");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (warmup_frac < 0.0 || warmup_frac > 1.0) throw ConfigError("warmup_frac must lie in [0, 1]");
    if (min_lr_frac < 0.0 || min_lr_frac > 1.0) throw ConfigError("min_lr_frac must lie in [0, 1]");
    if (log_interval < 1) throw ConfigError("log_interval must be positive");
    if (ckpt_interval < 0 || eval_interval < 0 || eval_batches < 1) throw ConfigError("intervals must be non-negative");
    if (grad_clip < 0.0 || weight_decay < 0.0) throw ConfigError("grad_clip and weight_decay must be non-negative");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("train.corpus", corpus);
    kv.set("train.eval_corpus", eval_corpus);
    kv.set("train.out_dir", out_dir);
    kv.set("train.resume", resume);
    kv.set("train.batch_size", std::to_string(batch_size));
    kv.set("train.seq_len", std::to_string(seq_len));
    kv.set("train.steps", std::to_string(steps));
    kv.set("train.lr", detail::format_double(lr));
    kv.set("train.warmup_frac", detail::format_double(warmup_frac));
    kv.set("train.min_lr_frac", detail::format_double(min_lr_frac));
    kv.set("train.decay", to_string(decay));
    kv.set("train.beta1", detail::format_double(beta1));
    kv.set("train.beta2", detail::format_double(beta2));
    kv.set("train.adam_eps", detail::format_double(adam_eps));
    kv.set("train.weight_decay", detail::format_double(weight_decay));
    kv.set("train.grad_clip", detail::format_double(grad_clip));
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.log_interval", std::to_string(log_interval));
    kv.set("train.ckpt_interval", std::to_string(ckpt_interval));
    kv.set("train.eval_interval", std::to_string(eval_interval));
    kv.set("train.eval_batches", std::to_string(eval_batches));
    kv.set("train.vanilla", vanilla ? "true" : "false");
    kv.set("train.shuffle", shuffle ? "true" : "false");
    model.write(kv);
    loss.write(kv);
    return kv;
  }

  static TrainConfig from(const KeyValues& kv) {
    using detail::parse_number;
    TrainConfig c;
    for (const auto& [k, v] : kv.entries()) {
      std::string_view key(k);
      if (key.starts_with("model.")) {
        if (!c.model.apply(key.substr(6), v)) throw ConfigError("unknown key: " + k);
        continue;
      }
      if (key.starts_with("loss.")) {
        if (!c.loss.apply(key.substr(5), v)) throw ConfigError("unknown key: " + k);
        continue;
      }
      if (!key.starts_with("train.")) throw ConfigError("unknown key: " + k);
      key = key.substr(6);
      if (key == "corpus") c.corpus = v;
      else if (key == "eval_corpus") c.eval_corpus = v;
      else if (key == "out_dir") c.out_dir = v;
      else if (key == "resume") c.resume = v;
      else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
      else if (key == "seq_len") c.seq_len = parse_number<int>(key, v);
      else if (key == "steps") c.steps = parse_number<int>(key, v);
      else if (key == "lr") c.lr = parse_number<double>(key, v);
      else if (key == "warmup_frac") c.warmup_frac = parse_number<double>(key, v);
      else if (key == "min_lr_frac") c.min_lr_frac = parse_number<double>(key, v);
      else if (key == "decay") c.decay = parse_decay(v);
      else if (key == "beta1") c.beta1 = parse_number<double>(key, v);
      else if (key == "beta2") c.beta2 = parse_number<double>(key, v);
      else if (key == "adam_eps") c.adam_eps = parse_number<double>(key, v);
      else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, v);
      else if (key == "grad_clip") c.grad_clip = parse_number<double>(key, v);
      else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
      else if (key == "log_interval") c.log_interval = parse_number<int>(key, v);
      else if (key == "ckpt_interval") c.ckpt_interval = parse_number<int>(key, v);
      else if (key == "eval_interval") c.eval_interval = parse_number<int>(key, v);
      else if (key == "eval_batches") c.eval_batches = parse_number<int>(key, v);
      else if (key == "vanilla") c.vanilla = detail::parse_bool(key, v);
      else if (key == "shuffle") c.shuffle = detail::parse_bool(key, v);
      else throw ConfigError("unknown key: " + k);
    }
    c.validate();
    return c;
  }
};

}  // namespace alct

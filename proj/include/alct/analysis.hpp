#pragma once

// Post-hoc analyses of a trained model: per-token reports, the confidence
// bucketed gain probe, length/difficulty curves and colored case studies.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "alct/corpus.hpp"
#include "alct/errors.hpp"
#include "alct/model.hpp"
#include "alct/tokenizer.hpp"

namespace alct::analysis {

struct TokenReport {
  int window = 0;    // index of the evaluated window
  int position = 0;  // 1-based position inside the window
  int token = 0;     // input token at this position
  int target = 0;    // next token
  double ce = 0.0;   // nats, from the mixed prediction
  int latent_length = 0;
  std::vector<double> p_target;  // per executed step
  double p_final = 0.0;          // target probability of the mixed prediction
};

namespace detail {

template <class T>
double log_softmax_at(const Matrix<T>& logits, Eigen::Index row, int col) {
  const double mx = double(logits.row(row).maxCoeff());
  double sum = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(double(logits(row, j)) - mx);
  return double(logits(row, col)) - mx - std::log(sum);
}

}  // namespace detail

/// Runs the adaptive path over consecutive corpus windows and reports every
/// supervised token. prune = false executes every step (the tau -> 0+ limit).
template <class T>
std::vector<TokenReport> collect_reports(const LatentModel<T>& model, const Corpus& corpus, int seq_len,
                                         std::size_t max_windows = 0, int batch_size = 8, bool prune = true) {
  if (corpus.vocab_size > std::uint32_t(model.config().vocab_size)) throw InvalidInput("corpus vocabulary too large");
  WindowSampler windows(corpus, seq_len, 0, false);
  std::size_t n = windows.window_count();
  if (max_windows > 0) n = std::min(n, max_windows);
  std::vector<TokenReport> out;
  UnrollOptions<T> options;
  options.prune = prune;
  for (std::size_t start = 0; start < n; start += std::size_t(batch_size)) {
    std::vector<std::vector<int>> batch;
    for (std::size_t i = start; i < std::min(n, start + std::size_t(batch_size)); ++i) batch.push_back(windows.window(i));
    const auto targets = next_token_targets(batch);
    Tape<T> tape(false);
    const auto r = model.unroll(tape, batch, targets, options);
    const Matrix<T> logits = r.z_final->value * model.lm_head()->value;
    for (int s = 0; s < r.batch; ++s) {
      for (int t = 1; t <= r.length; ++t) {
        const int y = targets[std::size_t(s)][std::size_t(t - 1)];
        if (y < 0) continue;
        TokenReport rep;
        rep.window = int(start) + s;
        rep.position = t;
        rep.token = batch[std::size_t(s)][std::size_t(t - 1)];
        rep.target = y;
        rep.ce = -detail::log_softmax_at(logits, r.token_index(s, t), y);
        rep.p_final = std::exp(-rep.ce);
        rep.latent_length = r.executed_length(s, t);
        for (T p : r.p_target_trajectory(s, t)) rep.p_target.push_back(double(p));
        out.push_back(std::move(rep));
      }
    }
  }
  return out;
}

/// Bucket index for value v under sorted edges e_0 < ... < e_B; values at or
/// beyond the outer edges fall into the first or last bucket.
inline std::size_t bucket_of(const std::vector<double>& edges, double v) {
  const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, v);
  return std::size_t(it - (edges.begin() + 1));
}

inline std::vector<double> linear_edges(double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw InvalidInput("bucket edges need bins >= 1 and hi > lo");
  std::vector<double> e;
  for (int i = 0; i <= bins; ++i) e.push_back(lo + (hi - lo) * double(i) / double(bins));
  return e;
}

inline std::vector<double> log_edges(double lo, double hi, int bins) {
  if (bins < 1 || !(lo > 0.0) || !(hi > lo)) throw InvalidInput("log edges need bins >= 1 and 0 < lo < hi");
  std::vector<double> e;
  for (int i = 0; i <= bins; ++i) e.push_back(std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * double(i) / double(bins)));
  return e;
}

struct GainCell {
  std::size_t count = 0;
  std::optional<double> mean;  // absent when the bucket is empty
};

struct GainSample {
  int step = 1;  // k: the gain is p^(k+1) - p^(k)
  std::size_t bucket = 0;
  double gain = 0.0;
};

struct ProbeResult {
  std::vector<double> edges;
  std::vector<std::vector<GainCell>> cells;  // [k - 1][bucket], k = 1..K_max - 1
  std::vector<GainSample> samples;

  nlohmann::json to_json() const {
    nlohmann::json steps = nlohmann::json::array();
    for (std::size_t k = 0; k < cells.size(); ++k) {
      nlohmann::json buckets = nlohmann::json::array();
      for (std::size_t b = 0; b < cells[k].size(); ++b) {
        nlohmann::json c{{"lo", edges[b]}, {"hi", edges[b + 1]}, {"count", cells[k][b].count}};
        c["mean_gain"] = cells[k][b].mean ? nlohmann::json(*cells[k][b].mean) : nlohmann::json(nullptr);
        buckets.push_back(std::move(c));
      }
      steps.push_back({{"step", k + 1}, {"buckets", std::move(buckets)}});
    }
    return {{"edges", edges}, {"steps", std::move(steps)}};
  }
};

/// Mean next-step improvement of the target probability, bucketed by the
/// current probability, for steps k = 1..K_max - 1. Reports must come from an
/// unpruned run so every step is observed.
inline ProbeResult probe_gain(const std::vector<TokenReport>& reports, int k_max, std::vector<double> edges = {}) {
  if (edges.empty()) edges = linear_edges(0.0, 1.0, 10);
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) throw InvalidInput("bucket edges must be sorted");
  ProbeResult res;
  res.edges = edges;
  const std::size_t n_buckets = edges.size() - 1;
  res.cells.assign(std::size_t(std::max(0, k_max - 1)), std::vector<GainCell>(n_buckets));
  std::vector<std::vector<double>> sums(res.cells.size(), std::vector<double>(n_buckets, 0.0));
  for (const auto& r : reports) {
    for (int k = 1; k < k_max && std::size_t(k) < r.p_target.size(); ++k) {
      const double p = r.p_target[std::size_t(k - 1)];
      GainSample s{k, bucket_of(edges, p), r.p_target[std::size_t(k)] - p};
      ++res.cells[std::size_t(k - 1)][s.bucket].count;
      sums[std::size_t(k - 1)][s.bucket] += s.gain;
      res.samples.push_back(s);
    }
  }
  for (std::size_t k = 0; k < res.cells.size(); ++k) {
    for (std::size_t b = 0; b < n_buckets; ++b) {
      auto& c = res.cells[k][b];
      if (c.count) c.mean = sums[k][b] / double(c.count);
    }
  }
  return res;
}

/// Permutation test of "mean gain does not depend on the bucket". The
/// statistic is the count-weighted between-bucket variance of mean gains,
/// summed over steps; bucket labels are shuffled within each step. Returns
/// the p-value with the usual +1 correction.
inline double gain_permutation_p_value(const ProbeResult& probe, int permutations = 1000, std::uint64_t seed = 1) {
  std::vector<std::vector<const GainSample*>> by_step(probe.cells.size());
  for (const auto& s : probe.samples) by_step[std::size_t(s.step - 1)].push_back(&s);
  const std::size_t n_buckets = probe.edges.size() - 1;

  auto statistic = [&](const std::vector<std::vector<std::size_t>>& labels) {
    double total = 0.0;
    for (std::size_t k = 0; k < by_step.size(); ++k) {
      const auto& ss = by_step[k];
      if (ss.empty()) continue;
      std::vector<double> sum(n_buckets, 0.0);
      std::vector<std::size_t> cnt(n_buckets, 0);
      double grand = 0.0;
      for (std::size_t i = 0; i < ss.size(); ++i) {
        sum[labels[k][i]] += ss[i]->gain;
        ++cnt[labels[k][i]];
        grand += ss[i]->gain;
      }
      grand /= double(ss.size());
      for (std::size_t b = 0; b < n_buckets; ++b) {
        if (cnt[b]) total += double(cnt[b]) * std::pow(sum[b] / double(cnt[b]) - grand, 2);
      }
    }
    return total;
  };

  std::vector<std::vector<std::size_t>> labels(by_step.size());
  for (std::size_t k = 0; k < by_step.size(); ++k) {
    for (const auto* s : by_step[k]) labels[k].push_back(s->bucket);
  }
  const double observed = statistic(labels);
  std::mt19937_64 rng(seed);
  int at_least = 0;
  for (int i = 0; i < permutations; ++i) {
    for (auto& l : labels) std::shuffle(l.begin(), l.end(), rng);
    if (statistic(labels) >= observed - 1e-15 * std::abs(observed)) ++at_least;
  }
  return double(at_least + 1) / double(permutations + 1);
}

struct LengthGroup {
  int latent_length = 0;
  std::size_t count = 0;
  double mean_p_target = 0.0;
};

/// Mean final target probability per executed latent length, ascending.
inline std::vector<LengthGroup> length_vs_ptarget(const std::vector<TokenReport>& reports) {
  std::vector<LengthGroup> groups;
  for (const auto& r : reports) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.latent_length == r.latent_length; });
    if (it == groups.end()) {
      groups.push_back({r.latent_length, 0, 0.0});
      it = groups.end() - 1;
    }
    ++it->count;
    it->mean_p_target += r.p_final;
  }
  for (auto& g : groups) g.mean_p_target /= double(g.count);
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.latent_length < b.latent_length; });
  return groups;
}

struct DifficultyBucket {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mean_latent_length = 0.0;
};

/// Mean executed latent length per token-CE bucket. Edges default to
/// logarithmic bins over the observed CE range, with the lower end floored at
/// min_ce. Empty buckets are dropped.
inline std::vector<DifficultyBucket> difficulty_buckets(const std::vector<TokenReport>& reports, int bins = 10,
                                                        std::vector<double> edges = {}, double min_ce = 1e-3) {
  if (reports.empty()) return {};
  if (edges.empty()) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto& r : reports) {
      lo = std::min(lo, r.ce);
      hi = std::max(hi, r.ce);
    }
    lo = std::max(lo, min_ce);
    if (!(hi > lo)) {
      DifficultyBucket only{lo, hi, reports.size(), 0.0};
      for (const auto& r : reports) only.mean_latent_length += r.latent_length;
      only.mean_latent_length /= double(reports.size());
      return {only};
    }
    edges = log_edges(lo, hi, bins);
  }
  std::vector<DifficultyBucket> out(edges.size() - 1);
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b].lo = edges[b];
    out[b].hi = edges[b + 1];
  }
  for (const auto& r : reports) {
    auto& b = out[bucket_of(edges, r.ce)];
    ++b.count;
    b.mean_latent_length += r.latent_length;
  }
  std::vector<DifficultyBucket> kept;
  for (auto& b : out) {
    if (!b.count) continue;
    b.mean_latent_length /= double(b.count);
    kept.push_back(b);
  }
  return kept;
}

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[idx[m]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation. NaN when either side is constant or fewer than
/// two points are given.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidInput("spearman: length mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(ry.size());
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

/// Correlation between difficulty bucket order and mean latent length.
inline double difficulty_length_correlation(const std::vector<DifficultyBucket>& buckets) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    x.push_back(double(i));
    y.push_back(buckets[i].mean_latent_length);
  }
  return spearman(x, y);
}

/// Correlation between latent length and mean target probability.
inline double length_ptarget_correlation(const std::vector<LengthGroup>& groups) {
  std::vector<double> x, y;
  for (const auto& g : groups) {
    x.push_back(g.latent_length);
    y.push_back(g.mean_p_target);
  }
  return spearman(x, y);
}

struct CaseStudy {
  std::vector<int> tokens;
  std::vector<int> latent_lengths;
  int latent_max = 0;
};

/// Executed latent length of every token of `text`, processed in chunks of
/// the model's context length.
template <class T>
CaseStudy case_study(const LatentModel<T>& model, const std::vector<int>& tokens) {
  CaseStudy cs;
  cs.tokens = tokens;
  cs.latent_max = model.config().latent_max;
  const std::size_t chunk = std::size_t(model.config().max_seq_len);
  for (std::size_t start = 0; start < tokens.size(); start += chunk) {
    std::vector<int> part(tokens.begin() + std::ptrdiff_t(start),
                          tokens.begin() + std::ptrdiff_t(std::min(tokens.size(), start + chunk)));
    Tape<T> tape(false);
    UnrollOptions<T> options;
    options.compute_p_target = false;
    const auto r = model.unroll(tape, {part}, {}, options);
    for (int t = 1; t <= int(part.size()); ++t) cs.latent_lengths.push_back(r.executed_length(0, t));
  }
  return cs;
}

struct Rgb {
  int r, g, b;
};

/// Fixed color scale from pale yellow (0 steps) to deep red (latent_max).
inline Rgb length_color(int length, int latent_max) {
  const double f = latent_max > 0 ? double(length) / double(latent_max) : 0.0;
  auto lerp = [f](int a, int b) { return int(std::lround(a + (b - a) * f)); };
  return {lerp(255, 165), lerp(247, 15), lerp(204, 21)};
}

inline std::string ansi_report(const CaseStudy& cs) {
  std::ostringstream out;
  auto cell = [&](const std::string& text, int length) {
    const auto c = length_color(length, cs.latent_max);
    const bool dark = length * 2 > cs.latent_max;
    out << "\x1b[48;2;" << c.r << ';' << c.g << ';' << c.b << 'm' << (dark ? "\x1b[97m" : "\x1b[30m") << text << "\x1b[0m";
  };
  for (std::size_t i = 0; i < cs.tokens.size(); ++i) {
    const int id = cs.tokens[i];
    cell(id >= 32 && id < 127 ? std::string(1, char(id)) : ByteTokenizer::display(id), cs.latent_lengths[i]);
    if (id == '\n') out << '\n';
  }
  out << "\n\nlatent steps:";
  for (int l = 0; l <= cs.latent_max; ++l) {
    out << ' ';
    cell(" " + std::to_string(l) + " ", l);
  }
  out << '\n';
  return out.str();
}

inline std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string html_report(const CaseStudy& cs, const std::string& title = "latent steps per token") {
  auto color = [&](int l) {
    const auto c = length_color(l, cs.latent_max);
    char buf[32];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(title) << "</title>\n"
      << "<style>body{font-family:monospace;max-width:60em;margin:2em auto;line-height:1.9}"
      << "span.t{padding:1px 0;white-space:pre-wrap}span.k{display:inline-block;width:2.2em;text-align:center;"
      << "margin-right:.3em}</style></head><body>\n<h3>" << html_escape(title) << "</h3>\n<p>";
  for (std::size_t i = 0; i < cs.tokens.size(); ++i) {
    const int id = cs.tokens[i];
    const int l = cs.latent_lengths[i];
    const std::string text = id == '\n' ? std::string("\u21b5") : (id >= 32 && id < 127 ? std::string(1, char(id)) : ByteTokenizer::display(id));
    out << "<span class=\"t\" title=\"" << l << "\" style=\"background:" << color(l) << "\">" << html_escape(text)
        << "</span>";
    if (id == '\n') out << "<br>\n";
  }
  out << "</p>\n<p>latent steps: ";
  for (int l = 0; l <= cs.latent_max; ++l) {
    out << "<span class=\"k legend\" style=\"background:" << color(l) << "\">" << l << "</span>";
  }
  out << "</p>\n</body></html>\n";
  return out.str();
}

}  // namespace alct::analysis

#pragma once

// Two-dimensional causal visibility over (token position t, latent step k).
// A query at (t, k) may read a key at (t', k') iff t' <= t, k' <= k and the key
// was actually executed. Positions and steps are 1-based.

#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "alct/errors.hpp"

namespace alct::mask {

struct GridIndex {
  int t = 1;
  int k = 1;

  friend bool operator==(const GridIndex&, const GridIndex&) = default;
};

/// Per-(t, k) execution flags for one sequence.
class Occupancy {
 public:
  /// Every grid entry active: the unpruned grid used at the start of training.
  static Occupancy full(int length, int k_max) { return Occupancy(length, k_max, true); }
  /// Nothing executed yet: used by incremental decoding.
  static Occupancy empty(int length, int k_max) { return Occupancy(length, k_max, false); }

  int length() const { return length_; }
  int k_max() const { return k_max_; }

  bool in_range(GridIndex g) const { return g.t >= 1 && g.t <= length_ && g.k >= 1 && g.k <= k_max_; }

  bool active(GridIndex g) const {
    check(g);
    return flags_[index(g)] != 0;
  }

  void activate(GridIndex g) {
    check(g);
    flags_[index(g)] = 1;
  }

  /// Marks steps k_star+1..k_max of position t as never executed.
  void prune_after(int t, int k_star) {
    for (int k = k_star + 1; k <= k_max_; ++k) {
      check({t, k});
      flags_[index({t, k})] = 0;
    }
  }

  /// Positions active at step k, in increasing order.
  std::vector<int> active_positions(int k) const {
    std::vector<int> out;
    for (int t = 1; t <= length_; ++t) {
      if (flags_[index({t, k})]) out.push_back(t);
    }
    return out;
  }

 private:
  Occupancy(int length, int k_max, bool value) : length_(length), k_max_(k_max) {
    if (length < 0 || k_max < 1) throw InvalidInput("occupancy dimensions must be positive");
    flags_.assign(std::size_t(length) * std::size_t(k_max), value ? 1 : 0);
  }

  std::size_t index(GridIndex g) const { return std::size_t(g.k - 1) * std::size_t(length_) + std::size_t(g.t - 1); }

  void check(GridIndex g) const {
    if (!in_range(g)) {
      throw InvalidInput("grid index (" + std::to_string(g.t) + ", " + std::to_string(g.k) + ") out of range");
    }
  }

  int length_ = 0;
  int k_max_ = 1;
  std::vector<std::uint8_t> flags_;
};

/// Raw 2D causal predicate without occupancy.
inline bool causal_2d(GridIndex src, GridIndex dst) { return dst.t <= src.t && dst.k <= src.k; }

/// Whether the query at src may attend to the key at dst.
inline bool visible(GridIndex src, GridIndex dst, const Occupancy& occupancy) {
  if (!occupancy.in_range(src) || !occupancy.in_range(dst)) {
    throw InvalidInput("grid index out of range");
  }
  return causal_2d(src, dst) && occupancy.active(dst);
}

/// Finite stand-in for -inf that survives addition without overflowing.
template <std::floating_point T>
constexpr T masked_value() {
  return std::numeric_limits<T>::lowest() / T(2);
}

/// Additive mask rows for the queries of one latent step.
///
/// Keys are every active entry with k' <= step, ordered step-major then
/// position-minor, which is the order in which the KV cache grows.
template <std::floating_point T>
struct StepMask {
  int step = 1;
  std::vector<int> queries;       // positions t of the step's queries
  std::vector<GridIndex> keys;    // cache layout
  std::vector<T> values;          // queries.size() x keys.size(), row-major

  std::size_t rows() const { return queries.size(); }
  std::size_t cols() const { return keys.size(); }
  T at(std::size_t q, std::size_t key) const { return values[q * keys.size() + key]; }
  bool empty() const { return queries.empty(); }
};

template <std::floating_point T>
StepMask<T> build_step_mask(const Occupancy& occupancy, int step, std::span<const int> queries) {
  if (step < 1 || step > occupancy.k_max()) throw InvalidInput("latent step out of range");
  StepMask<T> m;
  m.step = step;
  if (queries.empty()) return m;
  m.queries.assign(queries.begin(), queries.end());
  for (int t : m.queries) {
    if (!occupancy.active({t, step})) {
      throw InvalidInput("query (" + std::to_string(t) + ", " + std::to_string(step) + ") is not active");
    }
  }
  for (int k = 1; k <= step; ++k) {
    for (int t = 1; t <= occupancy.length(); ++t) {
      if (occupancy.active({t, k})) m.keys.push_back({t, k});
    }
  }
  m.values.assign(m.rows() * m.cols(), masked_value<T>());
  for (std::size_t q = 0; q < m.rows(); ++q) {
    const GridIndex src{m.queries[q], step};
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (causal_2d(src, m.keys[j])) m.values[q * m.cols() + j] = T(0);
    }
  }
  return m;
}

/// Mask for all active queries of a step.
template <std::floating_point T>
StepMask<T> build_step_mask(const Occupancy& occupancy, int step) {
  const auto queries = occupancy.active_positions(step);
  return build_step_mask<T>(occupancy, step, queries);
}

/// Latent steps reuse the position id of their token.
inline int position_id(GridIndex g) { return g.t; }

/// Position ids for the full grid, step-major.
inline std::vector<int> position_ids(int length, int k_max) {
  std::vector<int> ids;
  ids.reserve(std::size_t(length) * std::size_t(k_max));
  for (int k = 1; k <= k_max; ++k) {
    for (int t = 1; t <= length; ++t) ids.push_back(position_id({t, k}));
  }
  return ids;
}

}  // namespace alct::mask

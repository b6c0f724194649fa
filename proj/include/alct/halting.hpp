#pragma once

// Probability flow for token-level halting over a bounded number of latent
// steps. Steps are 1-based in the documentation and 0-based in storage:
// gates[k-1] is the gate of step k.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "alct/errors.hpp"

namespace alct::halting {

/// Gates are kept away from {0, 1} so the sigmoid derivative never vanishes
/// numerically; the terminal gate is exactly zero.
inline constexpr double kGateEpsilon = 1e-6;

/// Clamp a router probability into [eps, 1 - eps], or force 0 at the last step.
template <std::floating_point T>
T sanitize_gate(T g, bool terminal) {
  if (terminal) return T(0);
  const T eps = T(kGateEpsilon);
  return std::clamp(g, eps, T(1) - eps);
}

/// Conditional continuation probabilities g^(1..K_max). Every entry lies in
/// [0, 1] and the terminal entry is exactly zero.
template <std::floating_point T>
class GateVector {
 public:
  GateVector() = default;
  explicit GateVector(std::vector<T> gates) : gates_(std::move(gates)) {
    if (gates_.empty()) throw InvalidInput("gate vector is empty");
    for (T g : gates_) {
      if (!(g >= T(0) && g <= T(1))) {
        throw InvalidInput("gate outside [0, 1]: " + std::to_string(double(g)));
      }
    }
    if (gates_.back() != T(0)) throw InvalidInput("terminal gate must be exactly 0");
  }

  std::size_t size() const { return gates_.size(); }
  T operator[](std::size_t i) const { return gates_[i]; }
  std::span<const T> values() const { return gates_; }

 private:
  std::vector<T> gates_;
};

/// reach^(1) = 1, reach^(k+1) = reach^(k) * g^(k).
template <std::floating_point T>
std::vector<T> compute_reach(std::span<const T> gates) {
  if (gates.empty()) throw InvalidInput("gate vector is empty");
  std::vector<T> reach(gates.size());
  reach[0] = T(1);
  for (std::size_t k = 1; k < gates.size(); ++k) reach[k] = reach[k - 1] * gates[k - 1];
  return reach;
}

template <std::floating_point T>
std::vector<T> compute_reach(const GateVector<T>& gates) {
  return compute_reach(gates.values());
}

/// exit^(k) = reach^(k) * (1 - g^(k)).
template <std::floating_point T>
std::vector<T> compute_exit(std::span<const T> gates, std::span<const T> reach) {
  if (gates.size() != reach.size()) throw InvalidInput("gates and reach differ in length");
  std::vector<T> exit(gates.size());
  for (std::size_t k = 0; k < gates.size(); ++k) exit[k] = reach[k] * (T(1) - gates[k]);
  return exit;
}

template <std::floating_point T>
std::vector<T> compute_exit(const GateVector<T>& gates, std::span<const T> reach) {
  return compute_exit(gates.values(), reach);
}

/// Largest 1-based k with reach^(k) >= tau. A tie with tau counts as reachable.
template <std::floating_point T>
int truncation_step(std::span<const T> reach, T tau) {
  if (!(tau > T(0) && tau <= T(1))) {
    throw InvalidInput("threshold must lie in (0, 1]: " + std::to_string(double(tau)));
  }
  if (reach.empty()) throw InvalidInput("reach vector is empty");
  int k_star = 1;
  for (std::size_t k = 0; k < reach.size(); ++k) {
    if (reach[k] >= tau) k_star = int(k) + 1;
  }
  return k_star;
}

/// Mixing weights over executed steps 1..k_star. The mass beyond k_star is moved
/// onto the terminal executed step, which equals reach^(k_star).
template <std::floating_point T>
std::vector<T> reallocate_residual(std::span<const T> exit, std::span<const T> reach, int k_star) {
  if (exit.size() != reach.size()) throw InvalidInput("exit and reach differ in length");
  if (k_star < 1 || std::size_t(k_star) > exit.size()) {
    throw InvalidInput("truncation step out of range: " + std::to_string(k_star));
  }
  std::vector<T> hat(exit.begin(), exit.begin() + k_star);
  hat[k_star - 1] = reach[k_star - 1];
  return hat;
}

/// Convex combination of executed latent states.
template <std::floating_point T>
std::vector<T> mix_states(std::span<const T> weights, const std::vector<std::vector<T>>& states) {
  if (weights.size() != states.size() || weights.empty()) {
    throw InvalidInput("weights and states differ in length");
  }
  const T total = std::accumulate(weights.begin(), weights.end(), T(0));
  if (std::abs(double(total) - 1.0) > 1e-6) {
    throw InvalidInput("mixing weights sum to " + std::to_string(double(total)));
  }
  const std::size_t dim = states[0].size();
  std::vector<T> out(dim, T(0));
  for (std::size_t k = 0; k < states.size(); ++k) {
    if (states[k].size() != dim) throw InvalidInput("latent states differ in width");
    for (std::size_t i = 0; i < dim; ++i) out[i] += weights[k] * states[k][i];
  }
  return out;
}

/// 1 - mean(l) / l_max, where l = K* - 1 is the executed latent length.
inline double prune_ratio(std::span<const int> lengths, int l_max) {
  if (lengths.empty()) throw InvalidInput("no latent lengths supplied");
  if (l_max < 1) throw InvalidInput("l_max must be >= 1");
  double sum = 0.0;
  for (int l : lengths) {
    if (l < 0 || l > l_max) throw InvalidInput("latent length out of range: " + std::to_string(l));
    sum += l;
  }
  return 1.0 - (sum / double(lengths.size())) / double(l_max);
}

/// Full per-token halting record.
template <std::floating_point T>
struct Schedule {
  std::vector<T> gates;
  std::vector<T> reach;
  std::vector<T> exit;
  std::vector<T> hat_exit;  // length k_star
  int k_star = 1;
  T threshold = T(1);

  int executed_length() const { return k_star - 1; }
};

template <std::floating_point T>
Schedule<T> make_schedule(const GateVector<T>& gates, T tau) {
  Schedule<T> s;
  s.gates.assign(gates.values().begin(), gates.values().end());
  s.reach = compute_reach<T>(s.gates);
  s.exit = compute_exit<T>(s.gates, s.reach);
  s.k_star = truncation_step<T>(s.reach, tau);
  s.hat_exit = reallocate_residual<T>(s.exit, s.reach, s.k_star);
  s.threshold = tau;
  return s;
}

/// Schedule for a token whose executed prefix is known: gates beyond the
/// executed steps were never evaluated and are reported as zero.
template <std::floating_point T>
Schedule<T> make_executed_schedule(std::span<const T> executed_gates, int k_max, T tau) {
  std::vector<T> full(std::size_t(k_max), T(0));
  std::copy(executed_gates.begin(), executed_gates.end(), full.begin());
  full.back() = T(0);
  auto s = make_schedule(GateVector<T>(std::move(full)), tau);
  return s;
}

/// Schedule in the tau -> 0+ limit: every step executes and nothing is
/// re-allocated. threshold is reported as 0.
template <std::floating_point T>
Schedule<T> make_untruncated_schedule(std::span<const T> gates, int k_max) {
  std::vector<T> full(std::size_t(k_max), T(0));
  std::copy(gates.begin(), gates.end(), full.begin());
  full.back() = T(0);
  const GateVector<T> checked(std::move(full));
  Schedule<T> s;
  s.gates.assign(checked.values().begin(), checked.values().end());
  s.reach = compute_reach<T>(s.gates);
  s.exit = compute_exit<T>(s.gates, s.reach);
  s.k_star = k_max;
  s.hat_exit = s.exit;
  s.threshold = T(0);
  return s;
}

/// Vector-Jacobian product of hat_exit (as a function of the gates) with an
/// upstream gradient over the k_star mixing weights. Returns dL/dg for every
/// step; entries at or beyond k_star are zero since those gates do not enter
/// the truncated weights.
template <std::floating_point T>
std::vector<T> hat_exit_vjp(std::span<const T> gates, int k_star, std::span<const T> upstream) {
  if (upstream.size() != std::size_t(k_star)) throw InvalidInput("upstream length != k_star");
  if (k_star < 1 || std::size_t(k_star) > gates.size()) throw InvalidInput("k_star out of range");
  std::vector<T> grad(gates.size(), T(0));
  // d reach^(k) / d g^(j) for j < k is the product of the other gates before k.
  auto reach_without = [&](int k, int j) {
    T p = T(1);
    for (int i = 0; i < k; ++i) {
      if (i != j) p *= gates[std::size_t(i)];
    }
    return p;
  };
  for (int k = 0; k < k_star; ++k) {
    const T up = upstream[std::size_t(k)];
    if (up == T(0)) continue;
    const bool terminal = (k == k_star - 1);
    const T stop = terminal ? T(1) : T(1) - gates[std::size_t(k)];
    for (int j = 0; j < k; ++j) grad[std::size_t(j)] += up * reach_without(k, j) * stop;
    if (!terminal) grad[std::size_t(k)] -= up * reach_without(k, -1);
  }
  return grad;
}

}  // namespace alct::halting

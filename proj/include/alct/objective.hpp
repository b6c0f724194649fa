#pragma once

// Training objective: cross-entropy of the LM head over the mixed states plus
// the correctness-aware compute penalty on router gates.

#include <cmath>
#include <vector>

#include "alct/config.hpp"
#include "alct/model.hpp"
#include "alct/ops.hpp"

namespace alct::objective {

/// Flattens per-sequence targets into the z_final row order.
inline std::vector<int> flatten_targets(const std::vector<std::vector<int>>& targets) {
  std::vector<int> out;
  for (const auto& s : targets) out.insert(out.end(), s.begin(), s.end());
  return out;
}

/// Token-level cross-entropy of LMHead(z) against targets (-1 = unsupervised).
template <class T>
Var<T> ce_loss(Tape<T>& tape, const LatentModel<T>& model, const Var<T>& z, const std::vector<int>& targets,
               Reduction reduction = Reduction::kMean) {
  if (z->value.rows() != Eigen::Index(targets.size())) throw InvalidInput("ce_loss: rows and targets differ");
  auto mean = ops::cross_entropy(tape, model.logits(tape, z), targets);
  if (reduction == Reduction::kMean) return mean;
  int count = 0;
  for (int y : targets) count += y >= 0;
  return ops::scale(tape, mean, T(count));
}

/// lambda * sum_t sum_{k <= K*_t} g_t^(k) * sg(p_target^(k) ^ beta).
///
/// The p_target factor is a constant, so only the router logits receive
/// gradient. Steps are summed per token; tokens are averaged over supervised
/// positions by default.
template <class T>
Var<T> adaptive_loss(Tape<T>& tape, const UnrollResult<T>& unrolled, const AdaptiveLossConfig& config) {
  config.validate();
  int supervised = 0;
  for (const auto& p : unrolled.steps.empty() ? std::vector<T>{} : unrolled.steps[0].p_target) supervised += p >= T(0);
  const T norm = config.adaptive_reduction == Reduction::kMean ? (supervised > 0 ? T(1) / T(supervised) : T(0)) : T(1);
  const T lambda = T(config.lambda);

  std::vector<Var<T>> logits;
  std::vector<std::vector<T>> coef;
  std::vector<std::vector<T>> sig;
  std::vector<std::vector<bool>> scripted;
  T total = T(0);
  for (const auto& block : unrolled.steps) {
    std::vector<T> c(block.gates.size(), T(0));
    for (std::size_t i = 0; i < c.size(); ++i) {
      const T p = block.p_target[i];
      if (p <= T(0)) continue;  // unsupervised, or underflowed: continuation is free
      c[i] = lambda * norm * std::pow(p, T(config.beta));
      total += c[i] * block.gates[i];
    }
    logits.push_back(block.gate_logits);
    coef.push_back(std::move(c));
    sig.push_back(block.sigmoid);
    scripted.push_back(block.scripted);
  }
  Matrix<T> v(1, 1);
  v(0, 0) = total;
  auto out = make_var<T>(std::move(v));
  bool grad = false;
  for (const auto& l : logits) grad = grad || tape.needs_grad(l);
  if (!grad || lambda == T(0)) return out;
  out->requires_grad = true;
  tape.record([out, logits, coef, sig, scripted] {
    if (!out->has_grad()) return;
    const T up = out->grad(0, 0);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      const auto& lg = logits[k];
      if (!lg || !lg->requires_grad) continue;
      auto& g = lg->grad_buffer();
      for (std::size_t i = 0; i < coef[k].size(); ++i) {
        if (coef[k][i] == T(0) || scripted[k][i]) continue;
        g(Eigen::Index(i), 0) += up * coef[k][i] * LatentModel<T>::gate_derivative(sig[k][i]);
      }
    }
  });
  return out;
}

template <class T>
Var<T> total_loss(Tape<T>& tape, const Var<T>& ce, const Var<T>& adaptive) {
  return ops::add_scalars(tape, ce, adaptive);
}

template <class T>
struct Losses {
  Var<T> ce;
  Var<T> adaptive;
  Var<T> total;
};

/// Full objective for an unrolled batch.
template <class T>
Losses<T> compute_losses(Tape<T>& tape, const LatentModel<T>& model, const UnrollResult<T>& unrolled,
                         const std::vector<std::vector<int>>& targets, const AdaptiveLossConfig& config) {
  Losses<T> l;
  l.ce = ce_loss(tape, model, unrolled.z_final, flatten_targets(targets), config.ce_reduction);
  if (model.config().routed()) {
    l.adaptive = adaptive_loss(tape, unrolled, config);
  } else {
    l.adaptive = make_var<T>(Matrix<T>::Zero(1, 1));
  }
  l.total = total_loss(tape, l.ce, l.adaptive);
  return l;
}

}  // namespace alct::objective

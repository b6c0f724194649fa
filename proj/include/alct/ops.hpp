#pragma once

// Differentiable building blocks for the transformer. Every op computes its
// value eagerly and, when the tape is recording and an input requires grad,
// records a closure that accumulates input gradients from the output gradient.

#include <algorithm>
#include <type_traits>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "alct/errors.hpp"
#include "alct/tensor.hpp"

namespace alct::ops {

template <class T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.cols() != b->value.rows()) throw InvalidInput("matmul shape mismatch");
  auto out = make_var<T>(a->value * b->value);
  if (tape.needs_grad(a, b)) {
    out->requires_grad = true;
    tape.record([a, b, out] {
      if (!out->has_grad()) return;
      if (a->requires_grad) a->grad_buffer().noalias() += out->grad * b->value.transpose();
      if (b->requires_grad) b->grad_buffer().noalias() += a->value.transpose() * out->grad;
    });
  }
  return out;
}

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) {
    throw InvalidInput("add shape mismatch");
  }
  auto out = make_var<T>(a->value + b->value);
  if (tape.needs_grad(a, b)) {
    out->requires_grad = true;
    tape.record([a, b, out] {
      if (!out->has_grad()) return;
      if (a->requires_grad) a->grad_buffer() += out->grad;
      if (b->requires_grad) b->grad_buffer() += out->grad;
    });
  }
  return out;
}

/// a + broadcast(bias) where bias is a single row.
template <class T>
Var<T> add_bias(Tape<T>& tape, const Var<T>& a, const Var<T>& bias) {
  if (bias->value.rows() != 1 || bias->value.cols() != a->value.cols()) throw InvalidInput("bias shape mismatch");
  Matrix<T> v = a->value;
  v.rowwise() += bias->value.row(0);
  auto out = make_var<T>(std::move(v));
  if (tape.needs_grad(a, bias)) {
    out->requires_grad = true;
    tape.record([a, bias, out] {
      if (!out->has_grad()) return;
      if (a->requires_grad) a->grad_buffer() += out->grad;
      if (bias->requires_grad) bias->grad_buffer() += out->grad.colwise().sum();
    });
  }
  return out;
}

template <class T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  auto out = make_var<T>(a->value.cwiseProduct(b->value));
  if (tape.needs_grad(a, b)) {
    out->requires_grad = true;
    tape.record([a, b, out] {
      if (!out->has_grad()) return;
      if (a->requires_grad) a->grad_buffer() += out->grad.cwiseProduct(b->value);
      if (b->requires_grad) b->grad_buffer() += out->grad.cwiseProduct(a->value);
    });
  }
  return out;
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
  auto out = make_var<T>(a->value * factor);
  if (tape.needs_grad(a)) {
    out->requires_grad = true;
    tape.record([a, out, factor] {
      if (out->has_grad()) a->grad_buffer() += out->grad * factor;
    });
  }
  return out;
}

/// x * sigmoid(x)
template <class T>
Var<T> silu(Tape<T>& tape, const Var<T>& a) {
  Matrix<T> sig = (T(1) + (-a->value.array()).exp()).inverse().matrix();
  auto out = make_var<T>(a->value.cwiseProduct(sig));
  if (tape.needs_grad(a)) {
    out->requires_grad = true;
    tape.record([a, out, sig = std::move(sig)] {
      if (!out->has_grad()) return;
      auto d = sig.array() * (T(1) + a->value.array() * (T(1) - sig.array()));
      a->grad_buffer().array() += out->grad.array() * d;
    });
  }
  return out;
}

/// Row-wise RMS normalization with a learned gain.
template <class T>
Var<T> rmsnorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gain, T eps = T(1e-5)) {
  const auto n = x->value.rows();
  const auto d = x->value.cols();
  if (gain->value.rows() != 1 || gain->value.cols() != d) throw InvalidInput("rmsnorm gain shape mismatch");
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv(n);
  Matrix<T> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    inv(i) = T(1) / std::sqrt(x->value.row(i).squaredNorm() / T(d) + eps);
    y.row(i) = x->value.row(i).cwiseProduct(gain->value.row(0)) * inv(i);
  }
  auto out = make_var<T>(std::move(y));
  if (tape.needs_grad(x, gain)) {
    out->requires_grad = true;
    tape.record([x, gain, out, inv = std::move(inv)] {
      if (!out->has_grad()) return;
      const auto rows = x->value.rows();
      const T dim = T(x->value.cols());
      if (gain->requires_grad) {
        auto& gg = gain->grad_buffer();
        for (Eigen::Index i = 0; i < rows; ++i) {
          gg.row(0) += out->grad.row(i).cwiseProduct(x->value.row(i)) * inv(i);
        }
      }
      if (x->requires_grad) {
        auto& gx = x->grad_buffer();
        for (Eigen::Index i = 0; i < rows; ++i) {
          auto gw = out->grad.row(i).cwiseProduct(gain->value.row(0));
          const T dot = gw.dot(x->value.row(i));
          const T r = inv(i);
          gx.row(i) += gw * r - x->value.row(i) * (r * r * r * dot / dim);
        }
      }
    });
  }
  return out;
}

/// Rotary embedding applied per head with the rotate-half pairing (i, i + h/2).
/// positions[i] is the position id of row i.
template <class T>
Var<T> rope(Tape<T>& tape, const Var<T>& x, std::span<const int> positions, int n_heads, T base) {
  const auto n = x->value.rows();
  const auto d = x->value.cols();
  if (Eigen::Index(positions.size()) != n) throw InvalidInput("rope positions mismatch");
  if (d % n_heads != 0 || (d / n_heads) % 2 != 0) throw InvalidInput("rope head dim must be even");
  const int head_dim = int(d) / n_heads;
  const int half = head_dim / 2;
  Matrix<T> cos_t(n, half), sin_t(n, half);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < half; ++j) {
      const T freq = std::pow(base, -T(2 * j) / T(head_dim));
      const T angle = T(positions[std::size_t(i)]) * freq;
      cos_t(i, j) = std::cos(angle);
      sin_t(i, j) = std::sin(angle);
    }
  }
  auto rotate = [n, n_heads, head_dim, half](const Matrix<T>& in, const Matrix<T>& c, const Matrix<T>& s, T sign) {
    Matrix<T> o(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * head_dim;
        for (int j = 0; j < half; ++j) {
          const T a = in(i, off + j);
          const T b = in(i, off + j + half);
          o(i, off + j) = a * c(i, j) - sign * b * s(i, j);
          o(i, off + j + half) = sign * a * s(i, j) + b * c(i, j);
        }
      }
    }
    return o;
  };
  auto out = make_var<T>(rotate(x->value, cos_t, sin_t, T(1)));
  if (tape.needs_grad(x)) {
    out->requires_grad = true;
    tape.record([x, out, rotate, cos_t = std::move(cos_t), sin_t = std::move(sin_t)] {
      if (out->has_grad()) x->grad_buffer() += rotate(out->grad, cos_t, sin_t, T(-1));
    });
  }
  return out;
}

/// Row lookup into an embedding table.
template <class T>
Var<T> embedding(Tape<T>& tape, const Var<T>& table, std::vector<int> ids) {
  Matrix<T> v(Eigen::Index(ids.size()), table->value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->value.rows()) throw InvalidInput("token id out of vocabulary");
    v.row(Eigen::Index(i)) = table->value.row(ids[i]);
  }
  auto out = make_var<T>(std::move(v));
  if (tape.needs_grad(table)) {
    out->requires_grad = true;
    tape.record([table, out, ids = std::move(ids)] {
      if (!out->has_grad()) return;
      auto& g = table->grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += out->grad.row(Eigen::Index(i));
    });
  }
  return out;
}

template <class T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& x, std::vector<int> rows) {
  Matrix<T> v(Eigen::Index(rows.size()), x->value.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) v.row(Eigen::Index(i)) = x->value.row(rows[i]);
  auto out = make_var<T>(std::move(v));
  if (tape.needs_grad(x)) {
    out->requires_grad = true;
    tape.record([x, out, rows = std::move(rows)] {
      if (!out->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += out->grad.row(Eigen::Index(i));
    });
  }
  return out;
}

/// Mean cross-entropy over rows whose target is >= 0. Returns a 1x1 value.
template <class T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::vector<int> targets) {
  const auto n = logits->value.rows();
  if (Eigen::Index(targets.size()) != n) throw InvalidInput("cross-entropy target count mismatch");
  Matrix<T> probs(n, logits->value.cols());
  T total = T(0);
  int count = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mx = logits->value.row(i).maxCoeff();
    probs.row(i) = (logits->value.row(i).array() - mx).exp().matrix();
    const T z = probs.row(i).sum();
    probs.row(i) /= z;
    const int y = targets[std::size_t(i)];
    if (y < 0) continue;
    if (y >= logits->value.cols()) throw InvalidInput("target id out of vocabulary");
    total += -(logits->value(i, y) - mx - std::log(z));
    ++count;
  }
  Matrix<T> v(1, 1);
  v(0, 0) = count > 0 ? total / T(count) : T(0);
  auto out = make_var<T>(std::move(v));
  if (count > 0 && tape.needs_grad(logits)) {
    out->requires_grad = true;
    tape.record([logits, out, probs = std::move(probs), targets = std::move(targets), count] {
      if (!out->has_grad()) return;
      const T g = out->grad(0, 0) / T(count);
      auto& gl = logits->grad_buffer();
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const int y = targets[std::size_t(i)];
        if (y < 0) continue;
        gl.row(i) += probs.row(i) * g;
        gl(i, y) -= g;
      }
    });
  }
  return out;
}

/// Sum of 1x1 values.
template <class T>
Var<T> add_scalars(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  return add(tape, a, b);
}

/// Location of one key row inside a list of cache blocks.
struct KeyRef {
  int block = 0;
  int row = 0;
};

/// Queries and keys of one independent sequence, plus the additive mask
/// between them (rows = queries, cols = keys).
template <class T>
struct AttentionGroup {
  std::vector<int> query_rows;
  std::vector<KeyRef> keys;
  std::vector<T> mask;
};

/// Multi-head softmax attention where keys and values are spread over several
/// row blocks (one per latent step). Output rows align with q.
template <class T>
Var<T> attention(Tape<T>& tape, const Var<T>& q, const std::vector<Var<T>>& key_blocks,
                 const std::vector<Var<T>>& value_blocks, std::shared_ptr<const std::vector<AttentionGroup<std::type_identity_t<T>>>> groups,
                 int n_heads) {
  const auto d = q->value.cols();
  if (d % n_heads != 0) throw InvalidInput("model width not divisible by head count");
  if (key_blocks.size() != value_blocks.size()) throw InvalidInput("key/value block count mismatch");
  const int head_dim = int(d) / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(T(head_dim));

  auto gather_keys = [d](const std::vector<Var<T>>& blocks, const std::vector<KeyRef>& keys) {
    Matrix<T> m(Eigen::Index(keys.size()), d);
    for (std::size_t j = 0; j < keys.size(); ++j) {
      m.row(Eigen::Index(j)) = blocks[std::size_t(keys[j].block)]->value.row(keys[j].row);
    }
    return m;
  };

  Matrix<T> out_value = Matrix<T>::Zero(q->value.rows(), d);
  const bool grad = tape.needs_grad(q) || std::any_of(key_blocks.begin(), key_blocks.end(), [&](const Var<T>& v) {
                      return tape.needs_grad(v);
                    }) || std::any_of(value_blocks.begin(), value_blocks.end(), [&](const Var<T>& v) {
                      return tape.needs_grad(v);
                    });
  auto probs = std::make_shared<std::vector<Matrix<T>>>();

  for (const auto& g : *groups) {
    const auto nq = Eigen::Index(g.query_rows.size());
    const auto nk = Eigen::Index(g.keys.size());
    if (nq == 0) continue;
    if (Eigen::Index(g.mask.size()) != nq * nk) throw InvalidInput("attention mask shape mismatch");
    Matrix<T> qg(nq, d);
    for (Eigen::Index i = 0; i < nq; ++i) qg.row(i) = q->value.row(g.query_rows[std::size_t(i)]);
    const Matrix<T> kg = gather_keys(key_blocks, g.keys);
    const Matrix<T> vg = gather_keys(value_blocks, g.keys);
    Eigen::Map<const Matrix<T>> mask(g.mask.data(), nq, nk);
    for (int h = 0; h < n_heads; ++h) {
      const auto off = h * head_dim;
      Matrix<T> s = (qg.middleCols(off, head_dim) * kg.middleCols(off, head_dim).transpose()) * inv_sqrt + mask;
      for (Eigen::Index i = 0; i < nq; ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      const Matrix<T> o = s * vg.middleCols(off, head_dim);
      for (Eigen::Index i = 0; i < nq; ++i) {
        out_value.row(g.query_rows[std::size_t(i)]).segment(off, head_dim) = o.row(i);
      }
      if (grad) probs->push_back(std::move(s));
    }
  }

  auto out = make_var<T>(std::move(out_value));
  if (!grad) return out;
  out->requires_grad = true;
  tape.record([q, key_blocks, value_blocks, groups, probs, out, n_heads, head_dim, inv_sqrt, gather_keys, d] {
    if (!out->has_grad()) return;
    std::size_t p_index = 0;
    for (const auto& g : *groups) {
      const auto nq = Eigen::Index(g.query_rows.size());
      const auto nk = Eigen::Index(g.keys.size());
      if (nq == 0) continue;
      Matrix<T> qg(nq, d), dog(nq, d);
      for (Eigen::Index i = 0; i < nq; ++i) {
        qg.row(i) = q->value.row(g.query_rows[std::size_t(i)]);
        dog.row(i) = out->grad.row(g.query_rows[std::size_t(i)]);
      }
      const Matrix<T> kg = gather_keys(key_blocks, g.keys);
      const Matrix<T> vg = gather_keys(value_blocks, g.keys);
      Matrix<T> dq(nq, d), dk(nk, d), dv(nk, d);
      for (int h = 0; h < n_heads; ++h) {
        const auto off = h * head_dim;
        const Matrix<T>& p = (*probs)[p_index++];
        const auto do_h = dog.middleCols(off, head_dim);
        Matrix<T> dp = do_h * vg.middleCols(off, head_dim).transpose();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
        Matrix<T> ds = p.cwiseProduct((dp.colwise() - rs));
        ds *= inv_sqrt;
        dq.middleCols(off, head_dim).noalias() = ds * kg.middleCols(off, head_dim);
        dk.middleCols(off, head_dim).noalias() = ds.transpose() * qg.middleCols(off, head_dim);
        dv.middleCols(off, head_dim).noalias() = p.transpose() * do_h;
      }
      if (q->requires_grad) {
        auto& gq = q->grad_buffer();
        for (Eigen::Index i = 0; i < nq; ++i) gq.row(g.query_rows[std::size_t(i)]) += dq.row(i);
      }
      for (Eigen::Index j = 0; j < nk; ++j) {
        const auto& ref = g.keys[std::size_t(j)];
        const auto& kb = key_blocks[std::size_t(ref.block)];
        const auto& vb = value_blocks[std::size_t(ref.block)];
        if (kb->requires_grad) kb->grad_buffer().row(ref.row) += dk.row(j);
        if (vb->requires_grad) vb->grad_buffer().row(ref.row) += dv.row(j);
      }
    }
  });
  return out;
}

}  // namespace alct::ops

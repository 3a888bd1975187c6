#pragma once

// Next-token training for the tiny transformer: analytic backward pass,
// global-norm clipping and SGD with momentum.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "actrm/error.hpp"
#include "actrm/model.hpp"
#include "actrm/rng.hpp"

namespace actrm {

using TokenSeq = std::vector<int>;

enum class LossTargets {
  kAllTokens,  // predict every next token
  kFinalToken  // predict only the last token of each sequence
};

enum class Optimizer { kSgdMomentum, kAdam };

struct TrainHyper {
  long steps = 1000;
  int batch = 16;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  LossTargets targets = LossTargets::kAllTokens;
  Optimizer optimizer = Optimizer::kSgdMomentum;
  double adam_beta2 = 0.999;  // adam uses `momentum` as beta1
};

struct TrainResult {
  std::vector<double> losses;  // per step batch loss
};

namespace detail {

template <typename T>
void layernorm_backward(const T* x, const T* g, kernel::NormStats<T> st, const double* dy, double* dx, double* dg,
                        double* db, std::size_t n) {
  std::vector<double> xhat(n), dxhat(n);
  double mean_d = 0.0, mean_dx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (static_cast<double>(x[i]) - st.mean) * st.rstd;
    dg[i] += dy[i] * xhat[i];
    db[i] += dy[i];
    dxhat[i] = dy[i] * g[i];
    mean_d += dxhat[i];
    mean_dx += dxhat[i] * xhat[i];
  }
  mean_d /= static_cast<double>(n);
  mean_dx /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] += st.rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
}

// dx += W^T dy ; dW += dy x^T ; db += dy
template <typename T>
void linear_backward(const T* w, const T* x, const double* dy, double* dx, double* dw, double* db, std::size_t rows,
                     std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (db) db[r] += g;
    if (g == 0.0) continue;
    const T* wr = w + r * cols;
    double* dwr = dw + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      dwr[c] += g * static_cast<double>(x[c]);
      if (dx) dx[c] += g * static_cast<double>(wr[c]);
    }
  }
}

}  // namespace detail

// Mean next-token cross-entropy for one sequence and, when grad is non-null,
// accumulation of d(loss * weight)/d(params) into grad. Returns (sum of
// per-target losses, number of targets).
template <typename T>
std::pair<double, std::size_t> sequence_loss_and_grad(const Parameters<T>& p, std::span<const int> tokens,
                                                      LossTargets targets, double weight, double* grad) {
  const ModelConfig& c = p.config;
  if (tokens.size() < 2) throw ArgumentError("training sequence needs at least 2 tokens");
  if (tokens.size() > static_cast<std::size_t>(c.max_context))
    throw RangeError("training sequence exceeds max_context");
  const std::size_t n = tokens.size() - 1;  // positions that predict something
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto ff = static_cast<std::size_t>(c.d_ff());
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  const std::size_t first_target = targets == LossTargets::kFinalToken ? n - 1 : 0;

  KvCache<T> cache(c);
  std::vector<PositionTrace<T>> traces(n);
  std::vector<std::vector<double>> dlogit_rows(n);
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    StepRequest req;
    req.want_logits = i >= first_target;
    auto logits = step(p, cache, tokens[i], req, grad ? &traces[i] : nullptr);
    if (i < first_target) continue;
    auto probs = softmax(to_double<T>(logits));
    const auto target = static_cast<std::size_t>(tokens[i + 1]);
    loss_sum += -std::log(std::max(probs[target], 1e-300));
    if (grad) {
      probs[target] -= 1.0;
      for (auto& v : probs) v *= weight;
      dlogit_rows[i] = std::move(probs);
    }
  }
  const std::size_t n_targets = n - first_target;
  if (!grad) return {loss_sum, n_targets};

  // Residual-stream gradients per position, top of the network.
  std::vector<std::vector<double>> dx(n, std::vector<double>(d, 0.0));
  const ParamLayout& L = p.layout;
  for (std::size_t i = first_target; i < n; ++i) {
    const auto& tr = traces[i];
    std::vector<double> dln(d, 0.0);
    detail::linear_backward(p.at(L.w_out), tr.lnf.data(), dlogit_rows[i].data(), dln.data(), grad + L.w_out,
                            static_cast<double*>(nullptr), vocab, d);
    detail::layernorm_backward<T>(tr.x_final.data(), p.at(L.lnf_g), tr.lnf_stats, dln.data(), dx[i].data(),
                                  grad + L.lnf_g, grad + L.lnf_b, d);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> dmid(d), dact(ff), dfc(ff), dln(d), dhead(d), dq(d), dqkv(3 * d);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerSlots& s = L.layers[static_cast<std::size_t>(l)];
    const auto& kc = cache.k[static_cast<std::size_t>(l)];
    const auto& vc = cache.v[static_cast<std::size_t>(l)];
    std::vector<std::vector<double>> dq_all(n, std::vector<double>(d, 0.0));
    std::vector<double> dk(n * d, 0.0), dv(n * d, 0.0);

    // Pass 1: MLP, output projection and attention, per query position.
    for (std::size_t i = 0; i < n; ++i) {
      const auto& lt = traces[i].layers[static_cast<std::size_t>(l)];
      const auto& dxi = dx[i];
      bool any = false;
      for (double v : dxi) any = any || v != 0.0;
      if (!any) continue;

      std::fill(dact.begin(), dact.end(), 0.0);
      detail::linear_backward(p.at(s.w_pr), lt.act.data(), dxi.data(), dact.data(), grad + s.w_pr, grad + s.b_pr, d,
                              ff);
      for (std::size_t k = 0; k < ff; ++k) dfc[k] = dact[k] * kernel::gelu_grad(lt.fc[k]);
      std::fill(dln.begin(), dln.end(), 0.0);
      detail::linear_backward(p.at(s.w_fc), lt.ln2.data(), dfc.data(), dln.data(), grad + s.w_fc, grad + s.b_fc, ff, d);
      dmid = dxi;
      detail::layernorm_backward<T>(lt.x_mid.data(), p.at(s.ln2_g), lt.ln2_stats, dln.data(), dmid.data(),
                                    grad + s.ln2_g, grad + s.ln2_b, d);

      std::fill(dhead.begin(), dhead.end(), 0.0);
      detail::linear_backward(p.at(s.w_o), lt.head_out.data(), dmid.data(), dhead.data(), grad + s.w_o, grad + s.b_o,
                              d, d);
      const std::size_t n_ctx = i + 1;
      for (int h = 0; h < c.n_heads; ++h) {
        const std::size_t ho = static_cast<std::size_t>(h) * dh;
        const T* att = lt.att.data() + static_cast<std::size_t>(h) * n_ctx;
        std::vector<double> datt(n_ctx);
        double weighted = 0.0;
        for (std::size_t j = 0; j < n_ctx; ++j) {
          double g = 0.0;
          for (std::size_t e = 0; e < dh; ++e) {
            g += dhead[ho + e] * static_cast<double>(vc[j * d + ho + e]);
            dv[j * d + ho + e] += static_cast<double>(att[j]) * dhead[ho + e];
          }
          datt[j] = g;
          weighted += static_cast<double>(att[j]) * g;
        }
        for (std::size_t j = 0; j < n_ctx; ++j) {
          const double ds = static_cast<double>(att[j]) * (datt[j] - weighted) * scale;
          if (ds == 0.0) continue;
          for (std::size_t e = 0; e < dh; ++e) {
            dq_all[i][ho + e] += ds * static_cast<double>(kc[j * d + ho + e]);
            dk[j * d + ho + e] += ds * static_cast<double>(lt.q[ho + e]);
          }
        }
      }
      dx[i] = dmid;
    }

    // Pass 2: QKV projection and first layer norm.
    for (std::size_t i = 0; i < n; ++i) {
      const auto& lt = traces[i].layers[static_cast<std::size_t>(l)];
      std::copy(dq_all[i].begin(), dq_all[i].end(), dqkv.begin());
      std::copy_n(dk.begin() + static_cast<std::ptrdiff_t>(i * d), d, dqkv.begin() + static_cast<std::ptrdiff_t>(d));
      std::copy_n(dv.begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  dqkv.begin() + static_cast<std::ptrdiff_t>(2 * d));
      std::fill(dln.begin(), dln.end(), 0.0);
      detail::linear_backward(p.at(s.w_qkv), lt.ln1.data(), dqkv.data(), dln.data(), grad + s.w_qkv, grad + s.b_qkv,
                              3 * d, d);
      detail::layernorm_backward<T>(lt.x_in.data(), p.at(s.ln1_g), lt.ln1_stats, dln.data(), dx[i].data(),
                                    grad + s.ln1_g, grad + s.ln1_b, d);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const auto tok = static_cast<std::size_t>(traces[i].token);
    double* te = grad + L.tok_emb + tok * d;
    double* pe = grad + L.pos_emb + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      te[k] += dx[i][k];
      pe[k] += dx[i][k];
    }
  }
  return {loss_sum, n_targets};
}

// Mean per-target loss over a set of sequences.
template <typename T>
double mean_loss(const Parameters<T>& p, std::span<const TokenSeq> corpus, LossTargets targets = LossTargets::kAllTokens) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    const auto [s, n] = sequence_loss_and_grad<T>(p, seq, targets, 1.0, nullptr);
    sum += s;
    count += n;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

// Loss of one batch and its gradient (mean over all targets in the batch).
template <typename T>
double batch_loss_and_grad(const Parameters<T>& p, std::span<const TokenSeq> batch, LossTargets targets,
                           std::vector<double>& grad) {
  grad.assign(p.data.size(), 0.0);
  std::size_t total_targets = 0;
  for (const auto& seq : batch)
    total_targets += targets == LossTargets::kFinalToken ? 1 : seq.size() - 1;
  const double weight = 1.0 / static_cast<double>(total_targets);
  double loss = 0.0;
  for (const auto& seq : batch) loss += sequence_loss_and_grad<T>(p, seq, targets, weight, grad.data()).first;
  return loss * weight;
}

template <typename T>
Parameters<T> train_lm(Parameters<T> params, std::span<const TokenSeq> corpus, const TrainHyper& hyper,
                       TrainResult* result = nullptr) {
  if (corpus.empty()) throw ArgumentError("train_lm: empty corpus");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw ArgumentError("train_lm: sequence shorter than 2 tokens");
    if (seq.size() > static_cast<std::size_t>(params.config.max_context))
      throw RangeError("train_lm: sequence exceeds max_context");
  }
  if (hyper.batch < 1) throw ArgumentError("train_lm: batch must be >= 1");
  Rng rng(hyper.seed);
  std::vector<double> grad, velocity(params.data.size(), 0.0), second(params.data.size(), 0.0);
  const bool adam = hyper.optimizer == Optimizer::kAdam;
  std::vector<TokenSeq> batch(static_cast<std::size_t>(hyper.batch));
  for (long step_i = 0; step_i < hyper.steps; ++step_i) {
    for (auto& b : batch) b = corpus[rng.below(corpus.size())];
    const double loss = batch_loss_and_grad<T>(params, batch, hyper.targets, grad);
    if (!std::isfinite(loss)) throw TrainingError("training diverged at step " + std::to_string(step_i), step_i);
    double norm2 = 0.0;
    for (double g : grad) norm2 += g * g;
    const double norm = std::sqrt(norm2);
    const double clip = (hyper.clip_norm > 0.0 && norm > hyper.clip_norm) ? hyper.clip_norm / norm : 1.0;
    if (adam) {
      const double b1 = hyper.momentum, b2 = hyper.adam_beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_i + 1));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_i + 1));
      for (std::size_t i = 0; i < params.data.size(); ++i) {
        const double g = grad[i] * clip;
        velocity[i] = b1 * velocity[i] + (1.0 - b1) * g;
        second[i] = b2 * second[i] + (1.0 - b2) * g * g;
        const double upd = (velocity[i] / c1) / (std::sqrt(second[i] / c2) + 1e-8);
        params.data[i] = static_cast<T>(static_cast<double>(params.data[i]) - hyper.learning_rate * upd);
      }
    } else {
      for (std::size_t i = 0; i < params.data.size(); ++i) {
        velocity[i] = hyper.momentum * velocity[i] + grad[i] * clip;
        params.data[i] = static_cast<T>(static_cast<double>(params.data[i]) - hyper.learning_rate * velocity[i]);
      }
    }
    for (T v : params.data)
      if (!std::isfinite(static_cast<double>(v)))
        throw TrainingError("non-finite parameter after step " + std::to_string(step_i), step_i);
    if (result) result->losses.push_back(loss);
  }
  return params;
}

}  // namespace actrm

/**
 * @file vae.hpp
 * @brief Encoder, latent sampling, (hierarchical) decoder and the ELBO with
 *        hand-written backpropagation through time.
 */

#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/genmodel/gru.hpp"
#include "duet/genmodel/model.hpp"

namespace duet {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

namespace detail {

inline void check_codes(const ModelConfig& c, std::span<const int> codes) {
  if (static_cast<int>(codes.size()) != c.sequence_length()) {
    throw ShapeError("sequence length " + std::to_string(codes.size()) + " does not match model length " +
                     std::to_string(c.sequence_length()));
  }
  for (int code : codes) {
    if (code < 0 || code >= c.vocab) throw ShapeError("token code outside model vocabulary");
  }
}

/// Columns of the embedding for a batch of codes at step t; zero column for the start symbol.
inline Matrix gather_embedding(const Matrix& embed, const std::vector<std::vector<int>>& batch, int t) {
  Matrix x = Matrix::Zero(embed.rows(), static_cast<Eigen::Index>(batch.size()));
  if (t < 0) return x;
  for (std::size_t b = 0; b < batch.size(); ++b) x.col(b) = embed.col(batch[b][t]);
  return x;
}

inline void scatter_embedding(Matrix& grad, const Matrix& dx, const std::vector<std::vector<int>>& batch, int t) {
  if (t < 0) return;
  for (std::size_t b = 0; b < batch.size(); ++b) grad.col(batch[b][t]) += dx.col(b).head(grad.rows());
}

inline void apply_transition_mask(Eigen::Ref<Vector> logits, int position, int previous_code) {
  if (logits.size() > kHoldCode && !hold_allowed(position, previous_code)) logits(kHoldCode) = kMasked;
}

inline Matrix affine(const Affine& a, const Matrix& x) {
  Matrix y = a.w * x;
  y.colwise() += a.b.col(0);
  return y;
}

}  // namespace detail

// ============================================================================
// Latent operations
// ============================================================================

/// z = mu + exp(0.5 * log_var) * noise
inline Vector reparameterize(const LatentCode& code, const Vector& noise) {
  if (noise.size() != code.mu.size()) throw ShapeError("noise length must equal latent_dim");
  return code.mu + (0.5 * code.log_var.array()).exp().matrix().cwiseProduct(noise);
}

/// KL(N(mu, diag(exp(log_var))) || N(0, I)).
inline double kl_divergence(const LatentCode& code) {
  const auto& lv = code.log_var.array();
  return 0.5 * (code.mu.array().square() + lv.exp() - lv - 1.0).sum();
}

inline LatentCode encode(const ModelState& state, std::span<const int> codes) {
  const auto& c = state.config;
  const auto& p = state.weights;
  detail::check_codes(c, codes);
  const int T = c.sequence_length();
  Matrix hf = Matrix::Zero(c.enc_hidden, 1), hb = Matrix::Zero(c.enc_hidden, 1);
  for (int t = 0; t < T; ++t) hf = nn::gru_forward(p.enc_fwd, p.embed.col(codes[t]), hf);
  for (int t = T - 1; t >= 0; --t) hb = nn::gru_forward(p.enc_bwd, p.embed.col(codes[t]), hb);
  Matrix hcat(2 * c.enc_hidden, 1);
  hcat << hf, hb;
  LatentCode code;
  code.mu = detail::affine(p.mu, hcat).col(0);
  code.log_var = detail::affine(p.log_var, hcat).col(0).cwiseMax(-kLogVarClamp).cwiseMin(kLogVarClamp);
  return code;
}

inline LatentCode encode(const ModelState& state, const MelodySequence& seq) {
  if (seq.bars() != state.config.bars) throw ShapeError("sequence bar span does not match model");
  const auto codes = seq.codes();
  return encode(state, codes);
}

// ============================================================================
// Decoding
// ============================================================================

/// softmax(logits / temperature); masked (-inf) entries get probability 0.
inline Vector masked_softmax(const Vector& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  double max = kMasked;
  for (double v : logits) max = std::max(max, v);
  Vector p(logits.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    p(i) = logits(i) == kMasked ? 0.0 : std::exp((logits(i) - max) / temperature);
    total += p(i);
  }
  return p / total;
}

inline double entropy(const Vector& probs) {
  double h = 0.0;
  for (double v : probs) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

enum class DecodeMode { Greedy, Sample, Teacher };

struct DecodeResult {
  std::vector<int> codes;
  /// Per-step logits after transition masking, before temperature scaling.
  std::vector<Vector> logits;

  MelodySequence sequence() const { return MelodySequence::from_codes(codes); }
};

inline DecodeResult decode(const ModelState& state, const Vector& z, double temperature, DecodeMode mode,
                           CounterRng& rng, std::span<const int> teacher = {}) {
  const auto& c = state.config;
  const auto& p = state.weights;
  if (z.size() != c.latent_dim) throw ShapeError("latent vector length must equal latent_dim");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (mode == DecodeMode::Teacher) detail::check_codes(c, teacher);

  std::vector<Matrix> conditions;
  if (c.hierarchical()) {
    Matrix cc = detail::affine(p.cond_init, z).array().tanh().matrix();
    for (int b = 0; b < c.bars; ++b) {
      cc = nn::gru_forward(p.conductor, z, cc);
      conditions.push_back(cc);
    }
  } else {
    conditions.push_back(z);
  }
  const int segment_len = c.sequence_length() / static_cast<int>(conditions.size());

  DecodeResult result;
  int previous = -1;
  for (const auto& cond : conditions) {
    Matrix h = detail::affine(p.dec_init, cond).array().tanh().matrix();
    for (int k = 0; k < segment_len; ++k) {
      const int t = static_cast<int>(result.codes.size());
      Matrix input(c.embed_dim + cond.rows(), 1);
      if (previous < 0) {
        input.topRows(c.embed_dim).setZero();
      } else {
        input.topRows(c.embed_dim) = p.embed.col(previous);
      }
      input.bottomRows(cond.rows()) = cond;
      h = nn::gru_forward(p.dec, input, h);
      Vector logits = detail::affine(p.out, h).col(0);
      detail::apply_transition_mask(logits, t, previous < 0 ? kRestCode : previous);

      int next = 0;
      if (mode == DecodeMode::Teacher) {
        next = teacher[t];
      } else if (mode == DecodeMode::Greedy) {
        logits.maxCoeff(&next);
      } else {
        const Vector probs = masked_softmax(logits, temperature);
        const double u = rng.uniform();
        double acc = 0.0;
        next = -1;
        for (Eigen::Index i = 0; i < probs.size(); ++i) {
          if (probs(i) <= 0.0) continue;
          next = static_cast<int>(i);
          acc += probs(i);
          if (u < acc) break;
        }
      }
      result.codes.push_back(next);
      result.logits.push_back(std::move(logits));
      previous = next;
    }
  }
  return result;
}

// ============================================================================
// ELBO
// ============================================================================

struct ElboOptions {
  /// Global-norm gradient clip; <= 0 disables clipping.
  double clip_norm = 1.0;
};

struct ElboResult {
  double loss = 0.0;
  double reconstruction = 0.0;  ///< mean per-token cross-entropy
  double kl = 0.0;              ///< mean per-sequence KL
  double grad_norm = 0.0;       ///< before clipping
  Params grads;
};

inline double global_norm(const Params& g) {
  double sq = 0.0;
  g.for_each([&](const std::string&, const Matrix& m) { sq += m.squaredNorm(); });
  return std::sqrt(sq);
}

/// loss = mean cross-entropy(teacher-forced logits, tokens) + beta * mean KL,
/// with `noise` (latent_dim x batch) feeding the reparameterization.
inline ElboResult elbo_loss(const ModelState& state, const std::vector<std::vector<int>>& batch, double beta,
                            const Matrix& noise, const ElboOptions& options = {}) {
  const auto& c = state.config;
  const auto& p = state.weights;
  if (batch.empty()) throw std::invalid_argument("batch must not be empty");
  for (const auto& seq : batch) detail::check_codes(c, seq);

  const int T = c.sequence_length();
  const auto B = static_cast<Eigen::Index>(batch.size());
  const int E = c.embed_dim, He = c.enc_hidden, Z = c.latent_dim, K = c.condition_dim();

  // ---- encoder
  std::vector<nn::GruCache> enc_f(T), enc_b(T);
  Matrix hf = Matrix::Zero(He, B), hb = Matrix::Zero(He, B);
  for (int t = 0; t < T; ++t) hf = nn::gru_forward(p.enc_fwd, detail::gather_embedding(p.embed, batch, t), hf, &enc_f[t]);
  for (int t = T - 1; t >= 0; --t) {
    hb = nn::gru_forward(p.enc_bwd, detail::gather_embedding(p.embed, batch, t), hb, &enc_b[t]);
  }
  Matrix hcat(2 * He, B);
  hcat << hf, hb;
  const Matrix mu = detail::affine(p.mu, hcat);
  const Matrix lv_raw = detail::affine(p.log_var, hcat);
  const Matrix lv = lv_raw.cwiseMax(-kLogVarClamp).cwiseMin(kLogVarClamp);

  if (noise.rows() != Z || noise.cols() != B) throw ShapeError("noise must be latent_dim x batch");
  const Matrix& eps = noise;
  const Matrix sigma = (0.5 * lv.array()).exp().matrix();
  const Matrix z = mu + sigma.cwiseProduct(eps);

  // ---- conductor
  std::vector<Matrix> conds;
  std::vector<nn::GruCache> cond_cache;
  Matrix c0;
  if (c.hierarchical()) {
    c0 = detail::affine(p.cond_init, z).array().tanh().matrix();
    Matrix cc = c0;
    cond_cache.resize(c.bars);
    for (int b = 0; b < c.bars; ++b) {
      cc = nn::gru_forward(p.conductor, z, cc, &cond_cache[b]);
      conds.push_back(cc);
    }
  } else {
    conds.push_back(z);
  }
  const int segments = static_cast<int>(conds.size());
  const int seg_len = T / segments;

  // ---- decoder, teacher forced
  std::vector<nn::GruCache> dec_cache(T);
  std::vector<Matrix> dec_h(T), dlogits(T), h0(segments);
  const double ce_scale = 1.0 / static_cast<double>(B * T);
  double ce = 0.0;
  for (int s = 0; s < segments; ++s) {
    Matrix h = detail::affine(p.dec_init, conds[s]).array().tanh().matrix();
    h0[s] = h;
    for (int k = 0; k < seg_len; ++k) {
      const int t = s * seg_len + k;
      Matrix input(E + K, B);
      input.topRows(E) = detail::gather_embedding(p.embed, batch, t - 1);
      input.bottomRows(K) = conds[s];
      h = nn::gru_forward(p.dec, input, h, &dec_cache[t]);
      dec_h[t] = h;
      Matrix logits = detail::affine(p.out, h);
      Matrix dl(c.vocab, B);
      for (Eigen::Index b = 0; b < B; ++b) {
        auto col = logits.col(b);
        detail::apply_transition_mask(col, t, t > 0 ? batch[b][t - 1] : kRestCode);
        const Vector probs = masked_softmax(col, 1.0);
        const int target = batch[b][t];
        ce -= std::log(probs(target));
        dl.col(b) = probs * ce_scale;
        dl(target, b) -= ce_scale;
      }
      dlogits[t] = std::move(dl);
    }
  }
  ce *= ce_scale;

  double kl_sum = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) kl_sum += kl_divergence({mu.col(b), lv.col(b)});
  const double kl = kl_sum / static_cast<double>(B);

  ElboResult result;
  result.reconstruction = ce;
  result.kl = kl;
  result.loss = ce + beta * kl;
  if (!std::isfinite(result.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << " (reconstruction " << ce << ", kl " << kl << ", beta " << beta
        << ")";
    throw TrainingDivergence(msg.str());
  }

  // ---- backward
  Params g = p.zeros_like();
  Matrix dz = Matrix::Zero(Z, B);
  std::vector<Matrix> dconds(segments, Matrix::Zero(K, B));
  for (int s = segments - 1; s >= 0; --s) {
    Matrix dh = Matrix::Zero(c.dec_hidden, B);
    for (int k = seg_len - 1; k >= 0; --k) {
      const int t = s * seg_len + k;
      g.out.w.noalias() += dlogits[t] * dec_h[t].transpose();
      g.out.b += dlogits[t].rowwise().sum();
      dh.noalias() += p.out.w.transpose() * dlogits[t];
      Matrix dh_prev;
      const Matrix dx = nn::gru_backward(p.dec, dec_cache[t], dh, g.dec, dh_prev);
      detail::scatter_embedding(g.embed, dx, batch, t - 1);
      dconds[s] += dx.bottomRows(K);
      dh = std::move(dh_prev);
    }
    const Matrix dpre = dh.cwiseProduct((1.0 - h0[s].array().square()).matrix());
    g.dec_init.w.noalias() += dpre * conds[s].transpose();
    g.dec_init.b += dpre.rowwise().sum();
    dconds[s].noalias() += p.dec_init.w.transpose() * dpre;
  }

  if (c.hierarchical()) {
    Matrix dc = Matrix::Zero(c.conductor_dim, B);
    for (int b = c.bars - 1; b >= 0; --b) {
      dc += dconds[b];
      Matrix dc_prev;
      dz += nn::gru_backward(p.conductor, cond_cache[b], dc, g.conductor, dc_prev);
      dc = std::move(dc_prev);
    }
    const Matrix dpre = dc.cwiseProduct((1.0 - c0.array().square()).matrix());
    g.cond_init.w.noalias() += dpre * z.transpose();
    g.cond_init.b += dpre.rowwise().sum();
    dz.noalias() += p.cond_init.w.transpose() * dpre;
  } else {
    dz += dconds[0];
  }

  const double kl_scale = beta / static_cast<double>(B);
  const Matrix dmu = dz + kl_scale * mu;
  Matrix dlv = (dz.array() * eps.array() * 0.5 * sigma.array() + kl_scale * 0.5 * (lv.array().exp() - 1.0)).matrix();
  for (Eigen::Index i = 0; i < dlv.size(); ++i) {
    if (lv_raw(i) < -kLogVarClamp || lv_raw(i) > kLogVarClamp) dlv(i) = 0.0;
  }
  g.mu.w.noalias() += dmu * hcat.transpose();
  g.mu.b += dmu.rowwise().sum();
  g.log_var.w.noalias() += dlv * hcat.transpose();
  g.log_var.b += dlv.rowwise().sum();
  const Matrix dhcat = p.mu.w.transpose() * dmu + p.log_var.w.transpose() * dlv;

  Matrix dh = dhcat.topRows(He);
  for (int t = T - 1; t >= 0; --t) {
    Matrix dh_prev;
    const Matrix dx = nn::gru_backward(p.enc_fwd, enc_f[t], dh, g.enc_fwd, dh_prev);
    detail::scatter_embedding(g.embed, dx, batch, t);
    dh = std::move(dh_prev);
  }
  dh = dhcat.bottomRows(He);
  for (int t = 0; t < T; ++t) {
    Matrix dh_prev;
    const Matrix dx = nn::gru_backward(p.enc_bwd, enc_b[t], dh, g.enc_bwd, dh_prev);
    detail::scatter_embedding(g.embed, dx, batch, t);
    dh = std::move(dh_prev);
  }

  result.grad_norm = global_norm(g);
  if (!std::isfinite(result.grad_norm)) throw TrainingDivergence("non-finite gradient norm");
  if (options.clip_norm > 0.0 && result.grad_norm > options.clip_norm) {
    const double scale = options.clip_norm / result.grad_norm;
    g.for_each([&](const std::string&, Matrix& m) { m *= scale; });
  }
  result.grads = std::move(g);
  return result;
}

/// Same as above with standard-normal noise drawn from `rng` in column order.
inline ElboResult elbo_loss(const ModelState& state, const std::vector<std::vector<int>>& batch, double beta,
                            CounterRng& rng, const ElboOptions& options = {}) {
  Matrix noise(state.config.latent_dim, static_cast<Eigen::Index>(batch.size()));
  for (Eigen::Index b = 0; b < noise.cols(); ++b) {
    for (Eigen::Index i = 0; i < noise.rows(); ++i) noise(i, b) = rng.normal();
  }
  return elbo_loss(state, batch, beta, noise, options);
}

inline std::vector<std::vector<int>> to_code_batch(std::span<const MelodySequence> seqs) {
  std::vector<std::vector<int>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(s.codes());
  return out;
}

}  // namespace duet

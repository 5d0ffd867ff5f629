/**
 * @file gru.hpp
 * @brief Batched gated recurrent cell, forward and backward.
 *
 *   z  = sigmoid(Wz x + Uz h + bz)
 *   r  = sigmoid(Wr x + Ur h + br)
 *   n  = tanh(Wn x + Un (r * h) + bn)
 *   h' = (1 - z) * n + z * h
 *
 * Columns are batch entries.
 */

#pragma once

#include "duet/genmodel/model.hpp"

namespace duet::nn {

struct GruCache {
  Matrix x, h, z, r, n, rh;
};

inline Matrix sigmoid(const Matrix& a) { return (1.0 / (1.0 + (-a.array()).exp())).matrix(); }

/// Returns the next hidden state; fills `cache` when non-null.
inline Matrix gru_forward(const GruWeights& g, const Matrix& x, const Matrix& h, GruCache* cache = nullptr) {
  const Eigen::Index H = g.u.cols();
  Matrix a = g.w * x;
  a.colwise() += g.b.col(0);
  Matrix zr = a.topRows(2 * H) + g.u.topRows(2 * H) * h;
  Matrix z = sigmoid(zr.topRows(H));
  Matrix r = sigmoid(zr.bottomRows(H));
  Matrix rh = r.cwiseProduct(h);
  Matrix n = (a.bottomRows(H) + g.u.bottomRows(H) * rh).array().tanh().matrix();
  Matrix next = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(h);
  if (cache) *cache = GruCache{x, h, std::move(z), std::move(r), std::move(n), std::move(rh)};
  return next;
}

/// Accumulates weight gradients into `grad`; returns dL/dx and writes dL/dh_prev.
inline Matrix gru_backward(const GruWeights& g, const GruCache& c, const Matrix& dh_next, GruWeights& grad,
                           Matrix& dh_prev) {
  const Eigen::Index H = g.u.cols();
  const auto& z = c.z.array();
  const auto& r = c.r.array();
  const auto& n = c.n.array();

  Matrix dn_pre = (dh_next.array() * (1.0 - z) * (1.0 - n.square())).matrix();
  Matrix dz_pre = (dh_next.array() * (c.h.array() - n) * z * (1.0 - z)).matrix();
  dh_prev = dh_next.cwiseProduct(c.z);

  Matrix drh = g.u.bottomRows(H).transpose() * dn_pre;
  grad.u.bottomRows(H).noalias() += dn_pre * c.rh.transpose();
  Matrix dr_pre = (drh.array() * c.h.array() * r * (1.0 - r)).matrix();
  dh_prev += drh.cwiseProduct(c.r);

  Matrix da(3 * H, dh_next.cols());
  da << dz_pre, dr_pre, dn_pre;
  grad.w.noalias() += da * c.x.transpose();
  grad.b += da.rowwise().sum();
  grad.u.topRows(2 * H).noalias() += da.topRows(2 * H) * c.h.transpose();
  dh_prev.noalias() += g.u.topRows(2 * H).transpose() * da.topRows(2 * H);
  return g.w.transpose() * da;
}

}  // namespace duet::nn

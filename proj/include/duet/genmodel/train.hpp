/**
 * @file train.hpp
 * @brief Adam updates with a linear KL ramp over shuffled mini-batches.
 */

#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "duet/genmodel/vae.hpp"

namespace duet {

struct TrainOptions {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double clip_norm = 1.0;
};

struct TrainReport {
  std::vector<double> step_loss;
  std::vector<double> step_kl;
  std::vector<double> step_reconstruction;
  std::vector<double> epoch_loss;  ///< mean step loss per epoch
};

inline void adam_update(ModelState& state, const Params& grads, const TrainOptions& opt) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.adam_beta1, t);
  const double c2 = 1.0 - std::pow(opt.adam_beta2, t);

  std::vector<Matrix*> w, m, v;
  std::vector<const Matrix*> g;
  state.weights.for_each([&](const std::string&, Matrix& x) { w.push_back(&x); });
  state.adam_m.for_each([&](const std::string&, Matrix& x) { m.push_back(&x); });
  state.adam_v.for_each([&](const std::string&, Matrix& x) { v.push_back(&x); });
  grads.for_each([&](const std::string&, const Matrix& x) { g.push_back(&x); });

  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i]->array() = opt.adam_beta1 * m[i]->array() + (1.0 - opt.adam_beta1) * g[i]->array();
    v[i]->array() = opt.adam_beta2 * v[i]->array() + (1.0 - opt.adam_beta2) * g[i]->array().square();
    w[i]->array() -= opt.learning_rate * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + opt.adam_epsilon);
    if (!w[i]->allFinite()) throw TrainingDivergence("non-finite weights after step " + std::to_string(state.step));
  }
}

/// Trains in place. Shuffle order and reparameterization noise come from
/// streams keyed by (config.seed, step), so runs are bit-reproducible.
inline TrainReport train(ModelState& state, const MelodyDataset& dataset, const TrainOptions& opt) {
  if (dataset.bars != state.config.bars) throw ShapeError("dataset bar span does not match model");
  if (opt.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  TrainReport report;
  if (opt.epochs <= 0 || dataset.sequences.empty()) return report;

  const auto all = to_code_batch(dataset.sequences);
  std::vector<std::size_t> order(all.size());
  const ElboOptions elbo_opt{opt.clip_norm};

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    CounterRng shuffle_rng(state.config.seed, 0x5000 + state.step);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      std::vector<std::vector<int>> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(all[order[i]]);

      CounterRng noise_rng(state.config.seed, 0x9000 + state.step);
      const auto result = elbo_loss(state, batch, state.beta.at(state.step), noise_rng, elbo_opt);
      adam_update(state, result.grads, opt);

      report.step_loss.push_back(result.loss);
      report.step_kl.push_back(result.kl);
      report.step_reconstruction.push_back(result.reconstruction);
      epoch_total += result.loss;
      ++epoch_steps;
    }
    report.epoch_loss.push_back(epoch_total / static_cast<double>(epoch_steps));
  }
  return report;
}

}  // namespace duet

/**
 * @file partner.hpp
 * @brief The VAE partner's response rule and the sequence statistics used to
 *        characterize it.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "duet/genmodel/vae.hpp"

namespace duet {

/// Blends the input's posterior mean with a prior draw,
///   z = s * mu_input + (1 - s) * z_prior,  z_prior ~ N(0, I)
/// and decodes with temperature sampling. The prior draw is taken before any
/// token sampling, so rng consumption does not depend on the input.
inline MelodySequence respond(const ModelState& state, const MelodySequence& input, const PartnerParams& params,
                              CounterRng& rng) {
  params.validate();
  const int Z = state.config.latent_dim;
  Vector prior(Z);
  for (int i = 0; i < Z; ++i) prior(i) = rng.normal();
  if (params.temperature_scales_latent) prior *= params.temperature;

  const LatentCode code = encode(state, input);
  const Vector z = params.similarity * code.mu + (1.0 - params.similarity) * prior;
  return decode(state, z, params.temperature, DecodeMode::Sample, rng).sequence();
}

/// Levenshtein distance over token codes divided by the longer length.
inline double normalized_edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::vector<int> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    int diag = row[0];
    row[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const int up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return static_cast<double>(row[b.size()]) / static_cast<double>(std::max(a.size(), b.size()));
}

/// Shannon entropy (nats) of the token histogram of one sequence.
inline double token_entropy(const std::vector<int>& codes) {
  std::map<int, int> counts;
  for (int c : codes) ++counts[c];
  double h = 0.0;
  const double n = static_cast<double>(codes.size());
  for (const auto& [code, k] : counts) {
    const double p = k / n;
    h -= p * std::log(p);
  }
  return h;
}

/// Fraction of positions where greedy reconstruction from mu matches the input.
inline double reconstruction_accuracy(const ModelState& state, const std::vector<MelodySequence>& seqs) {
  std::size_t hit = 0, total = 0;
  CounterRng unused;
  for (const auto& s : seqs) {
    const auto codes = s.codes();
    const auto out = decode(state, encode(state, codes).mu, 1.0, DecodeMode::Greedy, unused).codes;
    for (std::size_t i = 0; i < codes.size(); ++i) hit += codes[i] == out[i];
    total += codes.size();
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace duet

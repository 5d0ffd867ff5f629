/**
 * @file markov.hpp
 * @brief Order-k token Markov chain partner, used when no trained model is
 *        available and as a latency baseline.
 */

#pragma once

#include <map>
#include <stdexcept>
#include <vector>

#include "duet/genmodel/rng.hpp"
#include "duet/melody.hpp"

namespace duet {

struct MarkovStats {
  int order = 1;
  std::map<std::vector<int>, std::vector<std::uint64_t>> transitions;
  std::vector<std::uint64_t> unigram = std::vector<std::uint64_t>(kVocabSize, 0);

  /// Tokens observed anywhere in the corpus; smoothing is restricted to them.
  std::vector<int> support() const {
    std::vector<int> out;
    for (int c = 0; c < kVocabSize; ++c) {
      if (unigram[c] > 0) out.push_back(c);
    }
    return out;
  }
  bool empty() const { return support().empty(); }
};

inline MarkovStats build_markov_stats(const MelodyDataset& dataset, int order) {
  if (order < 1) throw std::invalid_argument("markov order must be >= 1");
  MarkovStats stats;
  stats.order = order;
  for (const auto& seq : dataset.sequences) {
    const auto codes = seq.codes();
    for (std::size_t i = 0; i < codes.size(); ++i) {
      ++stats.unigram[codes[i]];
      if (i < static_cast<std::size_t>(order)) continue;
      std::vector<int> ctx(codes.begin() + (i - order), codes.begin() + i);
      auto& row = stats.transitions[ctx];
      if (row.empty()) row.assign(kVocabSize, 0);
      ++row[codes[i]];
    }
  }
  return stats;
}

/// Add-one smoothed next-token distribution over the observed support, with
/// the HOLD transition masked where it would be invalid. Unseen contexts back
/// off to unigram counts.
inline std::vector<double> markov_next_distribution(const MarkovStats& stats, const std::vector<int>& context,
                                                    int position) {
  const auto it = stats.transitions.find(context);
  const auto& counts = it != stats.transitions.end() ? it->second : stats.unigram;
  const int previous = context.empty() ? kRestCode : context.back();
  std::vector<double> p(kVocabSize, 0.0);
  double total = 0.0;
  for (int c : stats.support()) {
    if (c == kHoldCode && !hold_allowed(position, previous)) continue;
    p[c] = static_cast<double>(counts[c]) + 1.0;
    total += p[c];
  }
  if (total == 0.0) {
    p[kRestCode] = 1.0;
    return p;
  }
  for (double& v : p) v /= total;
  return p;
}

/// Continues from the input's final `order` tokens for as many steps as the input has.
inline MelodySequence markov_respond(const MelodySequence& input, const MarkovStats& stats, CounterRng& rng) {
  if (stats.empty()) throw std::invalid_argument("markov statistics are empty");
  const auto in = input.codes();
  std::vector<int> context(in.end() - std::min<std::size_t>(stats.order, in.size()), in.end());
  std::vector<int> out;
  out.reserve(in.size());
  for (std::size_t t = 0; t < in.size(); ++t) {
    const auto p = markov_next_distribution(stats, context, static_cast<int>(t));
    const double u = rng.uniform();
    double acc = 0.0;
    int next = kRestCode;
    for (int c = 0; c < kVocabSize; ++c) {
      if (p[c] <= 0.0) continue;
      next = c;
      acc += p[c];
      if (u < acc) break;
    }
    out.push_back(next);
    context.erase(context.begin());
    context.push_back(next);
  }
  return MelodySequence::from_codes(input.bars(), out);
}

}  // namespace duet

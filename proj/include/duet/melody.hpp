/**
 * @file melody.hpp
 * @brief Fixed-length REST/HOLD/NOTE_ON token sequences on the 16th-note grid
 *        and windowed dataset construction.
 */

#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/midi.hpp"

namespace duet {

using midi::GridSpan;

inline constexpr int kStepsPerBar = 16;
inline constexpr int kLowestPitch = 21;
inline constexpr int kHighestPitch = 108;
inline constexpr int kVocabSize = 90;
inline constexpr int kRestCode = 0;
inline constexpr int kHoldCode = 1;
inline constexpr int kDefaultRestThreshold = 16;

class InvalidSequence : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Token {
 public:
  static constexpr Token rest() { return Token(kRestCode); }
  static constexpr Token hold() { return Token(kHoldCode); }
  static Token note_on(int pitch) {
    if (pitch < kLowestPitch || pitch > kHighestPitch) throw std::out_of_range("pitch outside piano range");
    return Token(pitch - 19);
  }
  static Token from_code(int code) {
    if (code < 0 || code >= kVocabSize) throw std::out_of_range("token code out of range");
    return Token(code);
  }

  constexpr int code() const { return code_; }
  constexpr bool is_rest() const { return code_ == kRestCode; }
  constexpr bool is_hold() const { return code_ == kHoldCode; }
  constexpr bool is_note_on() const { return code_ >= 2; }
  constexpr int pitch() const { return code_ + 19; }

  constexpr bool operator==(const Token&) const = default;

 private:
  constexpr explicit Token(int code) : code_(code) {}
  int code_;
};

/// HOLD may not start a sequence or follow REST.
inline bool hold_allowed(int position, int previous_code) { return position > 0 && previous_code != kRestCode; }

/// Octave-transposes a pitch into the piano range.
inline int fold_into_piano_range(int pitch) {
  while (pitch < kLowestPitch) pitch += 12;
  while (pitch > kHighestPitch) pitch -= 12;
  return pitch;
}

class MelodySequence {
 public:
  /// All-REST sequence.
  explicit MelodySequence(int bars = 2) : bars_(bars), tokens_(check_bars(bars) * kStepsPerBar, Token::rest()) {}

  static MelodySequence from_codes(int bars, const std::vector<int>& codes) {
    MelodySequence seq(bars);
    if (static_cast<int>(codes.size()) != seq.length()) {
      throw InvalidSequence("expected " + std::to_string(seq.length()) + " tokens, got " + std::to_string(codes.size()));
    }
    for (std::size_t i = 0; i < codes.size(); ++i) seq.tokens_[i] = Token::from_code(codes[i]);
    seq.validate();
    return seq;
  }

  static MelodySequence from_codes(const std::vector<int>& codes) {
    if (codes.size() % kStepsPerBar != 0) throw InvalidSequence("token count is not a whole number of bars");
    return from_codes(static_cast<int>(codes.size()) / kStepsPerBar, codes);
  }

  int bars() const { return bars_; }
  int length() const { return static_cast<int>(tokens_.size()); }
  const std::vector<Token>& tokens() const { return tokens_; }
  Token operator[](int i) const { return tokens_[i]; }

  std::vector<int> codes() const {
    std::vector<int> out(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) out[i] = tokens_[i].code();
    return out;
  }

  /// Throws InvalidSequence on a leading HOLD or a HOLD after REST.
  void validate() const {
    for (int i = 0; i < length(); ++i) {
      if (tokens_[i].is_hold() && !hold_allowed(i, i > 0 ? tokens_[i - 1].code() : kRestCode)) {
        throw InvalidSequence(i == 0 ? "leading HOLD" : "HOLD after REST at step " + std::to_string(i));
      }
    }
  }

  /// Longest contiguous run of REST tokens.
  int longest_rest_run() const {
    int best = 0, run = 0;
    for (const auto& t : tokens_) {
      run = t.is_rest() ? run + 1 : 0;
      best = std::max(best, run);
    }
    return best;
  }

  bool operator==(const MelodySequence&) const = default;

 private:
  static int check_bars(int bars) {
    if (bars != 2 && bars != 4) throw std::invalid_argument("bars must be 2 or 4");
    return bars;
  }

  int bars_;
  std::vector<Token> tokens_;
};

/// Encodes the window [offset_step, offset_step + 16 * bars) of a monophonic
/// span list. Spans crossing the window start are re-attacked at the start.
inline MelodySequence tokenize(const std::vector<GridSpan>& spans, int bars, int offset_step) {
  if (offset_step < 0 || offset_step % kStepsPerBar != 0) {
    throw std::invalid_argument("offset_step must be a non-negative multiple of 16");
  }
  std::vector<GridSpan> sorted = spans;
  std::sort(sorted.begin(), sorted.end(), midi::grid_order);
  if (!midi::is_monophonic(sorted)) throw InvalidSequence("overlapping spans; reduce to monophony first");

  MelodySequence seq(bars);
  const int window_end = offset_step + seq.length();
  std::vector<int> codes(seq.length(), kRestCode);
  for (const auto& s : sorted) {
    const int begin = std::max(s.onset_step, offset_step);
    const int end = std::min(s.end_step(), window_end);
    if (begin >= end) continue;
    codes[begin - offset_step] = Token::note_on(fold_into_piano_range(s.pitch)).code();
    for (int k = begin + 1; k < end; ++k) codes[k - offset_step] = kHoldCode;
  }
  return MelodySequence::from_codes(bars, codes);
}

inline std::vector<GridSpan> detokenize(const MelodySequence& seq) {
  seq.validate();
  std::vector<GridSpan> out;
  for (int i = 0; i < seq.length(); ++i) {
    const Token t = seq[i];
    if (t.is_note_on()) {
      out.push_back({t.pitch(), i, 1});
    } else if (t.is_hold()) {
      ++out.back().duration_steps;
    }
  }
  return out;
}

// ============================================================================
// Dataset construction
// ============================================================================

struct SourceMelody {
  std::string id;
  std::vector<GridSpan> spans;
  int length_steps = 0;
};

inline constexpr int kDrumChannel = 9;

/// Grid spans of a file, or nothing when it is not entirely in 4/4. Files
/// without a time signature count as 4/4. Drum-channel notes are dropped and
/// the length is rounded up to whole bars.
inline std::optional<SourceMelody> source_from_midi(const std::string& id, const midi::MidiFile& file) {
  for (const auto& [num, den] : midi::time_signatures(file)) {
    if (num != 4 || den != 4) return std::nullopt;
  }
  auto spans = midi::extract_note_spans(file).spans;
  std::erase_if(spans, [](const midi::NoteSpan& s) { return s.channel == kDrumChannel; });
  SourceMelody m{id, midi::quantize_to_grid(spans, file.ticks_per_quarter), 0};
  int end = 0;
  for (const auto& g : m.spans) end = std::max(end, g.onset_step + g.duration_steps);
  m.length_steps = (end + kStepsPerBar - 1) / kStepsPerBar * kStepsPerBar;
  return m;
}

struct DatasetStats {
  std::size_t candidates = 0;
  std::size_t rest_excluded = 0;
  std::size_t duplicates = 0;
};

struct MelodyDataset {
  int bars = 2;
  int rest_threshold = kDefaultRestThreshold;
  std::vector<MelodySequence> sequences;
  std::map<std::string, std::size_t> source_counts;
  DatasetStats stats;
};

/// Window start steps for a melody: every bar boundary whose window fits.
inline std::vector<int> window_offsets(int length_steps, int bars) {
  std::vector<int> out;
  const int window = bars * kStepsPerBar;
  for (int offset = 0; offset + window <= length_steps; offset += kStepsPerBar) out.push_back(offset);
  return out;
}

/// Cuts each melody into bar-hopped windows, drops windows containing a REST
/// run longer than `rest_threshold_steps`, and removes exact duplicates.
inline MelodyDataset build_dataset(const std::vector<SourceMelody>& melodies, int bars, int rest_threshold_steps) {
  if (rest_threshold_steps <= 0) throw std::invalid_argument("rest threshold must be positive");
  MelodyDataset ds;
  ds.bars = bars;
  ds.rest_threshold = rest_threshold_steps;
  std::set<std::vector<int>> seen;
  for (const auto& m : melodies) {
    auto& contributed = ds.source_counts[m.id];
    const auto mono = midi::reduce_monophonic(m.spans);
    for (int offset : window_offsets(m.length_steps, bars)) {
      ++ds.stats.candidates;
      auto seq = tokenize(mono, bars, offset);
      if (seq.longest_rest_run() > rest_threshold_steps) {
        ++ds.stats.rest_excluded;
        continue;
      }
      if (!seen.insert(seq.codes()).second) {
        ++ds.stats.duplicates;
        continue;
      }
      ds.sequences.push_back(std::move(seq));
      ++contributed;
    }
  }
  return ds;
}

// Dataset file: "duet-tokens 1 bars=<b> vocab=90 rest_threshold=<r>" then one
// comma-separated line of token codes per sequence.

inline void write_dataset(std::ostream& os, const MelodyDataset& ds) {
  os << "duet-tokens 1 bars=" << ds.bars << " vocab=" << kVocabSize << " rest_threshold=" << ds.rest_threshold << '\n';
  for (const auto& seq : ds.sequences) {
    const auto codes = seq.codes();
    for (std::size_t i = 0; i < codes.size(); ++i) os << (i ? "," : "") << codes[i];
    os << '\n';
  }
}

inline MelodyDataset read_dataset(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("dataset file is empty");
  std::istringstream hs(header);
  std::string magic, version, bars_kv, vocab_kv, rest_kv;
  hs >> magic >> version >> bars_kv >> vocab_kv >> rest_kv;
  if (magic != "duet-tokens" || version != "1") throw std::runtime_error("unsupported dataset header: " + header);
  auto value = [&](const std::string& kv, const std::string& key) {
    if (kv.rfind(key + "=", 0) != 0) throw std::runtime_error("dataset header missing " + key);
    return std::stoi(kv.substr(key.size() + 1));
  };
  MelodyDataset ds;
  ds.bars = value(bars_kv, "bars");
  ds.rest_threshold = value(rest_kv, "rest_threshold");
  if (value(vocab_kv, "vocab") != kVocabSize) throw std::runtime_error("dataset vocabulary size mismatch");

  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<int> codes;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) codes.push_back(std::stoi(cell));
    ds.sequences.push_back(MelodySequence::from_codes(ds.bars, codes));
  }
  ds.source_counts["file"] = ds.sequences.size();
  return ds;
}

}  // namespace duet

/**
 * @file session.hpp
 * @brief Turn-taking engine: schedule, live note capture, partner turns with
 *        a latency fallback, and JSON-lines session logs.
 *
 * All times are integer milliseconds of session-relative logical time. The
 * engine never reads a clock itself; callers (SessionHost) pass times taken
 * from an injectable Clock.
 */

#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/analysis.hpp"
#include "duet/genmodel.hpp"
#include "duet/melody.hpp"
#include "duet/midi.hpp"

namespace duet {

// ============================================================================
// Clocks
// ============================================================================

class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ms() const = 0;
};

/// Logical time that only moves when told to.
class SimulatedClock : public Clock {
 public:
  explicit SimulatedClock(std::int64_t start_ms = 0) : now_(start_ms) {}
  std::int64_t now_ms() const override { return now_; }
  void set(std::int64_t t_ms) {
    if (t_ms < now_) throw std::invalid_argument("simulated clock cannot go backwards");
    now_ = t_ms;
  }
  void advance(std::int64_t dt_ms) { set(now_ + dt_ms); }

 private:
  std::int64_t now_;
};

/// Monotonic milliseconds since construction.
class WallClock : public Clock {
 public:
  WallClock() : origin_(std::chrono::steady_clock::now()) {}
  std::int64_t now_ms() const override {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - origin_).count();
  }

 private:
  std::chrono::steady_clock::time_point origin_;
};

inline std::int64_t unix_time_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// ============================================================================
// Configuration and schedule
// ============================================================================

enum class PartnerKind { Vae, Markov, HumanRelay };
enum class Role { HumanA, HumanB, Partner };
enum class Player { A = 0, B = 1 };

inline std::string to_string(PartnerKind k) {
  switch (k) {
    case PartnerKind::Vae: return "vae";
    case PartnerKind::Markov: return "markov";
    case PartnerKind::HumanRelay: return "human-relay";
  }
  return "?";
}

inline PartnerKind parse_partner_kind(const std::string& s) {
  if (s == "vae") return PartnerKind::Vae;
  if (s == "markov") return PartnerKind::Markov;
  if (s == "human-relay") return PartnerKind::HumanRelay;
  throw std::invalid_argument("unknown partner kind '" + s + "'");
}

inline std::string to_string(Role r) {
  switch (r) {
    case Role::HumanA: return "human-A";
    case Role::HumanB: return "human-B";
    case Role::Partner: return "partner";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "human-A") return Role::HumanA;
  if (s == "human-B") return Role::HumanB;
  if (s == "partner") return Role::Partner;
  throw std::invalid_argument("unknown role '" + s + "'");
}

inline constexpr std::int64_t kChordWindowMs = 30;
inline constexpr int kPartnerVelocity = 96;
/// 60000 / (4 * bpm) ms per 16th, with bpm carried in thousandths.
inline constexpr std::int64_t kStepNumerator = 15'000'000;

struct SessionConfig {
  double turn_seconds = 8.0;
  int cycles = 7;
  double tempo_bpm = 120.0;
  PartnerKind partner = PartnerKind::Vae;
  PartnerParams params;
  int bars = 2;
  int markov_order = 1;
  std::uint64_t seed = 0;
  std::array<std::string, 2> participant_ids{"A", "B"};

  bool operator==(const SessionConfig&) const = default;

  std::int64_t turn_ms() const { return std::llround(turn_seconds * 1000.0); }
  int turn_count() const { return 2 * cycles; }
  std::int64_t trial_ms() const { return turn_ms() * turn_count(); }
  std::int64_t bpm_milli() const { return std::llround(tempo_bpm * 1000.0); }
  double step_ms() const { return static_cast<double>(kStepNumerator) / static_cast<double>(bpm_milli()); }
  /// Start of 16th step k relative to a turn start, floored to the ms.
  std::int64_t step_offset_ms(std::int64_t k) const { return k * kStepNumerator / bpm_milli(); }
  /// Whole 16th steps that fit in one turn.
  int turn_steps() const { return static_cast<int>(turn_ms() * bpm_milli() / kStepNumerator); }

  void validate() const {
    if (!(turn_seconds > 0.0) || std::abs(turn_seconds * 1000.0 - static_cast<double>(turn_ms())) > 1e-6) {
      throw std::invalid_argument("turn_seconds must be positive and a whole number of milliseconds");
    }
    if (cycles < 1) throw std::invalid_argument("cycles must be >= 1");
    if (!(tempo_bpm > 0.0) || bpm_milli() < 1) throw std::invalid_argument("tempo_bpm must be positive");
    if (bars != 2 && bars != 4) throw std::invalid_argument("bars must be 2 or 4");
    if (markov_order < 1) throw std::invalid_argument("markov order must be >= 1");
    params.validate();
  }

  Role role_of(int turn) const {
    if (turn % 2 == 0) return Role::HumanA;
    return partner == PartnerKind::HumanRelay ? Role::HumanB : Role::Partner;
  }

  /// Design cell for the ratings table.
  Condition condition() const {
    if (partner == PartnerKind::HumanRelay) return Condition::baseline();
    return Condition::partner(bars, params.temperature > 1.0, params.similarity >= 0.6);
  }
};

inline void to_json(nlohmann::json& j, const SessionConfig& c) {
  j = {{"turn_seconds", c.turn_seconds},
       {"cycles", c.cycles},
       {"tempo_bpm", c.tempo_bpm},
       {"partner", to_string(c.partner)},
       {"temperature", c.params.temperature},
       {"similarity", c.params.similarity},
       {"temperature_scales_latent", c.params.temperature_scales_latent},
       {"bars", c.bars},
       {"markov_order", c.markov_order},
       {"seed", c.seed},
       {"participant_ids", c.participant_ids}};
}

inline void from_json(const nlohmann::json& j, SessionConfig& c) {
  c.turn_seconds = j.at("turn_seconds").get<double>();
  c.cycles = j.at("cycles").get<int>();
  c.tempo_bpm = j.at("tempo_bpm").get<double>();
  c.partner = parse_partner_kind(j.at("partner").get<std::string>());
  c.params.temperature = j.at("temperature").get<double>();
  c.params.similarity = j.at("similarity").get<double>();
  c.params.temperature_scales_latent = j.at("temperature_scales_latent").get<bool>();
  c.bars = j.at("bars").get<int>();
  c.markov_order = j.at("markov_order").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.participant_ids = j.at("participant_ids").get<std::array<std::string, 2>>();
}

struct ScheduledTurn {
  int index = 0;
  Role role = Role::HumanA;
  std::int64_t start_offset_ms = 0;

  bool operator==(const ScheduledTurn&) const = default;
};

/// Turn i starts at i * turn_ms; roles alternate starting with the human.
inline std::vector<ScheduledTurn> plan_schedule(const SessionConfig& config) {
  config.validate();
  std::vector<ScheduledTurn> out;
  for (int i = 0; i < config.turn_count(); ++i) out.push_back({i, config.role_of(i), i * config.turn_ms()});
  return out;
}

// ============================================================================
// Records
// ============================================================================

struct NoteEvent {
  int pitch = 60;
  int velocity = 100;
  bool on = true;
  std::int64_t t_ms = 0;

  bool operator==(const NoteEvent&) const = default;
};

struct TurnRecord {
  int index = 0;
  Role role = Role::HumanA;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
  std::vector<NoteEvent> events;
  std::optional<MelodySequence> tokens;
  std::optional<double> compute_ms;

  bool operator==(const TurnRecord&) const = default;
};

struct ParticipantRating {
  std::string participant;
  RatingForm form;

  bool operator==(const ParticipantRating&) const = default;
};

inline constexpr const char* kLogVersion = "duetlog/1";

struct SessionLog {
  std::string version = kLogVersion;
  std::int64_t created_at = 0;  // unix ms
  SessionConfig config;
  std::vector<TurnRecord> turns;
  std::vector<ParticipantRating> ratings;

  bool operator==(const SessionLog&) const = default;
};

// ============================================================================
// Partners
// ============================================================================

/// Maps the model input for one partner turn to a response of the same length.
using PartnerFn = std::function<MelodySequence(const MelodySequence& input, CounterRng& rng)>;

inline PartnerFn make_vae_partner(std::shared_ptr<const ModelState> model, PartnerParams params) {
  params.validate();
  return [model = std::move(model), params](const MelodySequence& input, CounterRng& rng) {
    return respond(*model, input, params, rng);
  };
}

inline PartnerFn make_markov_partner(std::shared_ptr<const MarkovStats> stats) {
  return [stats = std::move(stats)](const MelodySequence& input, CounterRng& rng) {
    return markov_respond(input, *stats, rng);
  };
}

/// Per-turn generator stream, so a rerun with the same seed replays exactly.
inline CounterRng partner_rng(const SessionConfig& config, int turn_index) {
  return CounterRng(config.seed, 0xD0E7'0000ULL + static_cast<std::uint64_t>(turn_index));
}

// ============================================================================
// Partner playback
// ============================================================================

/// Grid steps lost to generation latency: 0 within one 16th-step budget,
/// otherwise the whole steps elapsed before the response was ready.
inline int missed_steps(const SessionConfig& config, double compute_ms) {
  if (!(compute_ms > config.step_ms())) return 0;
  return static_cast<int>(std::floor(compute_ms * static_cast<double>(config.bpm_milli()) /
                                     static_cast<double>(kStepNumerator)));
}

/// The first `missed` steps become REST; a HOLD right after them re-attacks
/// the held pitch.
inline MelodySequence apply_latency_fallback(const MelodySequence& response, int missed) {
  auto codes = response.codes();
  const int n = static_cast<int>(codes.size());
  missed = std::clamp(missed, 0, n);
  if (missed > 0 && missed < n && codes[missed] == kHoldCode) {
    int k = missed;
    while (codes[k] == kHoldCode) --k;
    codes[missed] = codes[k];
  }
  for (int i = 0; i < missed; ++i) codes[i] = kRestCode;
  return MelodySequence::from_codes(response.bars(), codes);
}

/// Note events for `played` looped from turn_start to fill the turn. Nothing
/// sounds before the response is ready; note-offs are clipped to end - 1.
inline std::vector<NoteEvent> playback_events(const SessionConfig& config, std::int64_t turn_start,
                                              const MelodySequence& played, double compute_ms) {
  const std::int64_t turn_end = turn_start + config.turn_ms();
  const std::int64_t ready = turn_start + static_cast<std::int64_t>(std::ceil(std::max(0.0, compute_ms)));
  const auto spans = detokenize(played);
  const int length = played.length();
  std::vector<NoteEvent> out;
  for (std::int64_t copy = 0; turn_start + config.step_offset_ms(copy * length) < turn_end; ++copy) {
    for (const auto& s : spans) {
      std::int64_t on = turn_start + config.step_offset_ms(copy * length + s.onset_step);
      std::int64_t off = turn_start + config.step_offset_ms(copy * length + s.end_step());
      if (on >= turn_end) break;
      on = std::max(on, ready);
      off = std::min(off, turn_end - 1);
      if (off <= on) continue;
      out.push_back({s.pitch, kPartnerVelocity, true, on});
      out.push_back({s.pitch, 0, false, off});
    }
  }
  return out;
}

// ============================================================================
// Session engine
// ============================================================================

struct CaptureResult {
  bool accepted = false;
  std::string reason;  // empty when accepted
  int turn = -1;
};

namespace reason {
inline const std::string kOutsideTurn = "outside-turn";
inline const std::string kChordSuppressed = "chord-suppressed";
inline const std::string kBadPitch = "bad-pitch";
inline const std::string kBadVelocity = "bad-velocity";
inline const std::string kOutOfOrder = "out-of-order";
inline const std::string kUnmatchedOff = "unmatched-off";
inline const std::string kTurnClosed = "turn-closed";
}  // namespace reason

class SessionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Owns one SessionLog and applies the capture and turn rules. Not
/// thread-safe: a SessionHost serializes all calls.
class Session {
 public:
  explicit Session(SessionConfig config, std::int64_t created_at = 0) {
    config.validate();
    log_.config = std::move(config);
    log_.created_at = created_at;
    for (const auto& t : plan_schedule(log_.config)) {
      log_.turns.push_back({t.index, t.role, t.start_offset_ms, t.start_offset_ms + log_.config.turn_ms(), {}, {}, {}});
    }
    capture_.resize(log_.turns.size());
  }

  const SessionConfig& config() const { return log_.config; }
  const SessionLog& log() const { return log_; }
  const TurnRecord& turn(int i) const { return log_.turns.at(i); }
  bool closed(int i) const { return capture_.at(i).closed; }

  /// Turn containing t, or -1 outside the trial.
  int turn_index_at(std::int64_t t_ms) const {
    if (t_ms < 0 || t_ms >= log_.config.trial_ms()) return -1;
    return static_cast<int>(t_ms / log_.config.turn_ms());
  }

  static Role role_for(Player p) { return p == Player::A ? Role::HumanA : Role::HumanB; }

  CaptureResult capture_event(NoteEvent e, Player who = Player::A) {
    if (e.pitch < 0 || e.pitch > 127) return {false, reason::kBadPitch, -1};
    if (e.velocity < 0 || e.velocity > 127) return {false, reason::kBadVelocity, -1};
    const int i = turn_index_at(e.t_ms);
    if (i < 0 || log_.turns[i].role != role_for(who)) return {false, reason::kOutsideTurn, i};
    auto& cap = capture_[i];
    auto& rec = log_.turns[i];
    if (cap.closed) return {false, reason::kTurnClosed, i};
    if (!rec.events.empty() && e.t_ms < rec.events.back().t_ms) return {false, reason::kOutOfOrder, i};

    if (e.on && e.velocity == 0) e.on = false;
    if (e.on) {
      if (cap.last_on && e.t_ms - *cap.last_on < kChordWindowMs) {
        ++cap.suppressed[e.pitch];
        return {false, reason::kChordSuppressed, i};
      }
      cap.last_on = e.t_ms;
      ++cap.sounding[e.pitch];
    } else {
      if (cap.sounding[e.pitch] > 0) {
        --cap.sounding[e.pitch];
      } else if (cap.suppressed[e.pitch] > 0) {
        --cap.suppressed[e.pitch];
        return {false, reason::kChordSuppressed, i};
      } else {
        return {false, reason::kUnmatchedOff, i};
      }
    }
    rec.events.push_back(e);
    return {true, "", i};
  }

  /// Closes a human turn and returns its model input: the last `bars` bars of
  /// the turn, quantized at the session tempo and reduced to one voice.
  const MelodySequence& finalize_human_turn(int index) {
    auto& rec = log_.turns.at(index);
    if (rec.role == Role::Partner) throw SessionError("turn " + std::to_string(index) + " is not a human turn");
    if (capture_[index].closed) throw SessionError("turn " + std::to_string(index) + " already finalized");
    capture_[index].closed = true;
    rec.tokens = human_turn_tokens(log_.config, rec);
    return *rec.tokens;
  }

  /// Records the partner response for a partner turn and lays out its
  /// playback, substituting REST for steps lost to latency.
  void schedule_partner_turn(int index, const MelodySequence& response, double compute_ms) {
    auto& rec = log_.turns.at(index);
    if (rec.role != Role::Partner) throw SessionError("turn " + std::to_string(index) + " is not a partner turn");
    if (capture_[index].closed) throw SessionError("turn " + std::to_string(index) + " already scheduled");
    if (!(compute_ms >= 0.0)) throw std::invalid_argument("compute_ms must be non-negative");
    capture_[index].closed = true;
    const auto played = apply_latency_fallback(response, missed_steps(log_.config, compute_ms));
    rec.events = playback_events(log_.config, rec.start_ms, played, compute_ms);
    rec.tokens = played;
    rec.compute_ms = compute_ms;
  }

  void add_rating(ParticipantRating rating) {
    const auto violations = validate_form(rating.form);
    if (!violations.empty()) throw AnalysisError("invalid rating form: " + violations.front());
    log_.ratings.push_back(std::move(rating));
  }

  /// Model-input tokens of a human turn record (also used by the checker).
  static MelodySequence human_turn_tokens(const SessionConfig& config, const TurnRecord& rec) {
    // FIFO pairing per pitch, dangling notes closed at the turn end.
    std::map<int, std::deque<const NoteEvent*>> open;
    std::vector<midi::NoteSpan> spans;
    auto close = [&](const NoteEvent& on, std::int64_t off_ms) {
      const std::int64_t onset = on.t_ms - rec.start_ms;
      spans.push_back({on.pitch, onset, std::max<std::int64_t>(1, off_ms - on.t_ms), on.velocity, 0});
    };
    for (const auto& e : rec.events) {
      if (e.on) {
        open[e.pitch].push_back(&e);
      } else if (!open[e.pitch].empty()) {
        close(*open[e.pitch].front(), e.t_ms);
        open[e.pitch].pop_front();
      }
    }
    for (auto& [pitch, q] : open) {
      for (const auto* on : q) close(*on, rec.end_ms);
    }
    const auto grid = midi::reduce_monophonic(midi::quantize_with_step(spans, kStepNumerator, config.bpm_milli()));
    const int turn_bars = config.turn_steps() / kStepsPerBar;
    const int offset = std::max(0, turn_bars - config.bars) * kStepsPerBar;
    return tokenize(grid, config.bars, offset);
  }

 private:
  struct CaptureState {
    bool closed = false;
    std::optional<std::int64_t> last_on;
    std::map<int, int> sounding;
    std::map<int, int> suppressed;
  };

  SessionLog log_;
  std::vector<CaptureState> capture_;
};

// ============================================================================
// Invariants
// ============================================================================

/// Every structural rule a finished log must satisfy; empty when it holds.
inline std::vector<std::string> check_log_invariants(const SessionLog& log) {
  std::vector<std::string> v;
  auto fail = [&v](int turn, const std::string& what) {
    v.push_back((turn >= 0 ? "turn " + std::to_string(turn) + ": " : std::string()) + what);
  };
  if (log.version != kLogVersion) fail(-1, "version is '" + log.version + "'");
  const auto& c = log.config;
  try {
    c.validate();
  } catch (const std::exception& e) {
    fail(-1, std::string("invalid config: ") + e.what());
    return v;
  }
  if (static_cast<int>(log.turns.size()) != c.turn_count()) {
    fail(-1, "expected " + std::to_string(c.turn_count()) + " turns, found " + std::to_string(log.turns.size()));
  }

  for (std::size_t n = 0; n < log.turns.size(); ++n) {
    const auto& t = log.turns[n];
    const int i = static_cast<int>(n);
    if (t.index != i) fail(i, "index " + std::to_string(t.index));
    if (t.role != c.role_of(i)) fail(i, "role " + to_string(t.role) + " breaks alternation");
    if (t.start_ms != i * c.turn_ms()) fail(i, "start " + std::to_string(t.start_ms));
    if (t.end_ms - t.start_ms != c.turn_ms()) fail(i, "duration " + std::to_string(t.end_ms - t.start_ms));

    for (std::size_t k = 0; k < t.events.size(); ++k) {
      const auto& e = t.events[k];
      if (e.t_ms < t.start_ms || e.t_ms >= t.end_ms) fail(i, "event at " + std::to_string(e.t_ms) + " outside turn");
      if (k > 0 && e.t_ms < t.events[k - 1].t_ms) fail(i, "events out of order");
      if (e.pitch < 0 || e.pitch > 127 || e.velocity < 0 || e.velocity > 127) fail(i, "malformed event");
    }
    if (t.tokens) {
      if (t.tokens->bars() != c.bars) fail(i, "tokens span " + std::to_string(t.tokens->bars()) + " bars");
      try {
        t.tokens->validate();
      } catch (const std::exception& e) {
        fail(i, std::string("tokens invalid: ") + e.what());
      }
    }

    if (t.role == Role::Partner) {
      if (!t.tokens || !t.compute_ms) {
        fail(i, "partner turn without response");
        continue;
      }
      if (*t.compute_ms < 0.0) fail(i, "negative compute_ms");
      const int missed = std::min(missed_steps(c, *t.compute_ms), t.tokens->length());
      for (int k = 0; k < missed; ++k) {
        if ((*t.tokens)[k] != Token::rest()) fail(i, "step " + std::to_string(k) + " sounds before the response was ready");
      }
      if (t.events != playback_events(c, t.start_ms, *t.tokens, *t.compute_ms)) {
        fail(i, "playback events do not match the scheduled response");
      }
    } else {
      // Accepted human input: paired note-offs, no chords.
      std::map<int, int> sounding;
      std::optional<std::int64_t> last_on;
      for (const auto& e : t.events) {
        if (e.on) {
          if (e.velocity == 0) fail(i, "note-on with velocity 0 stored as note-on");
          if (last_on && e.t_ms - *last_on < kChordWindowMs) fail(i, "chord at " + std::to_string(e.t_ms));
          last_on = e.t_ms;
          ++sounding[e.pitch];
        } else if (sounding[e.pitch]-- <= 0) {
          fail(i, "unmatched note-off at " + std::to_string(e.t_ms));
        }
      }
      if (t.tokens && *t.tokens != Session::human_turn_tokens(c, t)) fail(i, "tokens do not match captured events");
      if (t.compute_ms) fail(i, "human turn with compute_ms");
    }
  }

  for (const auto& r : log.ratings) {
    if (r.participant != c.participant_ids[0] && r.participant != c.participant_ids[1]) {
      fail(-1, "rating from unknown participant '" + r.participant + "'");
    }
    for (const auto& msg : validate_form(r.form)) fail(-1, "rating " + r.participant + ": " + msg);
  }
  return v;
}

// ============================================================================
// Log persistence (JSON lines)
// ============================================================================

class LogError : public std::runtime_error {
 public:
  enum class Kind { Parse, UnsupportedVersion, Truncated, Io };
  LogError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline nlohmann::json turn_to_json(const TurnRecord& t) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : t.events) {
    events.push_back({{"pitch", e.pitch}, {"velocity", e.velocity}, {"on", e.on}, {"t_ms", e.t_ms}});
  }
  nlohmann::json j = {{"kind", "turn"},     {"index", t.index},   {"role", to_string(t.role)},
                      {"start_ms", t.start_ms}, {"end_ms", t.end_ms}, {"events", events}};
  j["tokens"] = t.tokens ? nlohmann::json(t.tokens->codes()) : nlohmann::json(nullptr);
  j["compute_ms"] = t.compute_ms ? nlohmann::json(*t.compute_ms) : nlohmann::json(nullptr);
  return j;
}

inline TurnRecord turn_from_json(const nlohmann::json& j) {
  TurnRecord t;
  t.index = j.at("index").get<int>();
  t.role = parse_role(j.at("role").get<std::string>());
  t.start_ms = j.at("start_ms").get<std::int64_t>();
  t.end_ms = j.at("end_ms").get<std::int64_t>();
  for (const auto& e : j.at("events")) {
    t.events.push_back({e.at("pitch").get<int>(), e.at("velocity").get<int>(), e.at("on").get<bool>(),
                        e.at("t_ms").get<std::int64_t>()});
  }
  if (!j.at("tokens").is_null()) t.tokens = MelodySequence::from_codes(j.at("tokens").get<std::vector<int>>());
  if (!j.at("compute_ms").is_null()) t.compute_ms = j.at("compute_ms").get<double>();
  return t;
}

}  // namespace detail

/// Header line, one line per turn, one per rating, then an end marker that
/// lets load_log detect truncation.
inline void persist_log(const SessionLog& log, std::ostream& os) {
  os << nlohmann::json{{"kind", "header"}, {"version", log.version}, {"created_at", log.created_at}, {"config", log.config}}
            .dump()
     << '\n';
  for (const auto& t : log.turns) os << detail::turn_to_json(t).dump() << '\n';
  for (const auto& r : log.ratings) {
    os << nlohmann::json{{"kind", "rating"}, {"participant", r.participant}, {"form", r.form}}.dump() << '\n';
  }
  os << nlohmann::json{{"kind", "end"}, {"turns", log.turns.size()}, {"ratings", log.ratings.size()}}.dump() << '\n';
  if (!os) throw LogError(LogError::Kind::Io, "failed writing session log");
}

inline SessionLog load_log(std::istream& is) {
  SessionLog log;
  std::string line;
  int line_no = 0;
  bool have_header = false, have_end = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (have_end) throw LogError(LogError::Kind::Parse, "line " + std::to_string(line_no) + ": data after end marker");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LogError(LogError::Kind::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      const auto kind = j.at("kind").get<std::string>();
      if (!have_header) {
        if (kind != "header") throw LogError(LogError::Kind::Parse, "first record is not a header");
        log.version = j.at("version").get<std::string>();
        if (log.version != kLogVersion) {
          throw LogError(LogError::Kind::UnsupportedVersion, "unsupported log version '" + log.version + "'");
        }
        log.created_at = j.at("created_at").get<std::int64_t>();
        log.config = j.at("config").get<SessionConfig>();
        have_header = true;
      } else if (kind == "turn") {
        log.turns.push_back(detail::turn_from_json(j));
      } else if (kind == "rating") {
        log.ratings.push_back({j.at("participant").get<std::string>(), j.at("form").get<RatingForm>()});
      } else if (kind == "end") {
        if (j.at("turns").get<std::size_t>() != log.turns.size() ||
            j.at("ratings").get<std::size_t>() != log.ratings.size()) {
          throw LogError(LogError::Kind::Truncated, "record count does not match end marker");
        }
        have_end = true;
      } else {
        throw LogError(LogError::Kind::Parse, "unknown record kind '" + kind + "'");
      }
    } catch (const LogError&) {
      throw;
    } catch (const std::exception& e) {
      throw LogError(LogError::Kind::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw LogError(LogError::Kind::Truncated, "empty session log");
  if (!have_end) throw LogError(LogError::Kind::Truncated, "session log ends without end marker");
  return log;
}

inline void persist_log(const SessionLog& log, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw LogError(LogError::Kind::Io, "cannot open " + path);
  persist_log(log, os);
}

inline SessionLog load_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LogError(LogError::Kind::Io, "cannot open " + path);
  return load_log(is);
}

}  // namespace duet

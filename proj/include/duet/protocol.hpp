/**
 * @file protocol.hpp
 * @brief Wire messages exchanged with clients as JSON text frames.
 *
 * Every frame is one JSON object carrying "v" (protocol version), "seq"
 * (per-connection, strictly increasing), "type", and the type's fields.
 * Encoding is canonical: keys sorted, no whitespace.
 */

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "duet/analysis.hpp"
#include "duet/session.hpp"

namespace duet::wire {

inline constexpr const char* kProtocolVersion = "duet/1";

namespace code {
inline const std::string kBadType = "bad-type";
inline const std::string kBadVersion = "bad-version";
inline const std::string kBadFrame = "bad-frame";
inline const std::string kBadSeq = "bad-seq";
inline const std::string kBadForm = "bad-form";
}  // namespace code

class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(std::string code, const std::string& message) : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

/// Client introduction; `player` requests a seat ("A", "B", or "" for any).
struct Hello {
  std::string client;
  std::string player;
  bool operator==(const Hello&) const = default;
};

struct Config {
  SessionConfig config;
  bool operator==(const Config&) const = default;
};

struct TurnState {
  int index = 0;
  std::string role;  // "human-A", "human-B", "partner", or "end"
  std::int64_t ends_at_ms = 0;
  double progress_fraction = 1.0;  // remaining share of the turn
  bool operator==(const TurnState&) const = default;
};

struct NoteOn {
  int pitch = 60;
  int velocity = 100;
  std::int64_t t_ms = 0;
  bool operator==(const NoteOn&) const = default;
};

struct NoteOff {
  int pitch = 60;
  int velocity = 0;
  std::int64_t t_ms = 0;
  bool operator==(const NoteOff&) const = default;
};

/// The sequence to play from start_at_ms, looped to the end of the turn.
struct PartnerMelody {
  std::vector<int> codes;
  double tempo_bpm = 120.0;
  std::int64_t start_at_ms = 0;
  bool operator==(const PartnerMelody&) const = default;
};

struct RatingSubmit {
  std::string participant;
  RatingForm form;
  bool operator==(const RatingSubmit&) const = default;
};

struct Error {
  std::string code;
  std::string message;
  bool operator==(const Error&) const = default;
};

/// Acknowledges frame `of`; `detail` is empty on success or a reason.
struct Ack {
  std::uint64_t of = 0;
  std::string detail;
  bool operator==(const Ack&) const = default;
};

using Payload = std::variant<Hello, Config, TurnState, NoteOn, NoteOff, PartnerMelody, RatingSubmit, Error, Ack>;

inline constexpr std::array<const char*, std::variant_size_v<Payload>> kTypeNames = {
    "hello", "config", "turn_state", "note_on", "note_off", "partner_melody", "rating_submit", "error", "ack"};

inline std::string type_name(const Payload& p) { return kTypeNames[p.index()]; }

struct WireMessage {
  std::uint64_t seq = 0;
  Payload body;

  bool operator==(const WireMessage&) const = default;
  std::string type() const { return type_name(body); }
};

/// Types a client may send; the rest are server-to-client only.
inline bool client_may_send(const Payload& p) {
  return std::holds_alternative<Hello>(p) || std::holds_alternative<NoteOn>(p) || std::holds_alternative<NoteOff>(p) ||
         std::holds_alternative<RatingSubmit>(p) || std::holds_alternative<Ack>(p) || std::holds_alternative<Error>(p);
}

namespace detail {

using nlohmann::json;

inline void fields(json& j, const Hello& m) {
  j["client"] = m.client;
  j["player"] = m.player;
}
inline void fields(json& j, const Config& m) { j["config"] = m.config; }
inline void fields(json& j, const TurnState& m) {
  j["index"] = m.index;
  j["role"] = m.role;
  j["ends_at_ms"] = m.ends_at_ms;
  j["progress_fraction"] = m.progress_fraction;
}
inline void fields(json& j, const NoteOn& m) {
  j["pitch"] = m.pitch;
  j["velocity"] = m.velocity;
  j["t_ms"] = m.t_ms;
}
inline void fields(json& j, const NoteOff& m) {
  j["pitch"] = m.pitch;
  j["velocity"] = m.velocity;
  j["t_ms"] = m.t_ms;
}
inline void fields(json& j, const PartnerMelody& m) {
  j["codes"] = m.codes;
  j["tempo_bpm"] = m.tempo_bpm;
  j["start_at_ms"] = m.start_at_ms;
}
inline void fields(json& j, const RatingSubmit& m) {
  j["participant"] = m.participant;
  j["form"] = m.form;
}
inline void fields(json& j, const Error& m) {
  j["code"] = m.code;
  j["message"] = m.message;
}
inline void fields(json& j, const Ack& m) {
  j["of"] = m.of;
  j["detail"] = m.detail;
}

inline Payload parse_body(const std::string& type, const json& j) {
  if (type == "hello") return Hello{j.at("client").get<std::string>(), j.at("player").get<std::string>()};
  if (type == "config") {
    auto c = j.at("config").get<SessionConfig>();
    c.validate();
    return Config{c};
  }
  if (type == "turn_state") {
    return TurnState{j.at("index").get<int>(), j.at("role").get<std::string>(), j.at("ends_at_ms").get<std::int64_t>(),
                     j.at("progress_fraction").get<double>()};
  }
  if (type == "note_on") {
    return NoteOn{j.at("pitch").get<int>(), j.at("velocity").get<int>(), j.at("t_ms").get<std::int64_t>()};
  }
  if (type == "note_off") {
    return NoteOff{j.at("pitch").get<int>(), j.at("velocity").get<int>(), j.at("t_ms").get<std::int64_t>()};
  }
  if (type == "partner_melody") {
    return PartnerMelody{j.at("codes").get<std::vector<int>>(), j.at("tempo_bpm").get<double>(),
                         j.at("start_at_ms").get<std::int64_t>()};
  }
  if (type == "rating_submit") return RatingSubmit{j.at("participant").get<std::string>(), j.at("form").get<RatingForm>()};
  if (type == "error") return Error{j.at("code").get<std::string>(), j.at("message").get<std::string>()};
  if (type == "ack") return Ack{j.at("of").get<std::uint64_t>(), j.at("detail").get<std::string>()};
  throw ProtocolError(code::kBadType, "unknown message type '" + type + "'");
}

}  // namespace detail

inline std::string encode_message(const WireMessage& m) {
  nlohmann::json j = nlohmann::json::object();
  std::visit([&j](const auto& body) { detail::fields(j, body); }, m.body);
  j["v"] = kProtocolVersion;
  j["seq"] = m.seq;
  j["type"] = m.type();
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

/// Throws ProtocolError with code bad-frame, bad-version or bad-type. Unknown
/// fields are ignored.
inline WireMessage decode_message(std::string_view frame) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(frame);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(code::kBadFrame, std::string("not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError(code::kBadFrame, "frame is not a JSON object");
  const auto v = j.find("v");
  if (v == j.end() || !v->is_string() || v->get<std::string>() != kProtocolVersion) {
    throw ProtocolError(code::kBadVersion, std::string("expected protocol version ") + kProtocolVersion);
  }
  const auto type = j.find("type");
  if (type == j.end() || !type->is_string()) throw ProtocolError(code::kBadFrame, "missing message type");
  const auto seq = j.find("seq");
  if (seq == j.end() || !seq->is_number_unsigned()) throw ProtocolError(code::kBadFrame, "missing or invalid seq");

  WireMessage m;
  m.seq = seq->get<std::uint64_t>();
  try {
    m.body = detail::parse_body(type->get<std::string>(), j);
  } catch (const ProtocolError&) {
    throw;
  } catch (const std::exception& e) {
    throw ProtocolError(code::kBadFrame, type->get<std::string>() + ": " + e.what());
  }
  return m;
}

/// Numbers outgoing frames on one connection.
class SeqCounter {
 public:
  std::uint64_t take() { return next_++; }
  WireMessage stamp(Payload body) { return {take(), std::move(body)}; }

 private:
  std::uint64_t next_ = 1;
};

/// Rejects incoming frames whose seq does not strictly increase.
class SeqChecker {
 public:
  void accept(std::uint64_t seq) {
    if (last_ && seq <= *last_) {
      throw ProtocolError(code::kBadSeq, "seq " + std::to_string(seq) + " after " + std::to_string(*last_));
    }
    last_ = seq;
  }

 private:
  std::optional<std::uint64_t> last_;
};

/// Framing state of one connection: numbers what it sends, checks what it
/// receives.
class Endpoint {
 public:
  std::string encode(Payload body) { return encode_message(out_.stamp(std::move(body))); }
  WireMessage decode(std::string_view frame) {
    auto m = decode_message(frame);
    in_.accept(m.seq);
    return m;
  }

 private:
  SeqCounter out_;
  SeqChecker in_;
};

inline NoteEvent to_note_event(const Payload& p) {
  if (const auto* on = std::get_if<NoteOn>(&p)) return {on->pitch, on->velocity, true, on->t_ms};
  const auto& off = std::get<NoteOff>(p);
  return {off.pitch, off.velocity, false, off.t_ms};
}

inline Payload from_note_event(const NoteEvent& e) {
  if (e.on) return NoteOn{e.pitch, e.velocity, e.t_ms};
  return NoteOff{e.pitch, e.velocity, e.t_ms};
}

}  // namespace duet::wire

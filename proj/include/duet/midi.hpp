/**
 * @file midi.hpp
 * @brief Standard MIDI File parsing/serialization, note-span extraction,
 *        16th-note quantization and monophonic reduction.
 *
 * All functions are pure; nothing here holds shared state.
 */

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

namespace duet::midi {

using Bytes = std::vector<std::uint8_t>;

/// Largest delta representable by a 4-byte variable-length quantity.
inline constexpr std::uint32_t kMaxVlq = 0x0FFFFFFF;

class MidiError : public std::runtime_error {
 public:
  enum class Kind { MalformedHeader, Truncated, UnsupportedTiming, UnsupportedFormat, Malformed, Overflow };

  MidiError(Kind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), kind_(kind), offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

// ============================================================================
// Events
// ============================================================================

struct NoteOn {
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  bool operator==(const NoteOn&) const = default;
};

struct NoteOff {
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  bool operator==(const NoteOff&) const = default;
};

/// Set-tempo meta event (0x51), microseconds per quarter note.
struct Tempo {
  std::uint32_t us_per_quarter = 500000;
  bool operator==(const Tempo&) const = default;
};

struct EndOfTrack {
  bool operator==(const EndOfTrack&) const = default;
};

/// Channel voice message other than note on/off (CC, program change, bend...).
/// `status` is the high nibble (0xA0..0xE0); program/channel pressure carry one data byte.
struct ChannelMessage {
  std::uint8_t status = 0xB0;
  std::uint8_t data1 = 0;
  std::uint8_t data2 = 0;
  bool operator==(const ChannelMessage&) const = default;
};

/// Any other meta event, kept opaque.
struct MetaEvent {
  std::uint8_t type = 0;
  Bytes data;
  bool operator==(const MetaEvent&) const = default;
};

/// System-exclusive event (0xF0 or 0xF7 escape), kept opaque.
struct SysexEvent {
  std::uint8_t status = 0xF0;
  Bytes data;
  bool operator==(const SysexEvent&) const = default;
};

using EventPayload = std::variant<NoteOn, NoteOff, Tempo, EndOfTrack, ChannelMessage, MetaEvent, SysexEvent>;

struct MidiEvent {
  std::uint64_t tick = 0;
  std::uint8_t channel = 0;
  EventPayload payload;
  bool operator==(const MidiEvent&) const = default;
};

struct MidiTrack {
  std::vector<MidiEvent> events;
  bool operator==(const MidiTrack&) const = default;
};

struct MidiFile {
  int format = 1;
  int ticks_per_quarter = 480;
  std::vector<MidiTrack> tracks;
  bool operator==(const MidiFile&) const = default;
};

// ============================================================================
// Variable-length quantities
// ============================================================================

inline Bytes encode_vlq(std::uint32_t value) {
  if (value > kMaxVlq) {
    throw MidiError(MidiError::Kind::Overflow, 0, "value " + std::to_string(value) + " exceeds 28-bit VLQ range");
  }
  std::uint8_t buf[4];
  int n = 0;
  buf[n++] = value & 0x7F;
  while ((value >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((value & 0x7F) | 0x80);
  Bytes out;
  out.reserve(n);
  while (n > 0) out.push_back(buf[--n]);
  return out;
}

/// Decodes a VLQ starting at `pos`; advances `pos` past it.
inline std::uint32_t decode_vlq(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  std::uint32_t value = 0;
  for (int i = 0; i < 4; ++i) {
    if (pos >= bytes.size()) throw MidiError(MidiError::Kind::Truncated, pos, "truncated variable-length quantity");
    const std::uint8_t b = bytes[pos++];
    value = (value << 7) | (b & 0x7F);
    if ((b & 0x80) == 0) return value;
  }
  throw MidiError(MidiError::Kind::Malformed, pos, "variable-length quantity longer than 4 bytes");
}

// ============================================================================
// Parsing
// ============================================================================

namespace detail {

inline std::uint32_t read_be(std::span<const std::uint8_t> bytes, std::size_t pos, int width) {
  std::uint32_t v = 0;
  for (int i = 0; i < width; ++i) v = (v << 8) | bytes[pos + i];
  return v;
}

inline void write_be(Bytes& out, std::uint32_t v, int width) {
  for (int i = width - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline int channel_data_length(std::uint8_t status_nibble) {
  return (status_nibble == 0xC0 || status_nibble == 0xD0) ? 1 : 2;
}

inline MidiTrack parse_track(std::span<const std::uint8_t> bytes, std::size_t begin, std::size_t end) {
  MidiTrack track;
  std::size_t pos = begin;
  std::uint64_t tick = 0;
  std::uint8_t running = 0;

  auto need = [&](std::size_t n) {
    if (pos + n > end) throw MidiError(MidiError::Kind::Truncated, pos, "event runs past end of track chunk");
  };

  while (pos < end) {
    const auto sub = bytes.first(end);
    tick += decode_vlq(sub, pos);
    need(1);
    std::uint8_t status = bytes[pos];
    if (status & 0x80) {
      ++pos;
    } else {
      if (running == 0) throw MidiError(MidiError::Kind::Malformed, pos, "data byte without running status");
      status = running;
    }

    MidiEvent ev;
    ev.tick = tick;
    if (status == 0xFF) {
      running = 0;
      need(1);
      const std::uint8_t type = bytes[pos++];
      const std::uint32_t len = decode_vlq(sub, pos);
      need(len);
      Bytes data(bytes.begin() + pos, bytes.begin() + pos + len);
      pos += len;
      if (type == 0x2F) {
        ev.payload = EndOfTrack{};
        track.events.push_back(std::move(ev));
        return track;
      }
      if (type == 0x51 && len == 3) {
        ev.payload = Tempo{read_be(data, 0, 3)};
      } else {
        ev.payload = MetaEvent{type, std::move(data)};
      }
    } else if (status == 0xF0 || status == 0xF7) {
      running = 0;
      const std::uint32_t len = decode_vlq(sub, pos);
      need(len);
      ev.payload = SysexEvent{status, Bytes(bytes.begin() + pos, bytes.begin() + pos + len)};
      pos += len;
    } else if (status >= 0x80 && status < 0xF0) {
      running = status;
      const std::uint8_t kind = status & 0xF0;
      ev.channel = status & 0x0F;
      const int n = channel_data_length(kind);
      need(n);
      const std::uint8_t d1 = bytes[pos] & 0x7F;
      const std::uint8_t d2 = n == 2 ? (bytes[pos + 1] & 0x7F) : 0;
      pos += n;
      if (kind == 0x90) {
        ev.payload = NoteOn{d1, d2};
      } else if (kind == 0x80) {
        ev.payload = NoteOff{d1, d2};
      } else {
        ev.payload = ChannelMessage{kind, d1, d2};
      }
    } else {
      throw MidiError(MidiError::Kind::Malformed, pos - 1, "unsupported status byte");
    }
    track.events.push_back(std::move(ev));
  }
  // Chunk exhausted without an explicit end-of-track: close it at the last tick.
  track.events.push_back(MidiEvent{tick, 0, EndOfTrack{}});
  return track;
}

}  // namespace detail

/// Parses a complete Standard MIDI File (format 0 or 1, PPQ timing).
inline MidiFile parse_midi(std::span<const std::uint8_t> bytes) {
  using detail::read_be;
  if (bytes.size() < 14 || !std::equal(bytes.begin(), bytes.begin() + 4, "MThd")) {
    throw MidiError(MidiError::Kind::MalformedHeader, 0, "missing MThd header");
  }
  const std::uint32_t header_len = read_be(bytes, 4, 4);
  if (header_len < 6) throw MidiError(MidiError::Kind::MalformedHeader, 4, "header chunk too short");
  if (8 + header_len > bytes.size()) throw MidiError(MidiError::Kind::Truncated, 8, "truncated header chunk");

  MidiFile file;
  file.format = static_cast<int>(read_be(bytes, 8, 2));
  const std::uint32_t ntracks = read_be(bytes, 10, 2);
  const std::uint32_t division = read_be(bytes, 12, 2);
  if (file.format > 1) throw MidiError(MidiError::Kind::UnsupportedFormat, 8, "only SMF formats 0 and 1 are supported");
  if (division & 0x8000) throw MidiError(MidiError::Kind::UnsupportedTiming, 12, "SMPTE time division is not supported");
  if (division == 0) throw MidiError(MidiError::Kind::MalformedHeader, 12, "ticks per quarter must be positive");
  file.ticks_per_quarter = static_cast<int>(division);

  std::size_t pos = 8 + header_len;
  while (file.tracks.size() < ntracks) {
    if (pos + 8 > bytes.size()) throw MidiError(MidiError::Kind::Truncated, pos, "missing track chunk header");
    const bool is_track = std::equal(bytes.begin() + pos, bytes.begin() + pos + 4, "MTrk");
    const std::uint32_t len = read_be(bytes, pos + 4, 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw MidiError(MidiError::Kind::Truncated, body, "truncated track chunk");
    if (is_track) file.tracks.push_back(detail::parse_track(bytes, body, body + len));
    pos = body + len;
  }
  return file;
}

// ============================================================================
// Serialization
// ============================================================================

/// Emits an SMF. Running status is used for consecutive channel messages.
inline Bytes serialize_midi(const MidiFile& file) {
  using detail::write_be;
  if (file.ticks_per_quarter <= 0 || file.ticks_per_quarter > 0x7FFF) {
    throw std::invalid_argument("ticks_per_quarter out of range");
  }
  Bytes out{'M', 'T', 'h', 'd'};
  write_be(out, 6, 4);
  write_be(out, static_cast<std::uint32_t>(file.format), 2);
  write_be(out, static_cast<std::uint32_t>(file.tracks.size()), 2);
  write_be(out, static_cast<std::uint32_t>(file.ticks_per_quarter), 2);

  for (const auto& track : file.tracks) {
    Bytes body;
    std::uint64_t last_tick = 0;
    std::uint8_t running = 0;
    bool ended = false;

    auto put_delta = [&](std::uint64_t tick, std::size_t index) {
      if (tick < last_tick) throw std::invalid_argument("track events are not sorted by tick");
      const std::uint64_t delta = tick - last_tick;
      if (delta > kMaxVlq) {
        throw MidiError(MidiError::Kind::Overflow, index, "delta time exceeds 28-bit VLQ range");
      }
      const auto vlq = encode_vlq(static_cast<std::uint32_t>(delta));
      body.insert(body.end(), vlq.begin(), vlq.end());
      last_tick = tick;
    };
    auto put_channel = [&](std::uint8_t status, std::uint8_t d1, std::uint8_t d2, int n) {
      if (status != running) body.push_back(status);
      running = status;
      body.push_back(d1 & 0x7F);
      if (n == 2) body.push_back(d2 & 0x7F);
    };
    auto put_meta = [&](std::uint8_t type, const Bytes& data) {
      running = 0;
      body.push_back(0xFF);
      body.push_back(type);
      const auto len = encode_vlq(static_cast<std::uint32_t>(data.size()));
      body.insert(body.end(), len.begin(), len.end());
      body.insert(body.end(), data.begin(), data.end());
    };

    for (std::size_t i = 0; i < track.events.size() && !ended; ++i) {
      const auto& ev = track.events[i];
      put_delta(ev.tick, i);
      const std::uint8_t ch = ev.channel & 0x0F;
      std::visit(
          [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, NoteOn>) {
              put_channel(0x90 | ch, p.pitch, p.velocity, 2);
            } else if constexpr (std::is_same_v<T, NoteOff>) {
              put_channel(0x80 | ch, p.pitch, p.velocity, 2);
            } else if constexpr (std::is_same_v<T, ChannelMessage>) {
              const std::uint8_t kind = p.status & 0xF0;
              put_channel(kind | ch, p.data1, p.data2, detail::channel_data_length(kind));
            } else if constexpr (std::is_same_v<T, Tempo>) {
              Bytes data;
              write_be(data, p.us_per_quarter & 0xFFFFFF, 3);
              put_meta(0x51, data);
            } else if constexpr (std::is_same_v<T, MetaEvent>) {
              put_meta(p.type, p.data);
            } else if constexpr (std::is_same_v<T, SysexEvent>) {
              running = 0;
              body.push_back(p.status);
              const auto len = encode_vlq(static_cast<std::uint32_t>(p.data.size()));
              body.insert(body.end(), len.begin(), len.end());
              body.insert(body.end(), p.data.begin(), p.data.end());
            } else {
              put_meta(0x2F, {});
              ended = true;
            }
          },
          ev.payload);
    }
    if (!ended) {
      put_delta(last_tick, track.events.size());
      put_meta(0x2F, {});
    }

    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    write_be(out, static_cast<std::uint32_t>(body.size()), 4);
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

// ============================================================================
// Note spans
// ============================================================================

struct NoteSpan {
  int pitch = 60;
  std::int64_t onset_tick = 0;
  std::int64_t duration_ticks = 1;
  int velocity = 100;
  int channel = 0;
  bool operator==(const NoteSpan&) const = default;
};

struct NoteExtraction {
  std::vector<NoteSpan> spans;
  std::size_t dangling = 0;  ///< note-ons closed at end of track
};

/// Pairs note-ons with note-offs (or velocity-0 note-ons) of the same pitch and
/// channel, first-in-first-out. Every note-on yields exactly one span.
inline NoteExtraction extract_note_spans(const MidiFile& file) {
  NoteExtraction result;
  for (const auto& track : file.tracks) {
    std::map<std::pair<int, int>, std::deque<std::pair<std::int64_t, int>>> open;
    std::int64_t track_end = 0;
    for (const auto& ev : track.events) {
      const auto tick = static_cast<std::int64_t>(ev.tick);
      track_end = std::max(track_end, tick);
      int pitch = -1;
      bool is_on = false;
      int velocity = 0;
      if (const auto* on = std::get_if<NoteOn>(&ev.payload)) {
        pitch = on->pitch;
        velocity = on->velocity;
        is_on = on->velocity > 0;
      } else if (const auto* off = std::get_if<NoteOff>(&ev.payload)) {
        pitch = off->pitch;
      } else {
        continue;
      }
      auto& queue = open[{ev.channel, pitch}];
      if (is_on) {
        queue.emplace_back(tick, velocity);
      } else if (!queue.empty()) {
        const auto [onset, vel] = queue.front();
        queue.pop_front();
        result.spans.push_back({pitch, onset, std::max<std::int64_t>(1, tick - onset), vel, ev.channel});
      }
    }
    for (auto& [key, queue] : open) {
      for (const auto& [onset, vel] : queue) {
        result.spans.push_back({key.second, onset, std::max<std::int64_t>(1, track_end - onset), vel, key.first});
        ++result.dangling;
      }
    }
  }
  std::stable_sort(result.spans.begin(), result.spans.end(), [](const NoteSpan& a, const NoteSpan& b) {
    return std::tie(a.onset_tick, a.pitch) < std::tie(b.onset_tick, b.pitch);
  });
  return result;
}

// ============================================================================
// Grid quantization and monophony
// ============================================================================

/// A note on the 16th-note grid.
struct GridSpan {
  int pitch = 60;
  int onset_step = 0;
  int duration_steps = 1;

  int end_step() const { return onset_step + duration_steps; }
  bool operator==(const GridSpan&) const = default;
};

inline bool grid_order(const GridSpan& a, const GridSpan& b) {
  return std::tie(a.onset_step, a.pitch, a.duration_steps) < std::tie(b.onset_step, b.pitch, b.duration_steps);
}

/// round-half-up(value / (step_num / step_den)) for non-negative value.
inline std::int64_t round_to_steps(std::int64_t value, std::int64_t step_num, std::int64_t step_den) {
  return (2 * value * step_den + step_num) / (2 * step_num);
}

/// Quantizes spans whose times are expressed in units where one 16th step is
/// the rational step_num / step_den.
inline std::vector<GridSpan> quantize_with_step(std::span<const NoteSpan> spans, std::int64_t step_num,
                                                std::int64_t step_den) {
  if (step_num <= 0 || step_den <= 0) throw std::invalid_argument("grid step must be positive");
  std::vector<GridSpan> out;
  out.reserve(spans.size());
  for (const auto& s : spans) {
    const auto onset = round_to_steps(s.onset_tick, step_num, step_den);
    const auto dur = std::max<std::int64_t>(1, round_to_steps(s.duration_ticks, step_num, step_den));
    out.push_back({s.pitch, static_cast<int>(onset), static_cast<int>(dur)});
  }
  std::sort(out.begin(), out.end(), grid_order);
  return out;
}

/// One 16th step = ppq / 4 ticks, kept rational when ppq is not a multiple of 4.
inline std::vector<GridSpan> quantize_to_grid(std::span<const NoteSpan> spans, int ppq) {
  if (ppq < 4) throw std::invalid_argument("ticks per quarter must be at least 4");
  return quantize_with_step(spans, ppq, 4);
}

/// Enforces monophony: a later onset truncates the sounding note and
/// simultaneous onsets keep the highest pitch.
inline std::vector<GridSpan> reduce_monophonic(std::span<const GridSpan> spans) {
  std::vector<GridSpan> sorted(spans.begin(), spans.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const GridSpan& a, const GridSpan& b) {
    return a.onset_step != b.onset_step ? a.onset_step < b.onset_step : a.pitch > b.pitch;
  });
  std::vector<GridSpan> out;
  for (const auto& s : sorted) {
    if (s.duration_steps <= 0) continue;
    if (!out.empty() && out.back().onset_step == s.onset_step) continue;
    if (!out.empty() && out.back().end_step() > s.onset_step) {
      out.back().duration_steps = s.onset_step - out.back().onset_step;
    }
    out.push_back(s);
  }
  return out;
}

inline bool is_monophonic(std::span<const GridSpan> spans) {
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].duration_steps < 1) return false;
    if (i + 1 < spans.size() && spans[i].end_step() > spans[i + 1].onset_step) return false;
  }
  return true;
}

/// Time-signature meta events (0x58) as (numerator, denominator) pairs.
inline std::vector<std::pair<int, int>> time_signatures(const MidiFile& file) {
  std::vector<std::pair<int, int>> out;
  for (const auto& track : file.tracks) {
    for (const auto& ev : track.events) {
      if (const auto* meta = std::get_if<MetaEvent>(&ev.payload); meta && meta->type == 0x58 && meta->data.size() >= 2) {
        out.emplace_back(meta->data[0], 1 << meta->data[1]);
      }
    }
  }
  return out;
}

}  // namespace duet::midi

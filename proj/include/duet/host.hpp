/**
 * @file host.hpp
 * @brief SessionHost: the single owner of a running Session. Connections,
 *        clock ticks and generation results all arrive through one ordered
 *        queue; outgoing messages collect in an outbox for the transport.
 */

#pragma once

#include <atomic>
#include <chrono>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "duet/protocol.hpp"
#include "duet/session.hpp"

namespace duet {

/// A message for one connection, or for all (connection == kBroadcast).
struct Outgoing {
  static constexpr int kBroadcast = -1;
  int connection = kBroadcast;
  wire::Payload body;
  bool close_after = false;
  int except = -1;  // broadcast skips this connection
};

struct HostOptions {
  /// Run the partner on a worker thread (live server) or inline (tests).
  bool async_generation = false;
  /// Fixed generation latency for simulated runs; unset means measured.
  std::function<double(int turn)> simulated_compute_ms;
  /// Directory for the JSON-lines log; empty disables persistence.
  std::string log_dir;
  std::int64_t created_at = 0;  // unix ms; 0 takes the wall clock
  std::int64_t broadcast_interval_ms = 100;
};

class SessionHost {
 public:
  SessionHost(SessionConfig config, PartnerFn partner, const Clock& clock, HostOptions options = {})
      : session_(config, options.created_at ? options.created_at : unix_time_ms()),
        partner_(std::move(partner)),
        clock_(clock),
        options_(std::move(options)) {
    if (!partner_ && config.partner != PartnerKind::HumanRelay) {
      throw std::invalid_argument("a generated partner needs a partner function");
    }
  }

  SessionHost(const SessionHost&) = delete;
  SessionHost& operator=(const SessionHost&) = delete;

  ~SessionHost() {
    for (auto& w : workers_) w.join();
  }

  // ---- intake; safe from any thread ---------------------------------------

  int connect() {
    const int id = next_connection_++;
    post([this, id] { connections_[id] = {}; });
    return id;
  }

  void disconnect(int id) {
    post([this, id] { connections_.erase(id); });
  }

  void receive(int id, wire::WireMessage message) {
    post([this, id, m = std::move(message)] { handle(id, m); });
  }

  void post(std::function<void()> command) {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(command));
  }

  // ---- actor ---------------------------------------------------------------

  /// Runs queued commands in arrival order, then advances to the clock.
  void pump() {
    drain();
    tick();
    drain();
  }

  std::vector<Outgoing> take_outbox() { return std::exchange(outbox_, {}); }

  const Session& session() const { return session_; }
  bool started() const { return origin_.has_value(); }
  bool finished() const { return finished_; }
  /// True once the trial is over and every partner turn has its response.
  bool complete() const { return finished_ && pending_ == 0; }
  std::int64_t now() const { return origin_ ? clock_.now_ms() - *origin_ : 0; }
  const std::optional<std::string>& log_path() const { return log_path_; }

 private:
  struct Seat {
    std::optional<Player> player;
  };

  void drain() {
    for (;;) {
      std::deque<std::function<void()>> batch;
      {
        std::lock_guard lock(mu_);
        batch.swap(queue_);
      }
      if (batch.empty()) return;
      for (auto& f : batch) f();
    }
  }

  void send(int connection, wire::Payload body, bool close_after = false) {
    outbox_.push_back({connection, std::move(body), close_after});
  }
  void broadcast(wire::Payload body, int except = -1) {
    outbox_.push_back({Outgoing::kBroadcast, std::move(body), false, except});
  }

  int seats_needed() const { return session_.config().partner == PartnerKind::HumanRelay ? 2 : 1; }

  bool seat_taken(Player p) const {
    for (const auto& [id, seat] : connections_) {
      if (seat.player == p) return true;
    }
    return false;
  }

  void handle(int id, const wire::WireMessage& m) {
    if (!connections_.count(id)) return;
    auto& seat = connections_[id];
    std::visit(
        [&](const auto& body) {
          using T = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<T, wire::Hello>) {
            on_hello(id, seat, m.seq, body);
          } else if constexpr (std::is_same_v<T, wire::NoteOn> || std::is_same_v<T, wire::NoteOff>) {
            on_note(id, seat, m.seq, m.body);
          } else if constexpr (std::is_same_v<T, wire::RatingSubmit>) {
            on_rating(id, seat, m.seq, body);
          } else if constexpr (std::is_same_v<T, wire::Ack> || std::is_same_v<T, wire::Error>) {
            // informational from the client
          } else {
            send(id, wire::Error{wire::code::kBadType, "'" + m.type() + "' is server-to-client only"}, true);
          }
        },
        m.body);
  }

  void on_hello(int id, Seat& seat, std::uint64_t seq, const wire::Hello& hello) {
    if (!seat.player) {
      const bool relay = session_.config().partner == PartnerKind::HumanRelay;
      std::vector<Player> wanted;
      if (hello.player == "A" || hello.player.empty()) wanted.push_back(Player::A);
      if (relay && (hello.player == "B" || hello.player.empty())) wanted.push_back(Player::B);
      for (Player p : wanted) {
        if (!seat_taken(p)) {
          seat.player = p;
          break;
        }
      }
    }
    send(id, wire::Config{session_.config()});
    send(id, wire::Ack{seq, seat.player ? (seat.player == Player::A ? "seat A" : "seat B") : "observer"});

    int seated = 0;
    for (const auto& [cid, s] : connections_) seated += s.player.has_value();
    if (!origin_ && seated >= seats_needed()) {
      origin_ = clock_.now_ms();
      broadcast_turn_state();
    }
  }

  void on_note(int id, const Seat& seat, std::uint64_t seq, const wire::Payload& body) {
    if (!seat.player) return send(id, wire::Ack{seq, "no-seat"});
    if (!origin_) return send(id, wire::Ack{seq, "not-started"});
    const auto r = session_.capture_event(wire::to_note_event(body), *seat.player);
    send(id, wire::Ack{seq, r.reason});
    if (r.accepted) broadcast(body, id);
  }

  void on_rating(int id, const Seat& seat, std::uint64_t seq, const wire::RatingSubmit& r) {
    const auto& ids = session_.config().participant_ids;
    std::string participant = r.participant;
    if (participant.empty() && seat.player) participant = ids[static_cast<int>(*seat.player)];
    if (participant != ids[0] && participant != ids[1]) {
      return send(id, wire::Error{wire::code::kBadForm, "unknown participant '" + participant + "'"});
    }
    const auto violations = validate_form(r.form);
    if (!violations.empty()) {
      std::string text;
      for (const auto& v : violations) text += (text.empty() ? "" : "; ") + v;
      return send(id, wire::Error{wire::code::kBadForm, text});
    }
    session_.add_rating({participant, r.form});
    send(id, wire::Ack{seq, ""});
    if (complete()) persist();
  }

  void tick() {
    if (!origin_ || finished_) return;
    const std::int64_t t = now();
    const auto& config = session_.config();
    bool turn_changed = false;
    while (next_close_ < config.turn_count() && t >= session_.turn(next_close_).end_ms) {
      close_turn(next_close_++);
      turn_changed = true;
    }
    if (t >= config.trial_ms()) {
      finished_ = true;
      broadcast(wire::TurnState{config.turn_count(), "end", config.trial_ms(), 0.0});
      if (complete()) persist();
      return;
    }
    if (turn_changed || !last_broadcast_ || t - *last_broadcast_ >= options_.broadcast_interval_ms) {
      broadcast_turn_state();
    }
  }

  void broadcast_turn_state() {
    const std::int64_t t = now();
    const int i = session_.turn_index_at(t);
    if (i < 0) return;
    const auto& turn = session_.turn(i);
    const double remaining = 1.0 - static_cast<double>(t - turn.start_ms) / static_cast<double>(session_.config().turn_ms());
    broadcast(wire::TurnState{i, to_string(turn.role), turn.end_ms, std::clamp(remaining, 0.0, 1.0)});
    last_broadcast_ = t;
  }

  void close_turn(int i) {
    const auto& config = session_.config();
    if (session_.turn(i).role == Role::Partner) return;  // scheduled when its response arrives
    const MelodySequence input = session_.finalize_human_turn(i);
    if (i + 1 < config.turn_count() && config.role_of(i + 1) == Role::Partner) launch(i + 1, input);
  }

  void launch(int turn, const MelodySequence& input) {
    ++pending_;
    auto job = [this, turn, input, rng = partner_rng(session_.config(), turn)]() mutable {
      std::optional<MelodySequence> response;
      std::string failure;
      try {
        response = partner_(input, rng);
      } catch (const std::exception& e) {
        failure = e.what();
      }
      post([this, turn, response = std::move(response), failure] { on_generated(turn, response, failure); });
    };
    if (options_.async_generation) {
      workers_.emplace_back(std::move(job));
    } else {
      job();
    }
  }

  void on_generated(int turn, const std::optional<MelodySequence>& response, const std::string& failure) {
    --pending_;
    const auto& config = session_.config();
    const auto start = session_.turn(turn).start_ms;
    const double compute = options_.simulated_compute_ms ? options_.simulated_compute_ms(turn)
                                                         : static_cast<double>(std::max<std::int64_t>(0, now() - start));
    if (!failure.empty()) broadcast(wire::Error{"generation-failed", failure});
    session_.schedule_partner_turn(turn, response ? *response : MelodySequence(config.bars), compute);
    broadcast(wire::PartnerMelody{session_.turn(turn).tokens->codes(), config.tempo_bpm, start});
    if (complete()) persist();
  }

  void persist() {
    if (options_.log_dir.empty()) return;
    std::filesystem::create_directories(options_.log_dir);
    const auto& log = session_.log();
    const auto path = std::filesystem::path(options_.log_dir) /
                      ("duet-" + std::to_string(log.created_at) + "-" + std::to_string(log.config.seed) + ".jsonl");
    persist_log(log, path.string());
    log_path_ = path.string();
  }

  Session session_;
  PartnerFn partner_;
  const Clock& clock_;
  HostOptions options_;

  std::mutex mu_;
  std::deque<std::function<void()>> queue_;
  std::atomic<int> next_connection_{1};

  std::map<int, Seat> connections_;
  std::vector<Outgoing> outbox_;
  std::vector<std::thread> workers_;
  std::optional<std::int64_t> origin_;
  std::optional<std::int64_t> last_broadcast_;
  std::optional<std::string> log_path_;
  int next_close_ = 0;
  int pending_ = 0;
  bool finished_ = false;
};

}  // namespace duet

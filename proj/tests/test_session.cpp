/**
 * @file test_session.cpp
 * @brief Schedule, capture rules, partner playback, logs and log invariants.
 */

#include "duet/session.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "support/sessions.hpp"

namespace duet {
namespace {

SessionConfig relay_config() {
  SessionConfig c;
  c.partner = PartnerKind::HumanRelay;
  return c;
}

std::vector<int> codes_with(int bars, std::initializer_list<std::pair<int, int>> notes) {
  // (step, pitch) note-ons; pitch < 0 marks a HOLD run continuing to `step`.
  std::vector<int> codes(bars * kStepsPerBar, kRestCode);
  int last = -1;
  for (const auto& [step, pitch] : notes) {
    if (pitch < 0) {
      for (int k = last + 1; k <= step; ++k) codes[k] = kHoldCode;
    } else {
      codes[step] = Token::note_on(pitch).code();
    }
    last = step;
  }
  return codes;
}

TEST(PlanSchedule, Defaults) {
  const auto plan = plan_schedule(SessionConfig{});
  ASSERT_EQ(plan.size(), 14u);
  for (int i = 0; i < 14; ++i) {
    EXPECT_EQ(plan[i].index, i);
    EXPECT_EQ(plan[i].start_offset_ms, 8000 * i);
    EXPECT_EQ(plan[i].role, i % 2 ? Role::Partner : Role::HumanA);
  }
  EXPECT_EQ(SessionConfig{}.trial_ms(), 112000);
}

TEST(PlanSchedule, SmallConfigs) {
  SessionConfig c;
  c.cycles = 1;
  EXPECT_EQ(plan_schedule(c).size(), 2u);
  c.cycles = 2;
  c.turn_seconds = 4;
  std::vector<std::int64_t> offsets;
  for (const auto& t : plan_schedule(c)) offsets.push_back(t.start_offset_ms);
  EXPECT_EQ(offsets, (std::vector<std::int64_t>{0, 4000, 8000, 12000}));
}

TEST(PlanSchedule, RelayAlternatesHumans) {
  const auto plan = plan_schedule(relay_config());
  for (const auto& t : plan) EXPECT_EQ(t.role, t.index % 2 ? Role::HumanB : Role::HumanA);
}

TEST(SessionConfig, Validation) {
  SessionConfig c;
  c.turn_seconds = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.turn_seconds = 8.0005;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.cycles = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.bars = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.params.similarity = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SessionConfig, TempoMapping) {
  SessionConfig c;
  EXPECT_DOUBLE_EQ(c.step_ms(), 125.0);
  EXPECT_EQ(c.turn_steps(), 64);
  c.tempo_bpm = 90;
  EXPECT_EQ(c.step_offset_ms(3), 500);
  EXPECT_EQ(c.turn_steps(), 48);
}

TEST(SessionConfig, ConditionCell) {
  SessionConfig c;
  c.params = PartnerParams{1.5, 0.9};
  EXPECT_EQ(c.condition().label(), "2B+T+S");
  c.bars = 4;
  c.params = PartnerParams{0.5, 0.3};
  EXPECT_EQ(c.condition().label(), "4B-T-S");
  EXPECT_EQ(relay_config().condition().label(), "H");
}

TEST(SimulatedClock, Monotone) {
  SimulatedClock clock;
  clock.advance(100);
  EXPECT_EQ(clock.now_ms(), 100);
  EXPECT_THROW(clock.set(50), std::invalid_argument);
}

TEST(CaptureEvent, Examples) {
  Session s(SessionConfig{});
  const auto a = s.capture_event({60, 100, true, 100});
  EXPECT_TRUE(a.accepted);
  EXPECT_EQ(a.turn, 0);
  EXPECT_EQ(s.turn(0).events.size(), 1u);

  const auto b = s.capture_event({62, 100, true, 8100});
  EXPECT_FALSE(b.accepted);
  EXPECT_EQ(b.reason, "outside-turn");

  const auto c = s.capture_event({64, 100, true, 110});
  EXPECT_FALSE(c.accepted);
  EXPECT_EQ(c.reason, "chord-suppressed");
  // The suppressed key's release is dropped too; the accepted one pairs.
  EXPECT_EQ(s.capture_event({64, 0, false, 200}).reason, "chord-suppressed");
  EXPECT_TRUE(s.capture_event({60, 0, false, 210}).accepted);
  EXPECT_EQ(s.turn(0).events.size(), 2u);
}

TEST(CaptureEvent, ChordWindowBoundary) {
  Session s(SessionConfig{});
  EXPECT_TRUE(s.capture_event({60, 100, true, 1000}).accepted);
  EXPECT_EQ(s.capture_event({62, 100, true, 1029}).reason, "chord-suppressed");
  EXPECT_TRUE(s.capture_event({64, 100, true, 1030}).accepted);
}

TEST(CaptureEvent, RejectionsAndNormalization) {
  Session s(SessionConfig{});
  EXPECT_EQ(s.capture_event({128, 100, true, 10}).reason, "bad-pitch");
  EXPECT_EQ(s.capture_event({-1, 100, true, 10}).reason, "bad-pitch");
  EXPECT_EQ(s.capture_event({60, 200, true, 10}).reason, "bad-velocity");
  EXPECT_EQ(s.capture_event({60, 0, false, 10}).reason, "unmatched-off");
  EXPECT_EQ(s.capture_event({60, 100, true, -5}).reason, "outside-turn");
  EXPECT_EQ(s.capture_event({60, 100, true, 112000}).reason, "outside-turn");
  EXPECT_EQ(s.capture_event({60, 100, true, 100}, Player::B).reason, "outside-turn");

  EXPECT_TRUE(s.capture_event({60, 100, true, 500}).accepted);
  EXPECT_EQ(s.capture_event({62, 100, true, 400}).reason, "out-of-order");
  // velocity-0 note-on is a release
  EXPECT_TRUE(s.capture_event({60, 0, true, 600}).accepted);
  EXPECT_FALSE(s.turn(0).events.back().on);

  s.finalize_human_turn(0);
  EXPECT_EQ(s.capture_event({60, 100, true, 7000}).reason, "turn-closed");
}

TEST(CaptureEvent, RelayRoutesByPlayer) {
  Session s(relay_config());
  EXPECT_EQ(s.capture_event({60, 100, true, 8100}, Player::A).reason, "outside-turn");
  EXPECT_TRUE(s.capture_event({60, 100, true, 8100}, Player::B).accepted);
  EXPECT_EQ(s.turn(1).events.size(), 1u);
}

TEST(FinalizeHumanTurn, UsesLastBarsOfTurn) {
  Session s(SessionConfig{});
  // bar 0: dropped from the model input (turn = 4 bars, input = bars 2-3)
  s.capture_event({60, 90, true, 0});
  s.capture_event({60, 0, false, 500});
  s.capture_event({64, 90, true, 4000});
  s.capture_event({64, 0, false, 4500});
  s.capture_event({67, 90, true, 6000});
  s.capture_event({67, 0, false, 6250});
  const auto input = s.finalize_human_turn(0);
  EXPECT_EQ(input.codes(), codes_with(2, {{0, 64}, {3, -1}, {16, 67}, {17, -1}}));
  EXPECT_EQ(s.turn(0).tokens, input);
  EXPECT_THROW(s.finalize_human_turn(0), SessionError);
  EXPECT_THROW(s.finalize_human_turn(1), SessionError);
}

TEST(FinalizeHumanTurn, QuantizesMillisecondsHalfUp) {
  // 4062 ms -> step 32.496 -> 32; 4063 ms -> 32.504 -> 33 (window step 0 / 1)
  Session s1(SessionConfig{});
  s1.capture_event({60, 90, true, 4062});
  EXPECT_EQ(s1.finalize_human_turn(0)[0], Token::note_on(60));
  Session s2(SessionConfig{});
  s2.capture_event({60, 90, true, 4063});
  const auto in2 = s2.finalize_human_turn(0);
  EXPECT_EQ(in2[0], Token::rest());
  EXPECT_EQ(in2[1], Token::note_on(60));
}

TEST(FinalizeHumanTurn, DanglingNoteRunsToTurnEnd) {
  Session s(SessionConfig{});
  s.capture_event({72, 90, true, 6000});
  const auto input = s.finalize_human_turn(0);
  EXPECT_EQ(input.codes(), codes_with(2, {{16, 72}, {31, -1}}));
}

TEST(FinalizeHumanTurn, EmptyTurnIsAllRest) {
  Session s(SessionConfig{});
  EXPECT_EQ(s.finalize_human_turn(0), MelodySequence(2));
}

TEST(FinalizeHumanTurn, FourBarModelTakesWholeTurn) {
  SessionConfig c;
  c.bars = 4;
  Session s(c);
  s.capture_event({60, 90, true, 0});
  s.capture_event({60, 0, false, 250});
  EXPECT_EQ(s.finalize_human_turn(0).codes(), codes_with(4, {{0, 60}, {1, -1}}));
}

TEST(SchedulePartnerTurn, LoopsTwoBarResponse) {
  Session s(SessionConfig{});
  s.finalize_human_turn(0);
  const auto response = MelodySequence::from_codes(codes_with(2, {{0, 60}, {3, -1}}));
  s.schedule_partner_turn(1, response, 10.0);
  const auto& t = s.turn(1);
  EXPECT_EQ(t.tokens, response);
  ASSERT_EQ(t.events.size(), 4u);
  EXPECT_EQ(t.events[0], (NoteEvent{60, kPartnerVelocity, true, 8010}));  // waits for the response
  EXPECT_EQ(t.events[1], (NoteEvent{60, 0, false, 8500}));
  EXPECT_EQ(t.events[2], (NoteEvent{60, kPartnerVelocity, true, 12000}));
  EXPECT_EQ(t.events[3], (NoteEvent{60, 0, false, 12500}));
}

TEST(SchedulePartnerTurn, SlowGeneratorRestsLeadingSteps) {
  Session s(SessionConfig{});
  s.finalize_human_turn(0);
  const auto response = MelodySequence::from_codes(codes_with(2, {{0, 60}, {3, -1}, {8, 62}}));
  s.schedule_partner_turn(1, response, 300.0);
  const auto& t = s.turn(1);
  ASSERT_TRUE(t.tokens);
  EXPECT_EQ((*t.tokens)[0], Token::rest());
  EXPECT_EQ((*t.tokens)[1], Token::rest());
  EXPECT_EQ((*t.tokens)[2], Token::note_on(60));  // held note re-attacked
  EXPECT_EQ((*t.tokens)[3], Token::hold());
  EXPECT_EQ(t.compute_ms, 300.0);
  ASSERT_FALSE(t.events.empty());
  EXPECT_EQ(t.events[0].t_ms, 8300);
  EXPECT_EQ(t.events[1].t_ms, 8500);
  EXPECT_EQ(t.events[2].t_ms, 9000);
}

TEST(MissedSteps, Budget) {
  const SessionConfig c;
  EXPECT_EQ(missed_steps(c, 0.0), 0);
  EXPECT_EQ(missed_steps(c, 124.9), 0);
  EXPECT_EQ(missed_steps(c, 125.0), 0);
  EXPECT_EQ(missed_steps(c, 125.5), 1);
  EXPECT_EQ(missed_steps(c, 300.0), 2);
  EXPECT_EQ(missed_steps(c, 1e6), 8000);
  const auto all_rest = apply_latency_fallback(MelodySequence::from_codes(codes_with(2, {{0, 60}, {31, -1}})), 8000);
  EXPECT_EQ(all_rest, MelodySequence(2));
}

TEST(SchedulePartnerTurn, PlaybackStaysInsideWindowProperty) {
  CounterRng rng(404);
  for (int trial = 0; trial < 300; ++trial) {
    SessionConfig c;
    c.bars = trial % 2 ? 4 : 2;
    c.tempo_bpm = testing::pick(rng, 60, 200);
    c.turn_seconds = testing::pick(rng, 2, 12);
    c.cycles = 1;
    Session s(c);
    s.finalize_human_turn(0);
    const double compute = static_cast<double>(rng.below(1500));
    s.schedule_partner_turn(1, testing::random_response(rng, c.bars), compute);
    const auto& t = s.turn(1);
    const int missed = std::min(missed_steps(c, compute), t.tokens->length());
    for (int k = 0; k < missed; ++k) ASSERT_EQ((*t.tokens)[k], Token::rest());
    for (const auto& e : t.events) {
      ASSERT_GE(e.t_ms, t.start_ms + static_cast<std::int64_t>(std::ceil(compute)));
      ASSERT_LT(e.t_ms, t.end_ms);
    }
    ASSERT_EQ(check_log_invariants(s.log()), std::vector<std::string>{});
  }
}

TEST(SchedulePartnerTurn, Errors) {
  Session s(SessionConfig{});
  EXPECT_THROW(s.schedule_partner_turn(0, MelodySequence(2), 0), SessionError);
  s.schedule_partner_turn(1, MelodySequence(2), 0);
  EXPECT_THROW(s.schedule_partner_turn(1, MelodySequence(2), 0), SessionError);
  EXPECT_THROW(s.schedule_partner_turn(3, MelodySequence(2), -1), std::invalid_argument);
}

TEST(PartnerRng, PerTurnStreamsAreReproducible) {
  const SessionConfig c;
  auto a = partner_rng(c, 3), b = partner_rng(c, 3), other = partner_rng(c, 5);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(partner_rng(c, 3).next_u64(), other.next_u64());
}

TEST(LogInvariants, GeneratedSessionsHold) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SessionConfig c = seed % 3 == 0 ? relay_config() : SessionConfig{};
    c.bars = seed % 2 ? 4 : 2;
    c.seed = seed;
    const auto log = testing::random_session_log(c, seed);
    EXPECT_EQ(check_log_invariants(log), std::vector<std::string>{}) << "seed " << seed;
  }
}

TEST(LogInvariants, DetectViolations) {
  const auto good = testing::random_session_log(SessionConfig{}, 1);
  ASSERT_TRUE(check_log_invariants(good).empty());

  auto bad = good;
  bad.turns[1].role = Role::HumanA;
  EXPECT_FALSE(check_log_invariants(bad).empty());

  bad = good;
  bad.turns.pop_back();
  EXPECT_FALSE(check_log_invariants(bad).empty());

  bad = good;
  bad.turns[2].start_ms += 1;
  EXPECT_FALSE(check_log_invariants(bad).empty());

  bad = good;
  ASSERT_FALSE(bad.turns[3].events.empty());
  bad.turns[3].events.back().t_ms = bad.turns[3].end_ms;
  EXPECT_FALSE(check_log_invariants(bad).empty());

  bad = good;
  bad.turns[0].events.push_back({61, 90, true, bad.turns[0].end_ms - 1});
  bad.turns[0].events.push_back({62, 90, true, bad.turns[0].end_ms - 1});
  EXPECT_FALSE(check_log_invariants(bad).empty());

  bad = good;
  bad.turns[1].compute_ms = 1000.0;  // playback no longer matches the latency rule
  EXPECT_FALSE(check_log_invariants(bad).empty());

  bad = good;
  bad.ratings[0].form.ios = 7;
  EXPECT_FALSE(check_log_invariants(bad).empty());
}

TEST(LogPersistence, EmptyEventsRoundTrip) {
  SessionLog log;
  log.created_at = 42;
  std::stringstream ss;
  persist_log(log, ss);
  EXPECT_EQ(load_log(ss), log);
}

TEST(LogPersistence, FullSessionWithRatingsRoundTrip) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SessionConfig c = seed % 2 ? relay_config() : SessionConfig{};
    c.seed = seed * 7919;
    c.params.temperature = 0.1 * static_cast<double>(seed + 1);
    c.participant_ids = {"p" + std::to_string(seed), "q,\"x\""};
    const auto log = testing::random_session_log(c, seed);
    ASSERT_EQ(log.turns.size(), 14u);
    std::stringstream ss;
    persist_log(log, ss);
    EXPECT_EQ(load_log(ss), log) << "seed " << seed;
  }
}

TEST(LogPersistence, TruncationAndVersion) {
  const auto log = testing::random_session_log(SessionConfig{}, 3);
  std::stringstream ss;
  persist_log(log, ss);
  const std::string text = ss.str();

  auto load_text = [](const std::string& t) {
    std::istringstream is(t);
    return load_log(is);
  };
  const auto last_line = text.rfind('\n', text.size() - 2);
  try {
    load_text(text.substr(0, last_line + 1));
    FAIL();
  } catch (const LogError& e) {
    EXPECT_EQ(e.kind(), LogError::Kind::Truncated);
  }
  EXPECT_THROW(load_text(text.substr(0, text.size() / 2)), LogError);
  EXPECT_THROW(load_text(""), LogError);

  std::string other = text;
  other.replace(other.find("duetlog/1"), 9, "duetlog/9");
  try {
    load_text(other);
    FAIL();
  } catch (const LogError& e) {
    EXPECT_EQ(e.kind(), LogError::Kind::UnsupportedVersion);
  }
}

}  // namespace
}  // namespace duet

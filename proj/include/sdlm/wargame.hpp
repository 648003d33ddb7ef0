#pragma once

// Symbolic wargame: grid state, rule-based adjudication, scripted OPFOR and
// Smith-Waterman alignment of action traces.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sdlm/errors.hpp"
#include "sdlm/machine.hpp"

namespace sdlm {

enum class Side { blue, red };
std::string_view to_string(Side s);
Side parse_side(std::string_view s);

struct Unit {
  std::string id;
  Side side = Side::blue;
  int x = 0, y = 0;
  int strength = 100;  // 0..100; 0 means destroyed
  bool operator==(const Unit&) const = default;
};

enum class EventKind { noop, move, attrition, reinforce };
std::string_view to_string(EventKind k);

struct Event {
  EventKind kind = EventKind::noop;
  std::string unit;  // empty for noop
  int x = 0, y = 0;  // move destination
  int amount = 0;    // attrition / reinforcement, >= 0
  std::string note;
  bool operator==(const Event&) const = default;
};

struct WargameState {
  int turn = 0;
  std::vector<Unit> units;
  std::vector<Event> history;

  const Unit* find(std::string_view id) const;
  void validate() const;
  bool operator==(const WargameState&) const = default;
};

/// Pure transition; history grows by exactly one entry. Strengths are
/// clamped to [0, 100].
WargameState apply_event(const WargameState& state, const Event& event);

// ---------------------------------------------------------------------------
// Actions

enum class ActionKind { move, attack, defend, withdraw, fortify, infiltrate, hold };
inline constexpr std::size_t kNumActionKinds = 7;
std::string_view to_string(ActionKind k);
ActionKind parse_action(std::string_view s);
/// One-letter trace symbol: M A D W F I H.
char action_symbol(ActionKind k);

struct Action {
  ActionKind kind = ActionKind::hold;
  std::string actor;
  std::string target;  // attack / infiltrate
  int dx = 0, dy = 0;  // move
};

inline constexpr double kAttritionRate = 0.1;
inline constexpr int kCombatRounds = 3;
inline constexpr int kFortifyGain = 5;
inline constexpr int kInfiltrationDamage = 5;

struct CombatResult {
  int attacker = 0, defender = 0;  // final strengths
};

/// Each round both sides simultaneously lose floor(rate * opposing strength).
CombatResult resolve_combat(int attacker, int defender, double rate = kAttritionRate, int rounds = kCombatRounds);

struct AdjudicationDecision {
  bool accepted = false;
  std::vector<std::string> rules;  // rule identifiers fired, or the rejection reason
  std::vector<Event> events;
  WargameState next;
  int attacker_loss = 0, defender_loss = 0;
  std::optional<double> judgment;  // score from the optional judgment hook
  double latency_micros = 0.0;     // wall clock; excluded from determinism
};

/// Optional learned-judgment hook; its score is recorded, never applied.
using JudgmentHook = std::function<double(const WargameState&, const Action&)>;

/// Deterministic in (state, action, seed) apart from latency_micros.
/// Illegal actions yield a rejected decision whose state is unchanged.
AdjudicationDecision adjudicate(const WargameState& state, const Action& action, std::uint64_t seed,
                                const JudgmentHook& judgment = {});

// ---------------------------------------------------------------------------
// OPFOR

enum class OpforProfile { aggressive, static_defense, guerrilla };
std::string_view to_string(OpforProfile p);
OpforProfile parse_profile(std::string_view s);

/// Action for the side's acting unit this turn (round-robin over its
/// surviving units). Deterministic given seed.
Action scripted_opfor(const WargameState& state, Side side, OpforProfile profile, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Scenarios

struct Inject {
  int turn = 0;
  Event event;
};

struct Scenario {
  std::string name;
  WargameState initial;
  std::vector<Inject> injects;
  int turns = 10;
};

Scenario scenario_from_json(const nlohmann::json& j);
nlohmann::json scenario_to_json(const Scenario& s);
Scenario read_scenario(const std::filesystem::path& path);
/// Small fixed scenario used by tests, the CLI and the bench.
Scenario builtin_scenario();

struct ScenarioRun {
  std::vector<ActionKind> trace;  // red actions, one per turn
  std::vector<AdjudicationDecision> decisions;
  WargameState final_state;
};

/// Each turn: injects for the turn, then one red action from the profile.
ScenarioRun run_scenario(const Scenario& scenario, OpforProfile profile, std::uint64_t seed);

std::string trace_symbols(const std::vector<ActionKind>& trace);
void write_trace(const std::filesystem::path& path, const std::vector<ActionKind>& trace);
/// Blank lines and lines starting with '#' are skipped.
std::vector<ActionKind> read_trace(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Alignment

struct AlignmentScoring {
  double match = 2.0;
  double mismatch = -1.0;
  double gap = -1.0;
  void validate() const;
};

struct Alignment {
  double score = 0.0;
  std::size_t a_begin = 0, a_end = 0, b_begin = 0, b_end = 0;  // half-open spans
  std::string aligned_a, aligned_b;                            // '-' marks gaps
};

/// Local alignment. The end cell is the first maximum in row-major order;
/// traceback prefers diagonal, then up (gap in b), then left (gap in a).
Alignment smith_waterman(std::string_view a, std::string_view b, const AlignmentScoring& s = {});
/// score / (match * min(|a|, |b|)).
double normalized_alignment(std::string_view a, std::string_view b, const AlignmentScoring& s = {});

// ---------------------------------------------------------------------------
// Throughput

struct BenchRow {
  std::string scenario;
  std::size_t decisions = 0;
  double seconds = 0.0;
  double per_hour = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::size_t total_decisions = 0;
  double seconds = 0.0;
  double per_hour = 0.0;
  std::string machine;
};

/// Replays the scenarios round-robin until `seconds` of wall time elapse.
BenchReport throughput_bench(const std::vector<Scenario>& scenarios, double seconds, std::uint64_t seed);
void write_bench_csv(const std::filesystem::path& path, const BenchReport& report);

}  // namespace sdlm

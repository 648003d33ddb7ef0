#include "sdlm/wargame.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "sdlm/rng.hpp"

namespace sdlm {

namespace {

int chebyshev(const Unit& a, const Unit& b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

int sign(int v) { return (v > 0) - (v < 0); }

bool alive(const Unit& u) { return u.strength > 0; }

bool occupied(const WargameState& s, int x, int y, std::string_view except) {
  for (const auto& u : s.units)
    if (alive(u) && u.id != except && u.x == x && u.y == y) return true;
  return false;
}

Unit& find_mut(WargameState& s, std::string_view id) {
  for (auto& u : s.units)
    if (u.id == id) return u;
  throw InputError("wargame: unknown unit '" + std::string(id) + "'");
}

std::vector<const Unit*> enemies_of(const WargameState& s, Side side) {
  std::vector<const Unit*> out;
  for (const auto& u : s.units)
    if (u.side != side && alive(u)) out.push_back(&u);
  std::sort(out.begin(), out.end(), [](const Unit* a, const Unit* b) { return a->id < b->id; });
  return out;
}

const Unit* nearest_enemy(const WargameState& s, const Unit& from) {
  const Unit* best = nullptr;
  for (const Unit* e : enemies_of(s, from.side))
    if (!best || chebyshev(from, *e) < chebyshev(from, *best)) best = e;
  return best;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag, int turn) {
  std::uint64_t h = fnv1a64(tag.data(), tag.size(), seed ^ 0x9e3779b97f4a7c15ULL);
  return h ^ (static_cast<std::uint64_t>(turn) * 0xbf58476d1ce4e5b9ULL);
}

Event make_event(EventKind k, std::string unit, std::string note, int amount = 0, int x = 0, int y = 0) {
  Event e;
  e.kind = k;
  e.unit = std::move(unit);
  e.note = std::move(note);
  e.amount = amount;
  e.x = x;
  e.y = y;
  return e;
}

}  // namespace

std::string_view to_string(Side s) { return s == Side::blue ? "blue" : "red"; }

Side parse_side(std::string_view s) {
  if (s == "blue") return Side::blue;
  if (s == "red") return Side::red;
  throw InputError("unknown side '" + std::string(s) + "'");
}

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::noop: return "noop";
    case EventKind::move: return "move";
    case EventKind::attrition: return "attrition";
    case EventKind::reinforce: return "reinforce";
  }
  return "noop";
}

namespace {
EventKind parse_event_kind(std::string_view s) {
  for (auto k : {EventKind::noop, EventKind::move, EventKind::attrition, EventKind::reinforce})
    if (to_string(k) == s) return k;
  throw InputError("unknown event kind '" + std::string(s) + "'");
}
}  // namespace

const Unit* WargameState::find(std::string_view id) const {
  for (const auto& u : units)
    if (u.id == id) return &u;
  return nullptr;
}

void WargameState::validate() const {
  if (turn < 0) throw InputError("wargame: negative turn");
  std::set<std::string> ids;
  for (const auto& u : units) {
    if (u.id.empty()) throw InputError("wargame: unit with empty id");
    if (!ids.insert(u.id).second) throw InputError("wargame: duplicate unit id '" + u.id + "'");
    if (u.strength < 0 || u.strength > 100) throw InputError("wargame: strength of '" + u.id + "' outside [0, 100]");
  }
}

WargameState apply_event(const WargameState& state, const Event& event) {
  WargameState next = state;
  switch (event.kind) {
    case EventKind::noop: break;
    case EventKind::move: {
      Unit& u = find_mut(next, event.unit);
      u.x = event.x;
      u.y = event.y;
      break;
    }
    case EventKind::attrition: {
      if (event.amount < 0) throw InputError("apply_event: negative attrition");
      Unit& u = find_mut(next, event.unit);
      u.strength = std::max(0, u.strength - event.amount);
      break;
    }
    case EventKind::reinforce: {
      if (event.amount < 0) throw InputError("apply_event: negative reinforcement");
      Unit& u = find_mut(next, event.unit);
      u.strength = std::min(100, u.strength + event.amount);
      break;
    }
  }
  next.history.push_back(event);
  return next;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::array<ActionKind, kNumActionKinds> kAllActions = {
    ActionKind::move,    ActionKind::attack,     ActionKind::defend, ActionKind::withdraw,
    ActionKind::fortify, ActionKind::infiltrate, ActionKind::hold};
}

std::string_view to_string(ActionKind k) {
  switch (k) {
    case ActionKind::move: return "move";
    case ActionKind::attack: return "attack";
    case ActionKind::defend: return "defend";
    case ActionKind::withdraw: return "withdraw";
    case ActionKind::fortify: return "fortify";
    case ActionKind::infiltrate: return "infiltrate";
    case ActionKind::hold: return "hold";
  }
  return "hold";
}

char action_symbol(ActionKind k) {
  switch (k) {
    case ActionKind::move: return 'M';
    case ActionKind::attack: return 'A';
    case ActionKind::defend: return 'D';
    case ActionKind::withdraw: return 'W';
    case ActionKind::fortify: return 'F';
    case ActionKind::infiltrate: return 'I';
    case ActionKind::hold: return 'H';
  }
  return 'H';
}

ActionKind parse_action(std::string_view s) {
  for (auto k : kAllActions)
    if (to_string(k) == s || (s.size() == 1 && s[0] == action_symbol(k))) return k;
  throw InputError("unknown action '" + std::string(s) + "'");
}

CombatResult resolve_combat(int attacker, int defender, double rate, int rounds) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ContractError("resolve_combat: rate must lie in [0, 1]");
  if (rounds < 0) throw ContractError("resolve_combat: negative rounds");
  if (attacker < 0 || attacker > 100 || defender < 0 || defender > 100)
    throw InputError("resolve_combat: strengths must lie in [0, 100]");
  // Small epsilon so that e.g. 0.1 * 70 floors to 7, not 6.
  auto loss = [rate](int opposing) { return static_cast<int>(std::floor(rate * opposing + 1e-9)); };
  for (int r = 0; r < rounds; ++r) {
    const int a = std::max(0, attacker - loss(defender));
    const int d = std::max(0, defender - loss(attacker));
    attacker = a;
    defender = d;
  }
  return {attacker, defender};
}

AdjudicationDecision adjudicate(const WargameState& state, const Action& action, std::uint64_t seed,
                                const JudgmentHook& judgment) {
  const auto t0 = std::chrono::steady_clock::now();
  AdjudicationDecision d;
  d.next = state;
  auto finish = [&]() -> AdjudicationDecision {
    if (judgment) d.judgment = judgment(state, action);
    d.latency_micros =
        std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    return d;
  };
  auto reject = [&](std::string why) {
    d.accepted = false;
    d.rules = {std::move(why)};
    d.next = state;
    d.events.clear();
    return finish();
  };
  auto accept = [&](std::string rule, std::vector<Event> events) {
    d.accepted = true;
    d.rules.insert(d.rules.begin(), std::move(rule));
    for (const auto& e : events) d.next = apply_event(d.next, e);
    d.events = std::move(events);
    return finish();
  };

  const Unit* actor = state.find(action.actor);
  if (!actor) return reject("R0-unknown-actor");
  if (!alive(*actor)) return reject("R0-actor-destroyed");

  switch (action.kind) {
    case ActionKind::move: {
      if (std::abs(action.dx) > 1 || std::abs(action.dy) > 1 || (action.dx == 0 && action.dy == 0))
        return reject("R1-move-range");
      const int x = actor->x + action.dx, y = actor->y + action.dy;
      if (occupied(state, x, y, actor->id)) return reject("R1-move-blocked");
      return accept("R1-move", {make_event(EventKind::move, actor->id, "move", 0, x, y)});
    }
    case ActionKind::attack: {
      const Unit* target = state.find(action.target);
      if (!target) return reject("R2-unknown-target");
      if (target->side == actor->side) return reject("R2-friendly-target");
      if (!alive(*target)) return reject("R2-target-destroyed");
      if (chebyshev(*actor, *target) > 1) return reject("R2-not-adjacent");
      const auto r = resolve_combat(actor->strength, target->strength);
      d.attacker_loss = actor->strength - r.attacker;
      d.defender_loss = target->strength - r.defender;
      if (r.defender == 0) d.rules.push_back("R2-destroyed");
      if (r.attacker == 0) d.rules.push_back("R2-attacker-destroyed");
      return accept("R2-attrition", {make_event(EventKind::attrition, actor->id, "combat", d.attacker_loss),
                                     make_event(EventKind::attrition, target->id, "combat", d.defender_loss)});
    }
    case ActionKind::defend: return accept("R3-defend", {make_event(EventKind::noop, actor->id, "defend")});
    case ActionKind::withdraw: {
      const Unit* e = nearest_enemy(state, *actor);
      if (!e) return accept("R4-withdraw-no-threat", {make_event(EventKind::noop, actor->id, "withdraw")});
      int best_dist = chebyshev(*actor, *e), bx = 0, by = 0;
      for (int dx = -1; dx <= 1; ++dx)
        for (int dy = -1; dy <= 1; ++dy) {
          if (dx == 0 && dy == 0) continue;
          Unit moved = *actor;
          moved.x += dx;
          moved.y += dy;
          if (occupied(state, moved.x, moved.y, actor->id)) continue;
          const int dist = chebyshev(moved, *e);
          if (dist > best_dist) {
            best_dist = dist;
            bx = dx;
            by = dy;
          }
        }
      if (bx == 0 && by == 0) return accept("R4-withdraw-blocked", {make_event(EventKind::noop, actor->id, "withdraw")});
      return accept("R4-withdraw",
                    {make_event(EventKind::move, actor->id, "withdraw", 0, actor->x + bx, actor->y + by)});
    }
    case ActionKind::fortify:
      return accept("R5-fortify", {make_event(EventKind::reinforce, actor->id, "fortify", kFortifyGain)});
    case ActionKind::infiltrate: {
      const Unit* target = state.find(action.target);
      if (!target) return reject("R6-unknown-target");
      if (target->side == actor->side) return reject("R6-friendly-target");
      if (!alive(*target)) return reject("R6-target-destroyed");
      if (chebyshev(*actor, *target) > 2) return reject("R6-out-of-range");
      Rng rng(mix_seed(seed, actor->id + "|" + target->id, state.turn));
      if (rng.bernoulli(0.5))
        return accept("R6-infiltrate-success",
                      {make_event(EventKind::attrition, target->id, "infiltration", kInfiltrationDamage)});
      return accept("R6-infiltrate-detected", {make_event(EventKind::noop, actor->id, "infiltration detected")});
    }
    case ActionKind::hold: return accept("R7-hold", {make_event(EventKind::noop, actor->id, "hold")});
  }
  return reject("R0-unknown-action");
}

// ---------------------------------------------------------------------------

std::string_view to_string(OpforProfile p) {
  switch (p) {
    case OpforProfile::aggressive: return "aggressive";
    case OpforProfile::static_defense: return "static-defense";
    case OpforProfile::guerrilla: return "guerrilla";
  }
  return "aggressive";
}

OpforProfile parse_profile(std::string_view s) {
  for (auto p : {OpforProfile::aggressive, OpforProfile::static_defense, OpforProfile::guerrilla})
    if (to_string(p) == s) return p;
  throw InputError("unknown OPFOR profile '" + std::string(s) + "'");
}

namespace {

// Step toward `to` that strictly closes Chebyshev distance, trying the
// diagonal first, then each axis.
std::optional<std::pair<int, int>> step_toward(const WargameState& s, const Unit& from, const Unit& to) {
  const int sx = sign(to.x - from.x), sy = sign(to.y - from.y);
  const std::array<std::pair<int, int>, 3> options = {{{sx, sy}, {sx, 0}, {0, sy}}};
  for (auto [dx, dy] : options) {
    if (dx == 0 && dy == 0) continue;
    Unit moved = from;
    moved.x += dx;
    moved.y += dy;
    if (chebyshev(moved, to) >= chebyshev(from, to)) continue;
    if (occupied(s, moved.x, moved.y, from.id)) continue;
    return std::make_pair(dx, dy);
  }
  return std::nullopt;
}

const Unit* weakest_adjacent(const WargameState& s, const Unit& u) {
  const Unit* best = nullptr;
  for (const Unit* e : enemies_of(s, u.side))
    if (chebyshev(u, *e) <= 1 && (!best || e->strength < best->strength)) best = e;
  return best;
}

}  // namespace

Action scripted_opfor(const WargameState& state, Side side, OpforProfile profile, std::uint64_t seed) {
  std::vector<const Unit*> own;
  for (const auto& u : state.units)
    if (u.side == side && alive(u)) own.push_back(&u);
  Action a;
  if (own.empty()) return a;
  std::sort(own.begin(), own.end(), [](const Unit* x, const Unit* y) { return x->id < y->id; });
  const Unit& me = *own[static_cast<std::size_t>(state.turn) % own.size()];
  a.actor = me.id;
  const Unit* adjacent = weakest_adjacent(state, me);
  const Unit* nearest = nearest_enemy(state, me);

  switch (profile) {
    case OpforProfile::aggressive:
      if (adjacent) {
        a.kind = ActionKind::attack;
        a.target = adjacent->id;
      } else if (nearest) {
        if (auto st = step_toward(state, me, *nearest)) {
          a.kind = ActionKind::move;
          a.dx = st->first;
          a.dy = st->second;
        }
      }
      break;
    case OpforProfile::static_defense:
      if (adjacent) {
        a.kind = ActionKind::attack;
        a.target = adjacent->id;
      } else {
        a.kind = me.strength < 100 ? ActionKind::fortify : ActionKind::defend;
      }
      break;
    case OpforProfile::guerrilla: {
      Rng rng(mix_seed(seed, me.id, state.turn));
      const double u = rng.uniform();
      if (adjacent && me.strength < 40) {
        a.kind = ActionKind::withdraw;
      } else if (nearest && chebyshev(me, *nearest) <= 2) {
        if (u < 0.7) {
          a.kind = ActionKind::infiltrate;
          a.target = nearest->id;
        } else {
          a.kind = ActionKind::withdraw;
        }
      } else if (nearest) {
        if (auto st = step_toward(state, me, *nearest)) {
          a.kind = ActionKind::move;
          a.dx = st->first;
          a.dy = st->second;
        }
      }
      break;
    }
  }
  return a;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json event_to_json(const Event& e) {
  nlohmann::json j = {{"kind", to_string(e.kind)}};
  if (!e.unit.empty()) j["unit"] = e.unit;
  if (e.kind == EventKind::move) {
    j["x"] = e.x;
    j["y"] = e.y;
  }
  if (e.amount != 0) j["amount"] = e.amount;
  if (!e.note.empty()) j["note"] = e.note;
  return j;
}

Event event_from_json(const nlohmann::json& j) {
  Event e;
  e.kind = parse_event_kind(j.at("kind").get<std::string>());
  e.unit = j.value("unit", std::string{});
  e.x = j.value("x", 0);
  e.y = j.value("y", 0);
  e.amount = j.value("amount", 0);
  e.note = j.value("note", std::string{});
  if (e.kind != EventKind::noop && e.unit.empty()) throw InputError("scenario: event without a unit");
  return e;
}

}  // namespace

Scenario scenario_from_json(const nlohmann::json& j) {
  try {
    Scenario s;
    s.name = j.value("name", std::string("scenario"));
    s.turns = j.value("turns", 10);
    if (s.turns < 0) throw InputError("scenario: negative turn count");
    for (const auto& u : j.at("units")) {
      Unit unit;
      unit.id = u.at("id").get<std::string>();
      unit.side = parse_side(u.at("side").get<std::string>());
      unit.x = u.at("x").get<int>();
      unit.y = u.at("y").get<int>();
      unit.strength = u.value("strength", 100);
      s.initial.units.push_back(unit);
    }
    s.initial.validate();
    if (j.contains("injects"))
      for (const auto& in : j.at("injects")) {
        Inject inject;
        inject.turn = in.at("turn").get<int>();
        inject.event = event_from_json(in.at("event"));
        if (inject.event.kind != EventKind::noop && !s.initial.find(inject.event.unit))
          throw InputError("scenario: inject references unknown unit '" + inject.event.unit + "'");
        s.injects.push_back(inject);
      }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("scenario: malformed json: ") + e.what());
  }
}

nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json j = {{"name", s.name}, {"turns", s.turns}, {"units", nlohmann::json::array()},
                      {"injects", nlohmann::json::array()}};
  for (const auto& u : s.initial.units)
    j["units"].push_back({{"id", u.id}, {"side", to_string(u.side)}, {"x", u.x}, {"y", u.y}, {"strength", u.strength}});
  for (const auto& in : s.injects) j["injects"].push_back({{"turn", in.turn}, {"event", event_to_json(in.event)}});
  return j;
}

Scenario read_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open scenario file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("scenario " + path.string() + ": " + e.what());
  }
  return scenario_from_json(j);
}

Scenario builtin_scenario() {
  Scenario s;
  s.name = "border-crossing";
  s.turns = 10;
  s.initial.units = {{"B1", Side::blue, 0, 0, 100},
                     {"B2", Side::blue, 1, 2, 80},
                     {"R1", Side::red, 4, 1, 100},
                     {"R2", Side::red, 5, 3, 60}};
  Inject resupply;
  resupply.turn = 3;
  resupply.event = make_event(EventKind::reinforce, "B2", "resupply", 10);
  Inject strike;
  strike.turn = 6;
  strike.event = make_event(EventKind::attrition, "R2", "air strike", 5);
  s.injects = {resupply, strike};
  return s;
}

ScenarioRun run_scenario(const Scenario& scenario, OpforProfile profile, std::uint64_t seed) {
  ScenarioRun run;
  WargameState state = scenario.initial;
  state.validate();
  for (int t = 0; t < scenario.turns; ++t) {
    state.turn = t;
    for (const auto& in : scenario.injects)
      if (in.turn == t) state = apply_event(state, in.event);
    const Action a = scripted_opfor(state, Side::red, profile, seed);
    auto d = adjudicate(state, a, mix_seed(seed, "adjudicate", t));
    state = d.next;
    run.trace.push_back(a.kind);
    run.decisions.push_back(std::move(d));
  }
  state.turn = scenario.turns;
  run.final_state = std::move(state);
  return run;
}

std::string trace_symbols(const std::vector<ActionKind>& trace) {
  std::string s;
  for (auto k : trace) s.push_back(action_symbol(k));
  return s;
}

void write_trace(const std::filesystem::path& path, const std::vector<ActionKind>& trace) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write trace file " + path.string());
  for (auto k : trace) out << action_symbol(k) << '\n';
}

std::vector<ActionKind> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trace file " + path.string());
  std::vector<ActionKind> out;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(parse_action(line));
  }
  return out;
}

// ---------------------------------------------------------------------------

void AlignmentScoring::validate() const {
  if (!(match > 0.0)) throw ConfigError("alignment: match score must be positive");
  if (!(mismatch <= 0.0)) throw ConfigError("alignment: mismatch score must not be positive");
  if (!(gap <= 0.0)) throw ConfigError("alignment: gap score must not be positive");
}

Alignment smith_waterman(std::string_view a, std::string_view b, const AlignmentScoring& s) {
  s.validate();
  const std::size_t n = a.size(), m = b.size();
  const std::size_t W = m + 1;
  std::vector<double> H((n + 1) * W, 0.0);
  auto sub = [&](std::size_t i, std::size_t j) { return a[i - 1] == b[j - 1] ? s.match : s.mismatch; };
  double best = 0.0;
  std::size_t bi = 0, bj = 0;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const double h = std::max({0.0, H[(i - 1) * W + j - 1] + sub(i, j), H[(i - 1) * W + j] + s.gap,
                                 H[i * W + j - 1] + s.gap});
      H[i * W + j] = h;
      if (h > best) {
        best = h;
        bi = i;
        bj = j;
      }
    }
  Alignment out;
  out.score = best;
  if (best <= 0.0) return out;
  std::size_t i = bi, j = bj;
  std::string ra, rb;
  while (i > 0 && j > 0 && H[i * W + j] > 0.0) {
    const double h = H[i * W + j];
    if (h == H[(i - 1) * W + j - 1] + sub(i, j)) {
      ra.push_back(a[i - 1]);
      rb.push_back(b[j - 1]);
      --i;
      --j;
    } else if (h == H[(i - 1) * W + j] + s.gap) {
      ra.push_back(a[i - 1]);
      rb.push_back('-');
      --i;
    } else {
      ra.push_back('-');
      rb.push_back(b[j - 1]);
      --j;
    }
  }
  std::reverse(ra.begin(), ra.end());
  std::reverse(rb.begin(), rb.end());
  out.a_begin = i;
  out.a_end = bi;
  out.b_begin = j;
  out.b_end = bj;
  out.aligned_a = std::move(ra);
  out.aligned_b = std::move(rb);
  return out;
}

double normalized_alignment(std::string_view a, std::string_view b, const AlignmentScoring& s) {
  if (a.empty() || b.empty()) throw InputError("normalized_alignment: empty trace");
  const double v = smith_waterman(a, b, s).score / (s.match * static_cast<double>(std::min(a.size(), b.size())));
  return std::clamp(v, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

BenchReport throughput_bench(const std::vector<Scenario>& scenarios, double seconds, std::uint64_t seed) {
  BenchReport rep;
  rep.machine = machine_descriptor();
  if (scenarios.empty()) return rep;
  if (!(seconds >= 1.0)) throw InputError("throughput_bench: duration must be at least one second");
  rep.rows.resize(scenarios.size());
  for (std::size_t i = 0; i < scenarios.size(); ++i) rep.rows[i].scenario = scenarios[i].name;
  constexpr std::array profiles = {OpforProfile::aggressive, OpforProfile::static_defense, OpforProfile::guerrilla};
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  std::uint64_t iter = 0;
  while (std::chrono::duration<double>(clock::now() - start).count() < seconds) {
    const std::size_t i = iter % scenarios.size();
    const auto t0 = clock::now();
    const auto run = run_scenario(scenarios[i], profiles[(iter / scenarios.size()) % profiles.size()], seed + iter);
    rep.rows[i].seconds += std::chrono::duration<double>(clock::now() - t0).count();
    rep.rows[i].decisions += run.decisions.size();
    ++iter;
  }
  rep.seconds = std::chrono::duration<double>(clock::now() - start).count();
  for (auto& r : rep.rows) {
    r.per_hour = r.seconds > 0.0 ? static_cast<double>(r.decisions) / r.seconds * 3600.0 : 0.0;
    rep.total_decisions += r.decisions;
  }
  rep.per_hour = static_cast<double>(rep.total_decisions) / rep.seconds * 3600.0;
  return rep;
}

void write_bench_csv(const std::filesystem::path& path, const BenchReport& report) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write bench csv " + path.string());
  out << "# machine: " << report.machine << '\n';
  out << "scenario,decisions,seconds,decisions_per_hour\n";
  for (const auto& r : report.rows) out << r.scenario << ',' << r.decisions << ',' << r.seconds << ',' << r.per_hour << '\n';
  out << "total," << report.total_decisions << ',' << report.seconds << ',' << report.per_hour << '\n';
}

}  // namespace sdlm

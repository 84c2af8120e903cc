#include "pnfrl/envdata.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace pnfrl {
namespace {

constexpr double kMazeDt = 0.1;
constexpr double kMazeMaxSpeed = 2.0;
constexpr double kMazeGoalX = 0.7;
constexpr double kMazeGoalY = 0.7;
constexpr double kMazeGoalRadius = 0.1;
// wall block hanging from the bottom edge; the lower edge sits below the
// arena so only its left, right and top faces are reachable
constexpr double kWallX0 = -0.2;
constexpr double kWallX1 = 0.2;
constexpr double kWallY0 = -1.5;
constexpr double kWallY1 = 0.3;

constexpr double kPendulumDt = 0.05;
constexpr double kPendulumGravity = 10.0;
constexpr double kPendulumMaxTorque = 2.0;
constexpr double kPendulumMaxSpeed = 8.0;

constexpr int kReferenceEpisodes = 20;
constexpr uint64_t kReferenceSeed = 20230611;

double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

double wrap_angle(double th) {
  return std::remainder(th, 2.0 * std::numbers::pi);
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw std::domain_error(std::string("non-finite ") + what);
}

StepResult maze_step(std::span<const double> s, std::span<const double> a_raw) {
  const double ax = clip(a_raw[0], -1.0, 1.0);
  const double ay = clip(a_raw[1], -1.0, 1.0);
  double vx = clip(s[2] + kMazeDt * ax, -kMazeMaxSpeed, kMazeMaxSpeed);
  double vy = clip(s[3] + kMazeDt * ay, -kMazeMaxSpeed, kMazeMaxSpeed);
  // trapezoidal position update: exact double integrator when unclipped
  double x = s[0] + 0.5 * kMazeDt * (s[2] + vx);
  double y = s[1] + 0.5 * kMazeDt * (s[3] + vy);

  if (x < -1.0) { x = -1.0; vx = 0.0; }
  if (x > 1.0) { x = 1.0; vx = 0.0; }
  if (y < -1.0) { y = -1.0; vy = 0.0; }
  if (y > 1.0) { y = 1.0; vy = 0.0; }
  if (x > kWallX0 && x < kWallX1 && y > kWallY0 && y < kWallY1) {
    const double left = x - kWallX0;
    const double right = kWallX1 - x;
    const double top = kWallY1 - y;
    if (top <= left && top <= right) {
      y = kWallY1;
      vy = 0.0;
    } else if (left <= right) {
      x = kWallX0;
      vx = 0.0;
    } else {
      x = kWallX1;
      vx = 0.0;
    }
  }

  StepResult out;
  out.s_next = {x, y, vx, vy};
  const double dist = std::hypot(x - kMazeGoalX, y - kMazeGoalY);
  out.r = -dist;
  out.done = dist <= kMazeGoalRadius;
  return out;
}

StepResult pendulum_step(std::span<const double> s,
                         std::span<const double> a_raw) {
  const double a = clip(a_raw[0], -1.0, 1.0);
  const double th = std::atan2(s[1], s[0]);
  const double w = s[2];
  const double torque = kPendulumMaxTorque * a;
  const double angle = wrap_angle(th);
  StepResult out;
  out.r = -(angle * angle + 0.1 * w * w + 0.001 * a * a);
  const double w_next =
      clip(w + (1.5 * kPendulumGravity * std::sin(th) + 3.0 * torque) *
                   kPendulumDt,
           -kPendulumMaxSpeed, kPendulumMaxSpeed);
  const double th_next = th + w_next * kPendulumDt;
  out.s_next = {std::cos(th_next), std::sin(th_next), w_next};
  out.done = false;
  return out;
}

std::vector<double> maze_expert(std::span<const double> s) {
  const double ax = 1.5 * (kMazeGoalX - s[0]) - 1.2 * s[2];
  const double ay = 1.5 * (kMazeGoalY - s[1]) - 1.2 * s[3];
  return {clip(ax, -1.0, 1.0), clip(ay, -1.0, 1.0)};
}

// energy pumping far from upright, PD capture near upright
std::vector<double> pendulum_expert(std::span<const double> s) {
  const double th = wrap_angle(std::atan2(s[1], s[0]));
  const double w = s[2];
  double torque = 0.0;
  if (std::cos(th) > 0.9) {
    torque = -(10.0 * th + 2.0 * w);
  } else {
    const double energy = 0.5 * w * w + 1.5 * kPendulumGravity * std::cos(th);
    const double target = 1.5 * kPendulumGravity;
    torque = (target - energy) * (w >= 0.0 ? 1.0 : -1.0);
  }
  return {clip(torque / kPendulumMaxTorque, -1.0, 1.0)};
}

std::vector<double> uniform_action(size_t dim, Rng& rng) {
  std::vector<double> a(dim);
  for (double& v : a) v = rng.uniform(-1.0, 1.0);
  return a;
}

std::vector<double> medium_action(const EnvSpec& spec,
                                  std::span<const double> s, Rng& rng) {
  auto a = expert_action(spec, s);
  for (double& v : a) v = clip(v + 0.3 * rng.normal(), -1.0, 1.0);
  return a;
}

// Mean episode return of a policy, used for the score anchors.
template <typename Policy>
double mean_return(const EnvSpec& spec, Policy policy, Rng& rng) {
  double total = 0.0;
  for (int ep = 0; ep < kReferenceEpisodes; ++ep) {
    auto s = env_reset(spec, rng);
    for (int t = 0; t < spec.horizon; ++t) {
      const auto a = policy(s, rng);
      auto step = env_step(spec, s, a);
      total += step.r;
      s = std::move(step.s_next);
      if (step.done) break;
    }
  }
  return total / kReferenceEpisodes;
}

EnvSpec with_references(EnvSpec spec) {
  Rng rng(kReferenceSeed);
  Rng random_rng = rng.split("random");
  Rng expert_rng = rng.split("expert");
  spec.random_return = mean_return(
      spec,
      [&](const std::vector<double>&, Rng& r) {
        return uniform_action(spec.action_dim, r);
      },
      random_rng);
  spec.expert_return = mean_return(
      spec,
      [&](const std::vector<double>& s, Rng&) { return expert_action(spec, s); },
      expert_rng);
  return spec;
}

std::string format_real(double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<size_t>(n));
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  size_t start = 0;
  while (true) {
    const size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

double parse_real(std::string_view field, size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    throw ParseError("line " + std::to_string(line) + ": bad number '" +
                         std::string(field) + "'",
                     line);
  return v;
}

int parse_int(std::string_view field, size_t line) {
  int v = 0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    throw ParseError("line " + std::to_string(line) + ": bad integer '" +
                         std::string(field) + "'",
                     line);
  return v;
}

}  // namespace

EnvSpec point_maze_spec() {
  static const EnvSpec spec = [] {
    EnvSpec s;
    s.kind = EnvKind::kPointMaze;
    s.name = "point_maze";
    s.state_dim = 4;
    s.action_dim = 2;
    s.horizon = 100;
    return with_references(s);
  }();
  return spec;
}

EnvSpec pendulum_spec() {
  static const EnvSpec spec = [] {
    EnvSpec s;
    s.kind = EnvKind::kPendulum;
    s.name = "pendulum";
    s.state_dim = 3;
    s.action_dim = 1;
    s.horizon = 200;
    return with_references(s);
  }();
  return spec;
}

EnvSpec custom_spec(size_t state_dim, size_t action_dim) {
  if (state_dim == 0 || action_dim == 0)
    throw ConfigError("custom env needs positive state and action dims");
  EnvSpec s;
  s.kind = EnvKind::kCustom;
  s.name = "custom";
  s.state_dim = state_dim;
  s.action_dim = action_dim;
  return s;
}

EnvSpec env_by_name(std::string_view name) {
  if (name == "point_maze") return point_maze_spec();
  if (name == "pendulum") return pendulum_spec();
  throw ConfigError("unknown environment '" + std::string(name) +
                    "' (expected point_maze or pendulum)");
}

StepResult env_step(const EnvSpec& spec, std::span<const double> s,
                    std::span<const double> a) {
  if (s.size() != spec.state_dim || a.size() != spec.action_dim)
    throw std::invalid_argument("env_step: state/action dimension mismatch");
  check_finite(s, "state");
  check_finite(a, "action");
  switch (spec.kind) {
    case EnvKind::kPointMaze:
      return maze_step(s, a);
    case EnvKind::kPendulum:
      return pendulum_step(s, a);
    case EnvKind::kCustom:
      break;
  }
  throw std::logic_error("env_step: custom environments have no dynamics");
}

std::vector<double> env_reset(const EnvSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case EnvKind::kPointMaze: {
      while (true) {
        const double x = rng.uniform(-0.9, 0.9);
        const double y = rng.uniform(-0.9, 0.9);
        if (!maze_position_free(x, y)) continue;
        if (std::hypot(x - kMazeGoalX, y - kMazeGoalY) < 0.5) continue;
        return {x, y, 0.0, 0.0};
      }
    }
    case EnvKind::kPendulum: {
      const double th = rng.uniform(-std::numbers::pi, std::numbers::pi);
      const double w = rng.uniform(-1.0, 1.0);
      return {std::cos(th), std::sin(th), w};
    }
    case EnvKind::kCustom:
      break;
  }
  throw std::logic_error("env_reset: custom environments have no reset");
}

std::vector<double> expert_action(const EnvSpec& spec,
                                  std::span<const double> s) {
  switch (spec.kind) {
    case EnvKind::kPointMaze:
      return maze_expert(s);
    case EnvKind::kPendulum:
      return pendulum_expert(s);
    case EnvKind::kCustom:
      break;
  }
  throw std::logic_error("expert_action: custom environments have no expert");
}

bool maze_position_free(double x, double y) {
  if (x < -1.0 || x > 1.0 || y < -1.0 || y > 1.0) return false;
  return !(x > kWallX0 && x < kWallX1 && y > kWallY0 && y < kWallY1);
}

std::pair<double, double> maze_goal() { return {kMazeGoalX, kMazeGoalY}; }

Behavior parse_behavior(std::string_view tag) {
  if (tag == "random") return Behavior::kRandom;
  if (tag == "medium") return Behavior::kMedium;
  if (tag == "replay_mix") return Behavior::kReplayMix;
  throw ConfigError("unknown behavior '" + std::string(tag) +
                    "' (expected random, medium or replay_mix)");
}

std::string behavior_name(Behavior b) {
  switch (b) {
    case Behavior::kRandom:
      return "random";
    case Behavior::kMedium:
      return "medium";
    case Behavior::kReplayMix:
      return "replay_mix";
  }
  return "?";
}

Dataset generate_dataset(const EnvSpec& spec, Behavior behavior,
                         size_t n_transitions, uint64_t seed) {
  if (n_transitions == 0)
    throw std::invalid_argument("generate_dataset: n_transitions must be >= 1");
  if (spec.kind == EnvKind::kCustom)
    throw ConfigError("generate_dataset: custom environments cannot be rolled");
  Dataset d;
  d.env = spec;
  d.source = behavior_name(behavior) + "/seed=" + std::to_string(seed);
  d.transitions.reserve(n_transitions);
  Rng rng(seed);
  int ep = 0;
  while (d.transitions.size() < n_transitions) {
    bool use_random = behavior == Behavior::kRandom;
    if (behavior == Behavior::kReplayMix) use_random = ep % 2 == 0;
    d.episode_sources.push_back(use_random ? "random" : "medium");
    auto s = env_reset(spec, rng);
    for (int t = 0; t < spec.horizon && d.transitions.size() < n_transitions;
         ++t) {
      auto a = use_random ? uniform_action(spec.action_dim, rng)
                          : medium_action(spec, s, rng);
      auto step = env_step(spec, s, a);
      Transition tr;
      tr.ep = ep;
      tr.t = t;
      tr.s = s;
      tr.a = std::move(a);
      tr.r = step.r;
      tr.s_next = step.s_next;
      tr.done = step.done;
      d.transitions.push_back(std::move(tr));
      s = std::move(step.s_next);
      if (step.done) break;
    }
    ++ep;
  }
  return d;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& d,
                                            double val_fraction,
                                            uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("split_train_val: val_fraction must be in (0, 1)");
  const size_t n = d.size();
  const auto n_train = static_cast<size_t>(
      std::floor(static_cast<double>(n) * (1.0 - val_fraction)));
  if (n_train == 0 || n_train == n)
    throw std::invalid_argument("split_train_val: degenerate split of " +
                                std::to_string(n) + " transitions");
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  // Fisher-Yates
  for (size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  Dataset train, val;
  train.env = val.env = d.env;
  train.source = d.source + "/train";
  val.source = d.source + "/val";
  train.episode_sources = val.episode_sources = d.episode_sources;
  for (size_t i = 0; i < n; ++i)
    (i < n_train ? train : val).transitions.push_back(d.transitions[order[i]]);
  return {std::move(train), std::move(val)};
}

std::vector<size_t> sample_indices(size_t population, size_t n, Rng& rng) {
  if (population == 0) throw std::invalid_argument("sample from empty population");
  std::vector<size_t> idx(n);
  for (auto& i : idx) i = rng.index(population);
  return idx;
}

std::vector<Transition> sample_batch(const Dataset& d, size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("sample_batch: n must be >= 1");
  std::vector<Transition> batch;
  batch.reserve(n);
  for (size_t i : sample_indices(d.size(), n, rng))
    batch.push_back(d.transitions[i]);
  return batch;
}

Dataset dataset_prefix(const Dataset& d, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("dataset_prefix: fraction must be in (0, 1]");
  const auto keep = static_cast<size_t>(
      std::ceil(fraction * static_cast<double>(d.size())));
  Dataset out = d;
  out.transitions.resize(std::max<size_t>(1, keep));
  out.source = d.source + "/prefix";
  return out;
}

double normalized_score(double mean_return, const EnvSpec& spec) {
  const double span = spec.expert_return - spec.random_return;
  if (span == 0.0)
    throw std::invalid_argument("normalized_score: expert and random returns coincide");
  return 100.0 * (mean_return - spec.random_return) / span;
}

std::vector<double> episode_returns(const Dataset& d) {
  std::vector<double> returns;
  std::vector<int> ids;
  for (const auto& tr : d.transitions) {
    auto it = std::find(ids.begin(), ids.end(), tr.ep);
    if (it == ids.end()) {
      ids.push_back(tr.ep);
      returns.push_back(tr.r);
    } else {
      returns[static_cast<size_t>(it - ids.begin())] += tr.r;
    }
  }
  return returns;
}

void write_dataset_csv(std::ostream& os, const Dataset& d) {
  const size_t ds = d.env.state_dim;
  const size_t da = d.env.action_dim;
  os << "ep,t";
  for (size_t i = 0; i < ds; ++i) os << ",s" << i;
  for (size_t i = 0; i < da; ++i) os << ",a" << i;
  os << ",r,done\n";
  for (const auto& tr : d.transitions) {
    os << tr.ep << ',' << tr.t;
    for (double v : tr.s) os << ',' << format_real(v);
    for (double v : tr.a) os << ',' << format_real(v);
    os << ',' << format_real(tr.r) << ',' << (tr.done ? 1 : 0) << '\n';
  }
}

Dataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.empty())
    throw ParseError("line 1: empty dataset file (missing header)", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_fields(line);
  size_t ds = 0, da = 0;
  for (const auto& h : header) {
    if (h.size() > 1 && h[0] == 's' && std::isdigit(static_cast<unsigned char>(h[1]))) ++ds;
    if (h.size() > 1 && h[0] == 'a' && std::isdigit(static_cast<unsigned char>(h[1]))) ++da;
  }
  {
    std::string expected = "ep,t";
    for (size_t i = 0; i < ds; ++i) expected += ",s" + std::to_string(i);
    for (size_t i = 0; i < da; ++i) expected += ",a" + std::to_string(i);
    expected += ",r,done";
    if (line != expected || ds == 0 || da == 0)
      throw ParseError("line 1: malformed header '" + line + "'", 1);
  }
  EnvSpec env;
  if (ds == 4 && da == 2) {
    env = point_maze_spec();
  } else if (ds == 3 && da == 1) {
    env = pendulum_spec();
  } else {
    throw ParseError("line 1: dimensions (" + std::to_string(ds) + ", " +
                         std::to_string(da) +
                         ") match no built-in environment",
                     1);
  }

  const size_t arity = 2 + ds + da + 2;
  Dataset d;
  d.env = env;
  d.source = "file";
  size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != arity)
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                           std::to_string(arity) + " columns, got " +
                           std::to_string(fields.size()),
                       line_no);
    Transition tr;
    tr.ep = parse_int(fields[0], line_no);
    tr.t = parse_int(fields[1], line_no);
    tr.s.resize(ds);
    tr.a.resize(da);
    for (size_t i = 0; i < ds; ++i) tr.s[i] = parse_real(fields[2 + i], line_no);
    for (size_t i = 0; i < da; ++i) tr.a[i] = parse_real(fields[2 + ds + i], line_no);
    tr.r = parse_real(fields[2 + ds + da], line_no);
    const auto done = fields[3 + ds + da];
    if (done != "0" && done != "1")
      throw ParseError("line " + std::to_string(line_no) + ": done must be 0 or 1",
                       line_no);
    tr.done = done == "1";
    d.transitions.push_back(std::move(tr));
  }
  if (d.transitions.empty())
    throw ParseError("line " + std::to_string(line_no) + ": dataset has no rows",
                     line_no);

  for (size_t i = 0; i < d.transitions.size(); ++i) {
    Transition& tr = d.transitions[i];
    const bool has_successor = i + 1 < d.transitions.size() &&
                               d.transitions[i + 1].ep == tr.ep &&
                               d.transitions[i + 1].t == tr.t + 1 && !tr.done;
    tr.s_next = has_successor ? d.transitions[i + 1].s
                              : env_step(env, tr.s, tr.a).s_next;
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_dataset_csv(os, d);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_dataset_csv(is);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

}  // namespace pnfrl

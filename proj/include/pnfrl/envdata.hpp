#ifndef PNFRL_ENVDATA_HPP_
#define PNFRL_ENVDATA_HPP_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pnfrl/rng.hpp"

namespace pnfrl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, size_t line)
      : std::runtime_error(what), line_(line) {}
  size_t line() const { return line_; }

 private:
  size_t line_;
};

// kCustom carries externally supplied data (e.g. synthetic systems in
// tests); it has no ground-truth step function.
enum class EnvKind { kPointMaze, kPendulum, kCustom };

struct EnvSpec {
  EnvKind kind = EnvKind::kCustom;
  std::string name;
  size_t state_dim = 0;
  size_t action_dim = 0;
  int horizon = 1;
  double random_return = 0.0;
  double expert_return = 1.0;

  bool operator==(const EnvSpec&) const = default;
};

// Built-in environments. Reference returns are computed on first use from
// 20 episodes of the uniform-random policy and of the built-in expert.
EnvSpec point_maze_spec();
EnvSpec pendulum_spec();
EnvSpec custom_spec(size_t state_dim, size_t action_dim);
EnvSpec env_by_name(std::string_view name);

struct StepResult {
  std::vector<double> s_next;
  double r = 0.0;
  bool done = false;
};

// Ground-truth dynamics. The action is clipped to [-1, 1] before use.
//  point_maze: s = (x, y, vx, vy), planar double integrator (dt 0.1) inside
//    [-1, 1]^2 with a wall block; reward -|p' - goal|, done within 0.1 of goal.
//  pendulum: s = (cos th, sin th, w), th = 0 upright; reward
//    -(th^2 + 0.1 w^2 + 0.001 a^2), never done.
StepResult env_step(const EnvSpec& spec, std::span<const double> s,
                    std::span<const double> a);

std::vector<double> env_reset(const EnvSpec& spec, Rng& rng);

// Built-in proportional controller; the "expert" reference policy.
std::vector<double> expert_action(const EnvSpec& spec,
                                  std::span<const double> s);

// True if the maze position (x, y) is outside the wall block and the arena.
bool maze_position_free(double x, double y);
std::pair<double, double> maze_goal();

struct Transition {
  int ep = 0;
  int t = 0;
  std::vector<double> s;
  std::vector<double> a;
  double r = 0.0;
  std::vector<double> s_next;
  bool done = false;

  bool operator==(const Transition&) const = default;
};

struct Dataset {
  EnvSpec env;
  std::vector<Transition> transitions;
  // behavior policy and seed, e.g. "medium/seed=3"
  std::string source;
  // behavior tag per episode id ("random" or "medium"); empty when loaded
  // from a file
  std::vector<std::string> episode_sources;

  size_t size() const { return transitions.size(); }
  // compares env and transitions; provenance fields are not persisted
  bool operator==(const Dataset& other) const {
    return env == other.env && transitions == other.transitions;
  }
};

enum class Behavior { kRandom, kMedium, kReplayMix };

Behavior parse_behavior(std::string_view tag);
std::string behavior_name(Behavior b);

// Episodes with the named behavior until exactly n_transitions are
// collected. random: uniform actions; medium: expert plus N(0, 0.3^2)
// action noise; replay_mix: alternating random and medium episodes.
Dataset generate_dataset(const EnvSpec& spec, Behavior behavior,
                         size_t n_transitions, uint64_t seed);

// Shuffled disjoint split; the first part holds floor(n * (1 - val_fraction)).
std::pair<Dataset, Dataset> split_train_val(const Dataset& d,
                                            double val_fraction,
                                            uint64_t seed);

// Uniform with replacement.
std::vector<Transition> sample_batch(const Dataset& d, size_t n, Rng& rng);
std::vector<size_t> sample_indices(size_t population, size_t n, Rng& rng);

// First ceil(fraction * n) transitions, cut by transition index.
Dataset dataset_prefix(const Dataset& d, double fraction);

double normalized_score(double mean_return, const EnvSpec& spec);

// Sum of rewards per episode id, in order of first appearance.
std::vector<double> episode_returns(const Dataset& d);

// CSV with header ep,t,s0..s{dS-1},a0..a{dA-1},r,done. s_next is recovered
// from the following row of the same episode, or from the ground-truth step
// for the last stored row of an episode, so only built-in environments can
// be loaded.
void write_dataset_csv(std::ostream& os, const Dataset& d);
Dataset read_dataset_csv(std::istream& is);
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace pnfrl

#endif  // PNFRL_ENVDATA_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "pnfrl/envdata.hpp"

using namespace pnfrl;

namespace {

double mean_return(const Dataset& d) {
  const auto r = episode_returns(d);
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

}  // namespace

TEST_SUITE("envdata") {

TEST_CASE("maze: standing on the goal is done") {
  const EnvSpec maze = point_maze_spec();
  const auto [gx, gy] = maze_goal();
  const std::vector<double> s = {gx, gy, 0.0, 0.0};
  const auto step = env_step(maze, s, std::vector<double>{0.0, 0.0});
  CHECK(step.done);
  CHECK(step.r <= 0.0);
  CHECK(step.r >= -0.1);
}

TEST_CASE("pendulum: upright at rest is a fixed point") {
  const EnvSpec pend = pendulum_spec();
  const std::vector<double> s = {1.0, 0.0, 0.0};
  const auto step = env_step(pend, s, std::vector<double>{0.0});
  CHECK(step.s_next == s);
  CHECK(step.r == 0.0);
  CHECK_FALSE(step.done);
}

TEST_CASE("maze: one step of a = (1, 0) matches hand integration") {
  const EnvSpec maze = point_maze_spec();
  // mid corridor above the wall block, moving
  const double x = -0.5, y = 0.6, vx = 0.3, vy = -0.2, dt = 0.1;
  const auto step = env_step(maze, std::vector<double>{x, y, vx, vy},
                             std::vector<double>{1.0, 0.0});
  // x(t+dt) = x + vx dt + a dt^2 / 2, v(t+dt) = v + a dt
  CHECK(step.s_next[0] == doctest::Approx(x + vx * dt + 0.5 * dt * dt).epsilon(1e-14));
  CHECK(step.s_next[1] == doctest::Approx(y + vy * dt).epsilon(1e-14));
  CHECK(step.s_next[2] == doctest::Approx(vx + dt).epsilon(1e-14));
  CHECK(step.s_next[3] == doctest::Approx(vy).epsilon(1e-14));
  const double dist = std::hypot(step.s_next[0] - 0.7, step.s_next[1] - 0.7);
  CHECK(step.r == doctest::Approx(-dist).epsilon(1e-14));
}

TEST_CASE("maze: actions are clipped before integration") {
  const EnvSpec maze = point_maze_spec();
  const std::vector<double> s = {-0.5, 0.6, 0.0, 0.0};
  CHECK(env_step(maze, s, std::vector<double>{5.0, -7.0}).s_next ==
        env_step(maze, s, std::vector<double>{1.0, -1.0}).s_next);
}

TEST_CASE("maze: positions never enter the wall") {
  const EnvSpec maze = point_maze_spec();
  Rng rng(17);
  for (int i = 0; i < 20000; ++i) {
    double x, y;
    do {
      x = rng.uniform(-1.0, 1.0);
      y = rng.uniform(-1.0, 1.0);
    } while (!maze_position_free(x, y));
    const std::vector<double> s = {x, y, rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
    const std::vector<double> a = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    const auto step = env_step(maze, s, a);
    REQUIRE(maze_position_free(step.s_next[0], step.s_next[1]));
  }
}

TEST_CASE("non-finite states are rejected") {
  const EnvSpec maze = point_maze_spec();
  CHECK_THROWS(env_step(maze, std::vector<double>{NAN, 0, 0, 0}, std::vector<double>{0, 0}));
}

TEST_CASE("reference returns are ordered") {
  for (const EnvSpec& spec : {point_maze_spec(), pendulum_spec()}) {
    CHECK(spec.expert_return > spec.random_return);
    CHECK(spec.state_dim >= 1);
    CHECK(spec.action_dim >= 1);
  }
}

TEST_CASE("generate_dataset: exact size, determinism, unknown tag") {
  const EnvSpec maze = point_maze_spec();
  const Dataset one = generate_dataset(maze, Behavior::kMedium, 1, 3);
  CHECK(one.size() == 1);
  const Dataset a = generate_dataset(maze, Behavior::kReplayMix, 777, 5);
  const Dataset b = generate_dataset(maze, Behavior::kReplayMix, 777, 5);
  CHECK(a.size() == 777);
  CHECK(a == b);
  CHECK_THROWS_AS(parse_behavior("expert-ish"), ConfigError);
}

TEST_CASE("transitions respect action bounds and are finite") {
  const Dataset d = generate_dataset(pendulum_spec(), Behavior::kMedium, 2000, 2);
  for (const auto& t : d.transitions) {
    for (double v : t.a) CHECK(std::abs(v) <= 1.0);
    CHECK(std::isfinite(t.r));
  }
}

TEST_CASE("medium data beats random data on point_maze, 5 seeds") {
  const EnvSpec maze = point_maze_spec();
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const double med = mean_return(generate_dataset(maze, Behavior::kMedium, 10000, seed));
    const double rnd = mean_return(generate_dataset(maze, Behavior::kRandom, 10000, seed));
    CHECK(med > rnd);
  }
}

TEST_CASE("replay_mix carries both behaviors") {
  const Dataset d = generate_dataset(point_maze_spec(), Behavior::kReplayMix, 3000, 1);
  std::set<std::string> tags(d.episode_sources.begin(), d.episode_sources.end());
  CHECK(tags.count("random") == 1);
  CHECK(tags.count("medium") == 1);
}

TEST_CASE("split_train_val") {
  Dataset d = generate_dataset(point_maze_spec(), Behavior::kRandom, 10, 0);
  auto [tr, val] = split_train_val(d, 0.2, 4);
  CHECK(tr.size() == 8);
  CHECK(val.size() == 2);
  auto key = [](const Transition& t) { return std::make_pair(t.ep, t.t); };
  std::multiset<std::pair<int, int>> all, parts;
  for (const auto& t : d.transitions) all.insert(key(t));
  for (const auto& t : tr.transitions) parts.insert(key(t));
  for (const auto& t : val.transitions) parts.insert(key(t));
  CHECK(all == parts);
  auto [tr2, val2] = split_train_val(d, 0.2, 4);
  CHECK(tr2 == tr);
  CHECK(val2 == val);
  Dataset tiny = generate_dataset(point_maze_spec(), Behavior::kRandom, 1, 0);
  CHECK_THROWS(split_train_val(tiny, 0.1, 0));
}

TEST_CASE("sample_batch") {
  Dataset single = generate_dataset(point_maze_spec(), Behavior::kRandom, 1, 0);
  Rng rng(1);
  const auto b = sample_batch(single, 1, rng);
  CHECK(b.front() == single.transitions.front());

  Dataset four = generate_dataset(point_maze_spec(), Behavior::kRandom, 4, 0);
  Rng r1(9), r2(9);
  CHECK(sample_batch(four, 50, r1) == sample_batch(four, 50, r2));

  Rng rng2(123);
  const auto idx = sample_indices(4, 100000, rng2);
  std::vector<double> counts(4, 0.0);
  for (size_t i : idx) counts[i] += 1.0;
  for (double c : counts) CHECK(std::abs(c / 100000.0 - 0.25) <= 0.01);
}

TEST_CASE("normalized_score") {
  EnvSpec spec = custom_spec(1, 1);
  spec.random_return = 0.0;
  spec.expert_return = 10.0;
  CHECK(normalized_score(7.0, spec) == doctest::Approx(70.0));
  CHECK(normalized_score(0.0, spec) == 0.0);
  CHECK(normalized_score(10.0, spec) == doctest::Approx(100.0));
  const EnvSpec maze = point_maze_spec();
  CHECK(normalized_score(maze.random_return, maze) == 0.0);
  CHECK(normalized_score(maze.expert_return, maze) == doctest::Approx(100.0));
  spec.expert_return = spec.random_return;
  CHECK_THROWS(normalized_score(1.0, spec));
}

TEST_CASE("dataset CSV round trip is exact") {
  for (const EnvSpec& spec : {point_maze_spec(), pendulum_spec()}) {
    const Dataset d = generate_dataset(spec, Behavior::kReplayMix, 700, 8);
    std::stringstream ss;
    write_dataset_csv(ss, d);
    CHECK(read_dataset_csv(ss) == d);
  }
  const Dataset d = generate_dataset(point_maze_spec(), Behavior::kMedium, 50, 2);
  const auto dir = testutil::temp_dir("csv");
  save_dataset(dir / "d.csv", d);
  CHECK(load_dataset(dir / "d.csv") == d);
}

TEST_CASE("dataset CSV header is fixed") {
  const Dataset d = generate_dataset(point_maze_spec(), Behavior::kMedium, 3, 2);
  std::stringstream ss;
  write_dataset_csv(ss, d);
  std::string header;
  std::getline(ss, header);
  CHECK(header == "ep,t,s0,s1,s2,s3,a0,a1,r,done");
}

TEST_CASE("malformed CSV errors name the line") {
  std::stringstream empty("");
  CHECK_THROWS_AS(read_dataset_csv(empty), ParseError);
  std::stringstream bad(
      "ep,t,s0,s1,s2,a0,r,done\n"
      "0,0,1,0,0,0.1,-0.5,0\n"
      "0,1,1,0,0,0.1,-0.5\n");
  try {
    read_dataset_csv(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::stringstream header_only("ep,t,s0,s1,s2,a0,r,done\n");
  CHECK_THROWS_AS(read_dataset_csv(header_only), ParseError);
}

TEST_CASE("dataset_prefix keeps the leading transitions") {
  const Dataset d = generate_dataset(point_maze_spec(), Behavior::kMedium, 101, 2);
  const Dataset p = dataset_prefix(d, 0.1);
  CHECK(p.size() == 11);
  for (size_t i = 0; i < p.size(); ++i) CHECK(p.transitions[i] == d.transitions[i]);
}

}  // TEST_SUITE

#include <sstream>

#include "doctest.h"
#include "pnfrl/config.hpp"

using namespace pnfrl;

TEST_SUITE("config") {

TEST_CASE("parse sets fields and ignores comments") {
  std::stringstream ss(
      "# tiny run\n"
      "H = 3\n"
      "f_aug = 0.25   # quarter\n"
      "\n"
      "beta=2.5\n"
      "hidden = 32, 16\n"
      "mode = random\n"
      "sign = pos_only\n"
      "uncertainty_mode = std_of_means\n"
      "rollout_policy = uniform\n"
      "model_parallel = false\n");
  const TrainCfg cfg = parse_config(ss);
  CHECK(cfg.H == 3);
  CHECK(cfg.f_aug == 0.25);
  CHECK(cfg.combo.beta == 2.5);
  CHECK(cfg.combo.hidden == std::vector<size_t>{32, 16});
  CHECK(cfg.pnf.mode == PerturbMode::kRandom);
  CHECK(cfg.pnf.sign == StepSign::kPosOnly);
  CHECK(cfg.pnf.uncertainty_mode == UncertaintyMode::kStdOfMeans);
  CHECK(cfg.rollout_policy == RolloutPolicy::kUniform);
  CHECK_FALSE(cfg.model.parallel);
  CHECK(cfg.n_start == TrainCfg{}.n_start);
}

TEST_CASE("errors name the line") {
  std::stringstream unknown("H = 2\nwarp_factor = 9\n");
  try {
    parse_config(unknown);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("warp_factor") != std::string::npos);
  }
  std::stringstream bad_number("beta = lots\n");
  CHECK_THROWS_AS(parse_config(bad_number), ConfigError);
  std::stringstream no_eq("beta 5\n");
  CHECK_THROWS_AS(parse_config(no_eq), ConfigError);
  std::stringstream derived("n_aug = 5\n");
  CHECK_THROWS_AS(parse_config(derived), ConfigError);
}

TEST_CASE("dump then parse reproduces the config") {
  TrainCfg cfg;
  cfg.H = 7;
  cfg.f_aug = 0.1 + 0.2;
  cfg.seed = 123456789012345ULL;
  cfg.combo.hidden = {5, 6, 7};
  cfg.pnf.delta_max = 3e-4;
  cfg.model.n_members = 4;
  cfg.trace = true;
  const std::string text = dump_config(cfg);
  std::stringstream ss(text);
  const TrainCfg back = parse_config(ss);
  CHECK(dump_config(back) == text);
  CHECK(back.f_aug == cfg.f_aug);
  CHECK(back.seed == cfg.seed);
}

}  // TEST_SUITE

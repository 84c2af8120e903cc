#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pnfrl/analysis.hpp"
#include "pnfrl/config.hpp"
#include "pnfrl/trainer.hpp"

namespace fs = std::filesystem;
using namespace pnfrl;

namespace {

TrainCfg build_config(const std::string& config_path,
                      const std::vector<std::string>& overrides) {
  TrainCfg cfg;
  if (!config_path.empty()) cfg = load_config(config_path, cfg);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pnfrl: model-based offline RL with perturb-and-filter start states"};
  app.require_subcommand(1);

  // gen-data
  std::string env_name = "point_maze", behavior = "medium", data_out;
  size_t n_transitions = 20000;
  uint64_t data_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "roll a behavior policy into a dataset CSV");
  gen->add_option("--env", env_name, "point_maze or pendulum")->capture_default_str();
  gen->add_option("--behavior", behavior, "random, medium or replay_mix")->capture_default_str();
  gen->add_option("-n,--transitions", n_transitions)->capture_default_str();
  gen->add_option("--seed", data_seed)->capture_default_str();
  gen->add_option("-o,--out", data_out)->required();

  // fit-model
  std::string fit_data, fit_out, fit_config;
  std::vector<std::string> fit_set;
  auto* fit = app.add_subcommand("fit-model", "fit the dynamics ensemble on a dataset");
  fit->add_option("--data", fit_data)->required()->check(CLI::ExistingFile);
  fit->add_option("-o,--out", fit_out)->required();
  fit->add_option("--config", fit_config)->check(CLI::ExistingFile);
  fit->add_option("--set", fit_set, "key=value config override");

  // train
  std::string train_data, train_out, train_config, train_model;
  std::vector<std::string> train_set;
  bool train_baseline = false;
  auto* train = app.add_subcommand("train", "fit (or load) the model and train the agent");
  train->add_option("--data", train_data)->required()->check(CLI::ExistingFile);
  train->add_option("-o,--out", train_out)->required();
  train->add_option("--config", train_config)->check(CLI::ExistingFile);
  train->add_option("--set", train_set, "key=value config override");
  train->add_option("--model", train_model, "reuse a fitted ensemble directory")
      ->check(CLI::ExistingDirectory);
  train->add_flag("--baseline", train_baseline, "run the plain COMBO loop");

  // eval
  std::string eval_agent, eval_env = "point_maze";
  int eval_episodes = 20;
  uint64_t eval_seed = 0;
  bool eval_expert = false;
  auto* eval = app.add_subcommand("eval", "evaluate a saved agent on the true environment");
  eval->add_option("--agent", eval_agent, "agent directory")->check(CLI::ExistingDirectory);
  eval->add_option("--env", eval_env)->capture_default_str();
  eval->add_option("--episodes", eval_episodes)->capture_default_str();
  eval->add_option("--seed", eval_seed)->capture_default_str();
  eval->add_flag("--expert", eval_expert, "evaluate the built-in controller instead");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "diagnostic tables and histograms");
  analyze->require_subcommand(1);

  std::string nn_queries, nn_data, nn_out, nn_distances;
  size_t nn_bins = 50;
  bool nn_normalized = false;
  auto* nn = analyze->add_subcommand("nn-dist", "nearest-neighbor distances to dataset states");
  nn->add_option("--queries", nn_queries, "state-action CSV (e.g. rollouts.csv)")
      ->required()->check(CLI::ExistingFile);
  nn->add_option("--data", nn_data)->required()->check(CLI::ExistingFile);
  nn->add_option("--bins", nn_bins)->capture_default_str();
  nn->add_flag("--normalized", nn_normalized, "divide by per-dimension dataset std");
  nn->add_option("-o,--out", nn_out, "histogram JSON")->required();
  nn->add_option("--distances", nn_distances, "optional CSV of raw distances");

  std::string ue_model, ue_data, ue_queries, ue_out;
  auto* ue = analyze->add_subcommand("unc-err", "uncertainty vs true model error table");
  ue->add_option("--model", ue_model)->required()->check(CLI::ExistingDirectory);
  ue->add_option("--data", ue_data, "dataset defining the quantile band")
      ->required()->check(CLI::ExistingFile);
  ue->add_option("--queries", ue_queries, "state-action CSV")->required()->check(CLI::ExistingFile);
  ue->add_option("-o,--out", ue_out)->required();

  std::vector<std::string> cmp_base, cmp_treat;
  size_t cmp_last_k = 10;
  std::string cmp_out;
  auto* cmp = analyze->add_subcommand("compare", "paired comparison of metrics files");
  cmp->add_option("--baseline", cmp_base)->required()->check(CLI::ExistingFile);
  cmp->add_option("--treatment", cmp_treat)->required()->check(CLI::ExistingFile);
  cmp->add_option("--last-k", cmp_last_k)->capture_default_str();
  cmp->add_option("-o,--out", cmp_out, "CSV output (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const Dataset d = generate_dataset(env_by_name(env_name), parse_behavior(behavior),
                                         n_transitions, data_seed);
      save_dataset(data_out, d);
      const auto returns = episode_returns(d);
      double mean = 0.0;
      for (double r : returns) mean += r;
      mean /= static_cast<double>(returns.size());
      std::printf("%zu transitions, %zu episodes, mean return %.4f (score %.2f)\n",
                  d.size(), returns.size(), mean, normalized_score(mean, d.env));
    } else if (*fit) {
      const TrainCfg cfg = build_config(fit_config, fit_set);
      const Dataset d = load_dataset(fit_data);
      const Rng root(cfg.seed);
      auto [tr, val] = split_train_val(d, cfg.val_fraction, root.split("split").next());
      EnsembleCfg mcfg = cfg.model;
      mcfg.seed = root.split("model").next();
      const EnsembleFit res = fit_ensemble(tr, val, mcfg);
      save_ensemble(fit_out, res.model);
      for (size_t i = 0; i < res.reports.size(); ++i)
        std::printf("member %zu: %d epochs, best val nll %.5f at epoch %d\n", i,
                    res.reports[i].epochs_run, res.reports[i].best_val_nll,
                    res.reports[i].best_epoch);
    } else if (*train) {
      const TrainCfg cfg = build_config(train_config, train_set);
      std::optional<fs::path> model;
      if (!train_model.empty()) model = train_model;
      const RunArtifacts art = run(cfg, train_data, train_out, model, train_baseline);
      if (!art.history.empty()) {
        const auto& last = art.history.back();
        std::printf("%zu epochs, final adq %.5f, score %.2f\n", art.history.size(),
                    last.adq, last.score);
      }
      std::printf("metrics: %s\n", art.metrics.string().c_str());
    } else if (*eval) {
      const EnvSpec spec = env_by_name(eval_env);
      EvalResult res;
      if (eval_expert) {
        res = evaluate_controller(
            spec, [&spec](std::span<const double> s) { return expert_action(spec, s); },
            eval_episodes, eval_seed);
      } else {
        if (eval_agent.empty()) throw std::runtime_error("eval needs --agent or --expert");
        const ConservativeAgent agent = load_agent(eval_agent, ComboCfg{});
        if (agent.state_dim != spec.state_dim || agent.action_dim != spec.action_dim)
          throw std::runtime_error("agent dimensions do not match env " + eval_env);
        res = evaluate_policy(spec, agent, eval_episodes, eval_seed);
      }
      std::printf("mean return %.6f, normalized score %.3f\n", res.mean_return, res.score);
    } else if (*nn) {
      const StateActions q = load_state_actions(nn_queries);
      const Dataset d = load_dataset(nn_data);
      const auto dist = nn_l2_distances(q.states, d, nn_normalized);
      auto os = open_out(nn_out);
      const HistogramSpec h = histogram(dist, nn_bins);
      os << histogram_json(h) << '\n';
      if (!nn_distances.empty()) {
        auto ds = open_out(nn_distances);
        ds << "distance\n";
        char buf[32];
        for (double v : dist) {
          std::snprintf(buf, sizeof(buf), "%.17g", v);
          ds << buf << '\n';
        }
      }
      std::printf("%zu queries, median distance %.6g\n", dist.size(), h.median);
    } else if (*ue) {
      const DynamicsEnsemble model = load_ensemble(ue_model);
      const Dataset d = load_dataset(ue_data);
      const StateActions q = load_state_actions(ue_queries);
      const UncertaintyBand band = dataset_uncertainty_band(model, d);
      const auto rows = uncertainty_error_table(model, d.env, q.states, q.actions, band);
      auto os = open_out(ue_out);
      write_uncertainty_error_csv(os, rows);
      std::printf("band (%.6g, %.6g), %zu rows\n", band.u_low, band.u_high, rows.size());
    } else if (*cmp) {
      std::vector<fs::path> b(cmp_base.begin(), cmp_base.end());
      std::vector<fs::path> t(cmp_treat.begin(), cmp_treat.end());
      const RunComparison res = compare_runs(b, t, cmp_last_k);
      if (cmp_out.empty()) {
        write_comparison_csv(std::cout, res);
      } else {
        auto os = open_out(cmp_out);
        write_comparison_csv(os, res);
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

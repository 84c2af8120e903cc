#ifndef PNFRL_TRAINER_HPP_
#define PNFRL_TRAINER_HPP_

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pnfrl/agent.hpp"
#include "pnfrl/ensemble.hpp"
#include "pnfrl/envdata.hpp"
#include "pnfrl/pnf.hpp"
#include "pnfrl/rng.hpp"

namespace pnfrl {

enum class RolloutPolicy { kCurrentPi, kUniform };

RolloutPolicy parse_rollout_policy(std::string_view name);
std::string rollout_policy_name(RolloutPolicy p);

struct TrainCfg {
  int H = 5;
  size_t n_start = 256;
  double f_aug = 0.5;
  int n_epochs = 50;
  int steps_per_epoch = 200;
  RolloutPolicy rollout_policy = RolloutPolicy::kCurrentPi;
  uint64_t seed = 0;
  ComboCfg combo;
  PnfCfg pnf;
  EnsembleCfg model;

  double val_fraction = 0.1;
  // dataset pairs averaged for the per-epoch ADQ metric
  size_t adq_samples = 1000;
  int eval_episodes = 5;
  // 0 means 20 * n_start * H
  size_t buffer_capacity = 0;
  // leading fraction of the dataset to train on (cut by transition index)
  double dataset_fraction = 1.0;
  bool trace = false;
  // write every model-rollout (s, a) pair to rollouts.csv
  bool dump_rollouts = false;

  size_t n_aug() const;
  size_t capacity() const;
  void validate() const;
};

// Bounded FIFO of model-generated transitions.
class RolloutBuffer {
 public:
  explicit RolloutBuffer(size_t capacity = 1);

  void push(std::vector<Transition> transitions);
  std::vector<Transition> sample(size_t n, Rng& rng) const;
  size_t size() const { return items_.size(); }
  size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const std::deque<Transition>& items() const { return items_; }

 private:
  size_t capacity_;
  std::deque<Transition> items_;
};

struct RolloutStats {
  size_t emitted = 0;
  size_t truncated_branches = 0;
};

// H model steps from every start; no termination inside the model. A branch
// whose model output is non-finite is cut at that step.
std::vector<Transition> branched_rollout(const DynamicsEnsemble& model,
                                         const ConservativeAgent& agent,
                                         const Tensor& starts, int H,
                                         RolloutPolicy policy, Rng& rng,
                                         RolloutStats* stats = nullptr);

struct StartBatch {
  Tensor states;
  std::vector<size_t> replaced_slots;
  bool pnf_called = false;
  PnfResult pnf;
};

// n_start dataset states; floor(f_aug * n_start) uniformly chosen slots are
// overwritten with augmented states (original kept where PnF falls short).
// Draws from start_rng for the dataset sample and from pnf_rng for
// everything augmentation-related.
StartBatch start_state_batch(const Dataset& dataset,
                             const ConservativeAgent& agent,
                             const DynamicsEnsemble& model,
                             const TrainCfg& cfg, Rng& start_rng, Rng& pnf_rng,
                             bool record_trace = false);

struct EpochMetrics {
  int epoch = 0;
  double adq = 0.0;
  double td_loss = 0.0;
  double cql_loss = 0.0;
  double actor_loss = 0.0;
  double score = 0.0;
  double pnf_accept_rate = 0.0;
  size_t pnf_shortfalls = 0;

  // extra rollout diagnostics, not written to the metrics stream
  size_t rollout_transitions = 0;
  size_t truncated_branches = 0;
  size_t pnf_calls = 0;
  size_t replaced_slots = 0;
};

// One JSON object: epoch, adq, td_loss, cql_loss, actor_loss, score,
// pnf_accept_rate, pnf_shortfalls.
std::string metrics_json(const EpochMetrics& m);

struct EvalResult {
  double mean_return = 0.0;
  double score = 0.0;
  std::vector<double> returns;
};

using Controller = std::function<std::vector<double>(std::span<const double>)>;

// Episodes on the ground-truth environment with a deterministic controller.
EvalResult evaluate_controller(const EnvSpec& spec, const Controller& policy,
                               int n_episodes, uint64_t seed);
// Mean-action policy.
EvalResult evaluate_policy(const EnvSpec& spec, const ConservativeAgent& agent,
                           int n_episodes, uint64_t seed);

// Everything the epoch loop owns.
struct TrainState {
  const Dataset* dataset = nullptr;
  const DynamicsEnsemble* model = nullptr;
  ConservativeAgent agent;
  RolloutBuffer buffer;
  Rng root;
  int epoch = 0;
  std::ostream* trace = nullptr;  // PnF chain records
  std::ostream* rollouts = nullptr;
};

TrainState make_train_state(const Dataset& dataset,
                            const DynamicsEnsemble& model, const TrainCfg& cfg);

// refresh rollouts from (possibly augmented) start states, then
// steps_per_epoch critic + actor updates
EpochMetrics train_epoch(TrainState& state, const TrainCfg& cfg);

// The augmented loop for n_epochs; each metrics line is written to
// metrics_out when given.
std::vector<EpochMetrics> train_loop(TrainState& state, const TrainCfg& cfg,
                                     std::ostream* metrics_out);

// The un-augmented loop, written without any reference to the augmentation
// path. Given f_aug = 0 it must produce the same metrics as train_loop.
std::vector<EpochMetrics> baseline_loop(TrainState& state, const TrainCfg& cfg,
                                        std::ostream* metrics_out);

struct RunArtifacts {
  std::filesystem::path model_dir;
  std::filesystem::path agent_dir;
  std::filesystem::path metrics;
  std::optional<std::filesystem::path> trace;
  std::optional<std::filesystem::path> rollouts;
  std::vector<EpochMetrics> history;
};

// Load data, fit (or load) the ensemble, train, and write everything under
// out_dir: model/, agent/, metrics.jsonl and optionally pnf_trace.jsonl and
// rollouts.csv.
RunArtifacts run(const TrainCfg& cfg, const std::filesystem::path& dataset_path,
                 const std::filesystem::path& out_dir,
                 const std::optional<std::filesystem::path>& model_dir = {},
                 bool baseline = false);

}  // namespace pnfrl

#endif  // PNFRL_TRAINER_HPP_

#ifndef PNFRL_AGENT_HPP_
#define PNFRL_AGENT_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "pnfrl/diffcore.hpp"
#include "pnfrl/envdata.hpp"
#include "pnfrl/rng.hpp"

namespace pnfrl {

// Conservative critic objective L_TD + beta * L_CQL, with the TD batch drawn
// from the mixture f * dataset + (1 - f) * model rollouts.
struct ComboCfg {
  double beta = 5.0;
  double gamma = 0.99;
  double f = 0.5;
  double tau = 0.005;
  // initial entropy coefficient; tuned toward target entropy -dA when
  // auto_alpha is set
  double alpha = 1.0;
  bool auto_alpha = true;
  size_t td_batch = 256;
  size_t dataset_batch = 256;
  size_t model_batch = 256;
  double critic_lr = 3e-4;
  double actor_lr = 3e-4;
  double alpha_lr = 3e-4;
  std::vector<size_t> hidden = {256, 256};

  // throws ConfigError on out-of-range values
  void validate() const;
};

struct ScalarAdam {
  double m = 0.0;
  double v = 0.0;
  long step = 0;
  double lr = 3e-4;

  double update(double param, double grad);
};

struct ConservativeAgent {
  static constexpr double kMinLogStd = -20.0;
  static constexpr double kMaxLogStd = 2.0;

  size_t state_dim = 0;
  size_t action_dim = 0;
  MlpParams q1, q2;                // (s, a) -> Q
  MlpParams q1_target, q2_target;  // polyak copies
  MlpParams policy;                // s -> (mean, log std) before tanh squash
  AdamState q1_opt, q2_opt, policy_opt;
  double log_alpha = 0.0;
  ScalarAdam alpha_opt;
  double target_entropy = -1.0;

  double alpha() const;
};

ConservativeAgent make_agent(size_t state_dim, size_t action_dim,
                             const ComboCfg& cfg, uint64_t seed);

// Zeroes the final critic layers (and targets) so Q is identically 0.
void zero_critics(ConservativeAgent& agent);

enum class QHead { kQ1, kMin };

// [s, a] critic inputs
Tensor critic_inputs(const Tensor& states, const Tensor& actions);

std::vector<double> q_values(const ConservativeAgent& agent,
                             const Tensor& states, const Tensor& actions,
                             QHead head = QHead::kQ1);
double q_value(const ConservativeAgent& agent, std::span<const double> s,
               std::span<const double> a, QHead head = QHead::kQ1);

// Squashed-Gaussian policy pass. With noise == nullptr the pre-squash value
// is the mean (deterministic action).
struct PolicyForward {
  MlpTape tape;
  Tensor mean;         // [B, dA] pre-squash mean
  Tensor log_std;      // [B, dA], clamped
  Tensor raw_log_std;  // [B, dA], before clamping
  Tensor noise;        // [B, dA] standard normal draws (zero if deterministic)
  Tensor action;       // tanh(mean + std * noise)
  std::vector<double> log_prob;
};

PolicyForward policy_forward(const MlpParams& policy, const Tensor& states,
                             Rng* rng);
Tensor policy_mean_action(const ConservativeAgent& agent, const Tensor& states);
Tensor policy_sample_action(const ConservativeAgent& agent,
                            const Tensor& states, Rng& rng);

// Each of the n output slots comes from dataset_batch with probability f,
// otherwise from model_batch (slot i takes element i modulo batch size).
std::vector<Transition> mix_batches(const std::vector<Transition>& dataset_batch,
                                    const std::vector<Transition>& model_batch,
                                    double f, size_t n, Rng& rng);

// Mean squared Bellman error against the min of the target critics with one
// policy sample per s'; terminal transitions drop the bootstrap. Averaged
// over both critics.
double td_loss(const ConservativeAgent& agent,
               const std::vector<Transition>& batch, double gamma, Rng& rng);

// mean Q over (model states, given actions) minus mean Q over dataset pairs,
// averaged over both critics
double cql_loss(const ConservativeAgent& agent, const Tensor& model_states,
                const Tensor& model_actions,
                const std::vector<Transition>& dataset_batch);
// same, with actions sampled from the policy on the model states
double cql_loss(const ConservativeAgent& agent,
                const std::vector<Transition>& model_batch,
                const std::vector<Transition>& dataset_batch, Rng& rng);

struct CriticGradients {
  MlpParams td_q1, td_q2;
  MlpParams cql_q1, cql_q2;
  double td_loss = 0.0;
  double cql_loss = 0.0;
};

// Gradients of the two loss components separately, without applying them.
CriticGradients critic_gradients(const ConservativeAgent& agent,
                                 const std::vector<Transition>& dataset_batch,
                                 const std::vector<Transition>& model_batch,
                                 const ComboCfg& cfg, Rng& rng);

struct CriticMetrics {
  double td_loss = 0.0;
  double cql_loss = 0.0;
  double total_loss = 0.0;
};

// One Adam step on L_TD(mix) + beta * L_CQL for both critics, then polyak.
CriticMetrics critic_update(ConservativeAgent& agent,
                            const std::vector<Transition>& dataset_batch,
                            const std::vector<Transition>& model_batch,
                            const ComboCfg& cfg, Rng& rng);

// Plain TD step on exactly the given batch (no mixing, no CQL term). Uses
// the same random substreams as critic_update, so critic_update with
// beta = 0 and f = 1 matches it bit for bit.
CriticMetrics td_update(ConservativeAgent& agent,
                        const std::vector<Transition>& batch,
                        const ComboCfg& cfg, Rng& rng);

struct ActorMetrics {
  double actor_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;
};

// Q values and dQ/da for a batch of (s, a).
using CriticFn = std::function<void(const Tensor& states, const Tensor& actions,
                                    std::vector<double>& q, Tensor& dq_da)>;

CriticFn min_critic_fn(const ConservativeAgent& agent);

// Policy gradient of E[alpha log pi(a|s) - Q(s, a)] with reparameterized
// actions, without applying it.
struct ActorGradient {
  MlpParams grad;
  double loss = 0.0;
  double mean_log_prob = 0.0;
};
ActorGradient actor_gradient(const ConservativeAgent& agent,
                             const Tensor& states, const CriticFn& critic,
                             Rng& rng);

// One Adam step maximizing E[minQ(s, a~) - alpha log pi(a~|s)] on the given
// states, then the entropy coefficient step when auto_alpha is set.
ActorMetrics actor_update(ConservativeAgent& agent, const Tensor& states,
                          const ComboCfg& cfg, Rng& rng);
ActorMetrics actor_update(ConservativeAgent& agent, const Tensor& states,
                          const ComboCfg& cfg, const CriticFn& critic,
                          Rng& rng);

// Mean Q1 over n_sample dataset (s, a) pairs drawn uniformly with
// replacement.
double average_dataset_q(const ConservativeAgent& agent, const Dataset& d,
                         size_t n_sample, Rng& rng);
// Mean Q1 over every dataset pair.
double full_dataset_q(const ConservativeAgent& agent, const Dataset& d);

// q1/q2/targets/policy checkpoints plus combo.txt (key = value manifest).
// Optimizer moments are not persisted.
void save_agent(const std::filesystem::path& dir, const ConservativeAgent& agent,
                const ComboCfg& cfg);
ConservativeAgent load_agent(const std::filesystem::path& dir,
                             const ComboCfg& cfg);

}  // namespace pnfrl

#endif  // PNFRL_AGENT_HPP_

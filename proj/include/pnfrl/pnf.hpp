#ifndef PNFRL_PNF_HPP_
#define PNFRL_PNF_HPP_

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pnfrl/agent.hpp"
#include "pnfrl/diffcore.hpp"
#include "pnfrl/ensemble.hpp"
#include "pnfrl/rng.hpp"

namespace pnfrl {

// Perturb-and-filter augmentation of start states: propose unseen states by
// stepping along the state gradient of Q(s, pi(s)) (or a random unit
// direction), then keep proposals whose model uncertainty falls strictly
// inside the inter-quartile band of the input batch.

enum class PerturbMode { kQgrad, kRandom };
enum class StepSign { kBoth, kPosOnly, kNegOnly };

PerturbMode parse_perturb_mode(std::string_view name);
std::string perturb_mode_name(PerturbMode mode);
StepSign parse_step_sign(std::string_view name);
std::string step_sign_name(StepSign sign);

struct PnfCfg {
  size_t n_steps = 4;
  double delta_max = 1e-3;
  PerturbMode mode = PerturbMode::kQgrad;
  StepSign sign = StepSign::kBoth;  // qgrad only
  size_t n_aug = 128;
  size_t max_rounds = 10;
  UncertaintyMode uncertainty_mode = UncertaintyMode::kDisagreementMaxDev;

  // n_steps is pinned to 1 for random directions
  size_t effective_steps() const {
    return mode == PerturbMode::kRandom ? 1 : n_steps;
  }
  void validate() const;
};

struct UncertaintyBand {
  double u_low = 0.0;
  double u_high = 0.0;

  bool admits(double u) const { return u > u_low && u < u_high; }
};

// Linear-interpolation quantile of already sorted values: position
// h = (n - 1) q, interpolated between floor(h) and ceil(h).
double sorted_quantile(std::span<const double> sorted, double q);

// (0.25, 0.75) quantiles. Throws std::invalid_argument for fewer than two
// values.
UncertaintyBand quantile_band(std::span<const double> uncertainties);

// d/ds Q1(s, tanh(mean(s))): through the critic's state input and through
// the deterministic policy action.
Tensor state_q_gradient(const ConservativeAgent& agent, const Tensor& states);
std::vector<double> state_q_gradient(const ConservativeAgent& agent,
                                     std::span<const double> s);

// u(s) = uncertainty(model, s, policy mean action, mode)
std::vector<double> state_uncertainty(const ConservativeAgent& agent,
                                      const DynamicsEnsemble& model,
                                      const Tensor& states,
                                      UncertaintyMode mode);

// One record per perturbation chain.
struct ChainTrace {
  size_t round = 0;
  size_t input_index = 0;
  std::vector<double> input;
  double eta = 0.0;  // step scalar, constant along the chain
  std::vector<double> etas;  // step scalar used at each step
  std::vector<std::vector<double>> states;  // s_1 .. s_n
  std::vector<double> grad_norms;           // |direction| at each step
  std::vector<double> uncertainties;        // per candidate
  std::vector<bool> accepted;               // per candidate, passed filter
  bool dropped = false;                     // a non-finite iterate appeared
};

struct Proposal {
  std::vector<std::vector<double>> candidates;
  std::vector<size_t> chain_of;  // chain index of each candidate
  std::vector<ChainTrace> chains;
  size_t dropped_chains = 0;
};

// Chains s_i = s_{i-1} + eta_k * grad Q at s_{i-1}, one eta per input row.
// Returns every intermediate state; chains with a non-finite iterate are
// dropped.
Proposal qgrad_chains(const ConservativeAgent& agent, const Tensor& states,
                      std::span<const double> etas, size_t n_steps);

// eta drawn once per state from the sign-selected interval.
double sample_eta(const PnfCfg& cfg, Rng& rng);

Proposal propose_qgrad(const ConservativeAgent& agent, const Tensor& states,
                       const PnfCfg& cfg, Rng& rng);
// s + eta * d, d uniform on the unit sphere, eta ~ U(-delta_max, delta_max)
Proposal propose_random(const Tensor& states, const PnfCfg& cfg, Rng& rng);

struct PnfResult {
  std::vector<std::vector<double>> states;  // at most n_aug
  bool shortfall = false;
  size_t rounds = 0;
  size_t n_candidates = 0;
  size_t n_passed = 0;  // candidates inside the band, before subsampling
  size_t dropped_chains = 0;
  UncertaintyBand band;
  std::vector<double> u0;
  std::vector<ChainTrace> trace;  // filled when tracing is requested

  double accept_rate() const {
    return n_candidates == 0 ? 0.0
                             : static_cast<double>(n_passed) /
                                   static_cast<double>(n_candidates);
  }
};

// Proposals are regenerated from the same input batch each round until
// n_aug states pass or max_rounds is reached; an overfull pool is
// subsampled uniformly to n_aug.
PnfResult pnf_augment(const ConservativeAgent& agent,
                      const DynamicsEnsemble& model, const Tensor& states,
                      const PnfCfg& cfg, Rng& rng, bool record_trace = false);

// JSON lines, one object per chain.
void write_trace_jsonl(std::ostream& os, const std::vector<ChainTrace>& trace,
                       long epoch = -1);
std::vector<ChainTrace> read_trace_jsonl(std::istream& is);

}  // namespace pnfrl

#endif  // PNFRL_PNF_HPP_

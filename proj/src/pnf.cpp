#include "pnfrl/pnf.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "json.hpp"

namespace pnfrl {
namespace {

double norm(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

PerturbMode parse_perturb_mode(std::string_view name) {
  if (name == "qgrad") return PerturbMode::kQgrad;
  if (name == "random") return PerturbMode::kRandom;
  throw ConfigError("unknown perturbation mode '" + std::string(name) +
                    "' (expected qgrad or random)");
}

std::string perturb_mode_name(PerturbMode mode) {
  return mode == PerturbMode::kQgrad ? "qgrad" : "random";
}

StepSign parse_step_sign(std::string_view name) {
  if (name == "both") return StepSign::kBoth;
  if (name == "pos_only") return StepSign::kPosOnly;
  if (name == "neg_only") return StepSign::kNegOnly;
  throw ConfigError("unknown step sign '" + std::string(name) +
                    "' (expected both, pos_only or neg_only)");
}

std::string step_sign_name(StepSign sign) {
  switch (sign) {
    case StepSign::kBoth:
      return "both";
    case StepSign::kPosOnly:
      return "pos_only";
    case StepSign::kNegOnly:
      return "neg_only";
  }
  return "?";
}

void PnfCfg::validate() const {
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  if (!(delta_max > 0.0) || !std::isfinite(delta_max))
    throw ConfigError("delta_max must be a positive finite number");
  if (n_aug < 1) throw ConfigError("n_aug must be >= 1");
  if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
}

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sequence");
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<size_t>(std::floor(h));
  const auto hi = static_cast<size_t>(std::ceil(h));
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

UncertaintyBand quantile_band(std::span<const double> uncertainties) {
  if (uncertainties.size() < 2)
    throw std::invalid_argument("quantile_band needs at least 2 values");
  std::vector<double> sorted(uncertainties.begin(), uncertainties.end());
  std::sort(sorted.begin(), sorted.end());
  return {sorted_quantile(sorted, 0.25), sorted_quantile(sorted, 0.75)};
}

Tensor state_q_gradient(const ConservativeAgent& agent, const Tensor& states) {
  const PolicyForward pf = policy_forward(agent.policy, states, nullptr);
  MlpTape critic_tape;
  const Tensor x = critic_inputs(states, pf.action);
  const Tensor q = mlp_forward(agent.q1, x, &critic_tape);
  const Tensor dq_dx =
      mlp_backward(agent.q1, critic_tape, Tensor(q.shape(), 1.0), false).input;

  const size_t n = states.rows();
  const size_t ds = states.cols();
  const size_t da = pf.action.cols();
  // upstream into the policy head: d tanh(mean)/d mean on the mean outputs,
  // nothing on the log-std outputs
  Tensor upstream(n, 2 * da);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < da; ++j) {
      const double a = pf.action(i, j);
      upstream(i, j) = dq_dx(i, ds + j) * (1.0 - a * a);
    }
  const Tensor through_policy =
      mlp_backward(agent.policy, pf.tape, upstream, false).input;

  Tensor g(n, ds);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < ds; ++j) g(i, j) = dq_dx(i, j) + through_policy(i, j);
  return g;
}

std::vector<double> state_q_gradient(const ConservativeAgent& agent,
                                     std::span<const double> s) {
  return state_q_gradient(agent, Tensor::row(s)).data();
}

std::vector<double> state_uncertainty(const ConservativeAgent& agent,
                                      const DynamicsEnsemble& model,
                                      const Tensor& states,
                                      UncertaintyMode mode) {
  return uncertainty_batch(model, states, policy_mean_action(agent, states), mode);
}

Proposal qgrad_chains(const ConservativeAgent& agent, const Tensor& states,
                      std::span<const double> etas, size_t n_steps) {
  const size_t n = states.rows();
  const size_t ds = states.cols();
  if (etas.size() != n)
    throw DimensionError("qgrad_chains: one step scalar per state is required");
  Proposal p;
  p.chains.resize(n);
  for (size_t k = 0; k < n; ++k) {
    const auto row = states.row_span(k);
    p.chains[k].input_index = k;
    p.chains[k].input.assign(row.begin(), row.end());
    p.chains[k].eta = etas[k];
  }

  // all live chains advance together so each step is one batched gradient
  std::vector<size_t> live(n);
  for (size_t k = 0; k < n; ++k) live[k] = k;
  Tensor current = states;
  for (size_t step = 0; step < n_steps && !live.empty(); ++step) {
    const Tensor g = state_q_gradient(agent, current);
    std::vector<size_t> next_live;
    std::vector<std::vector<double>> next_rows;
    for (size_t r = 0; r < live.size(); ++r) {
      ChainTrace& chain = p.chains[live[r]];
      const auto grad = g.row_span(r);
      std::vector<double> s_next(ds);
      for (size_t j = 0; j < ds; ++j) s_next[j] = current(r, j) + chain.eta * grad[j];
      chain.etas.push_back(chain.eta);
      chain.grad_norms.push_back(norm(grad));
      if (!finite(s_next) || !finite(grad)) {
        chain.dropped = true;
        continue;
      }
      chain.states.push_back(s_next);
      next_live.push_back(live[r]);
      next_rows.push_back(std::move(s_next));
    }
    live = std::move(next_live);
    if (!live.empty()) current = Tensor::from_rows(next_rows);
  }

  for (size_t k = 0; k < n; ++k) {
    if (p.chains[k].dropped) {
      ++p.dropped_chains;
      continue;
    }
    for (const auto& s : p.chains[k].states) {
      p.candidates.push_back(s);
      p.chain_of.push_back(k);
    }
  }
  return p;
}

double sample_eta(const PnfCfg& cfg, Rng& rng) {
  double u = rng.uniform();
  while (u == 0.0) u = rng.uniform();
  switch (cfg.sign) {
    case StepSign::kBoth:
      return cfg.delta_max * (2.0 * u - 1.0);
    case StepSign::kPosOnly:
      return cfg.delta_max * u;
    case StepSign::kNegOnly:
      return -cfg.delta_max * u;
  }
  return 0.0;
}

Proposal propose_qgrad(const ConservativeAgent& agent, const Tensor& states,
                       const PnfCfg& cfg, Rng& rng) {
  if (cfg.mode != PerturbMode::kQgrad)
    throw ConfigError("propose_qgrad called with a non-qgrad configuration");
  std::vector<double> etas(states.rows());
  for (double& e : etas) e = sample_eta(cfg, rng);
  return qgrad_chains(agent, states, etas, cfg.n_steps);
}

Proposal propose_random(const Tensor& states, const PnfCfg& cfg, Rng& rng) {
  if (cfg.mode != PerturbMode::kRandom)
    throw ConfigError("propose_random called with a non-random configuration");
  const size_t n = states.rows();
  const size_t ds = states.cols();
  Proposal p;
  p.chains.resize(n);
  std::vector<double> dir(ds);
  for (size_t k = 0; k < n; ++k) {
    double len = 0.0;
    while (len == 0.0) {
      for (double& d : dir) d = rng.normal();
      len = norm(dir);
    }
    for (double& d : dir) d /= len;
    const double eta = rng.uniform(-cfg.delta_max, cfg.delta_max);
    ChainTrace& chain = p.chains[k];
    const auto row = states.row_span(k);
    chain.input_index = k;
    chain.input.assign(row.begin(), row.end());
    chain.eta = eta;
    chain.etas = {eta};
    chain.grad_norms = {norm(dir)};
    std::vector<double> s(ds);
    for (size_t j = 0; j < ds; ++j) s[j] = row[j] + eta * dir[j];
    chain.states.push_back(s);
    p.candidates.push_back(std::move(s));
    p.chain_of.push_back(k);
  }
  return p;
}

PnfResult pnf_augment(const ConservativeAgent& agent,
                      const DynamicsEnsemble& model, const Tensor& states,
                      const PnfCfg& cfg, Rng& rng, bool record_trace) {
  cfg.validate();
  if (states.rows() == 0) throw std::invalid_argument("pnf_augment: empty batch");
  PnfResult result;
  result.u0 = state_uncertainty(agent, model, states, cfg.uncertainty_mode);
  result.band = quantile_band(result.u0);

  std::vector<std::vector<double>> pool;
  // an empty open interval admits nothing, so proposing would only spin
  const bool band_empty = !(result.band.u_low < result.band.u_high);
  while (!band_empty && pool.size() < cfg.n_aug && result.rounds < cfg.max_rounds) {
    ++result.rounds;
    Proposal prop = cfg.mode == PerturbMode::kQgrad
                        ? propose_qgrad(agent, states, cfg, rng)
                        : propose_random(states, cfg, rng);
    result.dropped_chains += prop.dropped_chains;
    result.n_candidates += prop.candidates.size();
    std::vector<double> u;
    if (!prop.candidates.empty())
      u = state_uncertainty(agent, model, Tensor::from_rows(prop.candidates),
                            cfg.uncertainty_mode);
    for (size_t c = 0; c < prop.candidates.size(); ++c) {
      const bool ok = result.band.admits(u[c]);
      if (ok) {
        pool.push_back(prop.candidates[c]);
        ++result.n_passed;
      }
      if (record_trace) {
        ChainTrace& chain = prop.chains[prop.chain_of[c]];
        chain.uncertainties.push_back(u[c]);
        chain.accepted.push_back(ok);
      }
    }
    if (pool.size() > cfg.n_aug) {
      // uniform subset of size n_aug, original order kept
      std::vector<size_t> idx(pool.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      for (size_t i = 0; i < cfg.n_aug; ++i)
        std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
      idx.resize(cfg.n_aug);
      std::sort(idx.begin(), idx.end());
      std::vector<std::vector<double>> kept;
      kept.reserve(cfg.n_aug);
      for (size_t i : idx) kept.push_back(std::move(pool[i]));
      pool = std::move(kept);
    }
    if (record_trace) {
      for (auto& chain : prop.chains) {
        chain.round = result.rounds;
        result.trace.push_back(std::move(chain));
      }
    }
  }
  result.shortfall = pool.size() < cfg.n_aug;
  result.states = std::move(pool);
  return result;
}

void write_trace_jsonl(std::ostream& os, const std::vector<ChainTrace>& trace,
                       long epoch) {
  for (const auto& chain : trace) {
    nlohmann::json j;
    if (epoch >= 0) j["epoch"] = epoch;
    j["round"] = chain.round;
    j["input_index"] = chain.input_index;
    j["input"] = chain.input;
    j["eta"] = chain.eta;
    j["etas"] = chain.etas;
    j["states"] = chain.states;
    j["grad_norms"] = chain.grad_norms;
    j["uncertainty"] = chain.uncertainties;
    j["accepted"] = chain.accepted;
    j["dropped"] = chain.dropped;
    os << j.dump() << '\n';
  }
}

std::vector<ChainTrace> read_trace_jsonl(std::istream& is) {
  std::vector<ChainTrace> trace;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ChainTrace c;
      c.round = j.at("round").get<size_t>();
      c.input_index = j.at("input_index").get<size_t>();
      c.input = j.at("input").get<std::vector<double>>();
      c.eta = j.at("eta").get<double>();
      c.etas = j.at("etas").get<std::vector<double>>();
      c.states = j.at("states").get<std::vector<std::vector<double>>>();
      c.grad_norms = j.at("grad_norms").get<std::vector<double>>();
      c.uncertainties = j.at("uncertainty").get<std::vector<double>>();
      c.accepted = j.at("accepted").get<std::vector<bool>>();
      c.dropped = j.at("dropped").get<bool>();
      trace.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("trace line " + std::to_string(line_no) + ": " + e.what(),
                       line_no);
    }
  }
  return trace;
}

}  // namespace pnfrl

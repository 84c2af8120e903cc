#include "pnfrl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "json.hpp"
#include "pnfrl/config.hpp"

namespace pnfrl {
namespace {

std::string format_real(double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<size_t>(n));
}

void write_rollout_rows(std::ostream& os, const std::vector<Transition>& batch) {
  for (const auto& tr : batch) {
    bool first = true;
    for (double v : tr.s) {
      if (!first) os << ',';
      os << format_real(v);
      first = false;
    }
    for (double v : tr.a) os << ',' << format_real(v);
    os << '\n';
  }
}

void write_rollout_header(std::ostream& os, size_t ds, size_t da) {
  for (size_t i = 0; i < ds; ++i) os << (i ? ",s" : "s") << i;
  for (size_t i = 0; i < da; ++i) os << ",a" << i;
  os << '\n';
}

struct UpdateTotals {
  double td = 0.0;
  double cql = 0.0;
  double actor = 0.0;
};

UpdateTotals run_updates(TrainState& state, const TrainCfg& cfg, Rng& rng) {
  UpdateTotals totals;
  if (state.buffer.empty())
    throw std::runtime_error("rollout buffer is empty; every model branch was truncated");
  for (int step = 0; step < cfg.steps_per_epoch; ++step) {
    const auto dataset_batch =
        sample_batch(*state.dataset, cfg.combo.dataset_batch, rng);
    const auto model_batch = state.buffer.sample(cfg.combo.model_batch, rng);
    const CriticMetrics cm =
        critic_update(state.agent, dataset_batch, model_batch, cfg.combo, rng);
    const ActorMetrics am =
        actor_update(state.agent, stack_states(model_batch), cfg.combo, rng);
    totals.td += cm.td_loss;
    totals.cql += cm.cql_loss;
    totals.actor += am.actor_loss;
  }
  if (cfg.steps_per_epoch > 0) {
    const double n = cfg.steps_per_epoch;
    totals.td /= n;
    totals.cql /= n;
    totals.actor /= n;
  }
  return totals;
}

double epoch_score(const TrainState& state, const TrainCfg& cfg, Rng& eval_rng) {
  if (state.dataset->env.kind == EnvKind::kCustom || cfg.eval_episodes <= 0)
    return 0.0;
  return evaluate_policy(state.dataset->env, state.agent, cfg.eval_episodes,
                         eval_rng.next())
      .score;
}

}  // namespace

RolloutPolicy parse_rollout_policy(std::string_view name) {
  if (name == "current_pi") return RolloutPolicy::kCurrentPi;
  if (name == "uniform") return RolloutPolicy::kUniform;
  throw ConfigError("unknown rollout policy '" + std::string(name) +
                    "' (expected current_pi or uniform)");
}

std::string rollout_policy_name(RolloutPolicy p) {
  return p == RolloutPolicy::kCurrentPi ? "current_pi" : "uniform";
}

size_t TrainCfg::n_aug() const {
  return static_cast<size_t>(std::floor(f_aug * static_cast<double>(n_start)));
}

size_t TrainCfg::capacity() const {
  return buffer_capacity > 0 ? buffer_capacity
                             : 20 * n_start * static_cast<size_t>(H);
}

void TrainCfg::validate() const {
  if (H < 1) throw ConfigError("H must be >= 1");
  if (n_start < 2) throw ConfigError("n_start must be >= 2");
  if (!(f_aug >= 0.0 && f_aug <= 1.0)) throw ConfigError("f_aug must be in [0, 1]");
  if (n_epochs < 0) throw ConfigError("n_epochs must be >= 0");
  if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must be in (0, 1)");
  if (adq_samples < 1) throw ConfigError("adq_samples must be >= 1");
  if (!(dataset_fraction > 0.0 && dataset_fraction <= 1.0))
    throw ConfigError("dataset_fraction must be in (0, 1]");
  combo.validate();
  PnfCfg p = pnf;
  p.n_aug = std::max<size_t>(1, n_aug());
  p.validate();
}

RolloutBuffer::RolloutBuffer(size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("rollout buffer capacity must be >= 1");
}

void RolloutBuffer::push(std::vector<Transition> transitions) {
  for (auto& tr : transitions) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(tr));
  }
}

std::vector<Transition> RolloutBuffer::sample(size_t n, Rng& rng) const {
  if (items_.empty()) throw std::runtime_error("sampling from an empty rollout buffer");
  std::vector<Transition> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(items_[rng.index(items_.size())]);
  return out;
}

std::vector<Transition> branched_rollout(const DynamicsEnsemble& model,
                                         const ConservativeAgent& agent,
                                         const Tensor& starts, int H,
                                         RolloutPolicy policy, Rng& rng,
                                         RolloutStats* stats) {
  if (H < 1) throw std::invalid_argument("branched_rollout: H must be >= 1");
  const size_t ds = model.state_dim;
  const size_t da = model.action_dim;
  std::vector<Transition> out;
  out.reserve(starts.rows() * static_cast<size_t>(H));
  std::vector<size_t> live(starts.rows());
  for (size_t i = 0; i < live.size(); ++i) live[i] = i;
  Tensor current = starts;
  RolloutStats local;
  for (int t = 0; t < H && !live.empty(); ++t) {
    Tensor actions(current.rows(), da);
    if (policy == RolloutPolicy::kCurrentPi) {
      actions = policy_sample_action(agent, current, rng);
    } else {
      for (double& v : actions.data()) v = rng.uniform(-1.0, 1.0);
    }
    const auto steps = sample_transitions(model, current, actions, rng);
    std::vector<size_t> next_live;
    std::vector<std::vector<double>> next_rows;
    for (size_t r = 0; r < live.size(); ++r) {
      const auto& step = steps[r];
      const bool ok =
          std::isfinite(step.r) &&
          std::all_of(step.s_next.begin(), step.s_next.end(),
                      [](double v) { return std::isfinite(v); });
      if (!ok) {
        ++local.truncated_branches;
        continue;
      }
      Transition tr;
      tr.ep = static_cast<int>(live[r]);
      tr.t = t;
      const auto s = current.row_span(r);
      const auto a = actions.row_span(r);
      tr.s.assign(s.begin(), s.end());
      tr.a.assign(a.begin(), a.end());
      tr.r = step.r;
      tr.s_next = step.s_next;
      tr.done = false;
      out.push_back(std::move(tr));
      next_live.push_back(live[r]);
      next_rows.push_back(step.s_next);
    }
    live = std::move(next_live);
    if (!live.empty()) current = Tensor::from_rows(next_rows);
    (void)ds;
  }
  local.emitted = out.size();
  if (stats) *stats = local;
  return out;
}

StartBatch start_state_batch(const Dataset& dataset,
                             const ConservativeAgent& agent,
                             const DynamicsEnsemble& model,
                             const TrainCfg& cfg, Rng& start_rng, Rng& pnf_rng,
                             bool record_trace) {
  StartBatch sb;
  sb.states = stack_states(sample_batch(dataset, cfg.n_start, start_rng));
  const size_t n_aug = cfg.n_aug();
  if (n_aug == 0) return sb;

  PnfCfg pcfg = cfg.pnf;
  pcfg.n_aug = n_aug;
  sb.pnf_called = true;
  sb.pnf = pnf_augment(agent, model, sb.states, pcfg, pnf_rng, record_trace);

  // choose n_aug distinct slots uniformly, fill as many as PnF delivered
  std::vector<size_t> slots(cfg.n_start);
  for (size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  for (size_t i = 0; i < n_aug; ++i)
    std::swap(slots[i], slots[i + pnf_rng.index(slots.size() - i)]);
  const size_t fill = std::min(n_aug, sb.pnf.states.size());
  for (size_t k = 0; k < fill; ++k) {
    const auto& s = sb.pnf.states[k];
    std::copy(s.begin(), s.end(), sb.states.row_span(slots[k]).begin());
    sb.replaced_slots.push_back(slots[k]);
  }
  std::sort(sb.replaced_slots.begin(), sb.replaced_slots.end());
  return sb;
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["adq"] = m.adq;
  j["td_loss"] = m.td_loss;
  j["cql_loss"] = m.cql_loss;
  j["actor_loss"] = m.actor_loss;
  j["score"] = m.score;
  j["pnf_accept_rate"] = m.pnf_accept_rate;
  j["pnf_shortfalls"] = m.pnf_shortfalls;
  return j.dump();
}

EvalResult evaluate_controller(const EnvSpec& spec, const Controller& policy,
                               int n_episodes, uint64_t seed) {
  if (n_episodes < 1) throw std::invalid_argument("n_episodes must be >= 1");
  Rng rng(seed);
  EvalResult res;
  for (int ep = 0; ep < n_episodes; ++ep) {
    auto s = env_reset(spec, rng);
    double total = 0.0;
    for (int t = 0; t < spec.horizon; ++t) {
      const auto a = policy(s);
      auto step = env_step(spec, s, a);
      total += step.r;
      s = std::move(step.s_next);
      if (step.done) break;
    }
    res.returns.push_back(total);
  }
  double sum = 0.0;
  for (double r : res.returns) sum += r;
  res.mean_return = sum / static_cast<double>(n_episodes);
  res.score = normalized_score(res.mean_return, spec);
  return res;
}

EvalResult evaluate_policy(const EnvSpec& spec, const ConservativeAgent& agent,
                           int n_episodes, uint64_t seed) {
  return evaluate_controller(
      spec,
      [&agent](std::span<const double> s) {
        return policy_mean_action(agent, Tensor::row(s)).data();
      },
      n_episodes, seed);
}

TrainState make_train_state(const Dataset& dataset,
                            const DynamicsEnsemble& model, const TrainCfg& cfg) {
  cfg.validate();
  TrainState state;
  state.dataset = &dataset;
  state.model = &model;
  state.root = Rng(cfg.seed);
  state.agent = make_agent(dataset.env.state_dim, dataset.env.action_dim,
                           cfg.combo, state.root.split("agent").next());
  state.buffer = RolloutBuffer(cfg.capacity());
  return state;
}

EpochMetrics train_epoch(TrainState& state, const TrainCfg& cfg) {
  const Rng epoch_rng = state.root.split(static_cast<uint64_t>(state.epoch));
  Rng start_rng = epoch_rng.split("start");
  Rng pnf_rng = epoch_rng.split("pnf");
  Rng rollout_rng = epoch_rng.split("rollout");
  Rng update_rng = epoch_rng.split("update");
  Rng adq_rng = epoch_rng.split("adq");
  Rng eval_rng = epoch_rng.split("eval");

  EpochMetrics m;
  m.epoch = state.epoch;

  const StartBatch starts = start_state_batch(
      *state.dataset, state.agent, *state.model, cfg, start_rng, pnf_rng,
      state.trace != nullptr);
  if (starts.pnf_called) {
    m.pnf_calls = 1;
    m.pnf_accept_rate = starts.pnf.accept_rate();
    m.pnf_shortfalls = starts.pnf.shortfall ? 1 : 0;
    m.replaced_slots = starts.replaced_slots.size();
    if (state.trace) write_trace_jsonl(*state.trace, starts.pnf.trace, state.epoch);
  }

  RolloutStats stats;
  auto rollouts = branched_rollout(*state.model, state.agent, starts.states,
                                   cfg.H, cfg.rollout_policy, rollout_rng, &stats);
  if (state.rollouts) write_rollout_rows(*state.rollouts, rollouts);
  m.rollout_transitions = stats.emitted;
  m.truncated_branches = stats.truncated_branches;
  state.buffer.push(std::move(rollouts));

  const UpdateTotals totals = run_updates(state, cfg, update_rng);
  m.td_loss = totals.td;
  m.cql_loss = totals.cql;
  m.actor_loss = totals.actor;
  m.adq = average_dataset_q(state.agent, *state.dataset, cfg.adq_samples, adq_rng);
  m.score = epoch_score(state, cfg, eval_rng);
  ++state.epoch;
  return m;
}

std::vector<EpochMetrics> train_loop(TrainState& state, const TrainCfg& cfg,
                                     std::ostream* metrics_out) {
  std::vector<EpochMetrics> history;
  for (int e = 0; e < cfg.n_epochs; ++e) {
    history.push_back(train_epoch(state, cfg));
    if (metrics_out) *metrics_out << metrics_json(history.back()) << '\n';
  }
  return history;
}

std::vector<EpochMetrics> baseline_loop(TrainState& state, const TrainCfg& cfg,
                                        std::ostream* metrics_out) {
  std::vector<EpochMetrics> history;
  for (int e = 0; e < cfg.n_epochs; ++e) {
    const Rng epoch_rng = state.root.split(static_cast<uint64_t>(state.epoch));
    Rng start_rng = epoch_rng.split("start");
    Rng rollout_rng = epoch_rng.split("rollout");
    Rng update_rng = epoch_rng.split("update");
    Rng adq_rng = epoch_rng.split("adq");
    Rng eval_rng = epoch_rng.split("eval");

    // start states straight from the dataset
    const Tensor starts =
        stack_states(sample_batch(*state.dataset, cfg.n_start, start_rng));
    RolloutStats stats;
    auto rollouts = branched_rollout(*state.model, state.agent, starts, cfg.H,
                                     cfg.rollout_policy, rollout_rng, &stats);
    if (state.rollouts) write_rollout_rows(*state.rollouts, rollouts);
    state.buffer.push(std::move(rollouts));

    EpochMetrics m;
    m.epoch = state.epoch;
    m.rollout_transitions = stats.emitted;
    m.truncated_branches = stats.truncated_branches;
    const UpdateTotals totals = run_updates(state, cfg, update_rng);
    m.td_loss = totals.td;
    m.cql_loss = totals.cql;
    m.actor_loss = totals.actor;
    m.adq = average_dataset_q(state.agent, *state.dataset, cfg.adq_samples, adq_rng);
    m.score = epoch_score(state, cfg, eval_rng);
    ++state.epoch;
    history.push_back(m);
    if (metrics_out) *metrics_out << metrics_json(m) << '\n';
  }
  return history;
}

RunArtifacts run(const TrainCfg& cfg, const std::filesystem::path& dataset_path,
                 const std::filesystem::path& out_dir,
                 const std::optional<std::filesystem::path>& model_dir,
                 bool baseline) {
  cfg.validate();
  if (!std::filesystem::exists(dataset_path))
    throw std::runtime_error("dataset not found: " + dataset_path.string());
  Dataset dataset = load_dataset(dataset_path);
  if (cfg.dataset_fraction < 1.0) dataset = dataset_prefix(dataset, cfg.dataset_fraction);
  std::filesystem::create_directories(out_dir);

  RunArtifacts art;
  art.model_dir = out_dir / "model";
  art.agent_dir = out_dir / "agent";
  art.metrics = out_dir / "metrics.jsonl";

  const Rng root(cfg.seed);
  DynamicsEnsemble model;
  if (model_dir) {
    model = load_ensemble(*model_dir);
    if (model.state_dim != dataset.env.state_dim ||
        model.action_dim != dataset.env.action_dim)
      throw std::runtime_error("model in " + model_dir->string() +
                               " does not match the dataset dimensions");
  } else {
    auto [train, val] =
        split_train_val(dataset, cfg.val_fraction, root.split("split").next());
    EnsembleCfg mcfg = cfg.model;
    mcfg.seed = root.split("model").next();
    model = fit_ensemble(train, val, mcfg).model;
  }
  save_ensemble(art.model_dir, model);

  {
    std::ofstream cfg_out(out_dir / "config.txt");
    cfg_out << dump_config(cfg);
  }

  std::ofstream metrics(art.metrics);
  if (!metrics) throw std::runtime_error("cannot write " + art.metrics.string());
  std::ofstream trace, rollouts;
  TrainState state = make_train_state(dataset, model, cfg);
  if (cfg.trace && !baseline) {
    art.trace = out_dir / "pnf_trace.jsonl";
    trace.open(*art.trace);
    state.trace = &trace;
  }
  if (cfg.dump_rollouts) {
    art.rollouts = out_dir / "rollouts.csv";
    rollouts.open(*art.rollouts);
    write_rollout_header(rollouts, dataset.env.state_dim, dataset.env.action_dim);
    state.rollouts = &rollouts;
  }
  art.history = baseline ? baseline_loop(state, cfg, &metrics)
                         : train_loop(state, cfg, &metrics);
  if (cfg.n_epochs > 0) save_agent(art.agent_dir, state.agent, cfg.combo);
  return art;
}

}  // namespace pnfrl

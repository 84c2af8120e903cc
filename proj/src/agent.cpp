#include "pnfrl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace pnfrl {
namespace {

constexpr double kSquashEps = 1e-6;

struct TransitionTensors {
  Tensor s, a, s_next;
  std::vector<double> r;
  std::vector<double> done;
};

TransitionTensors unpack(const std::vector<Transition>& batch) {
  TransitionTensors t;
  t.s = Tensor(batch.size(), batch.front().s.size());
  t.a = Tensor(batch.size(), batch.front().a.size());
  t.s_next = Tensor(batch.size(), batch.front().s_next.size());
  t.r.resize(batch.size());
  t.done.resize(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    std::copy(batch[i].s.begin(), batch[i].s.end(), t.s.row_span(i).begin());
    std::copy(batch[i].a.begin(), batch[i].a.end(), t.a.row_span(i).begin());
    std::copy(batch[i].s_next.begin(), batch[i].s_next.end(),
              t.s_next.row_span(i).begin());
    t.r[i] = batch[i].r;
    t.done[i] = batch[i].done ? 1.0 : 0.0;
  }
  return t;
}

std::vector<double> column(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

std::vector<double> bellman_targets(const ConservativeAgent& agent,
                                    const TransitionTensors& t, double gamma,
                                    Rng& rng) {
  const PolicyForward next = policy_forward(agent.policy, t.s_next, &rng);
  const Tensor x_next = critic_inputs(t.s_next, next.action);
  const auto q1 = column(mlp_forward(agent.q1_target, x_next));
  const auto q2 = column(mlp_forward(agent.q2_target, x_next));
  const double alpha = agent.alpha();
  std::vector<double> y(t.r.size());
  for (size_t i = 0; i < y.size(); ++i) {
    double boot = std::min(q1[i], q2[i]);
    if (alpha != 0.0) boot -= alpha * next.log_prob[i];
    y[i] = t.r[i] + gamma * (1.0 - t.done[i]) * boot;
  }
  return y;
}

// squared error of one critic against fixed targets, with parameter gradient
double td_component(const MlpParams& q, const Tensor& x,
                    const std::vector<double>& y, MlpParams* grad) {
  MlpTape tape;
  const Tensor out = mlp_forward(q, x, grad ? &tape : nullptr);
  const double n = static_cast<double>(y.size());
  Tensor upstream(out.shape());
  double loss = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double err = out[i] - y[i];
    loss += err * err;
    upstream[i] = 2.0 * err / n;
  }
  if (grad) *grad = mlp_backward(q, tape, upstream).params;
  return loss / n;
}

// mean Q(model side) - mean Q(data side) for one critic, with gradient
double cql_component(const MlpParams& q, const Tensor& x_model,
                     const Tensor& x_data, MlpParams* grad) {
  MlpTape tape_model, tape_data;
  const Tensor out_model = mlp_forward(q, x_model, grad ? &tape_model : nullptr);
  const Tensor out_data = mlp_forward(q, x_data, grad ? &tape_data : nullptr);
  double mean_model = 0.0, mean_data = 0.0;
  for (double v : out_model.data()) mean_model += v;
  for (double v : out_data.data()) mean_data += v;
  mean_model /= static_cast<double>(out_model.size());
  mean_data /= static_cast<double>(out_data.size());
  if (grad) {
    const Tensor up_model(out_model.shape(),
                          1.0 / static_cast<double>(out_model.size()));
    const Tensor up_data(out_data.shape(),
                         -1.0 / static_cast<double>(out_data.size()));
    *grad = mlp_backward(q, tape_model, up_model).params;
    accumulate(*grad, mlp_backward(q, tape_data, up_data).params);
  }
  return mean_model - mean_data;
}

void check_loss(double v, const char* component) {
  if (!std::isfinite(v))
    throw NonFiniteError(std::string("non-finite critic loss component: ") +
                         component);
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ComboCfg::validate() const {
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must be in (0, 1)");
  if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("f must be in [0, 1]");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must be in (0, 1]");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (auto_alpha && !(alpha > 0.0))
    throw ConfigError("auto_alpha needs a positive initial alpha");
  if (td_batch == 0 || dataset_batch == 0 || model_batch == 0)
    throw ConfigError("batch sizes must be >= 1");
  if (!(critic_lr > 0.0 && actor_lr > 0.0 && alpha_lr > 0.0))
    throw ConfigError("learning rates must be > 0");
  for (size_t h : hidden)
    if (h == 0) throw ConfigError("hidden widths must be >= 1");
}

double ScalarAdam::update(double param, double grad) {
  step += 1;
  m = 0.9 * m + 0.1 * grad;
  v = 0.999 * v + 0.001 * grad * grad;
  const double t = static_cast<double>(step);
  const double m_hat = m / (1.0 - std::pow(0.9, t));
  const double v_hat = v / (1.0 - std::pow(0.999, t));
  return param - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
}

double ConservativeAgent::alpha() const { return std::exp(log_alpha); }

ConservativeAgent make_agent(size_t state_dim, size_t action_dim,
                             const ComboCfg& cfg, uint64_t seed) {
  cfg.validate();
  const Rng root(seed);
  auto sizes = [&](size_t in, size_t out) {
    std::vector<size_t> s{in};
    s.insert(s.end(), cfg.hidden.begin(), cfg.hidden.end());
    s.push_back(out);
    return s;
  };
  ConservativeAgent agent;
  agent.state_dim = state_dim;
  agent.action_dim = action_dim;
  Rng r1 = root.split("q1"), r2 = root.split("q2"), rp = root.split("policy");
  agent.q1 = make_mlp(sizes(state_dim + action_dim, 1), Activation::kTanh, r1);
  agent.q2 = make_mlp(sizes(state_dim + action_dim, 1), Activation::kTanh, r2);
  agent.policy = make_mlp(sizes(state_dim, 2 * action_dim), Activation::kTanh, rp);
  agent.q1_target = agent.q1;
  agent.q2_target = agent.q2;
  agent.q1_opt = make_adam(agent.q1, cfg.critic_lr);
  agent.q2_opt = make_adam(agent.q2, cfg.critic_lr);
  agent.policy_opt = make_adam(agent.policy, cfg.actor_lr);
  agent.log_alpha = std::log(cfg.alpha);
  agent.alpha_opt.lr = cfg.alpha_lr;
  agent.target_entropy = -static_cast<double>(action_dim);
  return agent;
}

void zero_critics(ConservativeAgent& agent) {
  for (MlpParams* q : {&agent.q1, &agent.q2, &agent.q1_target, &agent.q2_target}) {
    auto& last = q->layers.back();
    std::fill(last.weight.data().begin(), last.weight.data().end(), 0.0);
    std::fill(last.bias.data().begin(), last.bias.data().end(), 0.0);
  }
}

Tensor critic_inputs(const Tensor& states, const Tensor& actions) {
  if (states.rows() != actions.rows())
    throw DimensionError("critic_inputs: state and action batch sizes differ");
  const size_t ds = states.cols();
  const size_t da = actions.cols();
  Tensor x(states.rows(), ds + da);
  for (size_t i = 0; i < states.rows(); ++i) {
    for (size_t j = 0; j < ds; ++j) x(i, j) = states(i, j);
    for (size_t j = 0; j < da; ++j) x(i, ds + j) = actions(i, j);
  }
  return x;
}

std::vector<double> q_values(const ConservativeAgent& agent,
                             const Tensor& states, const Tensor& actions,
                             QHead head) {
  const Tensor x = critic_inputs(states, actions);
  auto q = column(mlp_forward(agent.q1, x));
  if (head == QHead::kMin) {
    const auto q2 = column(mlp_forward(agent.q2, x));
    for (size_t i = 0; i < q.size(); ++i) q[i] = std::min(q[i], q2[i]);
  }
  return q;
}

double q_value(const ConservativeAgent& agent, std::span<const double> s,
               std::span<const double> a, QHead head) {
  return q_values(agent, Tensor::row(s), Tensor::row(a), head).front();
}

PolicyForward policy_forward(const MlpParams& policy, const Tensor& states,
                             Rng* rng) {
  PolicyForward pf;
  const Tensor out = mlp_forward(policy, states, &pf.tape);
  const size_t n = states.rows();
  const size_t da = out.cols() / 2;
  pf.mean = Tensor(n, da);
  pf.log_std = Tensor(n, da);
  pf.raw_log_std = Tensor(n, da);
  pf.noise = Tensor(n, da);
  pf.action = Tensor(n, da);
  pf.log_prob.assign(n, 0.0);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  for (size_t i = 0; i < n; ++i) {
    double lp = 0.0;
    for (size_t j = 0; j < da; ++j) {
      const double mean = out(i, j);
      const double raw = out(i, da + j);
      const double ls = std::clamp(raw, ConservativeAgent::kMinLogStd,
                                   ConservativeAgent::kMaxLogStd);
      const double eps = rng ? rng->normal() : 0.0;
      const double a = std::tanh(mean + std::exp(ls) * eps);
      pf.mean(i, j) = mean;
      pf.raw_log_std(i, j) = raw;
      pf.log_std(i, j) = ls;
      pf.noise(i, j) = eps;
      pf.action(i, j) = a;
      lp += -0.5 * eps * eps - ls - half_log_2pi -
            std::log(1.0 - a * a + kSquashEps);
    }
    pf.log_prob[i] = lp;
  }
  return pf;
}

Tensor policy_mean_action(const ConservativeAgent& agent, const Tensor& states) {
  return policy_forward(agent.policy, states, nullptr).action;
}

Tensor policy_sample_action(const ConservativeAgent& agent,
                            const Tensor& states, Rng& rng) {
  return policy_forward(agent.policy, states, &rng).action;
}

std::vector<Transition> mix_batches(const std::vector<Transition>& dataset_batch,
                                    const std::vector<Transition>& model_batch,
                                    double f, size_t n, Rng& rng) {
  if (dataset_batch.empty() || model_batch.empty())
    throw std::invalid_argument("mix_batches: both batches must be nonempty");
  std::vector<Transition> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    if (rng.uniform() < f)
      out.push_back(dataset_batch[i % dataset_batch.size()]);
    else
      out.push_back(model_batch[i % model_batch.size()]);
  }
  return out;
}

double td_loss(const ConservativeAgent& agent,
               const std::vector<Transition>& batch, double gamma, Rng& rng) {
  const auto t = unpack(batch);
  const auto y = bellman_targets(agent, t, gamma, rng);
  const Tensor x = critic_inputs(t.s, t.a);
  return 0.5 * (td_component(agent.q1, x, y, nullptr) +
                td_component(agent.q2, x, y, nullptr));
}

double cql_loss(const ConservativeAgent& agent, const Tensor& model_states,
                const Tensor& model_actions,
                const std::vector<Transition>& dataset_batch) {
  if (dataset_batch.empty() || model_states.rows() == 0)
    throw std::invalid_argument("cql_loss: both batches must be nonempty");
  const auto d = unpack(dataset_batch);
  const Tensor x_model = critic_inputs(model_states, model_actions);
  const Tensor x_data = critic_inputs(d.s, d.a);
  return 0.5 * (cql_component(agent.q1, x_model, x_data, nullptr) +
                cql_component(agent.q2, x_model, x_data, nullptr));
}

double cql_loss(const ConservativeAgent& agent,
                const std::vector<Transition>& model_batch,
                const std::vector<Transition>& dataset_batch, Rng& rng) {
  const auto m = unpack(model_batch);
  return cql_loss(agent, m.s, policy_sample_action(agent, m.s, rng),
                  dataset_batch);
}

CriticGradients critic_gradients(const ConservativeAgent& agent,
                                 const std::vector<Transition>& dataset_batch,
                                 const std::vector<Transition>& model_batch,
                                 const ComboCfg& cfg, Rng& rng) {
  if (dataset_batch.empty() || model_batch.empty())
    throw std::invalid_argument("critic update needs nonempty batches");
  const Rng step(rng.next());
  Rng mix_rng = step.split("mix");
  Rng td_rng = step.split("td");
  Rng cql_rng = step.split("cql");

  CriticGradients g;
  const auto mixed = unpack(
      mix_batches(dataset_batch, model_batch, cfg.f, cfg.td_batch, mix_rng));
  const auto y = bellman_targets(agent, mixed, cfg.gamma, td_rng);
  const Tensor x = critic_inputs(mixed.s, mixed.a);
  g.td_loss = 0.5 * (td_component(agent.q1, x, y, &g.td_q1) +
                     td_component(agent.q2, x, y, &g.td_q2));

  const auto m = unpack(model_batch);
  const auto d = unpack(dataset_batch);
  const Tensor x_model =
      critic_inputs(m.s, policy_sample_action(agent, m.s, cql_rng));
  const Tensor x_data = critic_inputs(d.s, d.a);
  g.cql_loss = 0.5 * (cql_component(agent.q1, x_model, x_data, &g.cql_q1) +
                      cql_component(agent.q2, x_model, x_data, &g.cql_q2));
  return g;
}

CriticMetrics critic_update(ConservativeAgent& agent,
                            const std::vector<Transition>& dataset_batch,
                            const std::vector<Transition>& model_batch,
                            const ComboCfg& cfg, Rng& rng) {
  CriticGradients g = critic_gradients(agent, dataset_batch, model_batch, cfg, rng);
  check_loss(g.td_loss, "td");
  check_loss(g.cql_loss, "cql");
  if (cfg.beta != 0.0) {
    accumulate(g.td_q1, g.cql_q1, cfg.beta);
    accumulate(g.td_q2, g.cql_q2, cfg.beta);
  }
  adam_update(agent.q1, g.td_q1, agent.q1_opt);
  adam_update(agent.q2, g.td_q2, agent.q2_opt);
  polyak_update(agent.q1_target, agent.q1, cfg.tau);
  polyak_update(agent.q2_target, agent.q2, cfg.tau);
  return {g.td_loss, g.cql_loss, g.td_loss + cfg.beta * g.cql_loss};
}

CriticMetrics td_update(ConservativeAgent& agent,
                        const std::vector<Transition>& batch,
                        const ComboCfg& cfg, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("td_update: empty batch");
  const Rng step(rng.next());
  Rng td_rng = step.split("td");
  const auto t = unpack(batch);
  const auto y = bellman_targets(agent, t, cfg.gamma, td_rng);
  const Tensor x = critic_inputs(t.s, t.a);
  MlpParams g1, g2;
  const double loss = 0.5 * (td_component(agent.q1, x, y, &g1) +
                             td_component(agent.q2, x, y, &g2));
  check_loss(loss, "td");
  adam_update(agent.q1, g1, agent.q1_opt);
  adam_update(agent.q2, g2, agent.q2_opt);
  polyak_update(agent.q1_target, agent.q1, cfg.tau);
  polyak_update(agent.q2_target, agent.q2, cfg.tau);
  return {loss, 0.0, loss};
}

CriticFn min_critic_fn(const ConservativeAgent& agent) {
  return [&agent](const Tensor& states, const Tensor& actions,
                  std::vector<double>& q, Tensor& dq_da) {
    const Tensor x = critic_inputs(states, actions);
    MlpTape t1, t2;
    const Tensor o1 = mlp_forward(agent.q1, x, &t1);
    const Tensor o2 = mlp_forward(agent.q2, x, &t2);
    const size_t n = states.rows();
    Tensor up1(n, 1), up2(n, 1);
    q.resize(n);
    for (size_t i = 0; i < n; ++i) {
      if (o1[i] <= o2[i]) {
        q[i] = o1[i];
        up1[i] = 1.0;
      } else {
        q[i] = o2[i];
        up2[i] = 1.0;
      }
    }
    const Tensor g1 = mlp_backward(agent.q1, t1, up1, false).input;
    const Tensor g2 = mlp_backward(agent.q2, t2, up2, false).input;
    const size_t ds = states.cols();
    dq_da = Tensor(n, actions.cols());
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < actions.cols(); ++j)
        dq_da(i, j) = g1(i, ds + j) + g2(i, ds + j);
  };
}

ActorGradient actor_gradient(const ConservativeAgent& agent,
                             const Tensor& states, const CriticFn& critic,
                             Rng& rng) {
  const PolicyForward pf = policy_forward(agent.policy, states, &rng);
  std::vector<double> q;
  Tensor dq_da;
  critic(states, pf.action, q, dq_da);
  const size_t n = states.rows();
  const size_t da = pf.action.cols();
  const double alpha = agent.alpha();
  const double inv_n = 1.0 / static_cast<double>(n);

  ActorGradient out;
  Tensor upstream(n, 2 * da);
  for (size_t i = 0; i < n; ++i) {
    out.loss += alpha * pf.log_prob[i] - q[i];
    out.mean_log_prob += pf.log_prob[i];
    for (size_t j = 0; j < da; ++j) {
      const double a = pf.action(i, j);
      const double one_minus = 1.0 - a * a;
      const double sigma = std::exp(pf.log_std(i, j));
      const double eps = pf.noise(i, j);
      // d log pi / d u through the tanh correction term
      const double dlogp_du = 2.0 * a * one_minus / (one_minus + kSquashEps);
      const double dq_du = dq_da(i, j) * one_minus;
      upstream(i, j) = (alpha * dlogp_du - dq_du) * inv_n;
      const double raw = pf.raw_log_std(i, j);
      const bool inside = raw > ConservativeAgent::kMinLogStd &&
                          raw < ConservativeAgent::kMaxLogStd;
      upstream(i, da + j) =
          inside ? (alpha * (-1.0 + dlogp_du * sigma * eps) - dq_du * sigma * eps) *
                       inv_n
                 : 0.0;
    }
  }
  out.loss *= inv_n;
  out.mean_log_prob *= inv_n;
  out.grad = mlp_backward(agent.policy, pf.tape, upstream).params;
  return out;
}

ActorMetrics actor_update(ConservativeAgent& agent, const Tensor& states,
                          const ComboCfg& cfg, const CriticFn& critic,
                          Rng& rng) {
  if (states.rows() == 0) throw std::invalid_argument("actor_update: empty batch");
  const ActorGradient g = actor_gradient(agent, states, critic, rng);
  if (!std::isfinite(g.loss)) throw NonFiniteError("non-finite actor loss");
  adam_update(agent.policy, g.grad, agent.policy_opt);
  if (cfg.auto_alpha) {
    const double grad = -(g.mean_log_prob + agent.target_entropy);
    agent.log_alpha = agent.alpha_opt.update(agent.log_alpha, grad);
  }
  return {g.loss, agent.alpha(), -g.mean_log_prob};
}

ActorMetrics actor_update(ConservativeAgent& agent, const Tensor& states,
                          const ComboCfg& cfg, Rng& rng) {
  return actor_update(agent, states, cfg, min_critic_fn(agent), rng);
}

double average_dataset_q(const ConservativeAgent& agent, const Dataset& d,
                         size_t n_sample, Rng& rng) {
  if (n_sample == 0) throw std::invalid_argument("average_dataset_q: n_sample must be >= 1");
  const auto idx = sample_indices(d.size(), n_sample, rng);
  std::vector<Transition> batch;
  batch.reserve(n_sample);
  for (size_t i : idx) batch.push_back(d.transitions[i]);
  const auto t = unpack(batch);
  const auto q = q_values(agent, t.s, t.a, QHead::kQ1);
  double acc = 0.0;
  for (double v : q) acc += v;
  return acc / static_cast<double>(q.size());
}

double full_dataset_q(const ConservativeAgent& agent, const Dataset& d) {
  const auto t = unpack(d.transitions);
  const auto q = q_values(agent, t.s, t.a, QHead::kQ1);
  double acc = 0.0;
  for (double v : q) acc += v;
  return acc / static_cast<double>(q.size());
}

void save_agent(const std::filesystem::path& dir, const ConservativeAgent& agent,
                const ComboCfg& cfg) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "q1.pnf", agent.q1);
  save_checkpoint(dir / "q2.pnf", agent.q2);
  save_checkpoint(dir / "q1_target.pnf", agent.q1_target);
  save_checkpoint(dir / "q2_target.pnf", agent.q2_target);
  save_checkpoint(dir / "policy.pnf", agent.policy);
  std::ofstream os(dir / "combo.txt");
  if (!os) throw std::runtime_error("cannot write " + (dir / "combo.txt").string());
  os << "beta = " << format_real(cfg.beta) << "\n"
     << "gamma = " << format_real(cfg.gamma) << "\n"
     << "f = " << format_real(cfg.f) << "\n"
     << "tau = " << format_real(cfg.tau) << "\n"
     << "alpha = " << format_real(cfg.alpha) << "\n"
     << "auto_alpha = " << (cfg.auto_alpha ? "true" : "false") << "\n"
     << "td_batch = " << cfg.td_batch << "\n"
     << "dataset_batch = " << cfg.dataset_batch << "\n"
     << "model_batch = " << cfg.model_batch << "\n"
     << "log_alpha = " << format_real(agent.log_alpha) << "\n"
     << "state_dim = " << agent.state_dim << "\n"
     << "action_dim = " << agent.action_dim << "\n";
}

ConservativeAgent load_agent(const std::filesystem::path& dir,
                             const ComboCfg& cfg) {
  ConservativeAgent agent;
  agent.q1 = load_checkpoint(dir / "q1.pnf");
  agent.q2 = load_checkpoint(dir / "q2.pnf");
  agent.q1_target = load_checkpoint(dir / "q1_target.pnf");
  agent.q2_target = load_checkpoint(dir / "q2_target.pnf");
  agent.policy = load_checkpoint(dir / "policy.pnf");
  agent.action_dim = agent.policy.out_dim() / 2;
  agent.state_dim = agent.policy.in_dim();
  if (agent.q1.in_dim() != agent.state_dim + agent.action_dim)
    throw DimensionError("agent checkpoint: critic and policy dims disagree");
  agent.q1_opt = make_adam(agent.q1, cfg.critic_lr);
  agent.q2_opt = make_adam(agent.q2, cfg.critic_lr);
  agent.policy_opt = make_adam(agent.policy, cfg.actor_lr);
  agent.alpha_opt.lr = cfg.alpha_lr;
  agent.target_entropy = -static_cast<double>(agent.action_dim);
  agent.log_alpha = std::log(cfg.alpha);
  std::ifstream is(dir / "combo.txt");
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    key.erase(key.find_last_not_of(' ') + 1);
    if (key == "log_alpha") agent.log_alpha = std::stod(line.substr(eq + 1));
  }
  return agent;
}

}  // namespace pnfrl

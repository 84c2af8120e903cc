#ifndef PNFRL_TESTS_HELPERS_HPP_
#define PNFRL_TESTS_HELPERS_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "pnfrl/agent.hpp"
#include "pnfrl/diffcore.hpp"
#include "pnfrl/ensemble.hpp"
#include "pnfrl/envdata.hpp"
#include "pnfrl/rng.hpp"

namespace testutil {

inline pnfrl::Layer dense(size_t out, size_t in, std::vector<double> w,
                          std::vector<double> b,
                          pnfrl::Activation act = pnfrl::Activation::kIdentity) {
  pnfrl::Layer l;
  l.weight = pnfrl::Tensor({out, in}, std::move(w));
  l.bias = pnfrl::Tensor({out}, std::move(b));
  l.activation = act;
  return l;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Q(s, a) = w . [s; a] + c as a one-layer network
inline pnfrl::MlpParams linear_critic(const std::vector<double>& w, double c = 0.0) {
  return pnfrl::MlpParams{{dense(1, w.size(), w, {c})}};
}

// constant policy: pre-squash mean atanh(a0), log std ls, whatever the state
inline pnfrl::MlpParams constant_policy(size_t state_dim,
                                        const std::vector<double>& a0,
                                        double ls = -1.0) {
  const size_t da = a0.size();
  std::vector<double> bias;
  for (double a : a0) bias.push_back(std::atanh(a));
  for (size_t i = 0; i < da; ++i) bias.push_back(ls);
  return pnfrl::MlpParams{
      {dense(2 * da, state_dim, std::vector<double>(2 * da * state_dim, 0.0), bias)}};
}

// Agent whose critics (and targets) are all the given linear map.
inline pnfrl::ConservativeAgent linear_agent(size_t ds, size_t da,
                                             const std::vector<double>& w,
                                             const std::vector<double>& a0) {
  pnfrl::ComboCfg cfg;
  cfg.hidden = {4};
  auto agent = pnfrl::make_agent(ds, da, cfg, 1);
  agent.q1 = agent.q2 = agent.q1_target = agent.q2_target = linear_critic(w);
  agent.policy = constant_policy(ds, a0);
  agent.q1_opt = agent.q2_opt = pnfrl::make_adam(agent.q1);
  agent.policy_opt = pnfrl::make_adam(agent.policy);
  return agent;
}

inline pnfrl::Transition transition(std::vector<double> s, std::vector<double> a,
                                    double r, std::vector<double> s_next,
                                    bool done = false) {
  pnfrl::Transition t;
  t.s = std::move(s);
  t.a = std::move(a);
  t.r = r;
  t.s_next = std::move(s_next);
  t.done = done;
  return t;
}

// Ensemble of identical-architecture members built from explicit weights;
// identity normalizers so normalized space equals raw space.
inline pnfrl::DynamicsEnsemble explicit_ensemble(size_t ds, size_t da,
                                                 std::vector<pnfrl::MlpParams> members) {
  return pnfrl::make_ensemble(ds, da, std::move(members),
                              pnfrl::Normalizer::identity(ds + da),
                              pnfrl::Normalizer::identity(ds + 1), true);
}

// member whose mean output is `mean` and raw logvar is `logvar`, for any input
inline pnfrl::MlpParams constant_member(size_t in, const std::vector<double>& mean,
                                        const std::vector<double>& logvar) {
  std::vector<double> bias = mean;
  bias.insert(bias.end(), logvar.begin(), logvar.end());
  return pnfrl::MlpParams{
      {dense(bias.size(), in, std::vector<double>(bias.size() * in, 0.0), bias)}};
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pnfrl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}


// s' = A s + B a + noise, r = c . s, with dS = 3, dA = 1; states and
// actions uniform on [-1, 1]
struct LinearSystem {
  std::vector<std::vector<double>> A = {{0.9, 0.1, 0.0}, {-0.1, 0.8, 0.2}, {0.0, -0.2, 0.95}};
  std::vector<double> B = {0.1, 0.0, -0.3};
  std::vector<double> c = {0.5, -1.0, 0.25};

  std::vector<double> next(const std::vector<double>& s, double a) const {
    std::vector<double> out(3, 0.0);
    for (size_t i = 0; i < 3; ++i) {
      for (size_t j = 0; j < 3; ++j) out[i] += A[i][j] * s[j];
      out[i] += B[i] * a;
    }
    return out;
  }
  double reward(const std::vector<double>& s) const {
    return c[0] * s[0] + c[1] * s[1] + c[2] * s[2];
  }

  pnfrl::Dataset dataset(size_t n, uint64_t seed, double noise = 0.01) const {
    pnfrl::Rng rng(seed);
    pnfrl::Dataset d;
    d.env = pnfrl::custom_spec(3, 1);
    for (size_t k = 0; k < n; ++k) {
      std::vector<double> s = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const double a = rng.uniform(-1, 1);
      auto sn = next(s, a);
      for (double& v : sn) v += noise * rng.normal();
      pnfrl::Transition t;
      t.ep = static_cast<int>(k);
      t.s = s;
      t.a = {a};
      t.r = reward(s) + noise * rng.normal();
      t.s_next = sn;
      d.transitions.push_back(std::move(t));
    }
    return d;
  }
};

}  // namespace testutil

#endif  // PNFRL_TESTS_HELPERS_HPP_

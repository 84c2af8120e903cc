#include "pnfrl/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <utility>

namespace pnfrl {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty())
    throw ConfigError("config key '" + std::string(key) + "': '" + s +
                      "' is not a number");
  return out;
}

template <typename Int>
Int to_int(std::string_view key, std::string_view v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config key '" + std::string(key) + "': '" +
                      std::string(v) + "' is not a valid integer");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': '" +
                    std::string(v) + "' is not a boolean");
}

std::vector<size_t> to_sizes(std::string_view key, std::string_view v) {
  std::vector<size_t> out;
  std::string item;
  std::istringstream is{std::string(v)};
  while (std::getline(is, item, ',')) out.push_back(to_int<size_t>(key, trim(item)));
  if (out.empty())
    throw ConfigError("config key '" + std::string(key) + "' needs at least one size");
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_sizes(const std::vector<size_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  std::function<void(TrainCfg&, std::string_view, std::string_view)> set;
  std::function<std::string(const TrainCfg&)> get;
};

#define REAL(name, expr)                                                    \
  {name,                                                                    \
   {[](TrainCfg& c, std::string_view k, std::string_view v) {               \
      c.expr = to_double(k, v);                                             \
    },                                                                      \
    [](const TrainCfg& c) { return fmt(c.expr); }}}
#define INT(name, type, expr)                                               \
  {name,                                                                    \
   {[](TrainCfg& c, std::string_view k, std::string_view v) {               \
      c.expr = to_int<type>(k, v);                                          \
    },                                                                      \
    [](const TrainCfg& c) { return std::to_string(c.expr); }}}
#define BOOL(name, expr)                                                    \
  {name,                                                                    \
   {[](TrainCfg& c, std::string_view k, std::string_view v) {               \
      c.expr = to_bool(k, v);                                               \
    },                                                                      \
    [](const TrainCfg& c) { return std::string(c.expr ? "true" : "false"); }}}
#define SIZES(name, expr)                                                   \
  {name,                                                                    \
   {[](TrainCfg& c, std::string_view k, std::string_view v) {               \
      c.expr = to_sizes(k, v);                                              \
    },                                                                      \
    [](const TrainCfg& c) { return fmt_sizes(c.expr); }}}
#define ENUM(name, expr, parse, show)                                       \
  {name,                                                                    \
   {[](TrainCfg& c, std::string_view, std::string_view v) {                 \
      c.expr = parse(v);                                                    \
    },                                                                      \
    [](const TrainCfg& c) { return show(c.expr); }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      INT("H", int, H),
      INT("n_start", size_t, n_start),
      REAL("f_aug", f_aug),
      INT("n_epochs", int, n_epochs),
      INT("steps_per_epoch", int, steps_per_epoch),
      ENUM("rollout_policy", rollout_policy, parse_rollout_policy,
           rollout_policy_name),
      INT("seed", uint64_t, seed),
      REAL("val_fraction", val_fraction),
      INT("adq_samples", size_t, adq_samples),
      INT("eval_episodes", int, eval_episodes),
      INT("buffer_capacity", size_t, buffer_capacity),
      REAL("dataset_fraction", dataset_fraction),
      BOOL("trace", trace),
      BOOL("dump_rollouts", dump_rollouts),

      REAL("beta", combo.beta),
      REAL("gamma", combo.gamma),
      REAL("f", combo.f),
      REAL("tau", combo.tau),
      REAL("alpha", combo.alpha),
      BOOL("auto_alpha", combo.auto_alpha),
      INT("td_batch", size_t, combo.td_batch),
      INT("dataset_batch", size_t, combo.dataset_batch),
      INT("model_batch", size_t, combo.model_batch),
      REAL("critic_lr", combo.critic_lr),
      REAL("actor_lr", combo.actor_lr),
      REAL("alpha_lr", combo.alpha_lr),
      SIZES("hidden", combo.hidden),

      INT("n_steps", size_t, pnf.n_steps),
      REAL("delta_max", pnf.delta_max),
      ENUM("mode", pnf.mode, parse_perturb_mode, perturb_mode_name),
      ENUM("sign", pnf.sign, parse_step_sign, step_sign_name),
      INT("max_rounds", size_t, pnf.max_rounds),
      ENUM("uncertainty_mode", pnf.uncertainty_mode, parse_uncertainty_mode,
           uncertainty_mode_name),

      INT("model_members", size_t, model.n_members),
      SIZES("model_hidden", model.hidden),
      REAL("model_lr", model.lr),
      INT("model_batch_size", size_t, model.batch_size),
      INT("model_max_epochs", int, model.max_epochs),
      INT("model_patience", int, model.patience),
      BOOL("model_bootstrap", model.bootstrap),
      BOOL("model_parallel", model.parallel),
  };
  return table;
}

#undef REAL
#undef INT
#undef BOOL
#undef SIZES
#undef ENUM

}  // namespace

void apply_config_value(TrainCfg& cfg, std::string_view key,
                        std::string_view value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

TrainCfg parse_config(std::istream& is, TrainCfg base) {
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    try {
      apply_config_value(base, trim(std::string_view(body).substr(0, eq)),
                         trim(std::string_view(body).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

TrainCfg load_config(const std::filesystem::path& path, TrainCfg base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  return parse_config(is, std::move(base));
}

std::string dump_config(const TrainCfg& cfg) {
  std::string out;
  for (const auto& [name, field] : fields())
    out += name + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace pnfrl

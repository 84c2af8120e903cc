#include "pnfrl/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace pnfrl {
namespace {

double clamp_logvar(double raw) {
  return std::clamp(raw, DynamicsEnsemble::kMinLogVar,
                    DynamicsEnsemble::kMaxLogVar);
}

// [s, a] rows, normalized
Tensor model_inputs(const DynamicsEnsemble& model, const Tensor& states,
                    const Tensor& actions) {
  if (states.cols() != model.state_dim || actions.cols() != model.action_dim ||
      states.rows() != actions.rows())
    throw DimensionError("ensemble input dimension mismatch");
  const size_t n = states.rows();
  Tensor x(n, model.state_dim + model.action_dim);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < model.state_dim; ++j) x(i, j) = states(i, j);
    for (size_t j = 0; j < model.action_dim; ++j)
      x(i, model.state_dim + j) = actions(i, j);
  }
  model.input.normalize(x);
  return x;
}

// normalized [ds, r] targets
Tensor model_targets(const Dataset& d) {
  const size_t ds = d.env.state_dim;
  Tensor y(d.size(), ds + 1);
  for (size_t i = 0; i < d.size(); ++i) {
    const auto& tr = d.transitions[i];
    for (size_t j = 0; j < ds; ++j) y(i, j) = tr.s_next[j] - tr.s[j];
    y(i, ds) = tr.r;
  }
  return y;
}

Tensor raw_inputs(const Dataset& d) {
  return model_inputs(
      DynamicsEnsemble{d.env.state_dim, d.env.action_dim, {},
                       Normalizer::identity(d.env.state_dim + d.env.action_dim),
                       Normalizer::identity(d.env.state_dim + 1)},
      stack_states(d.transitions), stack_actions(d.transitions));
}

Tensor gather_rows(const Tensor& t, std::span<const size_t> idx) {
  Tensor out(idx.size(), t.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    const auto src = t.row_span(idx[i]);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  return out;
}

// NLL value and upstream gradient w.r.t. the member's raw outputs
double nll_with_grad(const Tensor& out, const Tensor& targets, Tensor* grad) {
  const size_t n = out.rows();
  const size_t d = targets.cols();
  const double inv = 1.0 / static_cast<double>(n * d);
  double loss = 0.0;
  if (grad) *grad = Tensor(out.shape());
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) {
      const double mu = out(i, j);
      const double raw = out(i, d + j);
      const double lv = clamp_logvar(raw);
      const double err = targets(i, j) - mu;
      const double prec = std::exp(-lv);
      loss += 0.5 * (err * err * prec + lv);
      if (grad) {
        (*grad)(i, j) = -err * prec * inv;
        const bool inside = raw > DynamicsEnsemble::kMinLogVar &&
                            raw < DynamicsEnsemble::kMaxLogVar;
        (*grad)(i, d + j) = inside ? 0.5 * (1.0 - err * err * prec) * inv : 0.0;
      }
    }
  }
  return loss * inv;
}

double evaluate_nll(const MlpParams& member, const Tensor& x, const Tensor& y) {
  return nll_with_grad(mlp_forward(member, x), y, nullptr);
}

MemberFitReport fit_member(MlpParams& member, const Tensor& x_train,
                           const Tensor& y_train, const Tensor& x_val,
                           const Tensor& y_val, const EnsembleCfg& cfg,
                           size_t index, Rng rng) {
  const size_t n = x_train.rows();
  std::vector<size_t> pool(n);
  for (size_t i = 0; i < n; ++i) pool[i] = cfg.bootstrap ? rng.index(n) : i;

  AdamState adam = make_adam(member, cfg.lr);
  MemberFitReport report;
  report.best_val_nll = evaluate_nll(member, x_val, y_val);
  MlpParams best = member;
  int since_best = 0;
  const size_t batch = std::max<size_t>(1, std::min(cfg.batch_size, n));
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (size_t i = n - 1; i > 0; --i) std::swap(pool[i], pool[rng.index(i + 1)]);
    for (size_t start = 0; start < n; start += batch) {
      const size_t len = std::min(batch, n - start);
      const std::span<const size_t> idx(pool.data() + start, len);
      const Tensor xb = gather_rows(x_train, idx);
      const Tensor yb = gather_rows(y_train, idx);
      MlpTape tape;
      const Tensor out = mlp_forward(member, xb, &tape);
      Tensor upstream;
      const double loss = nll_with_grad(out, yb, &upstream);
      if (!std::isfinite(loss))
        throw EnsembleFitError("ensemble member " + std::to_string(index) +
                                   " diverged (non-finite loss) in epoch " +
                                   std::to_string(epoch),
                               index);
      adam_update(member, mlp_backward(member, tape, upstream).params, adam);
    }
    const double val = evaluate_nll(member, x_val, y_val);
    if (!std::isfinite(val))
      throw EnsembleFitError("ensemble member " + std::to_string(index) +
                                 " diverged (non-finite validation loss)",
                             index);
    report.epochs_run = epoch;
    report.final_val_nll = val;
    if (val < report.best_val_nll) {
      report.best_val_nll = val;
      report.best_epoch = epoch;
      best = member;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (report.epochs_run == 0) report.final_val_nll = report.best_val_nll;
  member = std::move(best);
  return report;
}

std::string format_real(double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<size_t>(n));
}

}  // namespace

UncertaintyMode parse_uncertainty_mode(std::string_view name) {
  if (name == "disagreement_max_dev") return UncertaintyMode::kDisagreementMaxDev;
  if (name == "aleatoric_max_std") return UncertaintyMode::kAleatoricMaxStd;
  if (name == "std_of_means") return UncertaintyMode::kStdOfMeans;
  throw ConfigError("unknown uncertainty mode '" + std::string(name) + "'");
}

std::string uncertainty_mode_name(UncertaintyMode mode) {
  switch (mode) {
    case UncertaintyMode::kDisagreementMaxDev:
      return "disagreement_max_dev";
    case UncertaintyMode::kAleatoricMaxStd:
      return "aleatoric_max_std";
    case UncertaintyMode::kStdOfMeans:
      return "std_of_means";
  }
  return "?";
}

Normalizer Normalizer::identity(size_t dim) {
  return Normalizer{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
}

Normalizer Normalizer::fit(const Tensor& data) {
  const size_t n = data.rows();
  const size_t d = data.cols();
  Normalizer norm{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  for (size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += data(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) var += (data(i, j) - mean) * (data(i, j) - mean);
    var /= static_cast<double>(n);
    norm.shift[j] = mean;
    const double sd = std::sqrt(var);
    norm.scale[j] = sd > 1e-8 ? sd : 1.0;
  }
  return norm;
}

void Normalizer::normalize(Tensor& t) const {
  if (t.cols() != dim()) throw DimensionError("normalizer dimension mismatch");
  for (size_t i = 0; i < t.rows(); ++i)
    for (size_t j = 0; j < dim(); ++j) t(i, j) = (t(i, j) - shift[j]) / scale[j];
}

DynamicsEnsemble make_ensemble(size_t state_dim, size_t action_dim,
                               std::vector<MlpParams> members,
                               Normalizer input, Normalizer output,
                               bool allow_single) {
  if (members.empty() || (members.size() < 2 && !allow_single))
    throw std::invalid_argument("an ensemble needs at least 2 members");
  if (input.dim() != state_dim + action_dim || output.dim() != state_dim + 1)
    throw DimensionError("normalizer dimensions do not match the ensemble");
  for (double s : input.scale)
    if (!(s > 0.0)) throw std::invalid_argument("normalizer scale must be > 0");
  for (double s : output.scale)
    if (!(s > 0.0)) throw std::invalid_argument("normalizer scale must be > 0");
  for (size_t m = 0; m < members.size(); ++m) {
    validate(members[m]);
    if (members[m].in_dim() != state_dim + action_dim ||
        members[m].out_dim() != 2 * (state_dim + 1))
      throw DimensionError("member " + std::to_string(m) +
                           " has the wrong input/output width");
  }
  DynamicsEnsemble model;
  model.state_dim = state_dim;
  model.action_dim = action_dim;
  model.members = std::move(members);
  model.input = std::move(input);
  model.output = std::move(output);
  return model;
}

EnsembleFit fit_ensemble(const Dataset& train, const Dataset& val,
                         const EnsembleCfg& cfg) {
  if (train.size() == 0 || val.size() == 0)
    throw std::invalid_argument("fit_ensemble: train and val must be nonempty");
  if (train.env.state_dim != val.env.state_dim ||
      train.env.action_dim != val.env.action_dim)
    throw std::invalid_argument("fit_ensemble: train and val come from different envs");
  if (cfg.n_members < 2)
    throw ConfigError("fit_ensemble: need at least 2 members");

  const size_t ds = train.env.state_dim;
  const size_t da = train.env.action_dim;
  Tensor x_train = raw_inputs(train);
  Tensor y_train = model_targets(train);
  Tensor x_val = raw_inputs(val);
  Tensor y_val = model_targets(val);
  const Normalizer in_norm = Normalizer::fit(x_train);
  const Normalizer out_norm = Normalizer::fit(y_train);
  in_norm.normalize(x_train);
  in_norm.normalize(x_val);
  out_norm.normalize(y_train);
  out_norm.normalize(y_val);

  std::vector<size_t> sizes;
  sizes.push_back(ds + da);
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(2 * (ds + 1));

  const Rng root(cfg.seed);
  std::vector<MlpParams> members;
  for (size_t m = 0; m < cfg.n_members; ++m) {
    Rng init = root.split(2 * m);
    members.push_back(make_mlp(sizes, Activation::kTanh, init));
  }
  std::vector<MemberFitReport> reports(cfg.n_members);

  auto train_one = [&](size_t m) {
    reports[m] = fit_member(members[m], x_train, y_train, x_val, y_val, cfg, m,
                            root.split(2 * m + 1));
  };
  const bool threaded =
      cfg.parallel && std::thread::hardware_concurrency() > 1;
  if (threaded) {
    std::vector<std::exception_ptr> errors(cfg.n_members);
    std::vector<std::thread> workers;
    for (size_t m = 0; m < cfg.n_members; ++m)
      workers.emplace_back([&, m] {
        try {
          train_one(m);
        } catch (...) {
          errors[m] = std::current_exception();
        }
      });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (size_t m = 0; m < cfg.n_members; ++m) train_one(m);
  }

  EnsembleFit fit;
  fit.model = make_ensemble(ds, da, std::move(members), in_norm, out_norm);
  fit.reports = std::move(reports);
  return fit;
}

NormalizedPrediction predict_normalized(const DynamicsEnsemble& model,
                                        const Tensor& states,
                                        const Tensor& actions) {
  const Tensor x = model_inputs(model, states, actions);
  const size_t d = model.out_dim();
  NormalizedPrediction pred;
  for (const auto& member : model.members) {
    const Tensor out = mlp_forward(member, x);
    Tensor mean(x.rows(), d);
    Tensor logvar(x.rows(), d);
    for (size_t i = 0; i < x.rows(); ++i)
      for (size_t j = 0; j < d; ++j) {
        mean(i, j) = out(i, j);
        logvar(i, j) = clamp_logvar(out(i, d + j));
      }
    pred.mean.push_back(std::move(mean));
    pred.logvar.push_back(std::move(logvar));
  }
  return pred;
}

std::vector<MemberPrediction> predict_members(const DynamicsEnsemble& model,
                                              std::span<const double> s,
                                              std::span<const double> a) {
  const auto pred = predict_normalized(model, Tensor::row(s), Tensor::row(a));
  const size_t d = model.out_dim();
  std::vector<MemberPrediction> out;
  for (size_t m = 0; m < model.size(); ++m) {
    MemberPrediction p;
    p.mean.resize(d);
    p.std.resize(d);
    for (size_t j = 0; j < d; ++j) {
      p.mean[j] = pred.mean[m](0, j) * model.output.scale[j] + model.output.shift[j];
      p.std[j] = std::exp(0.5 * pred.logvar[m](0, j)) * model.output.scale[j];
    }
    out.push_back(std::move(p));
  }
  return out;
}

double gaussian_nll(const DynamicsEnsemble& model, size_t member,
                    const Tensor& inputs_norm, const Tensor& targets_norm) {
  return evaluate_nll(model.members.at(member), inputs_norm, targets_norm);
}

std::vector<ModelStep> sample_transitions(const DynamicsEnsemble& model,
                                          const Tensor& states,
                                          const Tensor& actions, Rng& rng) {
  const auto pred = predict_normalized(model, states, actions);
  const size_t ds = model.state_dim;
  const size_t d = model.out_dim();
  std::vector<ModelStep> steps(states.rows());
  std::vector<double> sample(d);
  for (size_t i = 0; i < states.rows(); ++i) {
    const size_t m = rng.index(model.size());
    for (size_t j = 0; j < d; ++j) {
      const double mu = pred.mean[m](i, j);
      const double sd = std::exp(0.5 * pred.logvar[m](i, j));
      sample[j] = (mu + sd * rng.normal()) * model.output.scale[j] +
                  model.output.shift[j];
    }
    steps[i].s_next.resize(ds);
    for (size_t j = 0; j < ds; ++j) steps[i].s_next[j] = states(i, j) + sample[j];
    steps[i].r = sample[ds];
  }
  return steps;
}

ModelStep sample_transition(const DynamicsEnsemble& model,
                            std::span<const double> s,
                            std::span<const double> a, Rng& rng) {
  return sample_transitions(model, Tensor::row(s), Tensor::row(a), rng).front();
}

std::vector<double> uncertainty_from_prediction(const NormalizedPrediction& pred,
                                                UncertaintyMode mode) {
  const size_t n_members = pred.mean.size();
  if (n_members < 2 && mode != UncertaintyMode::kAleatoricMaxStd)
    throw std::invalid_argument("ensemble disagreement needs at least 2 members");
  const size_t n = pred.mean.front().rows();
  const size_t d = pred.mean.front().cols();
  std::vector<double> u(n, 0.0);
  std::vector<double> avg(d);
  for (size_t i = 0; i < n; ++i) {
    if (mode == UncertaintyMode::kAleatoricMaxStd) {
      double best = 0.0;
      for (size_t m = 0; m < n_members; ++m) {
        double sq = 0.0;
        for (size_t j = 0; j < d; ++j) sq += std::exp(pred.logvar[m](i, j));
        best = std::max(best, std::sqrt(sq));
      }
      u[i] = best;
      continue;
    }
    // mean as member 0 plus the average offset, so identical members give
    // an exact mean and exactly zero deviations
    std::fill(avg.begin(), avg.end(), 0.0);
    for (size_t m = 1; m < n_members; ++m)
      for (size_t j = 0; j < d; ++j) avg[j] += pred.mean[m](i, j) - pred.mean[0](i, j);
    for (size_t j = 0; j < d; ++j)
      avg[j] = pred.mean[0](i, j) + avg[j] / static_cast<double>(n_members);
    if (mode == UncertaintyMode::kDisagreementMaxDev) {
      double best = 0.0;
      for (size_t m = 0; m < n_members; ++m) {
        double sq = 0.0;
        for (size_t j = 0; j < d; ++j) {
          const double dev = pred.mean[m](i, j) - avg[j];
          sq += dev * dev;
        }
        best = std::max(best, std::sqrt(sq));
      }
      u[i] = best;
    } else {
      // population standard deviation over members, per output dim
      double sq = 0.0;
      for (size_t j = 0; j < d; ++j) {
        double var = 0.0;
        for (size_t m = 0; m < n_members; ++m) {
          const double dev = pred.mean[m](i, j) - avg[j];
          var += dev * dev;
        }
        sq += var / static_cast<double>(n_members);
      }
      u[i] = std::sqrt(sq);
    }
  }
  return u;
}

std::vector<double> uncertainty_batch(const DynamicsEnsemble& model,
                                      const Tensor& states,
                                      const Tensor& actions,
                                      UncertaintyMode mode) {
  return uncertainty_from_prediction(predict_normalized(model, states, actions),
                                     mode);
}

double uncertainty(const DynamicsEnsemble& model, std::span<const double> s,
                   std::span<const double> a, UncertaintyMode mode) {
  return uncertainty_batch(model, Tensor::row(s), Tensor::row(a), mode).front();
}

double true_model_error(const DynamicsEnsemble& model, const EnvSpec& spec,
                        std::span<const double> s, std::span<const double> a) {
  const auto preds = predict_members(model, s, a);
  const size_t ds = model.state_dim;
  const size_t d = model.out_dim();
  std::vector<double> mean(d, 0.0);
  for (const auto& p : preds)
    for (size_t j = 0; j < d; ++j) mean[j] += p.mean[j];
  for (double& v : mean) v /= static_cast<double>(preds.size());
  const StepResult truth = env_step(spec, s, a);
  double err = 0.0;
  for (size_t j = 0; j < ds; ++j) err += std::abs(s[j] + mean[j] - truth.s_next[j]);
  err += std::abs(mean[ds] - truth.r);
  return err / static_cast<double>(d);
}

void save_ensemble(const std::filesystem::path& dir,
                   const DynamicsEnsemble& model) {
  std::filesystem::create_directories(dir);
  for (size_t m = 0; m < model.size(); ++m)
    save_checkpoint(dir / ("member_" + std::to_string(m) + ".pnf"),
                    model.members[m]);
  std::ofstream os(dir / "normalizer.txt");
  if (!os) throw std::runtime_error("cannot write " + (dir / "normalizer.txt").string());
  os << "members " << model.size() << "\n";
  os << "state_dim " << model.state_dim << "\n";
  os << "action_dim " << model.action_dim << "\n";
  auto write_vec = [&os](const char* key, const std::vector<double>& v) {
    os << key;
    for (double x : v) os << ' ' << format_real(x);
    os << '\n';
  };
  write_vec("input_shift", model.input.shift);
  write_vec("input_scale", model.input.scale);
  write_vec("output_shift", model.output.shift);
  write_vec("output_scale", model.output.scale);
}

DynamicsEnsemble load_ensemble(const std::filesystem::path& dir) {
  const auto norm_path = dir / "normalizer.txt";
  std::ifstream is(norm_path);
  if (!is) throw std::runtime_error("cannot open " + norm_path.string());
  size_t n_members = 0, ds = 0, da = 0;
  Normalizer in, out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    auto read_vec = [&](std::vector<double>& v) {
      std::string tok;
      while (ls >> tok) {
        try {
          v.push_back(std::stod(tok));
        } catch (const std::exception&) {
          throw ParseError(norm_path.string() + ": line " +
                               std::to_string(line_no) + ": bad number",
                           line_no);
        }
      }
    };
    if (key == "members") ls >> n_members;
    else if (key == "state_dim") ls >> ds;
    else if (key == "action_dim") ls >> da;
    else if (key == "input_shift") read_vec(in.shift);
    else if (key == "input_scale") read_vec(in.scale);
    else if (key == "output_shift") read_vec(out.shift);
    else if (key == "output_scale") read_vec(out.scale);
    else
      throw ParseError(norm_path.string() + ": line " + std::to_string(line_no) +
                           ": unknown key '" + key + "'",
                       line_no);
  }
  std::vector<MlpParams> members;
  for (size_t m = 0; m < n_members; ++m)
    members.push_back(load_checkpoint(dir / ("member_" + std::to_string(m) + ".pnf")));
  return make_ensemble(ds, da, std::move(members), std::move(in), std::move(out),
                       n_members == 1);
}

Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
  return Tensor::from_rows(rows);
}

Tensor stack_states(const std::vector<Transition>& batch) {
  if (batch.empty()) throw DimensionError("empty transition batch");
  Tensor t(batch.size(), batch.front().s.size());
  for (size_t i = 0; i < batch.size(); ++i)
    std::copy(batch[i].s.begin(), batch[i].s.end(), t.row_span(i).begin());
  return t;
}

Tensor stack_actions(const std::vector<Transition>& batch) {
  if (batch.empty()) throw DimensionError("empty transition batch");
  Tensor t(batch.size(), batch.front().a.size());
  for (size_t i = 0; i < batch.size(); ++i)
    std::copy(batch[i].a.begin(), batch[i].a.end(), t.row_span(i).begin());
  return t;
}

}  // namespace pnfrl

#include "pnfrl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace pnfrl {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(line);
  while (std::getline(is, item, ',')) {
    if (!item.empty() && item.back() == '\r') item.pop_back();
    out.push_back(item);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_real(const std::string& s, size_t line) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size())
    throw ParseError("line " + std::to_string(line) + ": '" + s + "' is not a number", line);
  return v;
}

std::vector<double> column_std(const Tensor& t) {
  const size_t n = t.rows(), d = t.cols();
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) mean[j] += t(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) sd[j] += (t(i, j) - mean[j]) * (t(i, j) - mean[j]);
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s <= 1e-8) s = 1.0;
  }
  return sd;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

void count_sign(SignSummary& s, double d) {
  if (d < 0.0) ++s.negative;
  else if (d > 0.0) ++s.positive;
  else ++s.zero;
}

RunSummary summarize(const std::vector<MetricsRecord>& run, size_t last_k,
                     std::string path) {
  if (run.empty()) throw MetricsError("metrics stream " + path + " has no records");
  RunSummary s;
  s.path = std::move(path);
  s.n_epochs = run.size();
  s.final_score = run.back().score;
  s.final_adq = run.back().adq;
  const size_t k = std::min(last_k == 0 ? run.size() : last_k, run.size());
  std::vector<double> tail;
  for (size_t i = run.size() - k; i < run.size(); ++i) tail.push_back(run[i].adq);
  s.median_adq = median(tail);
  return s;
}

std::vector<double> epoch_medians(const std::vector<std::vector<MetricsRecord>>& runs) {
  size_t n = std::numeric_limits<size_t>::max();
  for (const auto& r : runs) n = std::min(n, r.size());
  std::vector<double> out;
  for (size_t e = 0; e < n; ++e) {
    std::vector<double> col;
    for (const auto& r : runs) col.push_back(r[e].adq);
    out.push_back(median(col));
  }
  return out;
}

}  // namespace

std::vector<double> nn_l2_distances(const Tensor& queries, const Tensor& reference,
                                    bool normalized) {
  if (reference.rows() == 0)
    throw std::invalid_argument("nn_l2_distances: empty reference set");
  if (queries.rows() > 0 && queries.cols() != reference.cols())
    throw DimensionError("nn_l2_distances: query dim " + std::to_string(queries.cols()) +
                             " != reference dim " + std::to_string(reference.cols()));
  const size_t d = reference.cols();
  std::vector<double> scale(d, 1.0);
  if (normalized) scale = column_std(reference);
  std::vector<double> out(queries.rows());
  for (size_t i = 0; i < queries.rows(); ++i) {
    const auto q = queries.row_span(i);
    double best = std::numeric_limits<double>::infinity();
    for (size_t r = 0; r < reference.rows(); ++r) {
      const auto p = reference.row_span(r);
      double acc = 0.0;
      for (size_t j = 0; j < d && acc < best; ++j) {
        const double diff = (q[j] - p[j]) / scale[j];
        acc += diff * diff;
      }
      best = std::min(best, acc);
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

std::vector<double> nn_l2_distances(const Tensor& queries, const Dataset& reference,
                                    bool normalized) {
  return nn_l2_distances(queries, stack_states(reference.transitions), normalized);
}

double median(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty sequence");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  return sorted_quantile(v, 0.5);
}

HistogramSpec histogram(std::span<const double> values, size_t n_bins) {
  if (values.empty()) throw std::invalid_argument("histogram of an empty sequence");
  if (n_bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  HistogramSpec h;
  h.counts.assign(n_bins, 0);
  h.edges.resize(n_bins + 1);
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (size_t i = 0; i <= n_bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.edges.back() = hi;
  for (double v : values) {
    size_t b = n_bins - 1;
    if (width > 0.0 && v < hi)
      b = std::min(n_bins - 1, static_cast<size_t>((v - lo) / width));
    ++h.counts[b];
  }
  h.median = median(values);
  return h;
}

std::string histogram_json(const HistogramSpec& h) {
  nlohmann::ordered_json j;
  j["edges"] = h.edges;
  j["counts"] = h.counts;
  j["median"] = h.median;
  return j.dump();
}

HistogramSpec parse_histogram_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  HistogramSpec h;
  h.edges = j.at("edges").get<std::vector<double>>();
  h.counts = j.at("counts").get<std::vector<size_t>>();
  h.median = j.at("median").get<double>();
  if (h.counts.size() + 1 != h.edges.size())
    throw std::invalid_argument("histogram: counts must be one shorter than edges");
  return h;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman needs two equal-length sequences of >= 2 values");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string category_name(UncertaintyCategory c) {
  switch (c) {
    case UncertaintyCategory::kLow: return "low";
    case UncertaintyCategory::kMid: return "mid";
    case UncertaintyCategory::kHigh: return "high";
  }
  return "mid";
}

UncertaintyCategory parse_category(std::string_view name) {
  if (name == "low") return UncertaintyCategory::kLow;
  if (name == "mid") return UncertaintyCategory::kMid;
  if (name == "high") return UncertaintyCategory::kHigh;
  throw std::invalid_argument("unknown uncertainty category '" + std::string(name) + "'");
}

UncertaintyBand dataset_uncertainty_band(const DynamicsEnsemble& model,
                                         const Dataset& dataset) {
  const auto u = uncertainty_batch(model, stack_states(dataset.transitions),
                                   stack_actions(dataset.transitions),
                                   UncertaintyMode::kDisagreementMaxDev);
  return quantile_band(u);
}

std::vector<UncertaintyErrorRecord> uncertainty_error_table(
    const DynamicsEnsemble& model, const EnvSpec& spec, const Tensor& states,
    const Tensor& actions, const UncertaintyBand& band) {
  if (states.rows() == 0) throw std::invalid_argument("uncertainty_error_table: empty batch");
  const auto u = uncertainty_batch(model, states, actions,
                                   UncertaintyMode::kDisagreementMaxDev);
  std::vector<UncertaintyErrorRecord> rows(states.rows());
  for (size_t i = 0; i < rows.size(); ++i) {
    rows[i].uncertainty = u[i];
    rows[i].true_error =
        true_model_error(model, spec, states.row_span(i), actions.row_span(i));
    rows[i].category = u[i] < band.u_low    ? UncertaintyCategory::kLow
                       : u[i] > band.u_high ? UncertaintyCategory::kHigh
                                            : UncertaintyCategory::kMid;
  }
  return rows;
}

void write_uncertainty_error_csv(std::ostream& os,
                                 const std::vector<UncertaintyErrorRecord>& rows) {
  os << "u_mode1,true_error,category\n";
  for (const auto& r : rows)
    os << fmt(r.uncertainty) << ',' << fmt(r.true_error) << ','
       << category_name(r.category) << '\n';
}

std::vector<UncertaintyErrorRecord> read_uncertainty_error_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty uncertainty table", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "u_mode1,true_error,category")
    throw ParseError("line 1: unexpected header '" + line + "'", 1);
  std::vector<UncertaintyErrorRecord> rows;
  size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 3)
      throw ParseError("line " + std::to_string(n) + ": expected 3 fields", n);
    UncertaintyErrorRecord r;
    r.uncertainty = parse_real(f[0], n);
    r.true_error = parse_real(f[1], n);
    try {
      r.category = parse_category(f[2]);
    } catch (const std::invalid_argument& e) {
      throw ParseError("line " + std::to_string(n) + ": " + e.what(), n);
    }
    rows.push_back(r);
  }
  return rows;
}

void write_state_actions_csv(std::ostream& os, const Tensor& states,
                             const Tensor& actions) {
  if (states.rows() != actions.rows())
    throw DimensionError("write_state_actions_csv: row count mismatch");
  const size_t ds = states.cols(), da = actions.cols();
  for (size_t i = 0; i < ds; ++i) os << (i ? ",s" : "s") << i;
  for (size_t i = 0; i < da; ++i) os << ",a" << i;
  os << '\n';
  for (size_t r = 0; r < states.rows(); ++r) {
    for (size_t i = 0; i < ds; ++i) os << (i ? "," : "") << fmt(states(r, i));
    for (size_t i = 0; i < da; ++i) os << ',' << fmt(actions(r, i));
    os << '\n';
  }
}

StateActions read_state_actions_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty state-action file", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  size_t ds = 0, da = 0;
  for (const auto& h : header) {
    const std::string expect_s = "s" + std::to_string(ds);
    const std::string expect_a = "a" + std::to_string(da);
    if (da == 0 && h == expect_s) ++ds;
    else if (h == expect_a) ++da;
    else throw ParseError("line 1: unexpected column '" + h + "'", 1);
  }
  if (ds == 0) throw ParseError("line 1: no state columns", 1);
  std::vector<double> sdata, adata;
  size_t n = 1, rows = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != ds + da)
      throw ParseError("line " + std::to_string(n) + ": expected " +
                           std::to_string(ds + da) + " fields, got " +
                           std::to_string(f.size()),
                       n);
    for (size_t i = 0; i < ds; ++i) sdata.push_back(parse_real(f[i], n));
    for (size_t i = 0; i < da; ++i) adata.push_back(parse_real(f[ds + i], n));
    ++rows;
  }
  StateActions out;
  out.states = Tensor({rows, ds}, std::move(sdata));
  out.actions = Tensor({rows, da}, std::move(adata));
  return out;
}

StateActions load_state_actions(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_state_actions_csv(is);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

std::vector<MetricsRecord> parse_metrics_jsonl(std::istream& is,
                                               const std::string& source) {
  std::vector<MetricsRecord> out;
  std::string line;
  size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const std::string where = source + " line " + std::to_string(n);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw MetricsError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw MetricsError(where + ": record is not an object");
    auto get = [&](const char* key) -> const nlohmann::json& {
      if (!j.contains(key)) throw MetricsError(where + ": missing key '" + key + "'");
      const auto& v = j[key];
      if (!v.is_number())
        throw MetricsError(where + ": key '" + key + "' is not a number");
      return v;
    };
    MetricsRecord r;
    r.epoch = get("epoch").get<int>();
    r.adq = get("adq").get<double>();
    r.td_loss = get("td_loss").get<double>();
    r.cql_loss = get("cql_loss").get<double>();
    r.actor_loss = get("actor_loss").get<double>();
    r.score = get("score").get<double>();
    r.pnf_accept_rate = get("pnf_accept_rate").get<double>();
    r.pnf_shortfalls = get("pnf_shortfalls").get<size_t>();
    out.push_back(r);
  }
  return out;
}

std::vector<MetricsRecord> read_metrics_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MetricsError("cannot open metrics file " + path.string());
  return parse_metrics_jsonl(is, path.string());
}

RunComparison compare_runs(const std::vector<std::vector<MetricsRecord>>& baseline,
                           const std::vector<std::vector<MetricsRecord>>& treatment,
                           size_t last_k) {
  if (baseline.empty() || baseline.size() != treatment.size())
    throw MetricsError("compare_runs needs equally many (>= 1) baseline and treatment runs");
  RunComparison cmp;
  for (size_t i = 0; i < baseline.size(); ++i) {
    cmp.baseline.push_back(summarize(baseline[i], last_k, "baseline[" + std::to_string(i) + "]"));
    cmp.treatment.push_back(summarize(treatment[i], last_k, "treatment[" + std::to_string(i) + "]"));
    const double dq = cmp.treatment.back().median_adq - cmp.baseline.back().median_adq;
    const double ds = cmp.treatment.back().final_score - cmp.baseline.back().final_score;
    cmp.adq_diffs.push_back(dq);
    cmp.score_diffs.push_back(ds);
    count_sign(cmp.adq_signs, dq);
    count_sign(cmp.score_signs, ds);
  }
  cmp.baseline_epoch_median_adq = epoch_medians(baseline);
  cmp.treatment_epoch_median_adq = epoch_medians(treatment);
  cmp.median_adq_diff = median(cmp.adq_diffs);
  cmp.median_score_diff = median(cmp.score_diffs);
  return cmp;
}

RunComparison compare_runs(const std::vector<std::filesystem::path>& baseline,
                           const std::vector<std::filesystem::path>& treatment,
                           size_t last_k) {
  std::vector<std::vector<MetricsRecord>> b, t;
  for (const auto& p : baseline) b.push_back(read_metrics_jsonl(p));
  for (const auto& p : treatment) t.push_back(read_metrics_jsonl(p));
  RunComparison cmp = compare_runs(b, t, last_k);
  for (size_t i = 0; i < baseline.size(); ++i) {
    cmp.baseline[i].path = baseline[i].string();
    cmp.treatment[i].path = treatment[i].string();
  }
  return cmp;
}

void write_comparison_csv(std::ostream& os, const RunComparison& cmp) {
  os << "pair,baseline,treatment,baseline_median_adq,treatment_median_adq,adq_diff,"
        "baseline_final_score,treatment_final_score,score_diff\n";
  for (size_t i = 0; i < cmp.adq_diffs.size(); ++i) {
    const auto& b = cmp.baseline[i];
    const auto& t = cmp.treatment[i];
    os << i << ',' << b.path << ',' << t.path << ',' << fmt(b.median_adq) << ','
       << fmt(t.median_adq) << ',' << fmt(cmp.adq_diffs[i]) << ','
       << fmt(b.final_score) << ',' << fmt(t.final_score) << ','
       << fmt(cmp.score_diffs[i]) << '\n';
  }
  os << "median,,,,," << fmt(cmp.median_adq_diff) << ",,," << fmt(cmp.median_score_diff)
     << '\n';
  os << "# adq_diff signs: " << cmp.adq_signs.negative << " negative, "
     << cmp.adq_signs.zero << " zero, " << cmp.adq_signs.positive << " positive\n";
  os << "# score_diff signs: " << cmp.score_signs.negative << " negative, "
     << cmp.score_signs.zero << " zero, " << cmp.score_signs.positive << " positive\n";
}

}  // namespace pnfrl

#ifndef PNFRL_ANALYSIS_HPP_
#define PNFRL_ANALYSIS_HPP_

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pnfrl/diffcore.hpp"
#include "pnfrl/ensemble.hpp"
#include "pnfrl/envdata.hpp"
#include "pnfrl/pnf.hpp"

namespace pnfrl {

// Per query row, the smallest L2 distance to any reference row. With
// normalized = true each dimension is divided by the reference std first.
std::vector<double> nn_l2_distances(const Tensor& queries, const Tensor& reference,
                                    bool normalized = false);
std::vector<double> nn_l2_distances(const Tensor& queries, const Dataset& reference,
                                    bool normalized = false);

struct HistogramSpec {
  std::vector<double> edges;
  std::vector<size_t> counts;
  double median = 0.0;
};

// Equal-width bins over [min, max]; the max value lands in the last bin.
HistogramSpec histogram(std::span<const double> values, size_t n_bins = 50);
std::string histogram_json(const HistogramSpec& h);
HistogramSpec parse_histogram_json(const std::string& text);

double median(std::span<const double> values);
// Pearson correlation of average ranks.
double spearman(std::span<const double> x, std::span<const double> y);

enum class UncertaintyCategory { kLow, kMid, kHigh };
std::string category_name(UncertaintyCategory c);
UncertaintyCategory parse_category(std::string_view name);

struct UncertaintyErrorRecord {
  double uncertainty = 0.0;
  double true_error = 0.0;
  UncertaintyCategory category = UncertaintyCategory::kMid;
};

// (0.25, 0.75) quantiles of mode-1 uncertainty over every dataset pair.
UncertaintyBand dataset_uncertainty_band(const DynamicsEnsemble& model,
                                         const Dataset& dataset);

// Mode-1 uncertainty, ground-truth error and band category for each pair.
// Values on a band edge count as mid.
std::vector<UncertaintyErrorRecord> uncertainty_error_table(
    const DynamicsEnsemble& model, const EnvSpec& spec, const Tensor& states,
    const Tensor& actions, const UncertaintyBand& band);

void write_uncertainty_error_csv(std::ostream& os,
                                 const std::vector<UncertaintyErrorRecord>& rows);
std::vector<UncertaintyErrorRecord> read_uncertainty_error_csv(std::istream& is);

// s0..s{dS-1},a0..a{dA-1} CSV, the rollouts.csv layout.
struct StateActions {
  Tensor states;
  Tensor actions;
};
void write_state_actions_csv(std::ostream& os, const Tensor& states,
                             const Tensor& actions);
StateActions read_state_actions_csv(std::istream& is);
StateActions load_state_actions(const std::filesystem::path& path);

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricsRecord {
  int epoch = 0;
  double adq = 0.0;
  double td_loss = 0.0;
  double cql_loss = 0.0;
  double actor_loss = 0.0;
  double score = 0.0;
  double pnf_accept_rate = 0.0;
  size_t pnf_shortfalls = 0;
};

// source names the stream in error messages
std::vector<MetricsRecord> parse_metrics_jsonl(std::istream& is,
                                               const std::string& source);
std::vector<MetricsRecord> read_metrics_jsonl(const std::filesystem::path& path);

struct RunSummary {
  std::string path;
  size_t n_epochs = 0;
  double final_score = 0.0;
  double final_adq = 0.0;
  double median_adq = 0.0;  // over the last k epochs
};

struct SignSummary {
  size_t negative = 0;
  size_t zero = 0;
  size_t positive = 0;
};

struct RunComparison {
  std::vector<RunSummary> baseline;
  std::vector<RunSummary> treatment;
  // per-epoch median across seeds, truncated to the shortest run
  std::vector<double> baseline_epoch_median_adq;
  std::vector<double> treatment_epoch_median_adq;
  // treatment minus baseline, pair by pair
  std::vector<double> adq_diffs;
  std::vector<double> score_diffs;
  SignSummary adq_signs;
  SignSummary score_signs;
  double median_adq_diff = 0.0;
  double median_score_diff = 0.0;
};

// Runs are paired by position.
RunComparison compare_runs(const std::vector<std::filesystem::path>& baseline,
                           const std::vector<std::filesystem::path>& treatment,
                           size_t last_k = 10);
RunComparison compare_runs(
    const std::vector<std::vector<MetricsRecord>>& baseline,
    const std::vector<std::vector<MetricsRecord>>& treatment,
    size_t last_k = 10);

// One row per pair plus a trailing summary row.
void write_comparison_csv(std::ostream& os, const RunComparison& cmp);

}  // namespace pnfrl

#endif  // PNFRL_ANALYSIS_HPP_

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "pnfrl/analysis.hpp"

using namespace pnfrl;

namespace {

Tensor random_rows(size_t n, size_t d, Rng& rng) {
  Tensor t(n, d);
  for (double& v : t.data()) v = rng.uniform(-1, 1);
  return t;
}

std::vector<double> dual_loop(const Tensor& q, const Tensor& ref) {
  std::vector<double> out;
  for (size_t i = 0; i < q.rows(); ++i) {
    double best = INFINITY;
    for (size_t j = 0; j < ref.rows(); ++j) {
      double s = 0.0;
      for (size_t k = 0; k < q.cols(); ++k) s += std::pow(q(i, k) - ref(j, k), 2);
      best = std::min(best, std::sqrt(s));
    }
    out.push_back(best);
  }
  return out;
}

MetricsRecord record(int epoch, double adq, double score) {
  MetricsRecord r;
  r.epoch = epoch;
  r.adq = adq;
  r.score = score;
  return r;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("nearest-neighbour distance on a toy reference") {
  const Tensor ref = Tensor::from_rows({{0, 0}, {1, 0}});
  const auto d = nn_l2_distances(Tensor::from_rows({{0.6, 0}, {1, 0}}), ref);
  CHECK(d[0] == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(d[1] == 0.0);
}

TEST_CASE("nearest-neighbour distance matches a dual loop") {
  Rng rng(1);
  const Tensor ref = random_rows(300, 4, rng);
  const Tensor q = random_rows(50, 4, rng);
  const auto got = nn_l2_distances(q, ref);
  const auto want = dual_loop(q, ref);
  for (size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12);

  // reordering the reference changes nothing; a superset never increases
  std::vector<std::vector<double>> rows;
  for (size_t i = 0; i < ref.rows(); ++i)
    rows.emplace_back(ref.row_span(i).begin(), ref.row_span(i).end());
  std::reverse(rows.begin(), rows.end());
  CHECK(nn_l2_distances(q, Tensor::from_rows(rows)) == got);
  for (int i = 0; i < 50; ++i) rows.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1),
                                               rng.uniform(-1, 1), rng.uniform(-1, 1)});
  const auto sup = nn_l2_distances(q, Tensor::from_rows(rows));
  for (size_t i = 0; i < got.size(); ++i) CHECK(sup[i] <= got[i]);
}

TEST_CASE("normalized distances divide by the reference std") {
  const Tensor ref = Tensor::from_rows({{0, 0}, {4, 0}});  // std 2 in x, 0 in y
  const auto d = nn_l2_distances(Tensor::from_rows({{1, 3}}), ref, true);
  CHECK(d[0] == doctest::Approx(std::sqrt(0.25 + 9.0)).epsilon(1e-14));
}

TEST_CASE("histogram of 1..4 with two bins") {
  const std::vector<double> v = {1, 2, 3, 4};
  const HistogramSpec h = histogram(v, 2);
  CHECK(h.counts == std::vector<size_t>{2, 2});
  CHECK(h.edges == std::vector<double>{1.0, 2.5, 4.0});
  CHECK(h.median == 2.5);
}

TEST_CASE("histogram conserves counts; single value; JSON round trip") {
  Rng rng(2);
  std::vector<double> v(1234);
  for (double& x : v) x = rng.normal();
  const HistogramSpec h = histogram(v);
  size_t total = 0;
  for (size_t c : h.counts) total += c;
  CHECK(total == v.size());
  CHECK(h.edges.size() == 51);
  const HistogramSpec back = parse_histogram_json(histogram_json(h));
  CHECK(back.edges == h.edges);
  CHECK(back.counts == h.counts);
  CHECK(back.median == h.median);

  const HistogramSpec one = histogram(std::vector<double>{0.7}, 5);
  size_t n = 0;
  for (size_t c : one.counts) n += c;
  CHECK(n == 1);
  CHECK(one.median == 0.7);
  CHECK_THROWS(histogram(std::vector<double>{}, 5));
}

TEST_CASE("spearman of monotone and reversed sequences") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> y = {2, 4, 8, 16, 32};
  const std::vector<double> z = {5, 4, 3, 2, 1};
  CHECK(spearman(x, y) == doctest::Approx(1.0));
  CHECK(spearman(x, z) == doctest::Approx(-1.0));
  CHECK(spearman(x, std::vector<double>(5, 1.0)) == 0.0);
}

TEST_CASE("uncertainty-error table: exact model gives zero error, categories partition") {
  // the pendulum's upright rest state is a fixed point with zero reward
  const EnvSpec pend = pendulum_spec();
  const std::vector<double> s = {1.0, 0.0, 0.0};
  const auto step = env_step(pend, s, std::vector<double>{0.0});
  std::vector<double> mean = {0.0, 0.0, 0.0, step.r};
  std::vector<MlpParams> members(2, testutil::constant_member(4, mean, {-50, -50, -50, -50}));
  const DynamicsEnsemble exact = testutil::explicit_ensemble(3, 1, members);
  const Tensor states = Tensor::from_rows({s});
  const Tensor actions = Tensor::from_rows({{0.0}});
  const auto rows = uncertainty_error_table(exact, pend, states, actions, UncertaintyBand{0, 1});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].true_error == 0.0);
  CHECK(rows[0].uncertainty == 0.0);
  CHECK(rows[0].category == UncertaintyCategory::kMid);

  Rng rng(3);
  std::vector<MlpParams> rnd;
  for (int i = 0; i < 3; ++i) rnd.push_back(make_mlp({4, 8, 8}, Activation::kTanh, rng));
  const DynamicsEnsemble model = testutil::explicit_ensemble(3, 1, rnd);
  const Dataset d = generate_dataset(pend, Behavior::kMedium, 300, 4);
  const UncertaintyBand band = dataset_uncertainty_band(model, d);
  const auto table = uncertainty_error_table(model, pend, stack_states(d.transitions),
                                             stack_actions(d.transitions), band);
  CHECK(table.size() == 300);
  size_t lo = 0, mid = 0, hi = 0;
  for (const auto& r : table) {
    switch (r.category) {
      case UncertaintyCategory::kLow: ++lo; CHECK(r.uncertainty < band.u_low); break;
      case UncertaintyCategory::kMid: ++mid; break;
      case UncertaintyCategory::kHigh: ++hi; CHECK(r.uncertainty > band.u_high); break;
    }
  }
  CHECK(lo + mid + hi == 300);
  CHECK(lo > 50);
  CHECK(hi > 50);

  std::stringstream ss;
  write_uncertainty_error_csv(ss, table);
  const auto back = read_uncertainty_error_csv(ss);
  REQUIRE(back.size() == table.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].uncertainty == table[i].uncertainty);
    CHECK(back[i].true_error == table[i].true_error);
    CHECK(back[i].category == table[i].category);
  }
}

TEST_CASE("state-action CSV round trip") {
  Rng rng(5);
  const Tensor s = random_rows(7, 3, rng);
  const Tensor a = random_rows(7, 2, rng);
  std::stringstream ss;
  write_state_actions_csv(ss, s, a);
  std::string header;
  std::getline(std::stringstream(ss.str()), header);
  CHECK(header == "s0,s1,s2,a0,a1");
  const StateActions back = read_state_actions_csv(ss);
  CHECK(back.states == s);
  CHECK(back.actions == a);
}

TEST_CASE("metrics parsing reports the missing key and line") {
  std::stringstream ok(
      "{\"epoch\":0,\"adq\":1,\"td_loss\":2,\"cql_loss\":3,\"actor_loss\":4,\"score\":5,"
      "\"pnf_accept_rate\":0.5,\"pnf_shortfalls\":0}\n");
  const auto recs = parse_metrics_jsonl(ok, "ok");
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].score == 5.0);
  std::stringstream bad(
      "{\"epoch\":0,\"adq\":1,\"td_loss\":2,\"cql_loss\":3,\"actor_loss\":4,\"score\":5,"
      "\"pnf_accept_rate\":0.5,\"pnf_shortfalls\":0}\n"
      "{\"epoch\":1,\"td_loss\":2,\"cql_loss\":3,\"actor_loss\":4,\"score\":5,"
      "\"pnf_accept_rate\":0.5,\"pnf_shortfalls\":0}\n");
  try {
    parse_metrics_jsonl(bad, "run.jsonl");
    FAIL("expected MetricsError");
  } catch (const MetricsError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'adq'") != std::string::npos);
    CHECK(msg.find("line 2") != std::string::npos);
  }
}

TEST_CASE("comparing a run with itself gives zero differences") {
  std::vector<MetricsRecord> run;
  for (int e = 0; e < 12; ++e) run.push_back(record(e, 10.0 + e, 50.0 - e));
  const RunComparison c = compare_runs({run, run}, {run, run});
  for (double v : c.adq_diffs) CHECK(v == 0.0);
  for (double v : c.score_diffs) CHECK(v == 0.0);
  CHECK(c.adq_signs.zero == 2);
  CHECK(c.median_adq_diff == 0.0);
}

TEST_CASE("two-record fixture: median of the last k, treatment minus baseline") {
  const std::vector<MetricsRecord> base = {record(0, 4.0, 10.0), record(1, 2.0, 20.0)};
  const std::vector<MetricsRecord> treat = {record(0, 1.0, 15.0), record(1, 3.0, 30.0)};
  const RunComparison c = compare_runs({base}, {treat}, 2);
  REQUIRE(c.adq_diffs.size() == 1);
  CHECK(c.baseline[0].median_adq == 3.0);
  CHECK(c.treatment[0].median_adq == 2.0);
  CHECK(c.adq_diffs[0] == -1.0);
  CHECK(c.score_diffs[0] == 10.0);
  CHECK(c.adq_signs.negative == 1);
  CHECK(c.score_signs.positive == 1);
  CHECK(c.baseline_epoch_median_adq == std::vector<double>{4.0, 2.0});
  CHECK_THROWS(compare_runs({base}, {treat, treat}));

  std::stringstream ss;
  write_comparison_csv(ss, c);
  const std::string text = ss.str();
  CHECK(std::count(text.begin(), text.end(), '\n') >= 2);
}

TEST_CASE("compare reads metrics files") {
  const auto dir = testutil::temp_dir("compare");
  {
    std::ofstream a(dir / "a.jsonl"), b(dir / "b.jsonl");
    for (int e = 0; e < 3; ++e) {
      a << "{\"epoch\":" << e << ",\"adq\":1,\"td_loss\":0,\"cql_loss\":0,\"actor_loss\":0,"
        << "\"score\":2,\"pnf_accept_rate\":0,\"pnf_shortfalls\":0}\n";
      b << "{\"epoch\":" << e << ",\"adq\":3,\"td_loss\":0,\"cql_loss\":0,\"actor_loss\":0,"
        << "\"score\":1,\"pnf_accept_rate\":0,\"pnf_shortfalls\":0}\n";
    }
  }
  const RunComparison c = compare_runs(std::vector<std::filesystem::path>{dir / "a.jsonl"},
                                       std::vector<std::filesystem::path>{dir / "b.jsonl"});
  CHECK(c.adq_diffs == std::vector<double>{2.0});
  CHECK(c.score_diffs == std::vector<double>{-1.0});
  CHECK(c.baseline[0].n_epochs == 3);
}

}  // TEST_SUITE

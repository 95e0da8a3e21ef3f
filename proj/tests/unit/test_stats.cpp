#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "pfnf/error.hpp"
#include "pfnf/stats/stats.hpp"

using namespace pfnf;
using namespace pfnf::stats;
using V = std::vector<double>;

namespace {

nlohmann::json load_fixture(const std::string& name) {
  std::ifstream in(std::string(PFNF_FIXTURE_DIR) + "/" + name);
  REQUIRE(in.good());
  return nlohmann::json::parse(in);
}

ScoreMatrix one_dataset(const std::vector<std::vector<double>>& per_model, MetricKind kind) {
  ScoreMatrix m;
  for (std::size_t k = 0; k < per_model.size(); ++k) {
    m.models.push_back("m" + std::to_string(k));
    m.scores.push_back({per_model[k]});
  }
  m.datasets = {"d"};
  m.metrics = {kind};
  return m;
}

}  // namespace

TEST_CASE("perfect predictions score perfectly") {
  const std::vector<double> y{1.0, -2.0, 3.5};
  CHECK(metric(y, y, MetricKind::kRmse) == 0.0);
  CHECK(metric(y, y, MetricKind::kMae) == 0.0);
  CHECK(metric(y, y, MetricKind::kR2) == 1.0);
  const std::vector<double> labels{0, 1, 1, 0};
  CHECK(metric(labels, labels, MetricKind::kAccuracy) == 1.0);
}

TEST_CASE("two-point regression example") {
  const std::vector<double> y{0.0, 2.0}, p{1.0, 1.0};
  CHECK(metric(y, p, MetricKind::kRmse) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(metric(y, p, MetricKind::kMae) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(metric(y, p, MetricKind::kR2) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("metric preconditions and undefined scores") {
  CHECK_THROWS_AS(metric(V{1.0, 1.0}, V{1.0, 2.0}, MetricKind::kR2), UndefinedScoreError);
  CHECK_THROWS_AS(metric(V{1.0}, V{1.0}, MetricKind::kR2), PreconditionError);
  CHECK_THROWS_AS(metric(V{1.0, 1.0}, V{0.2, 0.9}, MetricKind::kAuroc), UndefinedScoreError);
  CHECK_THROWS_AS(metric(V{0.0, 1.0}, V{0.2, 1.5}, MetricKind::kLogLoss), PreconditionError);
  CHECK_THROWS_AS(metric(V{0.0, 1.0}, V{0.2}, MetricKind::kRmse), PreconditionError);
  CHECK_THROWS_AS(metric(V{}, V{}, MetricKind::kRmse), PreconditionError);
}

TEST_CASE("AUROC equals the all-pairs count") {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.4);
  std::uniform_int_distribution<int> coarse(0, 9);  // forces ties
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(200), s(200);
    for (std::size_t i = 0; i < 200; ++i) {
      y[i] = coin(rng) ? 1.0 : 0.0;
      s[i] = coarse(rng) / 10.0;
    }
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < 200; ++i) {
      for (std::size_t j = 0; j < 200; ++j) {
        if (y[i] != 1.0 || y[j] != 0.0) continue;
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
    // Both are exact dyadic-free rationals with the same denominator.
    CHECK(metric(y, s, MetricKind::kAuroc) == doctest::Approx(wins / pairs).epsilon(1e-14));
  }
}

TEST_CASE("log-loss clips and multi-class forms agree with binary") {
  CHECK(std::isfinite(metric(V{1.0}, V{0.0}, MetricKind::kLogLoss)));
  CHECK(metric(V{1.0}, V{0.0}, MetricKind::kLogLoss) == doctest::Approx(-std::log(1e-15)));
  const std::vector<double> y{0, 1, 1, 0, 1};
  const std::vector<double> p{0.1, 0.8, 0.4, 0.3, 0.9};
  std::vector<std::vector<double>> probs;
  for (double v : p) probs.push_back({1.0 - v, v});
  CHECK(metric(y, probs, MetricKind::kLogLoss) == doctest::Approx(metric(y, p, MetricKind::kLogLoss)));
  CHECK(metric(y, probs, MetricKind::kAuroc) == doctest::Approx(metric(y, p, MetricKind::kAuroc)));
  CHECK(metric(y, probs, MetricKind::kAccuracy) == doctest::Approx(0.8));
  const std::vector<std::vector<double>> three{{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}};
  CHECK(metric(V{0.0, 1.0}, three, MetricKind::kAccuracy) == doctest::Approx(0.5));
  CHECK(metric(V{0.0, 1.0}, three, MetricKind::kLogLoss) ==
        doctest::Approx(-(std::log(0.7) + std::log(0.1)) / 2.0));
  CHECK_THROWS_AS(metric(V{0.0, 1.0}, three, MetricKind::kAuroc), PreconditionError);
}

TEST_CASE("metric names round-trip") {
  for (auto k : {MetricKind::kRmse, MetricKind::kMae, MetricKind::kR2, MetricKind::kAccuracy, MetricKind::kAuroc,
                 MetricKind::kLogLoss}) {
    CHECK(parse_metric(metric_name(k)) == k);
  }
  CHECK_THROWS_AS(parse_metric("f1"), ParseError);
}

TEST_CASE("normalization examples") {
  auto err = normalize_scores(one_dataset({{1.0}, {3.0}}, MetricKind::kRmse));
  CHECK(err.scores[0][0][0] == 1.0);
  CHECK(err.scores[1][0][0] == 0.0);
  auto acc = normalize_scores(one_dataset({{0.2}, {0.8}}, MetricKind::kAccuracy));
  CHECK(acc.scores[0][0][0] == 0.0);
  CHECK(acc.scores[1][0][0] == 1.0);
  auto flat = normalize_scores(one_dataset({{4.0}, {4.0}, {4.0}}, MetricKind::kMae));
  for (const auto& s : flat.scores) CHECK(s[0][0] == 0.5);
  CHECK(flat.normalized);
  CHECK(flat.dataset_higher_better(0));
}

TEST_CASE("normalized scores stay in the unit interval") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  ScoreMatrix m;
  m.models = {"a", "b", "c"};
  m.datasets = {"x", "y", "z", "w"};
  m.metrics = {MetricKind::kRmse, MetricKind::kR2, MetricKind::kAuroc, MetricKind::kLogLoss};
  m.scores.assign(3, std::vector<std::vector<double>>(4, std::vector<double>(5)));
  for (auto& a : m.scores)
    for (auto& b : a)
      for (double& v : b) v = 10.0 * n01(rng);
  const auto out = normalize_scores(m);
  for (const auto& a : out.scores)
    for (const auto& b : a)
      for (double v : b) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("score matrix validation") {
  auto m = one_dataset({{1.0, 2.0}, {1.0}}, MetricKind::kRmse);
  CHECK_THROWS_AS(m.validate(), PreconditionError);
  auto n = one_dataset({{1.0}, {NAN}}, MetricKind::kRmse);
  CHECK_THROWS_AS(n.validate(), PreconditionError);
}

TEST_CASE("Tukey HSD simple cases") {
  CHECK(tukey_hsd_wins({{1, 2, 3}, {1, 2, 3}}) == std::vector<std::size_t>{0, 1});
  const std::vector<double> hi{10, 10 + 1e-6, 10 - 1e-6, 10, 10}, lo{0, 1e-6, -1e-6, 0, 0};
  CHECK(tukey_hsd_wins({lo, hi}) == std::vector<std::size_t>{1});
  // Zero pooled variance: only exact ties with the best.
  CHECK(tukey_hsd_wins({{2, 2}, {1, 1}, {2, 2}}) == std::vector<std::size_t>{0, 2});
  CHECK_THROWS_AS(tukey_hsd_wins({{1, 2}}), PreconditionError);
  CHECK_THROWS_AS(tukey_hsd_wins({{1, 2}, {1}}), PreconditionError);
  CHECK_THROWS_AS(tukey_hsd_wins({{1}, {2}}), PreconditionError);
}

TEST_CASE("Tukey HSD win sets match the reference fixture") {
  const auto fixture = load_fixture("tukey_wins.json");
  REQUIRE(fixture.size() == 200);
  std::size_t agree = 0;
  for (const auto& c : fixture) {
    const auto groups = c["scores"].get<std::vector<std::vector<double>>>();
    const auto expected = c["wins"].get<std::vector<std::size_t>>();
    if (tukey_hsd_wins(groups) == expected) ++agree;
  }
  CHECK(agree == 200);
}

TEST_CASE("Tukey HSD invariants: best wins, shift and scale leave sets unchanged") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> g(4, std::vector<double>(5));
    for (std::size_t m = 0; m < 4; ++m)
      for (double& v : g[m]) v = n01(rng) + 0.7 * static_cast<double>(m);
    const auto wins = tukey_hsd_wins(g);
    std::vector<double> means;
    for (const auto& row : g) means.push_back(std::accumulate(row.begin(), row.end(), 0.0));
    const auto best = static_cast<std::size_t>(std::max_element(means.begin(), means.end()) - means.begin());
    CHECK(std::find(wins.begin(), wins.end(), best) != wins.end());
    // Power-of-two scale and shift keep the arithmetic exact enough to avoid
    // boundary flips.
    auto shifted = g, scaled = g;
    for (auto& row : shifted)
      for (double& v : row) v += 3.0;
    for (auto& row : scaled)
      for (double& v : row) v *= 4.0;
    CHECK(tukey_hsd_wins(shifted) == wins);
    CHECK(tukey_hsd_wins(scaled) == wins);
  }
}

TEST_CASE("studentized range table lookup") {
  CHECK(studentized_range_q(2, 10) == doctest::Approx(3.1515).epsilon(1e-3));
  CHECK(studentized_range_q(4, INFINITY) == doctest::Approx(3.633).epsilon(1e-3));
  // Demsar's q_0.05 row.
  CHECK(nemenyi_q(2) == doctest::Approx(1.960).epsilon(1e-3));
  CHECK(nemenyi_q(4) == doctest::Approx(2.569).epsilon(1e-3));
  CHECK(nemenyi_q(10) == doctest::Approx(3.164).epsilon(1e-3));
  const double mid = studentized_range_q(3, 50);
  CHECK(mid == doctest::Approx(0.5 * (studentized_range_q(3, 40) + studentized_range_q(3, 60))));
  CHECK(studentized_range_q(3, 1e9) == doctest::Approx(studentized_range_q(3, INFINITY)).epsilon(1e-6));
  CHECK_THROWS_AS(studentized_range_q(31, 10), PreconditionError);
  CHECK_THROWS_AS(studentized_range_q(1, 10), PreconditionError);
  CHECK_THROWS_AS(studentized_range_q(3, 10, 0.01), PreconditionError);
}

TEST_CASE("ranks: two models and ties") {
  ScoreMatrix m;
  m.models = {"a", "b"};
  m.datasets = {"x", "y", "z"};
  m.metrics = {MetricKind::kR2, MetricKind::kRmse, MetricKind::kR2};
  m.scores = {{{0.9}, {1.0}, {0.5}}, {{0.1}, {2.0}, {0.5}}};
  const auto r = dataset_ranks(m);
  CHECK(r[0] == std::vector<double>{1.0, 2.0});
  CHECK(r[1] == std::vector<double>{1.0, 2.0});
  CHECK(r[2] == std::vector<double>{1.5, 1.5});
}

TEST_CASE("average ranks match a hand-ranked three-model table") {
  // Two seeds each; ranks use the seed mean.
  ScoreMatrix m;
  m.models = {"pfn", "rf", "ridge"};
  m.datasets = {"d1", "d2", "d3", "d4", "d5", "d6"};
  m.metrics.assign(6, MetricKind::kRmse);
  m.scores = {
      {{1.0, 1.2}, {0.5, 0.5}, {2.0, 2.2}, {3.0, 3.0}, {0.9, 1.1}, {4.0, 4.0}},
      {{1.5, 1.5}, {0.4, 0.4}, {2.1, 2.1}, {3.0, 3.0}, {1.0, 1.0}, {3.0, 3.2}},
      {{2.0, 2.0}, {0.6, 0.6}, {1.0, 1.0}, {3.5, 3.5}, {1.2, 1.2}, {5.0, 5.0}},
  };
  // Means per dataset:
  // d1 1.1 1.5 2.0 -> 1 2 3
  // d2 0.5 0.4 0.6 -> 2 1 3
  // d3 2.1 2.1 1.0 -> 2.5 2.5 1
  // d4 3.0 3.0 3.5 -> 1.5 1.5 3
  // d5 1.0 1.0 1.2 -> 1.5 1.5 3
  // d6 4.0 3.1 5.0 -> 2 1 3
  const auto avg = average_ranks(m);
  CHECK(avg[0] == doctest::Approx(10.5 / 6.0));
  CHECK(avg[1] == doctest::Approx(9.5 / 6.0));
  CHECK(avg[2] == doctest::Approx(16.0 / 6.0));
}

TEST_CASE("rank rows sum to k(k+1)/2 and averages lie in [1, k]") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + static_cast<std::size_t>(trial % 7);
    std::vector<double> v(k);
    for (double& x : v) x = coarse(rng);
    const auto r = rank_descending(v);
    CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(k * (k + 1) / 2.0));
    for (double x : r) CHECK((x >= 1.0 && x <= static_cast<double>(k)));
  }
}

TEST_CASE("win report counts and rates") {
  ScoreMatrix m;
  m.models = {"a", "b", "c"};
  m.datasets = {"x", "y"};
  m.metrics = {MetricKind::kRmse, MetricKind::kR2};
  m.scores = {{{1, 1.1, 0.9}, {0.9, 0.91, 0.89}}, {{5, 5.1, 4.9}, {0.2, 0.21, 0.19}}, {{1, 1.1, 0.9}, {0.5, 0.5, 0.5}}};
  const auto r = win_report(m);
  CHECK(r.win_sets[0] == std::vector<std::size_t>{0, 2});
  CHECK(r.win_sets[1] == std::vector<std::size_t>{0});
  CHECK(r.win_count == std::vector<std::size_t>{2, 0, 1});
  CHECK(r.win_rate == std::vector<double>{100.0, 0.0, 50.0});
  const auto j = r.to_json(m);
  CHECK(j["win_sets"]["x"] == nlohmann::json({"a", "c"}));
  CHECK(j["models"][0]["win_rate"] == 100.0);
}

TEST_CASE("Friedman-Nemenyi matches the reference fixtures") {
  for (const char* name : {"nemenyi_k4_n14.json", "nemenyi_k10_n30.json"}) {
    CAPTURE(name);
    const auto fx = load_fixture(name);
    const auto scores = fx["scores"].get<std::vector<std::vector<double>>>();
    std::vector<std::vector<double>> ranks;
    for (const auto& row : scores) ranks.push_back(rank_descending(row));
    CHECK(ranks == fx["ranks"].get<std::vector<std::vector<double>>>());
    const auto r = friedman_nemenyi(ranks);
    const auto mr = fx["mean_ranks"].get<std::vector<double>>();
    REQUIRE(r.mean_ranks.size() == mr.size());
    for (std::size_t j = 0; j < mr.size(); ++j) CHECK(r.mean_ranks[j] == doctest::Approx(mr[j]).epsilon(1e-12));
    CHECK(r.chi2 == doctest::Approx(fx["chi2"].get<double>()).epsilon(1e-10));
    CHECK(r.p_value == doctest::Approx(fx["p_value"].get<double>()).epsilon(1e-8).scale(0.0));
    CHECK(r.cd == doctest::Approx(fx["cd"].get<double>()).epsilon(1e-4));
    CHECK(r.cliques == fx["cliques"].get<std::vector<std::vector<std::size_t>>>());
  }
}

TEST_CASE("CD halves when the dataset count quadruples") {
  const std::vector<double> row{1, 2, 3, 4};
  const auto a = friedman_nemenyi(std::vector<std::vector<double>>(10, row));
  const auto b = friedman_nemenyi(std::vector<std::vector<double>>(40, row));
  CHECK(b.cd == doctest::Approx(a.cd / 2.0).epsilon(1e-14));
}

TEST_CASE("identical ranks give one clique and zero statistic") {
  const auto r = friedman_nemenyi(std::vector<std::vector<double>>(8, std::vector<double>(5, 3.0)));
  CHECK(r.chi2 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.p_value == doctest::Approx(1.0));
  REQUIRE(r.cliques.size() == 1);
  CHECK(r.cliques[0] == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(r.cd > 0.0);
  CHECK_THROWS_AS(friedman_nemenyi({{1, 2}, {2, 1}}), PreconditionError);
  CHECK_THROWS_AS(friedman_nemenyi({{1, 2, 3}}), PreconditionError);
}

TEST_CASE("clique relation is reflexive and symmetric, and every model is covered") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 3 + static_cast<std::size_t>(trial % 6), n = 4 + static_cast<std::size_t>(trial % 9);
    std::vector<std::vector<double>> ranks;
    std::vector<double> base(k);
    for (std::size_t i = 0; i < n; ++i) {
      std::normal_distribution<double> n01;
      for (std::size_t j = 0; j < k; ++j) base[j] = n01(rng) + 0.3 * static_cast<double>(j);
      ranks.push_back(rank_descending(base));
    }
    const auto r = friedman_nemenyi(ranks);
    std::vector<std::vector<bool>> together(k, std::vector<bool>(k, false));
    for (const auto& c : r.cliques) {
      for (std::size_t a : c)
        for (std::size_t b : c) together[a][b] = true;
      // Spread inside a clique is below CD.
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t a : c) {
        lo = std::min(lo, r.mean_ranks[a]);
        hi = std::max(hi, r.mean_ranks[a]);
      }
      CHECK(hi - lo < r.cd);
    }
    for (std::size_t a = 0; a < k; ++a) {
      CHECK(together[a][a]);
      for (std::size_t b = 0; b < k; ++b) CHECK(together[a][b] == together[b][a]);
    }
  }
}

TEST_CASE("subset metric") {
  const std::vector<double> y{1, 2, 3, 4}, p{2, 3, 4, 5};
  const std::vector<bool> mask{true, false, true, false};
  CHECK(subset_metric(y, p, mask, MetricKind::kRmse).difference == doctest::Approx(0.0));
  const std::vector<double> p2{3, 2, 3, 4};
  const auto s = subset_metric(y, p2, {true, true, false, false}, MetricKind::kRmse);
  CHECK(s.difference == doctest::Approx(std::sqrt(2.0)));
  CHECK(s.difference == s.in);
  CHECK_THROWS_AS(subset_metric(y, p, {true, true, true, true}, MetricKind::kRmse), PreconditionError);
  CHECK_THROWS_AS(subset_metric(y, p, {true}, MetricKind::kRmse), PreconditionError);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  std::bernoulli_distribution coin(0.3);
  std::vector<double> yt(100), yp(100);
  std::vector<bool> m(100);
  std::vector<double> ti, pi, to, po;
  for (std::size_t i = 0; i < 100; ++i) {
    yt[i] = n01(rng);
    yp[i] = n01(rng);
    m[i] = coin(rng);
    (m[i] ? ti : to).push_back(yt[i]);
    (m[i] ? pi : po).push_back(yp[i]);
  }
  const auto r = subset_metric(yt, yp, m, MetricKind::kMae);
  CHECK(r.in == metric(ti, pi, MetricKind::kMae));
  CHECK(r.out == metric(to, po, MetricKind::kMae));
}

TEST_CASE("Pareto gap and runtime") {
  std::vector<RunRecord> recs{
      {"t1", "a", "0", 1.0, 1.0, 1.0, 500, 500, true},
      {"t1", "b", "0", 2.0, 0.1, 0.1, 500, 500, true},
  };
  const auto rows = pareto_table(recs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].model == "a");
  CHECK(rows[0].relative_gap == 0.0);
  CHECK(rows[1].relative_gap == doctest::Approx(0.5));
  CHECK(rows[0].runtime_per_1000 == doctest::Approx(2.0));
  CHECK(rows[1].runtime_per_1000 == doctest::Approx(0.2));
  CHECK(rows[0].on_front);
  CHECK(rows[1].on_front);

  // Folds averaged first, then tasks.
  recs.push_back({"t1", "a", "1", 3.0, 1.0, 1.0, 500, 500, true});
  recs.push_back({"t1", "b", "1", 2.0, 0.1, 0.1, 500, 500, true});
  recs.push_back({"t2", "a", "0", 1.0, 1.0, 1.0, 1000, 1000, true});
  recs.push_back({"t2", "b", "0", 4.0, 0.1, 0.1, 1000, 1000, true});
  const auto rows2 = pareto_table(recs);
  // a: t1 (0 + 1/3)/2, t2 0.  b: t1 (0.5 + 0)/2, t2 0.75.
  CHECK(rows2[0].relative_gap == doctest::Approx((1.0 / 6.0 + 0.0) / 2.0));
  CHECK(rows2[1].relative_gap == doctest::Approx((0.25 + 0.75) / 2.0));
  CHECK(rows2[0].runtime_per_1000 == doctest::Approx((2.0 + 1.0) / 2.0));

  recs.push_back({"t3", "a", "0", 1.0, 0, 0, 10, 10, false});
  CHECK_THROWS_AS(pareto_table(recs), PreconditionError);
  recs.pop_back();
  recs.push_back({"t1", "c", "0", 1.0, 1.0, 1.0, 500, 500, true});
  CHECK_THROWS_AS(pareto_table(recs), PreconditionError);
}

TEST_CASE("Pareto front matches a brute-force dominance check") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coarse(0, 5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::pair<double, double>> pts(5);
    for (auto& p : pts) p = {coarse(rng) / 5.0, coarse(rng) * 0.3};
    const auto front = pareto_front(pts);
    for (std::size_t i = 0; i < 5; ++i) {
      bool dominated = false;
      for (std::size_t j = 0; j < 5; ++j) {
        if (pts[j].first < pts[i].first && pts[j].second < pts[i].second) dominated = true;
      }
      CHECK(front[i] == !dominated);
    }
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

#include "ttlab/telemetry.hpp"

using namespace ttlab;
using telemetry::CumulativeGradient;
using telemetry::EmbeddingTrace;
using telemetry::GradTrace;
using telemetry::Recorder;

namespace {

GradTrace trace_of(std::vector<std::vector<float>> rows) {
  GradTrace t;
  t.token_id = 0;
  int64_t step = 1;
  for (auto& r : rows) t.steps.emplace_back(step++, std::move(r));
  return t;
}

TensorF matrix(int vocab, int dim, const std::vector<float>& values) {
  return TensorF::from_data({vocab, dim}, values);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cumulative gradient closed forms") {
  SUBCASE("a constant gradient is all signal") {
    auto t = trace_of({{3, 4}, {3, 4}, {3, 4}});
    auto c = telemetry::cumulative_gradient(t);
    CHECK(c.sum_norms == doctest::Approx(15.0));
    CHECK(c.cum_norm == doctest::Approx(15.0));
    CHECK(c.signal_ratio == doctest::Approx(1.0));
    CHECK(telemetry::direction_variance(t) == doctest::Approx(0.0));
  }
  SUBCASE("alternating gradients cancel completely") {
    auto t = trace_of({{3, 4}, {-3, -4}, {3, 4}, {-3, -4}});
    auto c = telemetry::cumulative_gradient(t);
    CHECK(c.sum_norms == doctest::Approx(20.0));
    CHECK(c.cum_norm == doctest::Approx(0.0));
    CHECK(c.signal_ratio == doctest::Approx(0.0));
    CHECK(telemetry::direction_variance(t) == doctest::Approx(1.0));
  }
  SUBCASE("orthogonal directions sit in between") {
    auto t = trace_of({{5, 0}, {0, 5}});
    auto c = telemetry::cumulative_gradient(t);
    CHECK(c.sum_norms == doctest::Approx(10.0));
    CHECK(c.cum_norm == doctest::Approx(5.0 * std::sqrt(2.0)));
    CHECK(c.signal_ratio == doctest::Approx(std::sqrt(2.0) / 2.0));
    CHECK(telemetry::direction_variance(t) == doctest::Approx(1.0 - std::sqrt(2.0) / 2.0));
  }
  SUBCASE("zero steps are skipped by the direction statistic") {
    auto t = trace_of({{3, 4}, {0, 0}, {3, 4}});
    CHECK(telemetry::direction_variance(t) == doctest::Approx(0.0));
    auto z = trace_of({{0, 0}, {0, 0}});
    CHECK(telemetry::cumulative_gradient(z).signal_ratio == 0.0);
    CHECK_THROWS_AS(telemetry::direction_variance(z), std::invalid_argument);
  }
  SUBCASE("empty traces are refused") {
    GradTrace empty;
    CHECK_THROWS_AS(telemetry::cumulative_gradient(empty), std::invalid_argument);
    CHECK_THROWS_AS(telemetry::direction_variance(empty), std::invalid_argument);
  }
}

TEST_CASE("displacement is final minus first, middle snapshots ignored") {
  EmbeddingTrace t;
  t.snapshots.emplace_back(0, std::vector<float>{0, 0});
  t.snapshots.emplace_back(5, std::vector<float>{100, -50});  // a detour
  t.snapshots.emplace_back(9, std::vector<float>{3, 4});
  CHECK(telemetry::displacement(t) == doctest::Approx(5.0));

  EmbeddingTrace single;
  single.snapshots.emplace_back(0, std::vector<float>{1, 2});
  CHECK_THROWS_AS(telemetry::displacement(single), std::invalid_argument);
}

TEST_CASE("isotropic noise shows the expected self-cancellation") {
  // T unit-scale gaussian gradients in d dimensions: the running sum grows
  // like sqrt(T) while the norm total grows like T, so the signal ratio lands
  // near 1/sqrt(T) and the direction variance near 1.
  const int T = 400, d = 32;
  std::mt19937_64 rng(12345);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  GradTrace t;
  t.token_id = 0;
  for (int s = 1; s <= T; ++s) {
    std::vector<float> g(d);
    for (auto& x : g) x = dist(rng);
    t.steps.emplace_back(s, std::move(g));
  }
  auto c = telemetry::cumulative_gradient(t);
  double expected = 1.0 / std::sqrt(static_cast<double>(T));
  CHECK(c.signal_ratio > expected / 2.5);
  CHECK(c.signal_ratio < expected * 2.5);
  CHECK(telemetry::direction_variance(t) > 0.8);
}

TEST_CASE("recorder accumulators match a per-trace recompute") {
  const int vocab = 5, dim = 8, T = 12;
  Recorder rec({1, 3}, vocab, dim);
  std::mt19937_64 rng(777);
  std::normal_distribution<float> dist(0.0f, 1.0f);

  std::vector<std::vector<float>> history;
  rec.snapshot(0, matrix(vocab, dim, std::vector<float>(vocab * dim, 0.0f)));
  for (int s = 1; s <= T; ++s) {
    std::vector<float> g(vocab * dim);
    for (int i = 0; i < vocab * dim; ++i)
      g[static_cast<size_t>(i)] = (i / dim == 4) ? 0.0f : dist(rng);  // row 4 never moves
    history.push_back(g);
    rec.record_step(s, matrix(vocab, dim, g));
  }
  std::vector<float> final_emb(vocab * dim);
  for (auto& x : final_emb) x = dist(rng);
  rec.snapshot(T, matrix(vocab, dim, final_emb));

  CHECK(rec.steps_recorded() == T);
  CHECK(rec.snapshots_taken() == 2);

  // Rebuild per-row traces from the recorded history and compare.
  auto cum = rec.vocab_cum_grad_norm();
  auto sums = rec.vocab_sum_grad_norms();
  auto ratio = rec.vocab_signal_ratio();
  auto dirvar = rec.vocab_direction_variance();
  auto disp = rec.vocab_displacement();
  for (int r = 0; r < vocab; ++r) {
    GradTrace t;
    t.token_id = r;
    for (int s = 0; s < T; ++s) {
      const float* row = history[static_cast<size_t>(s)].data() + r * dim;
      t.steps.emplace_back(s + 1, std::vector<float>(row, row + dim));
    }
    auto c = telemetry::cumulative_gradient(t);
    CHECK(cum[static_cast<size_t>(r)] == doctest::Approx(c.cum_norm).epsilon(1e-12));
    CHECK(sums[static_cast<size_t>(r)] == doctest::Approx(c.sum_norms).epsilon(1e-12));
    CHECK(ratio[static_cast<size_t>(r)] == doctest::Approx(c.signal_ratio).epsilon(1e-12));
    if (r == 4) {
      CHECK(sums[4] == 0.0);
      CHECK(ratio[4] == 0.0);
      CHECK(dirvar[4] == 0.0);
    } else {
      CHECK(dirvar[static_cast<size_t>(r)] ==
            doctest::Approx(telemetry::direction_variance(t)).epsilon(1e-12));
    }
    double d2 = 0;
    for (int c2 = 0; c2 < dim; ++c2)
      d2 += static_cast<double>(final_emb[static_cast<size_t>(r * dim + c2)]) *
            final_emb[static_cast<size_t>(r * dim + c2)];
    CHECK(disp[static_cast<size_t>(r)] == doctest::Approx(std::sqrt(d2)).epsilon(1e-12));
  }

  // Tracked traces carry exactly the rows that went in.
  const auto& gt = rec.grad_trace(3);
  REQUIRE(gt.steps.size() == T);
  for (int s = 0; s < T; ++s)
    for (int c2 = 0; c2 < dim; ++c2)
      CHECK(gt.steps[static_cast<size_t>(s)].second[static_cast<size_t>(c2)] ==
            history[static_cast<size_t>(s)][static_cast<size_t>(3 * dim + c2)]);
  CHECK_THROWS_AS(rec.grad_trace(0), std::out_of_range);
  CHECK_THROWS_AS(rec.embedding_trace(2), std::out_of_range);
}

TEST_CASE("recorder rejects malformed input") {
  CHECK_THROWS_AS(Recorder({0}, 0, 4), std::invalid_argument);
  CHECK_THROWS_AS(Recorder({0}, 4, 0), std::invalid_argument);
  CHECK_THROWS_AS(Recorder({4}, 4, 2), std::out_of_range);
  CHECK_THROWS_AS(Recorder({-1}, 4, 2), std::out_of_range);

  Recorder rec({1}, 3, 2);
  CHECK_THROWS_AS(rec.record_step(1, matrix(2, 2, {0, 0, 0, 0})), std::invalid_argument);
  rec.record_step(1, matrix(3, 2, {1, 0, 0, 1, 0, 0}));
  CHECK_THROWS_AS(rec.record_step(1, matrix(3, 2, {1, 0, 0, 1, 0, 0})), std::invalid_argument);
  CHECK_THROWS_AS(rec.record_step(0, matrix(3, 2, {1, 0, 0, 1, 0, 0})), std::invalid_argument);

  rec.snapshot(1, matrix(3, 2, {0, 0, 0, 0, 0, 0}));
  CHECK_THROWS_AS(rec.snapshot(1, matrix(3, 2, {0, 0, 0, 0, 0, 0})), std::invalid_argument);
  CHECK_THROWS_AS(rec.snapshot(2, matrix(2, 2, {0, 0, 0, 0})), std::invalid_argument);
  CHECK_THROWS_AS(rec.vocab_displacement(), std::invalid_argument);  // one snapshot so far
}

TEST_CASE("report ranks tracked tokens against the population") {
  // Four rows with cleanly ordered statistics: row 0 silent, rows 1..3 with
  // growing constant gradients, displacements to match.
  const int vocab = 4, dim = 2;
  Recorder rec({0, 1, 2, 3}, vocab, dim);
  rec.snapshot(0, matrix(vocab, dim, std::vector<float>(8, 0.0f)));
  for (int s = 1; s <= 2; ++s)
    rec.record_step(s, matrix(vocab, dim, {0, 0, 1, 0, 2, 0, 3, 0}));
  rec.snapshot(2, matrix(vocab, dim, {0, 0, 10, 0, 20, 0, 30, 0}));

  auto rep = telemetry::build_report(rec, {0, 1, 2, 3}, data::Vocab::standard());
  REQUIRE(rep.tokens.size() == 4);
  CHECK(rep.steps_recorded == 2);

  CHECK(rep.tokens[0].no_signal);
  CHECK(rep.tokens[0].displacement == 0.0);
  CHECK(rep.tokens[0].displacement_pct == 0.0);  // nobody strictly below zero
  CHECK(rep.tokens[0].token == "0");

  CHECK(!rep.tokens[2].no_signal);
  CHECK(rep.tokens[2].displacement == doctest::Approx(20.0));
  CHECK(rep.tokens[2].cum_grad_norm == doctest::Approx(4.0));
  CHECK(rep.tokens[2].sum_grad_norms == doctest::Approx(4.0));
  CHECK(rep.tokens[2].signal_ratio == doctest::Approx(1.0));
  CHECK(rep.tokens[2].direction_variance == doctest::Approx(0.0));
  CHECK(rep.tokens[2].displacement_pct == doctest::Approx(2.0 / 3.0));
  CHECK(rep.tokens[2].cum_grad_pct == doctest::Approx(2.0 / 3.0));
  CHECK(rep.tokens[3].displacement_pct == doctest::Approx(1.0));

  SUBCASE("percentiles follow the population subset") {
    auto sub = telemetry::build_report(rec, {1, 2}, data::Vocab::standard());
    CHECK(sub.tokens[2].displacement_pct == doctest::Approx(1.0));  // only row 1 competes
    CHECK(sub.tokens[1].displacement_pct == doctest::Approx(0.0));
    CHECK(sub.tokens[0].displacement_pct == doctest::Approx(0.0));  // below both, excluded anyway
  }
  SUBCASE("a report needs at least one recorded step") {
    Recorder fresh({0}, vocab, dim);
    CHECK_THROWS_AS(telemetry::build_report(fresh, {0}, data::Vocab::standard()),
                    std::invalid_argument);
  }
}

TEST_CASE("metric and series files come out byte stable") {
  Recorder rec({1}, 2, 2);
  rec.snapshot(0, matrix(2, 2, {0, 0, 0, 0}));
  rec.record_step(1, matrix(2, 2, {0, 0, 3, 4}));
  rec.record_step(2, matrix(2, 2, {0, 0, 3, 4}));
  rec.snapshot(2, matrix(2, 2, {0, 0, 0.75f, 1.0f}));  // exact in binary: shift is 1.25

  auto rep = telemetry::build_report(rec, {0, 1}, data::Vocab::standard());
  telemetry::write_metrics_csv(rep, "test_metrics_tmp.csv");
  CHECK(slurp("test_metrics_tmp.csv") ==
        "token_id,token,no_signal,displacement,cum_grad_norm,sum_grad_norms,signal_ratio,"
        "direction_variance,displacement_pct,cum_grad_pct,signal_ratio_pct\n"
        "1,1,0,1.25,10,10,1,0,1,1,1\n");
  std::remove("test_metrics_tmp.csv");

  telemetry::write_series_csv(rec, data::Vocab::standard(), "test_series_tmp.csv");
  CHECK(slurp("test_series_tmp.csv") ==
        "step,token,grad_norm,cum_norm_so_far,displacement_so_far\n"
        "1,1,5,5,0\n"
        "2,1,5,10,1.25\n");
  std::remove("test_series_tmp.csv");
}

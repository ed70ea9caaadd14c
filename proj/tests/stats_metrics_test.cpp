#include <cmath>

#include "doctest.h"

#include "dowser/errors.hpp"
#include "dowser/metrics.hpp"
#include "dowser/rng.hpp"
#include "dowser/stats.hpp"

using namespace dowser;

TEST_CASE("avg and h-score") {
  SUBCASE("table-anchored example") {
    const double a_up = (58.3 + 58.0 + 65.1 + 64.6 + 58.2 + 62.0) / 6.0;
    const avg_h out = avg_and_hscore(a_up, 16.3);
    CHECK(std::fabs(out.h - 25.7) < 0.15);
    CHECK(out.avg == doctest::Approx(38.67).epsilon(1e-3));
  }
  SUBCASE("equal arguments collapse both means") {
    const avg_h out = avg_and_hscore(0.42, 0.42);
    CHECK(out.avg == doctest::Approx(0.42));
    CHECK(out.h == doctest::Approx(0.42));
  }
  SUBCASE("zero upstream zeroes the harmonic mean") {
    CHECK(avg_and_hscore(0.0, 0.9).h == 0.0);
    CHECK(avg_and_hscore(0.0, 0.0).h == 0.0);
  }
  SUBCASE("h never exceeds avg") {
    rng gen(8);
    for (int i = 0; i < 200; ++i) {
      const avg_h out = avg_and_hscore(gen.next_double(), gen.next_double());
      CHECK(out.h <= out.avg + 1e-15);
    }
  }
  CHECK_THROWS_AS(avg_and_hscore(-0.1, 0.5), config_error);
}

TEST_CASE("continual-learning metrics") {
  SUBCASE("two-task worked example") {
    const cl_summary s = cl_metrics({{0.9}, {0.8, 0.7}});
    CHECK(s.mft == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(s.mfn == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(s.maa == doctest::Approx(0.825).epsilon(1e-15));
    CHECK(s.bwt == doctest::Approx(-0.1).epsilon(1e-12));
  }
  SUBCASE("constant matrix") {
    const double c = 0.63;
    const cl_summary s = cl_metrics({{c}, {c, c}, {c, c, c}});
    CHECK(s.mft == doctest::Approx(c));
    CHECK(s.mfn == doctest::Approx(c));
    CHECK(s.maa == doctest::Approx(c));
    CHECK(s.bwt == doctest::Approx(0.0));
  }
  SUBCASE("non-decreasing columns give non-negative backward transfer") {
    const cl_summary s = cl_metrics({{0.5}, {0.6, 0.7}, {0.8, 0.75, 0.9}});
    CHECK(s.bwt >= 0.0);
  }
  SUBCASE("mfn is the mean of the last row; maa matches incremental accumulation") {
    rng gen(3);
    std::vector<std::vector<double>> acc;
    for (int t = 0; t < 5; ++t) {
      std::vector<double> row;
      for (int i = 0; i <= t; ++i) row.push_back(gen.next_double());
      acc.push_back(row);
    }
    const cl_summary s = cl_metrics(acc);

    double last = 0.0;
    for (double v : acc.back()) last += v;
    CHECK(s.mfn == doctest::Approx(last / 5.0).epsilon(1e-15));

    double maa_inc = 0.0;
    for (std::size_t t = 0; t < acc.size(); ++t) {
      double running = 0.0;
      for (std::size_t i = 0; i <= t; ++i) running += acc[t][i];
      maa_inc += running / static_cast<double>(t + 1);
    }
    maa_inc /= static_cast<double>(acc.size());
    CHECK(std::fabs(s.maa - maa_inc) < 1e-12);
  }
  CHECK_THROWS_AS(cl_metrics({{0.5}}), config_error);
  CHECK_THROWS_AS(cl_metrics({{0.5}, {0.5}}), config_error);  // ragged row
}

TEST_CASE("welch t-test") {
  SUBCASE("identical samples: p = 1") {
    const welch_result r = welch_t_test({1.0, 1.0, 1.0}, {1.0, 1.0, 1.0});
    CHECK(r.p == 1.0);
  }
  SUBCASE("deterministic difference: p -> 0, flagged degenerate") {
    const welch_result r = welch_t_test({1.0, 1.0, 1.0}, {0.0, 0.0, 0.0});
    CHECK(r.p == 0.0);
    CHECK(r.degenerate);
  }
  SUBCASE("single observation rejected") {
    CHECK_THROWS_AS(welch_t_test({69.8}, {1.0, 2.0}), config_error);
  }
  SUBCASE("textbook value: equal variances, one-unit mean gap") {
    const welch_result r = welch_t_test({1, 2, 3, 4, 5}, {2, 3, 4, 5, 6});
    CHECK(r.t == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(r.df == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(0.34659).epsilon(1e-3));
  }
  SUBCASE("clearly separated samples are significant") {
    const welch_result r = welch_t_test({10.0, 10.1, 9.9, 10.05}, {1.0, 1.2, 0.9, 1.1});
    CHECK(r.p < 1e-6);
    CHECK_FALSE(r.degenerate);
  }
}

TEST_CASE("chi-square uniformity p-values") {
  SUBCASE("perfectly uniform counts") {
    CHECK(chi_square_uniform_p({100, 100, 100, 100}) == doctest::Approx(1.0));
  }
  SUBCASE("known value for a 2-cell split") {
    // stat = 3.333..., df = 1
    CHECK(chi_square_uniform_p({10, 20}) == doctest::Approx(0.067889).epsilon(1e-3));
  }
  SUBCASE("gross non-uniformity") {
    CHECK(chi_square_uniform_p({1000, 10, 10, 10}) < 1e-12);
  }
  CHECK_THROWS_AS(chi_square_uniform_p({5}), config_error);
  CHECK_THROWS_AS(chi_square_uniform_p({0, 0}), config_error);
}

TEST_CASE("run metrics validation and json round-trip") {
  run_metrics m;
  m.a_up = 0.8;
  m.a_down = 0.4;
  const avg_h ah = avg_and_hscore(m.a_up, m.a_down);
  m.avg = ah.avg;
  m.h_score = ah.h;
  m.seeds = {1, 2, 3};
  m.wall_clock_sec = 0.5;
  m.has_cl = true;
  m.acc_matrix = {{0.9}, {0.8, 0.7}};
  m.cl = cl_metrics(m.acc_matrix);
  m.validate();

  const run_metrics back = run_metrics::from_json(m.to_json());
  CHECK(back.a_up == m.a_up);
  CHECK(back.h_score == m.h_score);
  CHECK(back.acc_matrix == m.acc_matrix);
  CHECK(back.cl.bwt == m.cl.bwt);
  CHECK(back.seeds == m.seeds);
  back.validate();

  run_metrics bad = m;
  bad.h_score = bad.avg + 0.1;  // violates AM/HM
  CHECK_THROWS_AS(bad.validate(), numerical_error);
}

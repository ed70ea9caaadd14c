#include "dowser/stats.hpp"

#include <cmath>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "dowser/errors.hpp"

namespace dowser {

double mean(const std::vector<double>& v) {
  if (v.empty()) throw config_error("mean: empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) throw config_error("sample_std: need at least two values");
  const double m = mean(v);
  double sq = 0.0;
  for (double x : v) sq += (x - m) * (x - m);
  return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

double students_t_two_tailed_p(double t, double df) {
  boost::math::students_t_distribution<double> dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

welch_result welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw config_error("welch_t_test: need n >= 2 per sample");
  const double ma = mean(a), mb = mean(b);
  const double sa = sample_std(a), sb = sample_std(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = sa * sa / na, vb = sb * sb / nb;

  welch_result result;
  if (va + vb == 0.0) {
    result.degenerate = true;
    result.p = (ma == mb) ? 1.0 : 0.0;
    result.t = (ma == mb) ? 0.0 : std::numeric_limits<double>::infinity();
    result.df = na + nb - 2.0;
    return result;
  }
  result.t = (ma - mb) / std::sqrt(va + vb);
  result.df = (va + vb) * (va + vb) /
              (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  result.p = students_t_two_tailed_p(result.t, result.df);
  return result;
}

double chi_square_uniform_p(const std::vector<std::int64_t>& counts) {
  if (counts.size() < 2) throw config_error("chi_square: need at least two cells");
  std::int64_t total = 0;
  for (std::int64_t c : counts) {
    if (c < 0) throw config_error("chi_square: negative count");
    total += c;
  }
  if (total == 0) throw config_error("chi_square: empty sample");
  const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (std::int64_t c : counts) {
    const double d = static_cast<double>(c) - expected;
    stat += d * d / expected;
  }
  boost::math::chi_squared_distribution<double> dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace dowser

#include "dowser/metrics.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "dowser/errors.hpp"

namespace dowser {

avg_h avg_and_hscore(double a_up, double a_down) {
  if (a_up < 0.0 || a_down < 0.0) throw config_error("avg_and_hscore: accuracies must be >= 0");
  avg_h out;
  out.avg = 0.5 * (a_up + a_down);
  out.h = (a_up + a_down == 0.0) ? 0.0 : 2.0 * a_up * a_down / (a_up + a_down);
  return out;
}

cl_summary cl_metrics(const std::vector<std::vector<double>>& acc) {
  const std::size_t t_count = acc.size();
  if (t_count < 2) throw config_error("cl_metrics: BWT needs at least two tasks");
  for (std::size_t t = 0; t < t_count; ++t) {
    if (acc[t].size() != t + 1)
      throw config_error("cl_metrics: row " + std::to_string(t) + " must have " +
                         std::to_string(t + 1) + " entries");
  }

  cl_summary out;
  for (std::size_t i = 0; i < t_count; ++i) out.mft += acc[i][i];
  out.mft /= static_cast<double>(t_count);

  for (std::size_t i = 0; i < t_count; ++i) out.mfn += acc[t_count - 1][i];
  out.mfn /= static_cast<double>(t_count);

  for (std::size_t t = 0; t < t_count; ++t) {
    double row = 0.0;
    for (std::size_t i = 0; i <= t; ++i) row += acc[t][i];
    out.maa += row / static_cast<double>(t + 1);
  }
  out.maa /= static_cast<double>(t_count);

  for (std::size_t i = 0; i + 1 < t_count; ++i) out.bwt += acc[t_count - 1][i] - acc[i][i];
  out.bwt /= static_cast<double>(t_count - 1);
  return out;
}

void run_metrics::validate() const {
  if (a_up < 0.0 || a_down < 0.0) throw numerical_error("run_metrics: negative accuracy");
  if (h_score > avg + 1e-12) throw numerical_error("run_metrics: h-score exceeds avg");
  const avg_h expect = avg_and_hscore(a_up, a_down);
  if (std::fabs(expect.avg - avg) > 1e-9 || std::fabs(expect.h - h_score) > 1e-9)
    throw numerical_error("run_metrics: avg/h inconsistent with accuracies");
  if (has_cl) {
    for (const auto& row : acc_matrix) {
      for (double v : row) {
        if (v < 0.0 || v > 1.0) throw numerical_error("run_metrics: accuracy outside [0,1]");
      }
    }
  }
}

std::string run_metrics::to_json() const {
  nlohmann::json j;
  j["a_up"] = a_up;
  j["a_down"] = a_down;
  j["avg"] = avg;
  j["h_score"] = h_score;
  j["seeds"] = seeds;
  j["wall_clock_sec"] = wall_clock_sec;
  if (has_cl) {
    j["cl"]["acc_matrix"] = acc_matrix;
    j["cl"]["mft"] = cl.mft;
    j["cl"]["mfn"] = cl.mfn;
    j["cl"]["maa"] = cl.maa;
    j["cl"]["bwt"] = cl.bwt;
  }
  return j.dump(2);
}

run_metrics run_metrics::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw config_error("run_metrics: malformed json");
  run_metrics m;
  m.a_up = j.at("a_up").get<double>();
  m.a_down = j.at("a_down").get<double>();
  m.avg = j.at("avg").get<double>();
  m.h_score = j.at("h_score").get<double>();
  m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  m.wall_clock_sec = j.value("wall_clock_sec", 0.0);
  if (j.contains("cl")) {
    m.has_cl = true;
    m.acc_matrix = j["cl"].at("acc_matrix").get<std::vector<std::vector<double>>>();
    m.cl.mft = j["cl"].at("mft").get<double>();
    m.cl.mfn = j["cl"].at("mfn").get<double>();
    m.cl.maa = j["cl"].at("maa").get<double>();
    m.cl.bwt = j["cl"].at("bwt").get<double>();
  }
  return m;
}

}  // namespace dowser

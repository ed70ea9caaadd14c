#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dowser/metrics.hpp"
#include "dowser/model.hpp"
#include "dowser/probe.hpp"
#include "dowser/stats.hpp"
#include "dowser/trainer.hpp"

namespace dowser {

struct experiment_config {
  model_spec model;
  probe_config probe;
  train_config pretrain;
  train_config finetune;
  task_spec upstream;
  task_spec downstream;
  std::vector<task_spec> sequence;  // CL mode
  std::vector<double> rhos{0.5};
  std::vector<int> depths;  // empty -> all depth groups
  std::vector<std::string> baselines{"dowser", "random", "full-ft", "frozen"};
  int n_seeds = 3;
  std::uint64_t seed = 0;
  std::string probe_source = "synthetic";  // or "task"
  std::string out_dir = "out";

  void validate() const;
  std::string to_json() const;
  static experiment_config from_json(const std::string& text);
  static experiment_config from_file(const std::filesystem::path& path);
  void to_file(const std::filesystem::path& path) const;
  std::uint64_t config_hash() const;
};

// One pipeline point. Stage seeds derive from the experiment seed via
// mix64(mix64(seed, stage_id), seed_index), so adding a stage never perturbs
// the draws of another.
struct run_request {
  std::string method = "dowser";  // dowser | random | full-ft | frozen
  double rho = 0.5;
  int depth = -1;  // -1: no depth restriction
  int seed_index = 0;
};

enum class pipeline_stage : std::uint8_t { probe, score, mask, train, eval };

pipeline_stage stage_from_name(const std::string& name);

struct pipeline_result {
  run_metrics metrics;
  std::filesystem::path run_dir;
  bool reused = false;  // outputs existed and the config hash matched
};

// probe -> score -> mask -> train -> eval, writing magic-tagged artifacts,
// the loss/accuracy curve CSV, metrics JSON, and a manifest tying every
// artifact to the config hash. Re-running a completed request is a no-op.
// A stage failure rethrows with the stage name; earlier artifacts persist.
pipeline_result run_pipeline(const experiment_config& cfg, const run_request& req,
                             pipeline_stage up_to = pipeline_stage::eval);

// Pretrains the upstream checkpoint shared by every run of this config
// (no-op when it already exists and matches). Returns its path.
std::filesystem::path ensure_pretrained(const experiment_config& cfg);

struct sweep_cell {
  std::string method;
  double rho = 0.0;
  std::vector<run_metrics> runs;

  std::vector<double> metric(const std::string& name) const;  // a_up|a_down|avg|h
};

struct sweep_comparison {
  double rho = 0.0;
  std::string metric;
  welch_result test;
};

struct sweep_result {
  std::vector<sweep_cell> cells;
  std::vector<sweep_comparison> comparisons;  // dowser vs random, per rho, on avg and h
  std::filesystem::path table_csv;
  std::filesystem::path significance_csv;
};

// Runs every (method, rho, seed) point (full-ft pinned to rho=1, frozen to
// rho=0), aggregates mean +- std per cell, and Welch-tests dowser against
// random on avg and h per rho. Requires n_seeds >= 3.
sweep_result sweep_and_compare(const experiment_config& cfg);

struct depth_point {
  int depth = 0;
  std::vector<run_metrics> runs;
};

// Dowser runs restricted to the last L depth groups for each L in
// cfg.depths; emits the depth-vs-(avg, h) series as CSV.
std::vector<depth_point> depth_sweep(const experiment_config& cfg);

// Sequential fine-tuning over cfg.sequence with a single static mask scored
// before task 1; fills the accuracy matrix and the CL metrics.
run_metrics run_cl(const experiment_config& cfg, const std::string& method = "dowser");

}  // namespace dowser

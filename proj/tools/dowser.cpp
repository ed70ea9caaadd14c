// Command-line front end for the probe -> score -> mask -> train -> eval
// pipeline and the sweep/continual-learning experiment drivers.
//
// Exit codes: 0 success, 2 config error, 3 numerical failure.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dowser/pipeline.hpp"

namespace {

struct cli_options {
  std::string config_path;
  std::string out_dir;
  std::vector<double> rhos;
  std::vector<int> depths;
  int seeds = 0;
  std::string probe_source;
  std::string surrogate;
  std::string method = "dowser";
  int seed_index = 0;
};

dowser::experiment_config load_config(const cli_options& opt) {
  dowser::experiment_config cfg = dowser::experiment_config::from_file(opt.config_path);
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  if (!opt.rhos.empty()) cfg.rhos = opt.rhos;
  if (!opt.depths.empty()) cfg.depths = opt.depths;
  if (opt.seeds > 0) cfg.n_seeds = opt.seeds;
  if (!opt.probe_source.empty()) cfg.probe_source = opt.probe_source;
  if (!opt.surrogate.empty()) cfg.probe.surrogate = dowser::surrogate_from_name(opt.surrogate);
  cfg.validate();
  return cfg;
}

void add_common_flags(CLI::App* cmd, cli_options& opt) {
  cmd->add_option("--config", opt.config_path, "experiment config JSON")->required();
  cmd->add_option("--out", opt.out_dir, "output directory override");
  cmd->add_option("--rho", opt.rhos, "update ratio list override");
  cmd->add_option("--depth", opt.depths, "fine-tuning depth list override");
  cmd->add_option("--seeds", opt.seeds, "number of seeds override");
  cmd->add_option("--probe-source", opt.probe_source, "synthetic | task")
      ->check(CLI::IsMember({"synthetic", "task"}));
  cmd->add_option("--surrogate", opt.surrogate, "l2 | l1")
      ->check(CLI::IsMember({"l2", "l1", "l2-hutchinson", "l1-khintchine"}));
}

int run_stage(const cli_options& opt, dowser::pipeline_stage stage) {
  const dowser::experiment_config cfg = load_config(opt);
  const dowser::run_request req{opt.method, cfg.rhos.front(),
                                cfg.depths.empty() ? -1 : cfg.depths.front(), opt.seed_index};
  const dowser::pipeline_result result = dowser::run_pipeline(cfg, req, stage);
  if (result.reused) {
    std::printf("up to date: %s\n", result.run_dir.string().c_str());
  } else {
    std::printf("wrote %s\n", result.run_dir.string().c_str());
  }
  if (stage == dowser::pipeline_stage::eval) {
    std::printf("a_up=%.6f a_down=%.6f avg=%.6f h=%.6f\n", result.metrics.a_up,
                result.metrics.a_down, result.metrics.avg, result.metrics.h_score);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-free importance probing and sparse fine-tuning harness"};
  app.require_subcommand(1);

  cli_options opt;

  CLI::App* probe = app.add_subcommand("probe", "sensitivity probe of the pretrained model");
  CLI::App* score = app.add_subcommand("score", "Monte-Carlo importance scores");
  CLI::App* mask = app.add_subcommand("mask", "bottom-rho binary mask from scores");
  CLI::App* train = app.add_subcommand("train", "masked fine-tuning on the downstream task");
  CLI::App* eval = app.add_subcommand("eval", "full pipeline and metrics JSON");
  CLI::App* sweep = app.add_subcommand("sweep", "method x rho x seed sweep with t-tests");
  CLI::App* cl_run = app.add_subcommand("cl-run", "sequential continual-learning run");

  for (CLI::App* cmd : {probe, score, mask, train, eval, sweep, cl_run}) {
    add_common_flags(cmd, opt);
  }
  for (CLI::App* cmd : {probe, score, mask, train, eval, cl_run}) {
    cmd->add_option("--method", opt.method, "dowser | random | full-ft | frozen")
        ->check(CLI::IsMember({"dowser", "random", "full-ft", "frozen"}));
  }
  for (CLI::App* cmd : {probe, score, mask, train, eval}) {
    cmd->add_option("--seed-index", opt.seed_index, "which seed slot to run");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (probe->parsed()) return run_stage(opt, dowser::pipeline_stage::probe);
    if (score->parsed()) return run_stage(opt, dowser::pipeline_stage::score);
    if (mask->parsed()) return run_stage(opt, dowser::pipeline_stage::mask);
    if (train->parsed()) return run_stage(opt, dowser::pipeline_stage::train);
    if (eval->parsed()) return run_stage(opt, dowser::pipeline_stage::eval);
    if (sweep->parsed()) {
      const dowser::experiment_config cfg = load_config(opt);
      const dowser::sweep_result result = dowser::sweep_and_compare(cfg);
      std::printf("wrote %s\n", result.table_csv.string().c_str());
      std::printf("wrote %s\n", result.significance_csv.string().c_str());
      for (const dowser::sweep_comparison& c : result.comparisons) {
        std::printf("rho=%g %s: t=%.4f df=%.2f p=%.6g%s\n", c.rho, c.metric.c_str(), c.test.t,
                    c.test.df, c.test.p, c.test.degenerate ? " (degenerate)" : "");
      }
      if (!cfg.depths.empty()) {
        dowser::depth_sweep(cfg);
        std::printf("wrote %s/depth.csv\n", cfg.out_dir.c_str());
      }
      return 0;
    }
    if (cl_run->parsed()) {
      const dowser::experiment_config cfg = load_config(opt);
      const dowser::run_metrics metrics = dowser::run_cl(cfg, opt.method);
      std::printf("mft=%.6f mfn=%.6f maa=%.6f bwt=%.6f\n", metrics.cl.mft, metrics.cl.mfn,
                  metrics.cl.maa, metrics.cl.bwt);
      return 0;
    }
  } catch (const dowser::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const dowser::numerical_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

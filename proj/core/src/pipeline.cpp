#include "dowser/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dowser/io.hpp"
#include "dowser/parallel.hpp"
#include "dowser/score.hpp"

namespace dowser {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stage ids for hierarchical seed splitting.
constexpr std::uint64_t k_stage_probe = 3;
constexpr std::uint64_t k_stage_mask = 4;
constexpr std::uint64_t k_stage_finetune = 5;

json task_to_json(const task_spec& t) {
  json j;
  switch (t.kind) {
    case task_kind::mlp_synthetic: j["kind"] = "mlp-synthetic"; break;
    case task_kind::lm_bigram: j["kind"] = "lm-bigram"; break;
    case task_kind::lm_copy: j["kind"] = "lm-copy"; break;
  }
  j["gen_seed"] = t.gen_seed;
  j["train_size"] = t.train_size;
  j["eval_size"] = t.eval_size;
  j["vocab"] = t.vocab;
  j["seq_len"] = t.seq_len;
  j["peak"] = t.peak;
  j["in_dim"] = t.in_dim;
  j["out_dim"] = t.out_dim;
  j["noise"] = t.noise;
  return j;
}

task_spec task_from_json(const json& j) {
  task_spec t;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "mlp-synthetic") {
    t.kind = task_kind::mlp_synthetic;
  } else if (kind == "lm-bigram") {
    t.kind = task_kind::lm_bigram;
  } else if (kind == "lm-copy") {
    t.kind = task_kind::lm_copy;
  } else {
    throw config_error("unknown task kind " + kind);
  }
  t.gen_seed = j.at("gen_seed").get<std::uint64_t>();
  t.train_size = j.at("train_size").get<int>();
  t.eval_size = j.at("eval_size").get<int>();
  t.vocab = j.at("vocab").get<std::int64_t>();
  t.seq_len = j.at("seq_len").get<int>();
  t.peak = j.at("peak").get<double>();
  t.in_dim = j.at("in_dim").get<std::int64_t>();
  t.out_dim = j.at("out_dim").get<std::int64_t>();
  t.noise = j.at("noise").get<double>();
  return t;
}

json train_to_json(const train_config& c) {
  json j;
  j["lr"] = c.lr;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["optimizer"] = c.optimizer == optimizer_kind::sgd ? "sgd" : "adam";
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["loss"] = c.loss == loss_kind::cross_entropy ? "cross-entropy" : "mse";
  j["seed"] = c.seed;
  if (c.clip_norm) j["clip_norm"] = *c.clip_norm;
  return j;
}

train_config train_from_json(const json& j) {
  train_config c;
  c.lr = j.at("lr").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  const std::string opt = j.at("optimizer").get<std::string>();
  if (opt == "sgd") {
    c.optimizer = optimizer_kind::sgd;
  } else if (opt == "adam") {
    c.optimizer = optimizer_kind::adam;
  } else {
    throw config_error("unknown optimizer " + opt);
  }
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  const std::string loss = j.at("loss").get<std::string>();
  if (loss == "cross-entropy") {
    c.loss = loss_kind::cross_entropy;
  } else if (loss == "mse") {
    c.loss = loss_kind::mse;
  } else {
    throw config_error("unknown loss " + loss);
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<double>();
  return c;
}

template <typename F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const config_error& e) {
    throw config_error(std::string("stage ") + name + ": " + e.what());
  } catch (const numerical_error& e) {
    throw numerical_error(std::string("stage ") + name + ": " + e.what());
  }
}

std::string format_rho(double rho) {
  std::ostringstream os;
  os << rho;
  std::string s = os.str();
  for (char& c : s) {
    if (c == '.') c = 'p';
  }
  return s;
}

std::mutex g_pretrain_mutex;

}  // namespace

// ---------------------------------------------------------------------------
// experiment_config

void experiment_config::validate() const {
  probe.validate();
  pretrain.validate();
  finetune.validate();
  if (rhos.empty()) throw config_error("experiment: empty rho list");
  for (double r : rhos) {
    if (!(r >= 0.0 && r <= 1.0)) throw config_error("experiment: rho outside [0, 1]");
  }
  if (n_seeds < 1) throw config_error("experiment: n_seeds must be >= 1");
  if (baselines.empty()) throw config_error("experiment: empty baseline list");
  for (const std::string& b : baselines) {
    if (b != "dowser" && b != "random" && b != "full-ft" && b != "frozen")
      throw config_error("experiment: unknown baseline " + b);
  }
  if (probe_source != "synthetic" && probe_source != "task")
    throw config_error("experiment: probe_source must be synthetic or task");
  if (out_dir.empty()) throw config_error("experiment: out_dir required");
}

std::string experiment_config::to_json() const {
  json j;
  j["model"] = json::parse(model.to_meta());
  j["probe"] = json::parse(probe.to_meta());
  j["pretrain"] = train_to_json(pretrain);
  j["finetune"] = train_to_json(finetune);
  j["upstream"] = task_to_json(upstream);
  j["downstream"] = task_to_json(downstream);
  json seq = json::array();
  for (const task_spec& t : sequence) seq.push_back(task_to_json(t));
  j["sequence"] = seq;
  j["rhos"] = rhos;
  j["depths"] = depths;
  j["baselines"] = baselines;
  j["n_seeds"] = n_seeds;
  j["seed"] = seed;
  j["probe_source"] = probe_source;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

experiment_config experiment_config::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw config_error("experiment config: malformed json");
  experiment_config c;
  c.model = model_spec::from_meta(j.at("model").dump());
  c.probe = probe_config::from_meta(j.at("probe").dump());
  c.pretrain = train_from_json(j.at("pretrain"));
  c.finetune = train_from_json(j.at("finetune"));
  c.upstream = task_from_json(j.at("upstream"));
  c.downstream = task_from_json(j.at("downstream"));
  for (const json& t : j.at("sequence")) c.sequence.push_back(task_from_json(t));
  c.rhos = j.at("rhos").get<std::vector<double>>();
  c.depths = j.at("depths").get<std::vector<int>>();
  c.baselines = j.at("baselines").get<std::vector<std::string>>();
  c.n_seeds = j.at("n_seeds").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.probe_source = j.at("probe_source").get<std::string>();
  c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

experiment_config experiment_config::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

void experiment_config::to_file(const fs::path& path) const { atomic_write(path, to_json()); }

std::uint64_t experiment_config::config_hash() const { return fnv1a64(to_json()); }

pipeline_stage stage_from_name(const std::string& name) {
  if (name == "probe") return pipeline_stage::probe;
  if (name == "score") return pipeline_stage::score;
  if (name == "mask") return pipeline_stage::mask;
  if (name == "train") return pipeline_stage::train;
  if (name == "eval") return pipeline_stage::eval;
  throw config_error("unknown stage " + name);
}

// ---------------------------------------------------------------------------
// pretraining

fs::path ensure_pretrained(const experiment_config& cfg) {
  std::lock_guard<std::mutex> lock(g_pretrain_mutex);
  const fs::path dir(cfg.out_dir);
  const fs::path ckpt = dir / "pretrained.dwsr";
  const fs::path meta_path = dir / "pretrained.json";

  json ident;
  ident["model"] = json::parse(cfg.model.to_meta());
  ident["pretrain"] = train_to_json(cfg.pretrain);
  ident["upstream"] = task_to_json(cfg.upstream);
  ident["seed"] = cfg.seed;
  const std::uint64_t want = fnv1a64(ident.dump());

  if (fs::exists(meta_path) && fs::exists(ckpt)) {
    std::ifstream in(meta_path);
    json meta = json::parse(in, nullptr, false);
    if (!meta.is_discarded() && meta.value("ident_hash", std::uint64_t{0}) == want &&
        meta.value("artifact_hash", std::uint64_t{0}) == file_hash(ckpt)) {
      return ckpt;
    }
  }

  return stage("pretrain", [&] {
    model m(cfg.model);
    const task up = task::make(cfg.upstream);
    train_config pre = cfg.pretrain;
    pre.seed = mix64(cfg.seed, 2);
    mask_set all = full_mask(m.scorable_params());
    sparse_trainer trainer(m, all, pre);
    std::ostringstream curve;
    curve << "epoch,loss\n";
    trainer.train(up, [&](int epoch, double loss) { curve << epoch << "," << loss << "\n"; });
    m.save(ckpt);
    atomic_write(dir / "pretrain_curve.csv", curve.str());

    json meta;
    meta["ident_hash"] = want;
    meta["artifact_hash"] = file_hash(ckpt);
    meta["a_up"] = evaluate(m, up);
    atomic_write(meta_path, meta.dump(2));
    return ckpt;
  });
}

// ---------------------------------------------------------------------------
// single pipeline run

namespace {

fs::path run_dir_for(const experiment_config& cfg, const run_request& req) {
  std::string name = req.method + "_rho" + format_rho(req.rho);
  if (req.depth >= 0) name += "_depth" + std::to_string(req.depth);
  name += "_seed" + std::to_string(req.seed_index);
  return fs::path(cfg.out_dir) / "runs" / name;
}

std::vector<probe_input> gather_probes(const experiment_config& cfg, const model& m,
                                       std::uint64_t probe_seed) {
  std::vector<probe_input> probes;
  if (m.spec().kind == model_kind::tiny_lm) {
    if (cfg.probe_source == "synthetic") {
      for (auto& seq : synthetic_prompts(m, cfg.probe.n, cfg.probe.prompt_len, probe_seed))
        probes.push_back(probe_input::seq(std::move(seq)));
    } else {
      // Task-generated inputs in place of synthetic prompts.
      task_spec spec = cfg.upstream;
      spec.gen_seed = probe_seed;
      spec.train_size = cfg.probe.n;
      spec.eval_size = 0;
      const task probe_task = task::make(spec);
      for (const lm_example& ex : probe_task.train_lm())
        probes.push_back(probe_input::seq(ex.tokens));
    }
  } else {
    if (cfg.probe_source == "synthetic") {
      for (auto& v : probe_inputs_for_mlp(m.spec().dims.front(), cfg.probe.n, probe_seed))
        probes.push_back(probe_input::vec(std::move(v)));
    } else {
      task_spec spec = cfg.upstream;
      spec.gen_seed = probe_seed;
      spec.train_size = cfg.probe.n;
      spec.eval_size = 0;
      const task probe_task = task::make(spec);
      for (const mlp_example& ex : probe_task.train_mlp())
        probes.push_back(probe_input::vec(ex.x));
    }
  }
  return probes;
}

struct manifest_writer {
  json artifacts = json::array();
  void add(const std::string& stage_name, const fs::path& path) {
    json a;
    a["stage"] = stage_name;
    a["path"] = path.filename().string();
    a["hash"] = file_hash(path);
    artifacts.push_back(a);
  }
};

bool manifest_matches(const experiment_config& cfg, const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) return false;
  std::ifstream in(manifest_path);
  json manifest = json::parse(in, nullptr, false);
  if (manifest.is_discarded()) return false;
  if (manifest.value("config_hash", std::uint64_t{0}) != cfg.config_hash()) return false;
  for (const json& a : manifest.value("artifacts", json::array())) {
    const fs::path p = dir / a.at("path").get<std::string>();
    if (!fs::exists(p) || file_hash(p) != a.at("hash").get<std::uint64_t>()) return false;
  }
  return true;
}

}  // namespace

pipeline_result run_pipeline(const experiment_config& cfg, const run_request& req,
                             pipeline_stage up_to) {
  cfg.validate();
  if (req.method != "dowser" && req.method != "random" && req.method != "full-ft" &&
      req.method != "frozen")
    throw config_error("run_pipeline: unknown method " + req.method);
  if (!(req.rho >= 0.0 && req.rho <= 1.0)) throw config_error("run_pipeline: rho outside [0, 1]");

  const auto t_start = std::chrono::steady_clock::now();
  pipeline_result result;
  result.run_dir = run_dir_for(cfg, req);
  const fs::path& dir = result.run_dir;

  if (up_to == pipeline_stage::eval && manifest_matches(cfg, dir)) {
    std::ifstream in(dir / "metrics.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    result.metrics = run_metrics::from_json(text);
    result.reused = true;
    return result;
  }
  fs::create_directories(dir);

  const fs::path pretrained_path = ensure_pretrained(cfg);
  model m = model::load(pretrained_path);
  if (req.depth >= 0 && req.depth > m.depth_groups())
    throw config_error("run_pipeline: depth exceeds the model's " +
                       std::to_string(m.depth_groups()) + " depth groups");

  const std::uint64_t probe_seed =
      mix64(mix64(cfg.seed, k_stage_probe), static_cast<std::uint64_t>(req.seed_index));
  const std::uint64_t mask_seed =
      mix64(mix64(cfg.seed, k_stage_mask), static_cast<std::uint64_t>(req.seed_index));
  const std::uint64_t ft_seed =
      mix64(mix64(cfg.seed, k_stage_finetune), static_cast<std::uint64_t>(req.seed_index));

  manifest_writer manifest;
  const bool scored_method = req.method == "dowser";

  // probe + score
  score_map scores;
  std::vector<probe_input> probes;
  if (scored_method) {
    probes = stage("probe", [&] { return gather_probes(cfg, m, probe_seed); });
    stage("probe", [&] {
      probe_config pc = cfg.probe;
      pc.seed = probe_seed;
      const std::string target = resolve_output_target(m, pc);
      sensitivity_map first =
          cfg.probe.surrogate == surrogate_kind::l2_hutchinson
              ? hutchinson_norms(m, probes.front(), pc.r, mix64(pc.seed, 0), target)
              : l1_surrogate_norms(m, probes.front(), pc.r, mix64(pc.seed, 0), target);
      first.cfg = pc;
      first.save(dir / "sens.dwsr");
      manifest.add("probe", dir / "sens.dwsr");
      return 0;
    });
    if (up_to == pipeline_stage::probe) return result;

    scores = stage("score", [&] {
      probe_config pc = cfg.probe;
      pc.seed = probe_seed;
      score_map s = score_mc(m, probes, pc);
      s.save(dir / "score.dwsr");
      manifest.add("score", dir / "score.dwsr");
      return s;
    });
    if (up_to == pipeline_stage::score) return result;
  } else if (up_to == pipeline_stage::probe || up_to == pipeline_stage::score) {
    throw config_error("run_pipeline: method " + req.method + " has no probe/score stage");
  }

  // mask
  mask_set mask = stage("mask", [&] {
    mask_set out;
    if (req.method == "dowser") {
      out = make_mask(scores, req.rho, mask_seed);
    } else if (req.method == "random") {
      out = random_mask(m.scorable_params(), req.rho, mask_seed);
    } else if (req.method == "full-ft") {
      out = full_mask(m.scorable_params());
    } else {
      out = zero_mask(m.scorable_params());
    }
    if (req.depth >= 0) out = restrict_to_depth(out, m, req.depth);
    out.save(dir / "mask.dwsr");
    manifest.add("mask", dir / "mask.dwsr");
    return out;
  });
  if (up_to == pipeline_stage::mask) return result;

  // train
  const task up_task = task::make(cfg.upstream);
  const task down_task = task::make(cfg.downstream);
  stage("train", [&] {
    train_config ft = cfg.finetune;
    ft.seed = ft_seed;
    std::ostringstream curve;
    curve << "epoch,loss,a_up,a_down\n";
    if (mask.total_popcount() > 0) {
      sparse_trainer trainer(m, mask, ft);
      trainer.train(down_task, [&](int epoch, double loss) {
        curve << epoch << "," << loss << "," << evaluate(m, up_task) << ","
              << evaluate(m, down_task) << "\n";
      });
    }
    m.save(dir / "model.dwsr");
    atomic_write(dir / "train_curve.csv", curve.str());
    manifest.add("train", dir / "model.dwsr");
    manifest.add("train", dir / "train_curve.csv");
    return 0;
  });
  if (up_to == pipeline_stage::train) return result;

  // eval
  stage("eval", [&] {
    run_metrics metrics;
    metrics.a_up = evaluate(m, up_task);
    metrics.a_down = evaluate(m, down_task);
    const avg_h ah = avg_and_hscore(metrics.a_up, metrics.a_down);
    metrics.avg = ah.avg;
    metrics.h_score = ah.h;
    metrics.seeds = {cfg.seed, probe_seed, mask_seed, ft_seed};
    metrics.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    metrics.validate();
    atomic_write(dir / "metrics.json", metrics.to_json());
    manifest.add("eval", dir / "metrics.json");
    result.metrics = metrics;

    json man;
    man["config_hash"] = cfg.config_hash();
    man["artifacts"] = manifest.artifacts;
    atomic_write(dir / "manifest.json", man.dump(2));
    return 0;
  });
  return result;
}

// ---------------------------------------------------------------------------
// sweeps

std::vector<double> sweep_cell::metric(const std::string& name) const {
  std::vector<double> out;
  out.reserve(runs.size());
  for (const run_metrics& r : runs) {
    if (name == "a_up") {
      out.push_back(r.a_up);
    } else if (name == "a_down") {
      out.push_back(r.a_down);
    } else if (name == "avg") {
      out.push_back(r.avg);
    } else if (name == "h") {
      out.push_back(r.h_score);
    } else {
      throw config_error("sweep: unknown metric " + name);
    }
  }
  return out;
}

sweep_result sweep_and_compare(const experiment_config& cfg) {
  cfg.validate();
  if (cfg.n_seeds < 3) throw config_error("sweep_and_compare: requires n_seeds >= 3");
  ensure_pretrained(cfg);

  struct point {
    std::string method;
    double rho;
    int seed_index;
  };
  std::vector<point> points;
  for (const std::string& method : cfg.baselines) {
    std::vector<double> rhos;
    if (method == "full-ft") {
      rhos = {1.0};
    } else if (method == "frozen") {
      rhos = {0.0};
    } else {
      rhos = cfg.rhos;
    }
    for (double rho : rhos) {
      for (int k = 0; k < cfg.n_seeds; ++k) points.push_back({method, rho, k});
    }
  }

  std::vector<run_metrics> metrics(points.size());
  parallel_for(static_cast<std::int64_t>(points.size()), [&](std::int64_t i) {
    const point& p = points[static_cast<std::size_t>(i)];
    metrics[static_cast<std::size_t>(i)] =
        run_pipeline(cfg, {p.method, p.rho, -1, p.seed_index}).metrics;
  });

  sweep_result result;
  for (std::size_t i = 0; i < points.size(); ++i) {
    sweep_cell* cell = nullptr;
    for (sweep_cell& c : result.cells) {
      if (c.method == points[i].method && c.rho == points[i].rho) cell = &c;
    }
    if (!cell) {
      result.cells.push_back({points[i].method, points[i].rho, {}});
      cell = &result.cells.back();
    }
    cell->runs.push_back(metrics[i]);
  }

  // Welch comparisons, dowser vs random per rho.
  for (double rho : cfg.rhos) {
    const sweep_cell* dowser_cell = nullptr;
    const sweep_cell* random_cell = nullptr;
    for (const sweep_cell& c : result.cells) {
      if (c.rho == rho && c.method == "dowser") dowser_cell = &c;
      if (c.rho == rho && c.method == "random") random_cell = &c;
    }
    if (!dowser_cell || !random_cell) continue;
    for (const std::string& metric : {std::string("avg"), std::string("h")}) {
      sweep_comparison cmp;
      cmp.rho = rho;
      cmp.metric = metric;
      cmp.test = welch_t_test(dowser_cell->metric(metric), random_cell->metric(metric));
      result.comparisons.push_back(cmp);
    }
  }

  // CSV emission.
  std::ostringstream table;
  table << "method,rho,n_seeds,a_up_mean,a_up_std,a_down_mean,a_down_std,avg_mean,avg_std,"
           "h_mean,h_std\n";
  for (const sweep_cell& c : result.cells) {
    const auto stat = [&](const std::string& name) {
      const std::vector<double> v = c.metric(name);
      return std::pair<double, double>(mean(v), v.size() > 1 ? sample_std(v) : 0.0);
    };
    const auto [aum, aus] = stat("a_up");
    const auto [adm, ads] = stat("a_down");
    const auto [avm, avs] = stat("avg");
    const auto [hm, hs] = stat("h");
    table << c.method << "," << c.rho << "," << c.runs.size() << "," << aum << "," << aus << ","
          << adm << "," << ads << "," << avm << "," << avs << "," << hm << "," << hs << "\n";
  }
  result.table_csv = fs::path(cfg.out_dir) / "sweep.csv";
  atomic_write(result.table_csv, table.str());

  std::ostringstream sig;
  sig << "rho,metric,t,df,p,degenerate\n";
  for (const sweep_comparison& c : result.comparisons) {
    sig << c.rho << "," << c.metric << "," << c.test.t << "," << c.test.df << "," << c.test.p
        << "," << (c.test.degenerate ? 1 : 0) << "\n";
  }
  result.significance_csv = fs::path(cfg.out_dir) / "significance.csv";
  atomic_write(result.significance_csv, sig.str());
  return result;
}

std::vector<depth_point> depth_sweep(const experiment_config& cfg) {
  cfg.validate();
  if (cfg.depths.empty()) throw config_error("depth_sweep: empty depth list");
  ensure_pretrained(cfg);
  {
    model probe_model = model::load(ensure_pretrained(cfg));
    for (int d : cfg.depths) {
      if (d < 0 || d > probe_model.depth_groups())
        throw config_error("depth_sweep: depth " + std::to_string(d) + " exceeds model layers");
    }
  }

  struct point {
    int depth;
    int seed_index;
  };
  std::vector<point> points;
  for (int d : cfg.depths) {
    for (int k = 0; k < cfg.n_seeds; ++k) points.push_back({d, k});
  }
  std::vector<run_metrics> metrics(points.size());
  parallel_for(static_cast<std::int64_t>(points.size()), [&](std::int64_t i) {
    const point& p = points[static_cast<std::size_t>(i)];
    metrics[static_cast<std::size_t>(i)] =
        run_pipeline(cfg, {"dowser", cfg.rhos.front(), p.depth, p.seed_index}).metrics;
  });

  std::vector<depth_point> result;
  for (std::size_t i = 0; i < points.size(); ++i) {
    depth_point* dp = nullptr;
    for (depth_point& d : result) {
      if (d.depth == points[i].depth) dp = &d;
    }
    if (!dp) {
      result.push_back({points[i].depth, {}});
      dp = &result.back();
    }
    dp->runs.push_back(metrics[i]);
  }

  std::ostringstream csv;
  csv << "depth,avg_mean,h_mean,a_up_mean,a_down_mean\n";
  for (const depth_point& d : result) {
    double avg = 0, h = 0, au = 0, ad = 0;
    for (const run_metrics& r : d.runs) {
      avg += r.avg;
      h += r.h_score;
      au += r.a_up;
      ad += r.a_down;
    }
    const double n = static_cast<double>(d.runs.size());
    csv << d.depth << "," << avg / n << "," << h / n << "," << au / n << "," << ad / n << "\n";
  }
  atomic_write(fs::path(cfg.out_dir) / "depth.csv", csv.str());
  return result;
}

run_metrics run_cl(const experiment_config& cfg, const std::string& method) {
  cfg.validate();
  if (cfg.sequence.size() < 2) throw config_error("run_cl: needs at least two sequence tasks");

  const fs::path dir = fs::path(cfg.out_dir) / "cl";
  fs::create_directories(dir);
  const auto t_start = std::chrono::steady_clock::now();

  model m = model::load(ensure_pretrained(cfg));
  const task up_task = task::make(cfg.upstream);

  // One static mask from a one-time score of the pretrained model.
  const std::uint64_t probe_seed = mix64(mix64(cfg.seed, k_stage_probe), 0);
  const std::uint64_t mask_seed = mix64(mix64(cfg.seed, k_stage_mask), 0);
  mask_set mask;
  if (method == "dowser") {
    std::vector<probe_input> probes = gather_probes(cfg, m, probe_seed);
    probe_config pc = cfg.probe;
    pc.seed = probe_seed;
    mask = make_mask(score_mc(m, probes, pc), cfg.rhos.front(), mask_seed);
  } else if (method == "random") {
    mask = random_mask(m.scorable_params(), cfg.rhos.front(), mask_seed);
  } else if (method == "full-ft") {
    mask = full_mask(m.scorable_params());
  } else {
    throw config_error("run_cl: unsupported method " + method);
  }
  mask.save(dir / "mask.dwsr");

  std::vector<task> tasks;
  for (const task_spec& spec : cfg.sequence) tasks.push_back(task::make(spec));

  run_metrics metrics;
  metrics.has_cl = true;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    train_config ft = cfg.finetune;
    ft.seed = mix64(mix64(cfg.seed, k_stage_finetune), static_cast<std::uint64_t>(t));
    sparse_trainer trainer(m, mask, ft);
    trainer.train(tasks[t]);
    std::vector<double> row;
    for (std::size_t i = 0; i <= t; ++i) row.push_back(evaluate(m, tasks[i]));
    metrics.acc_matrix.push_back(std::move(row));
  }
  metrics.cl = cl_metrics(metrics.acc_matrix);

  metrics.a_up = evaluate(m, up_task);
  double down = 0.0;
  for (double v : metrics.acc_matrix.back()) down += v;
  metrics.a_down = down / static_cast<double>(metrics.acc_matrix.back().size());
  const avg_h ah = avg_and_hscore(metrics.a_up, metrics.a_down);
  metrics.avg = ah.avg;
  metrics.h_score = ah.h;
  metrics.seeds = {cfg.seed, probe_seed, mask_seed};
  metrics.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  metrics.validate();
  atomic_write(dir / "cl_metrics.json", metrics.to_json());

  std::ostringstream csv;
  csv << "after_task";
  for (std::size_t i = 0; i < tasks.size(); ++i) csv << ",task" << i;
  csv << "\n";
  for (std::size_t t = 0; t < metrics.acc_matrix.size(); ++t) {
    csv << t;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      csv << ",";
      if (i < metrics.acc_matrix[t].size()) csv << metrics.acc_matrix[t][i];
    }
    csv << "\n";
  }
  atomic_write(dir / "accuracy_matrix.csv", csv.str());
  m.save(dir / "model.dwsr");
  return metrics;
}

}  // namespace dowser

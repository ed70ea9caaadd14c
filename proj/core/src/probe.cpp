#include "dowser/probe.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "dowser/io.hpp"

namespace dowser {

namespace {

constexpr std::uint32_t k_sens_version = 1;
const std::string k_sens_magic = "DWSRSENS";

// Position-mean of a per-(position, node) grid stored row-major.
std::vector<double> mean_over_rows(const std::vector<double>& grid, std::int64_t rows,
                                   std::int64_t cols) {
  std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
  for (std::int64_t t = 0; t < rows; ++t) {
    const double* row = grid.data() + t * cols;
    for (std::int64_t j = 0; j < cols; ++j) out[static_cast<std::size_t>(j)] += row[j];
  }
  for (double& v : out) v /= static_cast<double>(rows);
  return out;
}

std::vector<double> abs_mean_over_rows(const tensor& t) {
  std::vector<double> grid(t.data.size());
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = std::fabs(t.data[i]);
  return mean_over_rows(grid, t.rows(), t.cols());
}

}  // namespace

std::string surrogate_name(surrogate_kind s) {
  return s == surrogate_kind::l2_hutchinson ? "l2-hutchinson" : "l1-khintchine";
}

surrogate_kind surrogate_from_name(const std::string& name) {
  if (name == "l2-hutchinson" || name == "l2") return surrogate_kind::l2_hutchinson;
  if (name == "l1-khintchine" || name == "l1") return surrogate_kind::l1_khintchine;
  throw config_error("unknown surrogate " + name);
}

void probe_config::validate() const {
  if (n < 1) throw config_error("probe_config: n must be >= 1");
  if (r < 1) throw config_error("probe_config: r must be >= 1");
  if (prompt_len < 1) throw config_error("probe_config: prompt_len must be >= 1");
}

std::string probe_config::to_meta() const {
  nlohmann::json j;
  j["n"] = n;
  j["r"] = r;
  j["seed"] = seed;
  j["surrogate"] = surrogate_name(surrogate);
  j["prompt_len"] = prompt_len;
  j["output_target"] = output_target;
  return j.dump();
}

probe_config probe_config::from_meta(const std::string& meta) {
  nlohmann::json j = nlohmann::json::parse(meta, nullptr, false);
  if (j.is_discarded()) throw config_error("probe_config: malformed metadata");
  probe_config c;
  c.n = j.at("n").get<int>();
  c.r = j.at("r").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.surrogate = surrogate_from_name(j.at("surrogate").get<std::string>());
  c.prompt_len = j.at("prompt_len").get<int>();
  c.output_target = j.at("output_target").get<std::string>();
  return c;
}

const layer_sensitivity& sensitivity_map::layer(const std::string& key) const {
  for (const layer_sensitivity& l : layers) {
    if (l.layer == key) return l;
  }
  throw config_error("sensitivity_map: unknown layer " + key);
}

void sensitivity_map::save(const std::filesystem::path& path) const {
  blob_file file;
  file.magic = k_sens_magic;
  file.version = k_sens_version;
  file.meta = cfg.to_meta();
  for (const layer_sensitivity& l : layers) {
    blob_entry g;
    g.name = l.layer + "/g";
    g.shape = {static_cast<std::int64_t>(l.g.size())};
    g.bytes = pack_f64(l.g);
    file.entries.push_back(std::move(g));
    blob_entry h;
    h.name = l.layer + "/h_abs";
    h.shape = {static_cast<std::int64_t>(l.h_abs.size())};
    h.bytes = pack_f64(l.h_abs);
    file.entries.push_back(std::move(h));
    if (!l.g_stderr.empty()) {
      blob_entry s;
      s.name = l.layer + "/g_stderr";
      s.shape = {static_cast<std::int64_t>(l.g_stderr.size())};
      s.bytes = pack_f64(l.g_stderr);
      file.entries.push_back(std::move(s));
    }
  }
  write_blob(path, file);
}

sensitivity_map sensitivity_map::load(const std::filesystem::path& path) {
  blob_file file = read_blob(path, k_sens_magic);
  sensitivity_map map;
  map.cfg = probe_config::from_meta(file.meta);
  for (const blob_entry& e : file.entries) {
    const std::size_t slash = e.name.rfind('/');
    if (slash == std::string::npos) throw config_error("sensitivity file: bad entry name " + e.name);
    const std::string layer = e.name.substr(0, slash);
    const std::string field = e.name.substr(slash + 1);
    if (map.layers.empty() || map.layers.back().layer != layer) {
      map.layers.push_back({layer, {}, {}, {}});
    }
    if (field == "g") {
      map.layers.back().g = unpack_f64(e.bytes);
    } else if (field == "h_abs") {
      map.layers.back().h_abs = unpack_f64(e.bytes);
    } else if (field == "g_stderr") {
      map.layers.back().g_stderr = unpack_f64(e.bytes);
    } else {
      throw config_error("sensitivity file: unknown field " + field);
    }
  }
  return map;
}

std::string resolve_output_target(const model& m, const probe_config& cfg) {
  return m.spec().kind == model_kind::mlp ? "output-raw" : cfg.output_target;
}

tensor rademacher_like(const std::vector<std::int64_t>& shape, rng& gen) {
  tensor t = tensor::zeros(shape);
  for (double& v : t.data) v = gen.next_rademacher();
  return t;
}

sensitivity_map hutchinson_norms_with(const model& m, const probe_input& in,
                                      const std::vector<tensor>& draws,
                                      const std::string& output_target) {
  if (draws.empty()) throw config_error("hutchinson_norms: need at least one draw");
  capture_result cap = m.capture(in, output_target);
  const std::size_t r = draws.size();

  std::vector<std::vector<double>> sumsq(cap.taps.size());
  for (std::size_t l = 0; l < cap.taps.size(); ++l)
    sumsq[l].assign(cap.z_of(l).data.size(), 0.0);

  for (const tensor& xi : draws) {
    cap.backward(xi);
    for (std::size_t l = 0; l < cap.taps.size(); ++l) {
      const std::vector<double>& dz = cap.g.grad(cap.taps[l].z);
      for (std::size_t i = 0; i < dz.size(); ++i) sumsq[l][i] += dz[i] * dz[i];
    }
  }

  sensitivity_map map;
  map.cfg.r = static_cast<int>(r);
  map.cfg.n = 1;
  map.cfg.surrogate = surrogate_kind::l2_hutchinson;
  for (std::size_t l = 0; l < cap.taps.size(); ++l) {
    const tensor& z = cap.z_of(l);
    std::vector<double> per_node(sumsq[l].size());
    for (std::size_t i = 0; i < per_node.size(); ++i)
      per_node[i] = std::sqrt(sumsq[l][i] / static_cast<double>(r));
    layer_sensitivity ls;
    ls.layer = cap.taps[l].key;
    ls.g = mean_over_rows(per_node, z.rows(), z.cols());
    ls.h_abs = abs_mean_over_rows(cap.h_of(l));
    for (double v : ls.g) {
      if (!std::isfinite(v)) throw numerical_error("hutchinson_norms: non-finite gradient");
    }
    map.layers.push_back(std::move(ls));
  }
  return map;
}

sensitivity_map hutchinson_norms(const model& m, const probe_input& in, int r, std::uint64_t seed,
                                 const std::string& output_target) {
  if (r < 1) throw config_error("hutchinson_norms: r must be >= 1");
  const std::vector<std::int64_t> fshape = m.output_shape(in, output_target);
  rng gen(seed);
  std::vector<tensor> draws;
  draws.reserve(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) draws.push_back(rademacher_like(fshape, gen));
  sensitivity_map map = hutchinson_norms_with(m, in, draws, output_target);
  map.cfg.seed = seed;
  return map;
}

sensitivity_map l1_surrogate_norms(const model& m, const probe_input& in, int r, std::uint64_t seed,
                                   const std::string& output_target) {
  if (r < 1) throw config_error("l1_surrogate_norms: r must be >= 1");
  capture_result cap = m.capture(in, output_target);
  rng gen(seed);

  std::vector<std::vector<double>> sum(cap.taps.size());
  std::vector<std::vector<double>> sum_sq(cap.taps.size());
  for (std::size_t l = 0; l < cap.taps.size(); ++l) {
    sum[l].assign(cap.z_of(l).data.size(), 0.0);
    sum_sq[l].assign(cap.z_of(l).data.size(), 0.0);
  }

  for (int rep = 0; rep < r; ++rep) {
    const tensor xi = rademacher_like(cap.f().shape, gen);
    cap.backward(xi);
    for (std::size_t l = 0; l < cap.taps.size(); ++l) {
      const std::vector<double>& dz = cap.g.grad(cap.taps[l].z);
      for (std::size_t i = 0; i < dz.size(); ++i) {
        const double a = std::fabs(dz[i]);
        sum[l][i] += a;
        sum_sq[l][i] += a * a;
      }
    }
  }

  sensitivity_map map;
  map.cfg.r = r;
  map.cfg.n = 1;
  map.cfg.seed = seed;
  map.cfg.surrogate = surrogate_kind::l1_khintchine;
  const double rr = static_cast<double>(r);
  for (std::size_t l = 0; l < cap.taps.size(); ++l) {
    const tensor& z = cap.z_of(l);
    std::vector<double> mean(sum[l].size());
    std::vector<double> stderr_grid(sum[l].size(), 0.0);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] = sum[l][i] / rr;
      if (r > 1) {
        const double var = std::max(0.0, (sum_sq[l][i] - rr * mean[i] * mean[i]) / (rr - 1.0));
        stderr_grid[i] = std::sqrt(var / rr);
      }
    }
    layer_sensitivity ls;
    ls.layer = cap.taps[l].key;
    ls.g = mean_over_rows(mean, z.rows(), z.cols());
    ls.g_stderr = mean_over_rows(stderr_grid, z.rows(), z.cols());
    ls.h_abs = abs_mean_over_rows(cap.h_of(l));
    for (double v : ls.g) {
      if (!std::isfinite(v)) throw numerical_error("l1_surrogate_norms: non-finite gradient");
    }
    map.layers.push_back(std::move(ls));
  }
  return map;
}

const exact_jacobian_result::layer_jacobian& exact_jacobian_result::layer(
    const std::string& key) const {
  for (const layer_jacobian& l : layers) {
    if (l.layer == key) return l;
  }
  throw config_error("exact_jacobian: unknown layer " + key);
}

exact_jacobian_result exact_jacobian(const model& m, const probe_input& in, std::int64_t guard,
                                     const std::string& output_target) {
  capture_result cap = m.capture(in, output_target);
  const std::int64_t d_final = cap.f().numel();
  if (d_final > guard) {
    throw config_error("exact_jacobian: output dimension " + std::to_string(d_final) +
                       " exceeds guard " + std::to_string(guard));
  }

  exact_jacobian_result result;
  result.layers.resize(cap.taps.size());
  for (std::size_t l = 0; l < cap.taps.size(); ++l) {
    result.layers[l].layer = cap.taps[l].key;
    result.layers[l].j = tensor::zeros({d_final, cap.z_of(l).numel()});
  }

  for (std::int64_t k = 0; k < d_final; ++k) {
    tensor basis = tensor::zeros(cap.f().shape);
    basis.data[static_cast<std::size_t>(k)] = 1.0;
    cap.backward(basis);
    for (std::size_t l = 0; l < cap.taps.size(); ++l) {
      const std::vector<double>& dz = cap.g.grad(cap.taps[l].z);
      std::copy(dz.begin(), dz.end(),
                result.layers[l].j.data.begin() + static_cast<std::int64_t>(k * dz.size()));
    }
  }

  for (std::size_t l = 0; l < cap.taps.size(); ++l) {
    const tensor& z = cap.z_of(l);
    const std::int64_t zn = z.numel();
    std::vector<double> per_node(static_cast<std::size_t>(zn), 0.0);
    for (std::int64_t k = 0; k < d_final; ++k) {
      const double* row = result.layers[l].j.data.data() + k * zn;
      for (std::int64_t i = 0; i < zn; ++i) per_node[static_cast<std::size_t>(i)] += row[i] * row[i];
    }
    for (double& v : per_node) v = std::sqrt(v);
    result.layers[l].norms = mean_over_rows(per_node, z.rows(), z.cols());
  }
  return result;
}

std::vector<std::vector<int>> synthetic_prompts(const model& lm, int n, int t_gen,
                                                std::uint64_t seed) {
  if (lm.spec().kind != model_kind::tiny_lm)
    throw config_error("synthetic_prompts: model has no generative mode");
  if (n < 0) throw config_error("synthetic_prompts: n must be >= 0");
  if (t_gen < 1 || t_gen > lm.spec().ctx)
    throw config_error("synthetic_prompts: prompt_len must be in [1, ctx]");

  std::vector<std::vector<int>> prompts;
  prompts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    rng gen(mix64(seed, static_cast<std::uint64_t>(i)));
    std::vector<int> seq;
    seq.push_back(static_cast<int>(gen.next_below(static_cast<std::uint64_t>(lm.spec().vocab))));
    while (static_cast<int>(seq.size()) < t_gen) {
      seq.push_back(sample_next(lm, seq, gen));
    }
    prompts.push_back(std::move(seq));
  }
  return prompts;
}

std::vector<std::vector<double>> probe_inputs_for_mlp(std::int64_t in_dim, int n,
                                                      std::uint64_t seed) {
  if (n < 0) throw config_error("probe_inputs_for_mlp: n must be >= 0");
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    rng gen(mix64(seed, static_cast<std::uint64_t>(i)));
    std::vector<double> v(static_cast<std::size_t>(in_dim));
    for (double& x : v) x = gen.next_normal();
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace dowser

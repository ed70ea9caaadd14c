#include "dowser/score.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dowser/io.hpp"
#include "dowser/parallel.hpp"

namespace dowser {

namespace {

const std::string k_score_magic = "DWSRSCOR";
const std::string k_mask_magic = "DWSRMASK";
constexpr std::uint32_t k_version = 1;

std::int64_t budget_of(double rho, std::int64_t numel) {
  return static_cast<std::int64_t>(std::floor(rho * static_cast<double>(numel)));
}

void check_rho(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw config_error("rho must be in [0, 1]");
}

// Pairwise reduction over [lo, hi): the split point at the midpoint makes
// sum(0..2k) == sum(0..k) + sum(k..2k), which split-run merging relies on.
void tree_sum(std::vector<score_map>& maps, std::size_t lo, std::size_t hi) {
  if (hi - lo <= 1) return;
  const std::size_t mid = lo + (hi - lo) / 2;
  tree_sum(maps, lo, mid);
  tree_sum(maps, mid, hi);
  score_map& a = maps[lo];
  const score_map& b = maps[mid];
  for (std::size_t e = 0; e < a.entries.size(); ++e) {
    double* out = a.entries[e].second.data.data();
    const double* in = b.entries[e].second.data.data();
    const std::size_t n = a.entries[e].second.data.size();
    for (std::size_t i = 0; i < n; ++i) out[i] += in[i];
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// score_map

const tensor& score_map::entry(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw config_error("score_map: unknown entry " + name);
}

std::vector<double> score_map::flattened() const {
  std::vector<double> out;
  for (const auto& [n, t] : entries) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

score_map score_map::merge(const score_map& a, const score_map& b) {
  if (a.entries.size() != b.entries.size()) throw config_error("score merge: entry count mismatch");
  if (a.n_trials <= 0 || b.n_trials <= 0) throw config_error("score merge: empty operand");
  score_map out;
  out.cfg = a.cfg;
  out.n_trials = a.n_trials + b.n_trials;
  const double wa = static_cast<double>(a.n_trials);
  const double wb = static_cast<double>(b.n_trials);
  const double wt = wa + wb;
  for (std::size_t e = 0; e < a.entries.size(); ++e) {
    if (a.entries[e].first != b.entries[e].first || !a.entries[e].second.same_shape(b.entries[e].second))
      throw config_error("score merge: mismatched entry " + a.entries[e].first);
    tensor t = a.entries[e].second;
    for (std::size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = (t.data[i] * wa + b.entries[e].second.data[i] * wb) / wt;
    out.entries.emplace_back(a.entries[e].first, std::move(t));
  }
  return out;
}

void score_map::save(const std::filesystem::path& path) const {
  blob_file file;
  file.magic = k_score_magic;
  file.version = k_version;
  nlohmann::json meta;
  meta["probe"] = nlohmann::json::parse(cfg.to_meta());
  meta["n_trials"] = n_trials;
  file.meta = meta.dump();
  for (const auto& [name, t] : entries) {
    blob_entry e;
    e.name = name;
    e.shape = t.shape;
    e.bytes = pack_f64(t.data);
    file.entries.push_back(std::move(e));
  }
  write_blob(path, file);
}

score_map score_map::load(const std::filesystem::path& path) {
  blob_file file = read_blob(path, k_score_magic);
  nlohmann::json meta = nlohmann::json::parse(file.meta, nullptr, false);
  if (meta.is_discarded()) throw config_error("score file: malformed metadata");
  score_map map;
  map.cfg = probe_config::from_meta(meta.at("probe").dump());
  map.n_trials = meta.at("n_trials").get<std::int64_t>();
  for (const blob_entry& e : file.entries) {
    map.entries.emplace_back(e.name, tensor::from(e.shape, unpack_f64(e.bytes)));
  }
  return map;
}

// ---------------------------------------------------------------------------
// scoring

namespace {

score_map score_trial(const model& m, const probe_input& in, const probe_config& cfg,
                      std::uint64_t trial_seed) {
  const std::string target = resolve_output_target(m, cfg);
  sensitivity_map sens = cfg.surrogate == surrogate_kind::l2_hutchinson
                             ? hutchinson_norms(m, in, cfg.r, trial_seed, target)
                             : l1_surrogate_norms(m, in, cfg.r, trial_seed, target);
  score_map out;
  out.cfg = cfg;
  out.n_trials = 1;
  for (const scorable_layer& sl : m.scorable_layers()) {
    const layer_sensitivity& ls = sens.layer(sl.key);
    const tensor& w = m.state().param(sl.weight);
    tensor s = tensor::zeros(w.shape);
    for (std::int64_t i = 0; i < sl.d_out; ++i) {
      const double gi = ls.g[static_cast<std::size_t>(i)];
      const double* wrow = w.data.data() + i * sl.d_in;
      double* srow = s.data.data() + i * sl.d_in;
      for (std::int64_t j = 0; j < sl.d_in; ++j)
        srow[j] = gi * std::fabs(wrow[j]) * ls.h_abs[static_cast<std::size_t>(j)];
    }
    out.entries.emplace_back(sl.weight, std::move(s));
    if (!sl.bias.empty()) {
      const tensor& b = m.state().param(sl.bias);
      tensor sb = tensor::zeros(b.shape);
      for (std::int64_t i = 0; i < sl.d_out; ++i)
        sb.data[static_cast<std::size_t>(i)] =
            ls.g[static_cast<std::size_t>(i)] * std::fabs(b.data[static_cast<std::size_t>(i)]);
      out.entries.emplace_back(sl.bias, std::move(sb));
    }
  }
  return out;
}

}  // namespace

score_map score_once(const model& m, const probe_input& in, const probe_config& cfg) {
  cfg.validate();
  return score_trial(m, in, cfg, mix64(cfg.seed, 0));
}

score_map score_mc(const model& m, const std::vector<probe_input>& prompts,
                   const probe_config& cfg, std::int64_t trial_offset) {
  cfg.validate();
  if (prompts.empty()) throw config_error("score_mc: empty prompt list");
  const std::int64_t n = static_cast<std::int64_t>(prompts.size());

  std::vector<score_map> trials(static_cast<std::size_t>(n));
  parallel_for(n, [&](std::int64_t i) {
    trials[static_cast<std::size_t>(i)] = score_trial(
        m, prompts[static_cast<std::size_t>(i)], cfg,
        mix64(cfg.seed, static_cast<std::uint64_t>(trial_offset + i)));
  });

  tree_sum(trials, 0, trials.size());
  score_map out = std::move(trials.front());
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& [name, t] : out.entries) {
    for (double& v : t.data) v *= inv;
  }
  out.n_trials = n;
  out.cfg.n = static_cast<int>(n);
  return out;
}

// ---------------------------------------------------------------------------
// masks

std::int64_t mask_set::layer_mask::popcount() const {
  std::int64_t count = 0;
  for (std::uint8_t b : bits) count += std::popcount(static_cast<unsigned>(b));
  return count;
}

const mask_set::layer_mask& mask_set::layer(const std::string& name) const {
  for (const layer_mask& l : layers) {
    if (l.name == name) return l;
  }
  throw config_error("mask_set: unknown layer " + name);
}

bool mask_set::has_layer(const std::string& name) const {
  for (const layer_mask& l : layers) {
    if (l.name == name) return true;
  }
  return false;
}

std::int64_t mask_set::total_popcount() const {
  std::int64_t count = 0;
  for (const layer_mask& l : layers) count += l.popcount();
  return count;
}

std::size_t mask_set::payload_bytes() const {
  std::size_t bytes = 0;
  for (const layer_mask& l : layers) bytes += l.bits.size();
  return bytes;
}

std::size_t mask_set::header_bytes() const {
  std::size_t bytes = 0;
  for (const layer_mask& l : layers) {
    bytes += l.name.size() + sizeof(std::uint64_t) * (l.shape.size() + 2);
  }
  return bytes;
}

void mask_set::save(const std::filesystem::path& path) const {
  blob_file file;
  file.magic = k_mask_magic;
  file.version = k_version;
  nlohmann::json meta;
  meta["rho"] = rho;
  meta["seed"] = seed;
  if (!probe_meta.empty()) meta["probe"] = nlohmann::json::parse(probe_meta);
  file.meta = meta.dump();
  for (const layer_mask& l : layers) {
    blob_entry e;
    e.name = l.name;
    e.dtype = blob_dtype::bits;
    e.shape = l.shape;
    e.bytes = l.bits;
    file.entries.push_back(std::move(e));
  }
  write_blob(path, file);
}

mask_set mask_set::load(const std::filesystem::path& path) {
  blob_file file = read_blob(path, k_mask_magic);
  nlohmann::json meta = nlohmann::json::parse(file.meta, nullptr, false);
  if (meta.is_discarded()) throw config_error("mask file: malformed metadata");
  mask_set mask;
  mask.rho = meta.at("rho").get<double>();
  mask.seed = meta.at("seed").get<std::uint64_t>();
  if (meta.contains("probe")) mask.probe_meta = meta.at("probe").dump();
  for (const blob_entry& e : file.entries) {
    if (e.dtype != blob_dtype::bits) throw config_error("mask file: unexpected dtype");
    layer_mask l;
    l.name = e.name;
    l.shape = e.shape;
    l.bits = e.bytes;
    if (l.bits.size() != static_cast<std::size_t>((l.numel() + 7) / 8))
      throw config_error("mask file: payload size mismatch for " + l.name);
    mask.layers.push_back(std::move(l));
  }
  return mask;
}

namespace {

mask_set::layer_mask empty_layer_mask(const std::string& name,
                                      const std::vector<std::int64_t>& shape) {
  mask_set::layer_mask l;
  l.name = name;
  l.shape = shape;
  l.bits.assign(static_cast<std::size_t>((l.numel() + 7) / 8), 0);
  return l;
}

}  // namespace

mask_set make_mask(const score_map& scores, double rho, std::uint64_t tie_seed) {
  check_rho(rho);
  mask_set mask;
  mask.rho = rho;
  mask.seed = tie_seed;
  if (scores.n_trials > 0) mask.probe_meta = scores.cfg.to_meta();
  for (std::size_t e = 0; e < scores.entries.size(); ++e) {
    const auto& [name, s] = scores.entries[e];
    const std::int64_t numel = s.numel();
    const std::int64_t k = budget_of(rho, numel);
    mask_set::layer_mask l = empty_layer_mask(name, s.shape);

    if (k > 0) {
      rng gen(mix64(tie_seed, static_cast<std::uint64_t>(e)));
      std::vector<std::uint64_t> tie(static_cast<std::size_t>(numel));
      for (auto& t : tie) t = gen.next_u64();
      std::vector<std::int64_t> order(static_cast<std::size_t>(numel));
      std::iota(order.begin(), order.end(), std::int64_t{0});
      std::nth_element(order.begin(), order.begin() + (k - 1), order.end(),
                       [&](std::int64_t a, std::int64_t b) {
                         const double sa = s.data[static_cast<std::size_t>(a)];
                         const double sb = s.data[static_cast<std::size_t>(b)];
                         if (sa != sb) return sa < sb;
                         if (tie[static_cast<std::size_t>(a)] != tie[static_cast<std::size_t>(b)])
                           return tie[static_cast<std::size_t>(a)] < tie[static_cast<std::size_t>(b)];
                         return a < b;
                       });
      for (std::int64_t i = 0; i < k; ++i) l.set(order[static_cast<std::size_t>(i)]);
    }
    mask.layers.push_back(std::move(l));
  }
  return mask;
}

mask_set random_mask(const std::vector<scorable_param>& params, double rho, std::uint64_t seed) {
  check_rho(rho);
  mask_set mask;
  mask.rho = rho;
  mask.seed = seed;
  for (std::size_t e = 0; e < params.size(); ++e) {
    mask_set::layer_mask l = empty_layer_mask(params[e].name, params[e].shape);
    const std::int64_t numel = l.numel();
    const std::int64_t k = budget_of(rho, numel);
    // Partial Fisher-Yates: the first k slots of a random permutation.
    rng gen(mix64(seed, static_cast<std::uint64_t>(e)));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(numel));
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    for (std::int64_t i = 0; i < k; ++i) {
      const std::int64_t j =
          i + static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(numel - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      l.set(idx[static_cast<std::size_t>(i)]);
    }
    mask.layers.push_back(std::move(l));
  }
  return mask;
}

mask_set full_mask(const std::vector<scorable_param>& params) {
  return random_mask(params, 1.0, 0);
}

mask_set zero_mask(const std::vector<scorable_param>& params) {
  return random_mask(params, 0.0, 0);
}

mask_set restrict_to_depth(const mask_set& mask, const model& m, int depth) {
  if (depth < 0 || depth > m.depth_groups())
    throw config_error("depth must be in [0, " + std::to_string(m.depth_groups()) + "]");
  const int cutoff = m.depth_groups() - depth;
  mask_set out = mask;
  for (const scorable_layer& sl : m.scorable_layers()) {
    if (sl.depth_index >= cutoff) continue;
    for (auto& l : out.layers) {
      if (l.name == sl.weight || (!sl.bias.empty() && l.name == sl.bias)) {
        std::fill(l.bits.begin(), l.bits.end(), std::uint8_t{0});
      }
    }
  }
  return out;
}

double mask_hamming(const mask_set& a, const mask_set& b) {
  if (a.layers.size() != b.layers.size()) throw config_error("mask_hamming: layer count mismatch");
  std::int64_t diff = 0;
  std::int64_t total = 0;
  for (std::size_t e = 0; e < a.layers.size(); ++e) {
    const auto& la = a.layers[e];
    const auto& lb = b.layers[e];
    if (la.name != lb.name || la.shape != lb.shape)
      throw config_error("mask_hamming: shape mismatch at " + la.name);
    const std::int64_t numel = la.numel();
    for (std::int64_t i = 0; i < numel; ++i) diff += la.get(i) != lb.get(i);
    total += numel;
  }
  if (total == 0) throw config_error("mask_hamming: empty masks");
  return static_cast<double>(diff) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// spearman

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average rank
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw config_error("spearman: length mismatch");
  if (a.size() < 2) throw config_error("spearman: need at least two entries");
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double xa = ra[i] - ma;
    const double xb = rb[i] - mb;
    num += xa * xb;
    da += xa * xa;
    db += xb * xb;
  }
  if (da == 0.0 || db == 0.0)
    throw numerical_error("spearman: correlation undefined for constant input");
  return num / std::sqrt(da * db);
}

double score_spearman(const score_map& a, const score_map& b) {
  if (a.entries.size() != b.entries.size()) throw config_error("score_spearman: entry mismatch");
  for (std::size_t e = 0; e < a.entries.size(); ++e) {
    if (a.entries[e].first != b.entries[e].first ||
        !a.entries[e].second.same_shape(b.entries[e].second))
      throw config_error("score_spearman: mismatched entry " + a.entries[e].first);
  }
  return spearman(a.flattened(), b.flattened());
}

}  // namespace dowser

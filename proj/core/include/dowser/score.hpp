#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dowser/model.hpp"
#include "dowser/probe.hpp"

namespace dowser {

// Importance scores, one tensor per scorable parameter, shaped like it.
// For a weight matrix  S_ij = g_i * |W_ij| * |h_j|; a bias is a weight on a
// constant-1 input, so S_i = g_i * |b_i|.
struct score_map {
  probe_config cfg;
  std::int64_t n_trials = 0;
  std::vector<std::pair<std::string, tensor>> entries;

  const tensor& entry(const std::string& name) const;
  // All entries concatenated in enumeration order.
  std::vector<double> flattened() const;
  // Trial-count-weighted combination of two partial runs.
  static score_map merge(const score_map& a, const score_map& b);

  void save(const std::filesystem::path& path) const;
  static score_map load(const std::filesystem::path& path);
};

// Per-layer binary masks, bit-packed LSB-first. 1 = trainable, 0 = frozen.
struct mask_set {
  double rho = 0.0;
  std::uint64_t seed = 0;
  std::string probe_meta;  // probe-config echo when derived from scores

  struct layer_mask {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> bits;

    std::int64_t numel() const { return tensor::numel_of(shape); }
    bool get(std::int64_t i) const {
      return (bits[static_cast<std::size_t>(i >> 3)] >> (i & 7)) & 1;
    }
    void set(std::int64_t i) { bits[static_cast<std::size_t>(i >> 3)] |= std::uint8_t(1u << (i & 7)); }
    std::int64_t popcount() const;
  };

  std::vector<layer_mask> layers;

  const layer_mask& layer(const std::string& name) const;
  bool has_layer(const std::string& name) const;
  std::int64_t total_popcount() const;
  std::size_t payload_bytes() const;  // packed bit storage only
  std::size_t header_bytes() const;   // names, shapes, offsets

  void save(const std::filesystem::path& path) const;
  static mask_set load(const std::filesystem::path& path);
};

// One Monte-Carlo trial of Eq.-style scoring: sensitivity probe on a single
// input combined with weight magnitudes and activations. Uses the seed of
// trial 0 so that score_mc with N=1 reproduces it bit-for-bit.
score_map score_once(const model& m, const probe_input& in, const probe_config& cfg);

// Mean of per-trial contributions over the prompt list. Trial n draws its
// Rademacher vectors from mix64(cfg.seed, trial_offset + n), and trials are
// combined by pairwise (tree) summation, so a run split into halves merges
// back to the single-run result exactly.
score_map score_mc(const model& m, const std::vector<probe_input>& prompts,
                   const probe_config& cfg, std::int64_t trial_offset = 0);

// Bottom-rho selection per layer: exactly floor(rho * numel) entries with the
// smallest scores become trainable; ties broken by a deterministic
// pseudo-random permutation drawn from tie_seed.
mask_set make_mask(const score_map& scores, double rho, std::uint64_t tie_seed);

// Uniformly random mask with the same per-layer budget.
mask_set random_mask(const std::vector<scorable_param>& params, double rho, std::uint64_t seed);

// Everything trainable / everything frozen.
mask_set full_mask(const std::vector<scorable_param>& params);
mask_set zero_mask(const std::vector<scorable_param>& params);

// Freezes every layer outside the last `depth` depth groups of the model.
mask_set restrict_to_depth(const mask_set& mask, const model& m, int depth);

// Fraction of differing bits.
double mask_hamming(const mask_set& a, const mask_set& b);

// Spearman rank correlation with average ranks on ties. Throws on constant
// input rather than returning NaN.
double spearman(const std::vector<double>& a, const std::vector<double>& b);
double score_spearman(const score_map& a, const score_map& b);

}  // namespace dowser

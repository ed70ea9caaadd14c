#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dowser/model.hpp"

namespace dowser {

enum class surrogate_kind : std::uint8_t { l2_hutchinson, l1_khintchine };

std::string surrogate_name(surrogate_kind s);
surrogate_kind surrogate_from_name(const std::string& name);

struct probe_config {
  int n = 64;                 // Monte-Carlo synthetic samples
  int r = 8;                  // Rademacher vectors per sample
  std::uint64_t seed = 0;
  surrogate_kind surrogate = surrogate_kind::l2_hutchinson;
  int prompt_len = 8;
  std::string output_target = "logits-last";

  void validate() const;
  std::string to_meta() const;
  static probe_config from_meta(const std::string& meta);
};

// Per-layer output sensitivities g_i (one per pre-activation node of the
// layer) plus the mean |h_j| of the layer's input activation over the same
// probe. For sequence inputs both are means over token positions.
struct layer_sensitivity {
  std::string layer;
  std::vector<double> g;
  std::vector<double> h_abs;
  std::vector<double> g_stderr;  // per-node MC standard error; l1 surrogate only
};

struct sensitivity_map {
  probe_config cfg;
  std::vector<layer_sensitivity> layers;

  const layer_sensitivity& layer(const std::string& key) const;
  void save(const std::filesystem::path& path) const;
  static sensitivity_map load(const std::filesystem::path& path);
};

// Hutchinson estimate of the Jacobian column norms: one forward pass, then R
// backward passes seeded with fresh Rademacher vectors.
//   g_i = sqrt( (1/R) sum_r (d(xi_r . f)/dz_i)^2 )
sensitivity_map hutchinson_norms(const model& m, const probe_input& in, int r, std::uint64_t seed,
                                 const std::string& output_target = "");

// Same estimator with caller-supplied projection vectors (order-invariance
// and reuse tests).
sensitivity_map hutchinson_norms_with(const model& m, const probe_input& in,
                                      const std::vector<tensor>& draws,
                                      const std::string& output_target = "");

// L1 surrogate: g_i = (1/R) sum_r |d(xi_r . f)/dz_i|, with the per-node MC
// standard error recorded alongside.
sensitivity_map l1_surrogate_norms(const model& m, const probe_input& in, int r, std::uint64_t seed,
                                   const std::string& output_target = "");

// Explicit Jacobian construction: one backward pass per output unit, seeded
// with basis vectors. The oracle the stochastic estimators are checked
// against; guarded to small output dimensions.
struct exact_jacobian_result {
  struct layer_jacobian {
    std::string layer;
    tensor j;                   // [d_final, numel(z)] with z flattened row-major
    std::vector<double> norms;  // per node i: mean over positions of ||J_{t,i}||_2
  };
  std::vector<layer_jacobian> layers;

  const layer_jacobian& layer(const std::string& key) const;
};

exact_jacobian_result exact_jacobian(const model& m, const probe_input& in,
                                     std::int64_t guard = 256,
                                     const std::string& output_target = "");

// N model-generated token sequences: a uniformly sampled seed token extended
// autoregressively at temperature 1.
std::vector<std::vector<int>> synthetic_prompts(const model& lm, int n, int t_gen,
                                                std::uint64_t seed);

// Standard-normal probe vectors for models with no generative mode.
std::vector<std::vector<double>> probe_inputs_for_mlp(std::int64_t in_dim, int n,
                                                      std::uint64_t seed);

// Rademacher tensor of the given shape.
tensor rademacher_like(const std::vector<std::int64_t>& shape, rng& gen);

// The probe target that applies to this model: the config's choice for an
// LM, the raw output vector for an MLP (its only meaningful target).
std::string resolve_output_target(const model& m, const probe_config& cfg);

}  // namespace dowser

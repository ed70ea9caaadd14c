#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"

#include "dowser/probe.hpp"
#include "dowser/score.hpp"
#include "test_util.hpp"

using namespace dowser;

namespace {

probe_config quick_cfg(int r = 8, std::uint64_t seed = 0) {
  probe_config cfg;
  cfg.r = r;
  cfg.seed = seed;
  return cfg;
}

mask_set mask_from_bits(const std::string& name, std::vector<std::int64_t> shape,
                        const std::vector<int>& bits) {
  score_map s;
  s.n_trials = 1;
  tensor t = tensor::zeros(shape);
  s.entries.emplace_back(name, std::move(t));
  mask_set m = make_mask(s, 0.0, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) m.layers[0].set(static_cast<std::int64_t>(i));
  }
  return m;
}

}  // namespace

TEST_CASE("zero weights always score zero") {
  model m = build_mlp({4, 3}, "linear", 6);
  m.state().param("layer0.weight").at(1, 2) = 0.0;
  const score_map s = score_once(m, probe_input::vec({1, 1, 1, 1}), quick_cfg());
  CHECK(s.entry("layer0.weight").at(1, 2) == 0.0);
  // biases start at zero, so their scores are identically zero
  for (double v : s.entry("layer0.bias").data) CHECK(v == 0.0);
  for (double v : s.flattened()) {
    CHECK(v >= 0.0);
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("identity head reduces the score to |W| * |h|") {
  model m = build_mlp({3, 3}, "linear", 8);
  const std::vector<double> x = {0.5, -2.0, 1.25};
  const score_map s = score_once(m, probe_input::vec(x), quick_cfg(4));
  const tensor& w = m.state().param("layer0.weight");
  for (std::int64_t i = 0; i < 3; ++i) {
    for (std::int64_t j = 0; j < 3; ++j) {
      CHECK(s.entry("layer0.weight").at(i, j) ==
            doctest::Approx(std::fabs(w.at(i, j)) * std::fabs(x[static_cast<std::size_t>(j)]))
                .epsilon(1e-14));
    }
  }
}

TEST_CASE("score ranks single-weight perturbation impact (spearman > 0.95)") {
  model m = build_mlp({8, 16, 4}, "gelu", 404);
  const std::vector<double> x = {0.2, -0.5, 1.0, 0.3, -1.2, 0.8, 0.05, -0.4};
  const probe_input in = probe_input::vec(x);

  // True sensitivity factor from the exact oracle: ||J_i|| * |h_j|.
  const exact_jacobian_result jac = exact_jacobian(m, in);
  capture_result cap = m.capture(in);

  rng gen(31337);
  std::vector<double> predicted;
  std::vector<double> measured;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t layer = gen.next_below(2);
    const std::string name = "layer" + std::to_string(layer) + ".weight";
    const tensor& w = m.state().param(name);
    const std::int64_t i = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[0])));
    const std::int64_t j = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[1])));

    const double h_j = std::fabs(cap.h_of(layer).at(j));
    predicted.push_back(jac.layer(name).norms[static_cast<std::size_t>(i)] * h_j);

    const double eps = 1e-6 * (w.at(i, j) >= 0.0 ? 1.0 : -1.0);
    measured.push_back(testutil::measured_shift(m, in, name, i * w.shape[1] + j, eps) / 1e-6);
  }
  CHECK(spearman(measured, predicted) > 0.95);
}

TEST_CASE("first-order shift model: accuracy and linear exactness") {
  SUBCASE("gelu network, 1% relative error that shrinks with epsilon") {
    model m = build_mlp({8, 16, 4}, "gelu", 17);
    const std::vector<double> x = {0.9, -0.1, 0.45, -0.7, 0.25, 1.1, -0.95, 0.3};
    const probe_input in = probe_input::vec(x);
    const exact_jacobian_result jac = exact_jacobian(m, in);
    capture_result cap = m.capture(in);

    rng gen(2001);
    for (int rep = 0; rep < 25; ++rep) {
      const std::string name = "layer0.weight";
      const tensor& w = m.state().param(name);
      const std::int64_t i = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[0])));
      const std::int64_t j = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[1])));
      const double h_j = std::fabs(cap.h_of(0).at(j));
      if (h_j < 1e-3) continue;  // predicted and measured both ~0; ratio is noise

      auto rel_err_at = [&](double eps) {
        const double predicted = jac.layer(name).norms[static_cast<std::size_t>(i)] * eps * h_j;
        const double measured = testutil::measured_shift(m, in, name, i * w.shape[1] + j, eps);
        return std::fabs(measured - predicted) / measured;
      };
      const double coarse = rel_err_at(1e-6);
      CHECK(coarse < 0.01);
      // first-order error scales with epsilon
      CHECK(rel_err_at(1e-7) < coarse + 1e-9);
    }
  }

  SUBCASE("purely linear network is exact to 1e-12") {
    model m = build_mlp({6, 10, 3}, "linear", 23);
    const std::vector<double> x = {1.0, -0.5, 0.25, 2.0, -1.5, 0.75};
    const probe_input in = probe_input::vec(x);
    const exact_jacobian_result jac = exact_jacobian(m, in);
    capture_result cap = m.capture(in);

    rng gen(5);
    for (int rep = 0; rep < 20; ++rep) {
      const std::size_t layer = gen.next_below(2);
      const std::string name = "layer" + std::to_string(layer) + ".weight";
      const tensor& w = m.state().param(name);
      const std::int64_t i = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[0])));
      const std::int64_t j = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[1])));
      const double eps = 1e-4;
      const double h_j = std::fabs(cap.h_of(layer).at(j));
      const double predicted = jac.layer(name).norms[static_cast<std::size_t>(i)] * eps * h_j;
      const double measured = testutil::measured_shift(m, in, name, i * w.shape[1] + j, eps);
      CHECK(measured == doctest::Approx(predicted).epsilon(1e-12));
    }
  }
}

TEST_CASE("multi-weight shift is bounded by the score aggregate") {
  model m = build_mlp({8, 16, 4}, "gelu", 61);
  const std::vector<double> x = {0.15, -0.85, 0.6, 1.3, -0.25, 0.05, -1.1, 0.7};
  const probe_input in = probe_input::vec(x);
  const exact_jacobian_result jac = exact_jacobian(m, in);
  capture_result cap = m.capture(in);

  rng gen(777);
  const double eps = 1e-6;
  for (int draw = 0; draw < 200; ++draw) {
    const int k_choices[3] = {2, 8, 32};
    const int k = k_choices[draw % 3];

    double bound = 0.0;
    std::vector<std::tuple<std::string, std::int64_t, double>> edits;
    for (int pick = 0; pick < k; ++pick) {
      const std::size_t layer = gen.next_below(2);
      const std::string name = "layer" + std::to_string(layer) + ".weight";
      const tensor& w = m.state().param(name);
      const std::int64_t i = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[0])));
      const std::int64_t j = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(w.shape[1])));
      const double delta = gen.next_rademacher() * eps;
      edits.emplace_back(name, i * w.shape[1] + j, delta);
      bound += jac.layer(name).norms[static_cast<std::size_t>(i)] * eps *
               std::fabs(cap.h_of(layer).at(j));
    }

    const tensor base = m.forward(in);
    for (const auto& [name, idx, delta] : edits)
      m.state().param(name).data[static_cast<std::size_t>(idx)] += delta;
    const tensor shifted = m.forward(in);
    for (const auto& [name, idx, delta] : edits)
      m.state().param(name).data[static_cast<std::size_t>(idx)] -= delta;

    CHECK(testutil::l2_diff(base.data, shifted.data) <= bound * (1.0 + 1e-2));
  }
}

TEST_CASE("score_mc with one prompt reproduces score_once bit-for-bit") {
  model m = build_mlp({5, 8, 3}, "gelu", 13);
  const probe_input in = probe_input::vec({0.1, 0.2, 0.3, 0.4, 0.5});
  const probe_config cfg = quick_cfg(4, 555);
  const score_map once = score_once(m, in, cfg);
  const score_map mc = score_mc(m, {in}, cfg);
  REQUIRE(once.entries.size() == mc.entries.size());
  for (std::size_t e = 0; e < once.entries.size(); ++e) {
    CHECK(once.entries[e].second.data == mc.entries[e].second.data);
  }
}

TEST_CASE("identical prompts agree with score_once within 3 standard errors") {
  model m = build_mlp({5, 8, 3}, "gelu", 14);
  const probe_input in = probe_input::vec({0.3, -0.9, 0.7, 0.2, -0.1});
  const probe_config cfg = quick_cfg(8, 31);
  const int n = 32;

  // Per-trial contributions, extracted by running each trial on its own.
  std::vector<score_map> trials;
  for (int i = 0; i < n; ++i) trials.push_back(score_mc(m, {in}, cfg, i));
  const score_map mc = score_mc(m, std::vector<probe_input>(n, in), cfg);
  const score_map once = score_once(m, in, cfg);

  const std::vector<double> mean_flat = mc.flattened();
  const std::vector<double> once_flat = once.flattened();
  std::vector<std::vector<double>> per_trial;
  for (const score_map& t : trials) per_trial.push_back(t.flattened());

  // score_once is trial 0 of the same stream, so its gap to the mean is a
  // single-trial deviation: bounded by 3 per-trial standard deviations.
  for (std::size_t i = 0; i < mean_flat.size(); ++i) {
    double var = 0.0;
    for (int t = 0; t < n; ++t) {
      const double d = per_trial[static_cast<std::size_t>(t)][i] - mean_flat[i];
      var += d * d;
    }
    const double sd_i = std::sqrt(var / (n - 1.0));
    CHECK(std::fabs(once_flat[i] - mean_flat[i]) <= 3.0 * sd_i + 1e-15);
  }
}

TEST_CASE("splitting a run in half and merging matches the single run") {
  model m = build_mlp({6, 9, 4}, "gelu", 15);
  std::vector<probe_input> prompts;
  for (auto& v : probe_inputs_for_mlp(6, 64, 9000)) prompts.push_back(probe_input::vec(std::move(v)));
  const probe_config cfg = quick_cfg(4, 77);

  const score_map whole = score_mc(m, prompts, cfg);
  const score_map first =
      score_mc(m, std::vector<probe_input>(prompts.begin(), prompts.begin() + 32), cfg, 0);
  const score_map second =
      score_mc(m, std::vector<probe_input>(prompts.begin() + 32, prompts.end()), cfg, 32);
  const score_map merged = score_map::merge(first, second);

  const std::vector<double> a = whole.flattened();
  const std::vector<double> b = merged.flattened();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::fabs(a[i] - b[i]) <= 1e-12 * std::max(1.0, std::fabs(a[i])));
  }
  CHECK(merged.n_trials == 64);
}

TEST_CASE("mask budgets and the bottom-rho rule") {
  SUBCASE("explicit bottom-half example") {
    score_map s;
    s.n_trials = 1;
    s.entries.emplace_back("w", tensor::from({4}, {4, 3, 2, 1}));
    const mask_set m = make_mask(s, 0.5, 7);
    CHECK_FALSE(m.layers[0].get(0));
    CHECK_FALSE(m.layers[0].get(1));
    CHECK(m.layers[0].get(2));
    CHECK(m.layers[0].get(3));
  }

  SUBCASE("rho = 0 and rho = 1") {
    model m = build_mlp({5, 8, 3}, "gelu", 3);
    const score_map s = score_once(m, probe_input::vec({1, 2, 3, 4, 5}), quick_cfg(2));
    const mask_set none = make_mask(s, 0.0, 1);
    const mask_set all = make_mask(s, 1.0, 1);
    CHECK(none.total_popcount() == 0);
    CHECK(all.total_popcount() == m.scorable_numel());
  }

  SUBCASE("per-layer popcount is exactly floor(rho * numel)") {
    model m = build_tiny_lm(12, 6, 16, 2, 4);
    for (double rho : {0.0, 0.1, 0.25, 0.5, 1.0}) {
      const mask_set mask = random_mask(m.scorable_params(), rho, 5);
      for (const auto& layer : mask.layers) {
        CHECK(layer.popcount() ==
              static_cast<std::int64_t>(std::floor(rho * static_cast<double>(layer.numel()))));
      }
    }
  }

  SUBCASE("rho outside [0,1] rejected") {
    score_map s;
    s.entries.emplace_back("w", tensor::zeros({4}));
    CHECK_THROWS_AS(make_mask(s, -0.1, 0), config_error);
    CHECK_THROWS_AS(make_mask(s, 1.1, 0), config_error);
  }
}

TEST_CASE("random masks: determinism per seed, divergence across seeds") {
  model m = build_mlp({10, 20, 10}, "gelu", 5);
  const auto params = m.scorable_params();
  const mask_set a1 = random_mask(params, 0.5, 42);
  const mask_set a2 = random_mask(params, 0.5, 42);
  const mask_set b = random_mask(params, 0.5, 43);
  CHECK(mask_hamming(a1, a2) == 0.0);
  CHECK(mask_hamming(a1, b) > 0.0);
  CHECK(random_mask(params, 1.0, 7).total_popcount() == m.scorable_numel());
}

TEST_CASE("monotone budget: lower rho masks nest inside higher rho masks") {
  model m = build_tiny_lm(10, 6, 12, 1, 19);
  const score_map s = score_once(m, probe_input::seq({1, 2, 3, 4, 5, 0}), quick_cfg(4, 3));
  const mask_set small = make_mask(s, 0.2, 99);
  const mask_set large = make_mask(s, 0.6, 99);
  for (std::size_t l = 0; l < small.layers.size(); ++l) {
    for (std::int64_t i = 0; i < small.layers[l].numel(); ++i) {
      if (small.layers[l].get(i)) CHECK(large.layers[l].get(i));
    }
  }
}

TEST_CASE("scaling the network output rescales scores and fixes masks") {
  model m = build_mlp({6, 9, 4}, "gelu", 29);
  const probe_input in = probe_input::vec({0.4, -0.2, 0.9, -1.1, 0.3, 0.6});
  const probe_config cfg = quick_cfg(8, 12);
  const score_map base = score_once(m, in, cfg);

  // double the network output: scale the last linear layer
  for (double& v : m.state().param("layer1.weight").data) v *= 2.0;
  for (double& v : m.state().param("layer1.bias").data) v *= 2.0;
  const score_map doubled = score_once(m, in, cfg);

  const std::vector<double> a = base.flattened();
  const std::vector<double> b = doubled.flattened();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == 2.0 * a[i]);

  CHECK(mask_hamming(make_mask(base, 0.3, 5), make_mask(doubled, 0.3, 5)) == 0.0);
}

TEST_CASE("tie-breaking is deterministic and seed-dependent") {
  score_map s;
  s.n_trials = 1;
  s.entries.emplace_back("w", tensor::zeros({64}));  // all scores equal
  const mask_set a1 = make_mask(s, 0.5, 1);
  const mask_set a2 = make_mask(s, 0.5, 1);
  const mask_set b = make_mask(s, 0.5, 2);
  CHECK(a1.layers[0].popcount() == 32);
  CHECK(mask_hamming(a1, a2) == 0.0);
  CHECK(mask_hamming(a1, b) > 0.0);
}

TEST_CASE("hamming distance on masks") {
  const mask_set a = mask_from_bits("w", {4}, {1, 1, 0, 0});
  const mask_set b = mask_from_bits("w", {4}, {1, 0, 1, 0});
  const mask_set nota = mask_from_bits("w", {4}, {0, 0, 1, 1});
  CHECK(mask_hamming(a, a) == 0.0);
  CHECK(mask_hamming(a, nota) == 1.0);
  CHECK(mask_hamming(a, b) == 0.5);
}

TEST_CASE("mask storage stays within the bit-packing budget") {
  model m = build_tiny_lm(16, 8, 32, 2, 77);
  const mask_set mask = random_mask(m.scorable_params(), 0.5, 1);
  std::size_t numel_total = 0;
  for (const auto& layer : mask.layers) {
    CHECK(layer.bits.size() <= static_cast<std::size_t>(layer.numel() / 8 + 1));
    numel_total += static_cast<std::size_t>(layer.numel());
  }
  CHECK(mask.payload_bytes() <= numel_total / 8 + mask.layers.size());
}

TEST_CASE("spearman examples") {
  CHECK(spearman({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(spearman({0.1, 5.0, 2.0}, {0.1, 5.0, 2.0}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(spearman({1, 1, 1}, {1, 2, 3}), numerical_error);
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), config_error);
}

TEST_CASE("score and mask files round-trip with provenance") {
  const auto dir = std::filesystem::temp_directory_path();
  model m = build_mlp({5, 8, 3}, "gelu", 47);
  const probe_config cfg = quick_cfg(4, 1234);
  const score_map s = score_mc(m, {probe_input::vec({1, 2, 3, 4, 5})}, cfg);

  const auto score_path = dir / "dowser_test_score.dwsr";
  s.save(score_path);
  const score_map s2 = score_map::load(score_path);
  CHECK(s2.n_trials == s.n_trials);
  CHECK(s2.cfg.seed == cfg.seed);
  CHECK(s2.cfg.r == cfg.r);
  CHECK(s2.flattened() == s.flattened());

  const mask_set mask = make_mask(s, 0.4, 9);
  const auto mask_path = dir / "dowser_test_mask.dwsr";
  mask.save(mask_path);
  const mask_set mask2 = mask_set::load(mask_path);
  CHECK(mask2.rho == 0.4);
  CHECK(mask2.seed == 9);
  CHECK(mask_hamming(mask, mask2) == 0.0);
  // score-derived masks echo the probe config they came from
  CHECK(probe_config::from_meta(mask2.probe_meta).seed == cfg.seed);

  std::filesystem::remove(score_path);
  std::filesystem::remove(mask_path);
}

TEST_CASE("depth restriction freezes everything before the cutoff") {
  model m = build_tiny_lm(10, 6, 12, 3, 2);
  const mask_set full = full_mask(m.scorable_params());

  const mask_set depth1 = restrict_to_depth(full, m, 1);
  for (const auto& layer : depth1.layers) {
    const bool last_group = layer.name.rfind("block2.", 0) == 0 || layer.name == "head.weight";
    CHECK(layer.popcount() == (last_group ? layer.numel() : 0));
  }

  const mask_set depth0 = restrict_to_depth(full, m, 0);
  CHECK(depth0.total_popcount() == 0);
  const mask_set depth_all = restrict_to_depth(full, m, 3);
  CHECK(depth_all.total_popcount() == full.total_popcount());
  CHECK_THROWS_AS(restrict_to_depth(full, m, 4), config_error);

  // nesting: trainable set at depth L is a subset of depth L+1
  const mask_set depth2 = restrict_to_depth(full, m, 2);
  for (std::size_t l = 0; l < depth1.layers.size(); ++l) {
    for (std::int64_t i = 0; i < depth1.layers[l].numel(); ++i) {
      if (depth1.layers[l].get(i)) CHECK(depth2.layers[l].get(i));
    }
  }
}

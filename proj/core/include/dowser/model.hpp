#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dowser/graph.hpp"
#include "dowser/rng.hpp"
#include "dowser/tensor.hpp"

namespace dowser {

enum class model_kind : std::uint8_t { mlp, tiny_lm };

enum class layer_kind : std::uint8_t { linear, attention, gated_mlp, embedding, head };

struct layer_spec {
  layer_kind kind = layer_kind::linear;
  std::int64_t in_dim = 0;
  std::int64_t out_dim = 0;
  std::string activation;  // linear | gelu | silu (glu lives in gated_mlp blocks)
  bool scorable = true;
};

struct model_spec {
  model_kind kind = model_kind::mlp;
  // MLP
  std::vector<std::int64_t> dims;
  std::string activation = "gelu";
  // tiny LM
  std::int64_t vocab = 0;
  std::int64_t ctx = 0;
  std::int64_t d_model = 0;
  std::int64_t n_layers = 0;
  std::int64_t d_ff = 0;
  // common
  std::uint64_t seed = 0;
  std::string output_target = "output-raw";  // or "logits-last" (LM default)

  std::string to_meta() const;
  static model_spec from_meta(const std::string& meta);
};

// Named parameter store. Insertion order is the canonical enumeration order
// and is stable across save/load.
class model_state {
 public:
  void add(std::string name, tensor value);
  bool has(const std::string& name) const;
  tensor& param(const std::string& name);
  const tensor& param(const std::string& name) const;
  const std::vector<std::pair<std::string, tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, tensor>>& params() { return params_; }
  std::int64_t total_numel() const;

  std::uint64_t init_seed = 0;

 private:
  std::vector<std::pair<std::string, tensor>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// One ranking pool: a weight matrix plus (for the MLP) its bias, which is a
// weight on a constant-1 input.
struct scorable_layer {
  std::string key;          // == weight param name
  std::string weight;
  std::string bias;         // empty when the layer has none
  std::int64_t d_out = 0;
  std::int64_t d_in = 0;
  int depth_index = 0;      // 0 = closest to the input; head shares the last index
};

// One scorable parameter tensor, as enumerated by ScoreMap and MaskSet.
struct scorable_param {
  std::string name;
  std::string layer_key;
  std::vector<std::int64_t> shape;
  bool is_bias = false;
};

struct probe_input {
  std::vector<double> values;  // MLP probe vector
  std::vector<int> tokens;     // LM token sequence

  static probe_input vec(std::vector<double> v) { return {std::move(v), {}}; }
  static probe_input seq(std::vector<int> t) { return {{}, std::move(t)}; }
};

struct pass_counters {
  std::atomic<std::uint64_t> forwards{0};
  std::atomic<std::uint64_t> backwards{0};
  void reset() {
    forwards = 0;
    backwards = 0;
  }
};

class model;

// Snapshot of one forward pass: the tape, the output node selected by the
// spec's output target, and per-layer (input activation h, pre-activation z)
// taps for every scorable layer. Snapshots stay valid until the capture is
// destroyed; backward() may be called repeatedly with fresh seeds.
struct capture_result {
  graph g;
  node_id output = no_node;
  struct layer_tap {
    std::string key;
    node_id h = no_node;
    node_id z = no_node;
  };
  std::vector<layer_tap> taps;
  std::unordered_map<std::string, node_id> param_nodes;
  const model* owner = nullptr;

  const tensor& f() const { return g.value(output); }
  const tensor& h_of(std::size_t tap_index) const { return g.value(taps[tap_index].h); }
  const tensor& z_of(std::size_t tap_index) const { return g.value(taps[tap_index].z); }
  void backward(const tensor& seed);
};

class model {
 public:
  explicit model(model_spec spec);
  model(model_spec spec, model_state state);

  model(const model&) = delete;
  model& operator=(const model&) = delete;
  model(model&&) = default;
  model& operator=(model&&) = default;

  const model_spec& spec() const { return spec_; }
  model_state& state() { return state_; }
  const model_state& state() const { return state_; }

  const std::vector<layer_spec>& layers() const { return layers_; }
  const std::vector<scorable_layer>& scorable_layers() const { return scorable_; }
  std::vector<scorable_param> scorable_params() const;
  std::int64_t scorable_numel() const;
  int depth_groups() const { return depth_groups_; }

  // Runs the forward pass (counted) and returns the tape with taps. An
  // output_target override ("logits-last" / "output-raw") replaces the
  // spec's default for this capture only.
  capture_result capture(const probe_input& in, const std::string& output_target = "") const;
  // Forward without keeping the tape.
  tensor forward(const probe_input& in) const;
  // LM logits [T, vocab] for a token sequence.
  tensor logits(const std::vector<int>& tokens) const;

  std::int64_t output_dim(std::int64_t seq_len) const;
  // Shape of f for an input, without running a forward pass.
  std::vector<std::int64_t> output_shape(const probe_input& in,
                                         const std::string& output_target = "") const;

  pass_counters& counters() const { return *counters_; }

  void save(const std::filesystem::path& path) const;
  static model load(const std::filesystem::path& path);

 private:
  void init_params();
  void build_layout();
  capture_result build_forward(const probe_input& in, const std::string& output_target) const;

  model_spec spec_;
  model_state state_;
  std::vector<layer_spec> layers_;
  std::vector<scorable_layer> scorable_;
  int depth_groups_ = 0;
  std::unique_ptr<pass_counters> counters_;
};

model build_mlp(std::vector<std::int64_t> dims, const std::string& activation, std::uint64_t seed);
model build_tiny_lm(std::int64_t vocab, std::int64_t ctx, std::int64_t d_model,
                    std::int64_t n_layers, std::uint64_t seed);

// Softmax over a logit row; sums to 1.
std::vector<double> softmax(const std::vector<double>& logits);

// Next-token helpers over the final-position logits.
int argmax_next(const model& m, const std::vector<int>& context);
int sample_next(const model& m, const std::vector<int>& context, rng& gen);

}  // namespace dowser

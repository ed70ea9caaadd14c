#include "dowser/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "dowser/io.hpp"

namespace dowser {

namespace {

constexpr std::uint32_t k_checkpoint_version = 1;
const std::string k_checkpoint_magic = "DWSRMODL";

bool valid_mlp_activation(const std::string& a) {
  return a == "linear" || a == "gelu" || a == "silu";
}

tensor glorot_uniform(std::int64_t rows, std::int64_t cols, rng& gen) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  tensor t = tensor::zeros({rows, cols});
  for (double& v : t.data) v = gen.next_uniform(-limit, limit);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// model_spec meta round-trip

std::string model_spec::to_meta() const {
  nlohmann::json j;
  j["kind"] = kind == model_kind::mlp ? "mlp" : "tiny_lm";
  j["dims"] = dims;
  j["activation"] = activation;
  j["vocab"] = vocab;
  j["ctx"] = ctx;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["d_ff"] = d_ff;
  j["seed"] = seed;
  j["output_target"] = output_target;
  return j.dump();
}

model_spec model_spec::from_meta(const std::string& meta) {
  nlohmann::json j = nlohmann::json::parse(meta, nullptr, false);
  if (j.is_discarded()) throw config_error("model_spec: malformed metadata");
  model_spec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "mlp") {
    s.kind = model_kind::mlp;
  } else if (kind == "tiny_lm") {
    s.kind = model_kind::tiny_lm;
  } else {
    throw config_error("model_spec: unknown kind " + kind);
  }
  s.dims = j.at("dims").get<std::vector<std::int64_t>>();
  s.activation = j.at("activation").get<std::string>();
  s.vocab = j.at("vocab").get<std::int64_t>();
  s.ctx = j.at("ctx").get<std::int64_t>();
  s.d_model = j.at("d_model").get<std::int64_t>();
  s.n_layers = j.at("n_layers").get<std::int64_t>();
  s.d_ff = j.at("d_ff").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.output_target = j.at("output_target").get<std::string>();
  return s;
}

// ---------------------------------------------------------------------------
// model_state

void model_state::add(std::string name, tensor value) {
  if (index_.count(name)) throw config_error("model_state: duplicate parameter " + name);
  index_[name] = params_.size();
  params_.emplace_back(std::move(name), std::move(value));
}

bool model_state::has(const std::string& name) const { return index_.count(name) != 0; }

tensor& model_state::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw config_error("model_state: unknown parameter " + name);
  return params_[it->second].second;
}

const tensor& model_state::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw config_error("model_state: unknown parameter " + name);
  return params_[it->second].second;
}

std::int64_t model_state::total_numel() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// model construction

model::model(model_spec spec) : spec_(std::move(spec)), counters_(std::make_unique<pass_counters>()) {
  build_layout();
  init_params();
}

model::model(model_spec spec, model_state state)
    : spec_(std::move(spec)), state_(std::move(state)), counters_(std::make_unique<pass_counters>()) {
  build_layout();
  // Sanity: the state must carry exactly the layout's parameters.
  model fresh(spec_);
  if (fresh.state().params().size() != state_.params().size())
    throw config_error("model: state does not match spec (parameter count)");
  for (std::size_t i = 0; i < state_.params().size(); ++i) {
    const auto& [name, t] = state_.params()[i];
    const auto& [fname, ft] = fresh.state().params()[i];
    if (name != fname || t.shape != ft.shape)
      throw config_error("model: state does not match spec at parameter " + name);
  }
}

void model::build_layout() {
  layers_.clear();
  scorable_.clear();
  if (spec_.kind == model_kind::mlp) {
    if (spec_.dims.size() < 2) throw config_error("build_mlp: need at least [in, out] dims");
    if (!valid_mlp_activation(spec_.activation))
      throw config_error("build_mlp: invalid activation " + spec_.activation);
    const int n = static_cast<int>(spec_.dims.size()) - 1;
    for (int i = 0; i < n; ++i) {
      layer_spec ls;
      ls.kind = layer_kind::linear;
      ls.in_dim = spec_.dims[static_cast<std::size_t>(i)];
      ls.out_dim = spec_.dims[static_cast<std::size_t>(i) + 1];
      ls.activation = (i + 1 < n) ? spec_.activation : "linear";
      ls.scorable = true;
      layers_.push_back(ls);
      scorable_layer sl;
      sl.key = "layer" + std::to_string(i) + ".weight";
      sl.weight = sl.key;
      sl.bias = "layer" + std::to_string(i) + ".bias";
      sl.d_out = ls.out_dim;
      sl.d_in = ls.in_dim;
      sl.depth_index = i;
      scorable_.push_back(sl);
    }
    depth_groups_ = n;
    if (spec_.output_target.empty()) spec_.output_target = "output-raw";
    if (spec_.output_target != "output-raw")
      throw config_error("mlp supports output_target=output-raw only");
  } else {
    if (spec_.vocab < 2 || spec_.ctx < 2) throw config_error("build_tiny_lm: need vocab >= 2, ctx >= 2");
    if (spec_.d_model < 2 || spec_.n_layers < 1 || spec_.d_ff < 1)
      throw config_error("build_tiny_lm: dims too small for an attention block");
    layers_.push_back({layer_kind::embedding, spec_.vocab, spec_.d_model, "linear", false});
    for (std::int64_t b = 0; b < spec_.n_layers; ++b) {
      const std::string prefix = "block" + std::to_string(b);
      layers_.push_back({layer_kind::attention, spec_.d_model, spec_.d_model, "linear", true});
      layers_.push_back({layer_kind::gated_mlp, spec_.d_model, spec_.d_model, "glu", true});
      auto add_scorable = [&](const std::string& name, std::int64_t dout, std::int64_t din) {
        scorable_layer sl;
        sl.key = name;
        sl.weight = name;
        sl.d_out = dout;
        sl.d_in = din;
        sl.depth_index = static_cast<int>(b);
        scorable_.push_back(sl);
      };
      add_scorable(prefix + ".attn.wq", spec_.d_model, spec_.d_model);
      add_scorable(prefix + ".attn.wk", spec_.d_model, spec_.d_model);
      add_scorable(prefix + ".attn.wv", spec_.d_model, spec_.d_model);
      add_scorable(prefix + ".attn.wo", spec_.d_model, spec_.d_model);
      add_scorable(prefix + ".mlp.wgate", spec_.d_ff, spec_.d_model);
      add_scorable(prefix + ".mlp.wup", spec_.d_ff, spec_.d_model);
      add_scorable(prefix + ".mlp.wdown", spec_.d_model, spec_.d_ff);
    }
    layers_.push_back({layer_kind::head, spec_.d_model, spec_.vocab, "linear", true});
    scorable_layer head;
    head.key = "head.weight";
    head.weight = head.key;
    head.d_out = spec_.vocab;
    head.d_in = spec_.d_model;
    head.depth_index = static_cast<int>(spec_.n_layers) - 1;  // trains with the last block
    scorable_.push_back(head);
    depth_groups_ = static_cast<int>(spec_.n_layers);
    if (spec_.output_target.empty()) spec_.output_target = "logits-last";
    if (spec_.output_target != "logits-last" && spec_.output_target != "output-raw")
      throw config_error("unknown output_target " + spec_.output_target);
  }
}

void model::init_params() {
  rng gen(spec_.seed);
  state_.init_seed = spec_.seed;
  if (spec_.kind == model_kind::mlp) {
    const int n = static_cast<int>(spec_.dims.size()) - 1;
    for (int i = 0; i < n; ++i) {
      const std::int64_t din = spec_.dims[static_cast<std::size_t>(i)];
      const std::int64_t dout = spec_.dims[static_cast<std::size_t>(i) + 1];
      state_.add("layer" + std::to_string(i) + ".weight", glorot_uniform(dout, din, gen));
      state_.add("layer" + std::to_string(i) + ".bias", tensor::zeros({dout}));
    }
  } else {
    state_.add("embed.weight", glorot_uniform(spec_.vocab, spec_.d_model, gen));
    for (std::int64_t b = 0; b < spec_.n_layers; ++b) {
      const std::string prefix = "block" + std::to_string(b);
      tensor ones = tensor::zeros({spec_.d_model});
      std::fill(ones.data.begin(), ones.data.end(), 1.0);
      state_.add(prefix + ".attn_norm.gain", ones);
      state_.add(prefix + ".attn.wq", glorot_uniform(spec_.d_model, spec_.d_model, gen));
      state_.add(prefix + ".attn.wk", glorot_uniform(spec_.d_model, spec_.d_model, gen));
      state_.add(prefix + ".attn.wv", glorot_uniform(spec_.d_model, spec_.d_model, gen));
      state_.add(prefix + ".attn.wo", glorot_uniform(spec_.d_model, spec_.d_model, gen));
      state_.add(prefix + ".mlp_norm.gain", ones);
      state_.add(prefix + ".mlp.wgate", glorot_uniform(spec_.d_ff, spec_.d_model, gen));
      state_.add(prefix + ".mlp.wup", glorot_uniform(spec_.d_ff, spec_.d_model, gen));
      state_.add(prefix + ".mlp.wdown", glorot_uniform(spec_.d_model, spec_.d_ff, gen));
    }
    tensor ones = tensor::zeros({spec_.d_model});
    std::fill(ones.data.begin(), ones.data.end(), 1.0);
    state_.add("final_norm.gain", ones);
    state_.add("head.weight", glorot_uniform(spec_.vocab, spec_.d_model, gen));
  }
}

std::vector<scorable_param> model::scorable_params() const {
  std::vector<scorable_param> out;
  for (const scorable_layer& sl : scorable_) {
    out.push_back({sl.weight, sl.key, state_.param(sl.weight).shape, false});
    if (!sl.bias.empty()) out.push_back({sl.bias, sl.key, state_.param(sl.bias).shape, true});
  }
  return out;
}

std::int64_t model::scorable_numel() const {
  std::int64_t n = 0;
  for (const scorable_param& p : scorable_params()) n += tensor::numel_of(p.shape);
  return n;
}

std::int64_t model::output_dim(std::int64_t seq_len) const {
  if (spec_.kind == model_kind::mlp) return spec_.dims.back();
  return spec_.output_target == "logits-last" ? spec_.vocab : seq_len * spec_.vocab;
}

std::vector<std::int64_t> model::output_shape(const probe_input& in,
                                              const std::string& output_target) const {
  const std::string target = output_target.empty() ? spec_.output_target : output_target;
  if (spec_.kind == model_kind::mlp) return {spec_.dims.back()};
  const std::int64_t t_len = static_cast<std::int64_t>(in.tokens.size());
  if (target == "logits-last") return {spec_.vocab};
  return {t_len, spec_.vocab};
}

// ---------------------------------------------------------------------------
// forward

capture_result model::build_forward(const probe_input& in, const std::string& output_target) const {
  const std::string target = output_target.empty() ? spec_.output_target : output_target;
  if (target != "logits-last" && target != "output-raw")
    throw config_error("unknown output_target " + target);
  if (target == "logits-last" && spec_.kind == model_kind::mlp)
    throw config_error("mlp supports output_target=output-raw only");

  capture_result cap;
  cap.owner = this;
  graph& g = cap.g;

  auto param_node = [&](const std::string& name) {
    node_id id = g.param(state_.param(name));
    cap.param_nodes[name] = id;
    return id;
  };

  if (spec_.kind == model_kind::mlp) {
    if (in.values.empty() || static_cast<std::int64_t>(in.values.size()) != spec_.dims.front())
      throw config_error("forward: mlp input length must be " + std::to_string(spec_.dims.front()));
    node_id h = g.input(tensor::from({spec_.dims.front()}, in.values));
    const int n = static_cast<int>(spec_.dims.size()) - 1;
    for (int i = 0; i < n; ++i) {
      const std::string prefix = "layer" + std::to_string(i);
      node_id w = param_node(prefix + ".weight");
      node_id b = param_node(prefix + ".bias");
      node_id z = g.linear(h, w, b);
      cap.taps.push_back({prefix + ".weight", h, z});
      if (i + 1 < n) {
        if (spec_.activation == "gelu") {
          h = g.gelu(z);
        } else if (spec_.activation == "silu") {
          h = g.silu(z);
        } else {
          h = z;
        }
      } else {
        h = z;
      }
    }
    cap.output = h;
    return cap;
  }

  // tiny LM
  if (in.tokens.empty()) throw config_error("forward: lm expects a token sequence");
  if (static_cast<std::int64_t>(in.tokens.size()) > spec_.ctx)
    throw config_error("forward: sequence longer than context window");
  const std::int64_t t_len = static_cast<std::int64_t>(in.tokens.size());
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(spec_.d_model));

  node_id x = g.embedding(param_node("embed.weight"), in.tokens);
  for (std::int64_t b = 0; b < spec_.n_layers; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    node_id xn = g.rms_norm(x, param_node(prefix + ".attn_norm.gain"));
    node_id q = g.linear(xn, param_node(prefix + ".attn.wq"));
    node_id k = g.linear(xn, param_node(prefix + ".attn.wk"));
    node_id v = g.linear(xn, param_node(prefix + ".attn.wv"));
    cap.taps.push_back({prefix + ".attn.wq", xn, q});
    cap.taps.push_back({prefix + ".attn.wk", xn, k});
    cap.taps.push_back({prefix + ".attn.wv", xn, v});
    node_id probs = g.causal_softmax(g.scale(g.matmul_nt(q, k), att_scale));
    node_id att = g.matmul(probs, v);
    node_id proj = g.linear(att, param_node(prefix + ".attn.wo"));
    cap.taps.push_back({prefix + ".attn.wo", att, proj});
    x = g.add(x, proj);

    node_id xn2 = g.rms_norm(x, param_node(prefix + ".mlp_norm.gain"));
    node_id gate = g.linear(xn2, param_node(prefix + ".mlp.wgate"));
    node_id up = g.linear(xn2, param_node(prefix + ".mlp.wup"));
    cap.taps.push_back({prefix + ".mlp.wgate", xn2, gate});
    cap.taps.push_back({prefix + ".mlp.wup", xn2, up});
    node_id gated = g.mul(g.silu(gate), up);
    node_id down = g.linear(gated, param_node(prefix + ".mlp.wdown"));
    cap.taps.push_back({prefix + ".mlp.wdown", gated, down});
    x = g.add(x, down);
  }
  node_id xf = g.rms_norm(x, param_node("final_norm.gain"));
  node_id logits = g.linear(xf, param_node("head.weight"));
  cap.taps.push_back({"head.weight", xf, logits});
  cap.output = target == "logits-last" ? g.take_row(logits, t_len - 1) : logits;
  return cap;
}

capture_result model::capture(const probe_input& in, const std::string& output_target) const {
  capture_result cap = build_forward(in, output_target);
  counters_->forwards.fetch_add(1, std::memory_order_relaxed);
  return cap;
}

tensor model::forward(const probe_input& in) const { return capture(in).f(); }

tensor model::logits(const std::vector<int>& tokens) const {
  if (spec_.kind != model_kind::tiny_lm) throw config_error("logits: not a language model");
  capture_result cap = build_forward(probe_input::seq(tokens), "output-raw");
  counters_->forwards.fetch_add(1, std::memory_order_relaxed);
  // The tap list always ends at the head layer whose z is the full [T,V] grid.
  return cap.g.value(cap.taps.back().z);
}

void capture_result::backward(const tensor& seed) {
  g.backward(output, seed);
  owner->counters().backwards.fetch_add(1, std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// checkpoint io

void model::save(const std::filesystem::path& path) const {
  blob_file file;
  file.magic = k_checkpoint_magic;
  file.version = k_checkpoint_version;
  file.meta = spec_.to_meta();
  for (const auto& [name, t] : state_.params()) {
    blob_entry e;
    e.name = name;
    e.dtype = blob_dtype::f64;
    e.shape = t.shape;
    e.bytes = pack_f64(t.data);
    file.entries.push_back(std::move(e));
  }
  write_blob(path, file);
}

model model::load(const std::filesystem::path& path) {
  blob_file file = read_blob(path, k_checkpoint_magic);
  model_spec spec = model_spec::from_meta(file.meta);
  model_state state;
  state.init_seed = spec.seed;
  for (const blob_entry& e : file.entries) {
    if (e.dtype != blob_dtype::f64) throw config_error("checkpoint: unexpected dtype");
    tensor t = tensor::from(e.shape, unpack_f64(e.bytes));
    state.add(e.name, std::move(t));
  }
  return model(std::move(spec), std::move(state));
}

// ---------------------------------------------------------------------------
// builders and sampling helpers

model build_mlp(std::vector<std::int64_t> dims, const std::string& activation, std::uint64_t seed) {
  model_spec spec;
  spec.kind = model_kind::mlp;
  spec.dims = std::move(dims);
  spec.activation = activation;
  spec.seed = seed;
  spec.output_target = "output-raw";
  return model(std::move(spec));
}

model build_tiny_lm(std::int64_t vocab, std::int64_t ctx, std::int64_t d_model,
                    std::int64_t n_layers, std::uint64_t seed) {
  model_spec spec;
  spec.kind = model_kind::tiny_lm;
  spec.vocab = vocab;
  spec.ctx = ctx;
  spec.d_model = d_model;
  spec.n_layers = n_layers;
  spec.d_ff = 2 * d_model;
  spec.seed = seed;
  spec.output_target = "logits-last";
  return model(std::move(spec));
}

std::vector<double> softmax(const std::vector<double>& logits) {
  std::vector<double> p(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

int argmax_next(const model& m, const std::vector<int>& context) {
  tensor lg = m.logits(context);
  const std::int64_t vocab = lg.shape[1];
  const double* row = lg.data.data() + (lg.shape[0] - 1) * vocab;
  int best = 0;
  for (std::int64_t j = 1; j < vocab; ++j) {
    if (row[j] > row[best]) best = static_cast<int>(j);
  }
  return best;
}

int sample_next(const model& m, const std::vector<int>& context, rng& gen) {
  tensor lg = m.logits(context);
  const std::int64_t vocab = lg.shape[1];
  const double* row = lg.data.data() + (lg.shape[0] - 1) * vocab;
  std::vector<double> p = softmax(std::vector<double>(row, row + vocab));
  const double u = gen.next_double();
  double cum = 0.0;
  for (std::int64_t j = 0; j < vocab; ++j) {
    cum += p[static_cast<std::size_t>(j)];
    if (u < cum) return static_cast<int>(j);
  }
  return static_cast<int>(vocab - 1);
}

}  // namespace dowser

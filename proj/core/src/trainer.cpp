#include "dowser/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dowser/io.hpp"

namespace dowser {

// ---------------------------------------------------------------------------
// configs and tasks

void train_config::validate() const {
  if (!(lr > 0.0)) throw config_error("train_config: lr must be > 0");
  if (epochs < 1) throw config_error("train_config: epochs must be >= 1");
  if (batch_size < 1) throw config_error("train_config: batch_size must be >= 1");
  if (clip_norm && !(*clip_norm > 0.0)) throw config_error("train_config: clip_norm must be > 0");
}

namespace {

tensor make_bigram_table(std::int64_t vocab, double peak, std::uint64_t seed) {
  rng gen(seed);
  tensor table = tensor::zeros({vocab, vocab});
  const double rest = (1.0 - peak) / static_cast<double>(vocab - 1);
  for (std::int64_t i = 0; i < vocab; ++i) {
    const auto preferred = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(vocab)));
    for (std::int64_t j = 0; j < vocab; ++j) table.at(i, j) = (j == preferred) ? peak : rest;
  }
  return table;
}

int sample_row(const tensor& table, std::int64_t row, rng& gen) {
  const double u = gen.next_double();
  const std::int64_t vocab = table.shape[1];
  double cum = 0.0;
  for (std::int64_t j = 0; j < vocab; ++j) {
    cum += table.at(row, j);
    if (u < cum) return static_cast<int>(j);
  }
  return static_cast<int>(vocab - 1);
}

std::vector<lm_example> gen_bigram(const tensor& table, int count, int seq_len, std::uint64_t seed) {
  rng gen(seed);
  const std::int64_t vocab = table.shape[0];
  std::vector<lm_example> out(static_cast<std::size_t>(count));
  for (auto& ex : out) {
    ex.tokens.resize(static_cast<std::size_t>(seq_len));
    ex.tokens[0] = static_cast<int>(gen.next_below(static_cast<std::uint64_t>(vocab)));
    for (int t = 1; t < seq_len; ++t) ex.tokens[static_cast<std::size_t>(t)] =
        sample_row(table, ex.tokens[static_cast<std::size_t>(t - 1)], gen);
  }
  return out;
}

std::vector<lm_example> gen_copy(std::int64_t vocab, int count, int seq_len, std::uint64_t seed) {
  rng gen(seed);
  const int period = seq_len / 2;
  std::vector<lm_example> out(static_cast<std::size_t>(count));
  for (auto& ex : out) {
    ex.tokens.resize(static_cast<std::size_t>(seq_len));
    for (int t = 0; t < period; ++t)
      ex.tokens[static_cast<std::size_t>(t)] =
          static_cast<int>(gen.next_below(static_cast<std::uint64_t>(vocab)));
    for (int t = period; t < seq_len; ++t)
      ex.tokens[static_cast<std::size_t>(t)] = ex.tokens[static_cast<std::size_t>(t - period)];
  }
  return out;
}

std::vector<mlp_example> gen_regression(const tensor& a, const tensor& b, double noise, int count,
                                        std::uint64_t seed) {
  rng gen(seed);
  const std::int64_t out_dim = a.shape[0], in_dim = a.shape[1];
  std::vector<mlp_example> out(static_cast<std::size_t>(count));
  for (auto& ex : out) {
    ex.x.resize(static_cast<std::size_t>(in_dim));
    for (double& v : ex.x) v = gen.next_normal();
    ex.y.resize(static_cast<std::size_t>(out_dim));
    for (std::int64_t i = 0; i < out_dim; ++i) {
      double acc = b.at(i);
      for (std::int64_t j = 0; j < in_dim; ++j) acc += a.at(i, j) * ex.x[static_cast<std::size_t>(j)];
      ex.y[static_cast<std::size_t>(i)] = acc + noise * gen.next_normal();
    }
  }
  return out;
}

}  // namespace

task task::make(const task_spec& spec) {
  task t;
  t.spec_ = spec;
  if (spec.train_size < 0 || spec.eval_size < 0) throw config_error("task: negative set size");
  switch (spec.kind) {
    case task_kind::lm_bigram: {
      if (spec.vocab < 2) throw config_error("lm_bigram: vocab must be >= 2");
      if (spec.seq_len < 2) throw config_error("lm_bigram: seq_len must be >= 2");
      if (!(spec.peak > 0.0 && spec.peak < 1.0)) throw config_error("lm_bigram: peak in (0,1)");
      t.transitions_ = make_bigram_table(spec.vocab, spec.peak, mix64(spec.gen_seed, 0));
      t.train_lm_ = gen_bigram(t.transitions_, spec.train_size, spec.seq_len, mix64(spec.gen_seed, 1));
      t.eval_lm_ = gen_bigram(t.transitions_, spec.eval_size, spec.seq_len, mix64(spec.gen_seed, 2));
      break;
    }
    case task_kind::lm_copy: {
      if (spec.seq_len < 4 || spec.seq_len % 2 != 0)
        throw config_error("lm_copy: seq_len must be even and >= 4");
      t.train_lm_ = gen_copy(spec.vocab, spec.train_size, spec.seq_len, mix64(spec.gen_seed, 1));
      t.eval_lm_ = gen_copy(spec.vocab, spec.eval_size, spec.seq_len, mix64(spec.gen_seed, 2));
      break;
    }
    case task_kind::mlp_synthetic: {
      rng gen(mix64(spec.gen_seed, 0));
      t.reg_a_ = tensor::zeros({spec.out_dim, spec.in_dim});
      const double scale = 1.0 / std::sqrt(static_cast<double>(spec.in_dim));
      for (double& v : t.reg_a_.data) v = scale * gen.next_normal();
      t.reg_b_ = tensor::zeros({spec.out_dim});
      for (double& v : t.reg_b_.data) v = gen.next_normal();
      t.train_mlp_ = gen_regression(t.reg_a_, t.reg_b_, spec.noise, spec.train_size,
                                    mix64(spec.gen_seed, 1));
      t.eval_mlp_ = gen_regression(t.reg_a_, t.reg_b_, spec.noise, spec.eval_size,
                                   mix64(spec.gen_seed, 2));
      break;
    }
  }
  return t;
}

std::vector<int> task::targets_for(const lm_example& ex) const {
  const int len = static_cast<int>(ex.tokens.size());
  std::vector<int> targets(static_cast<std::size_t>(len), -1);
  const int first = spec_.kind == task_kind::lm_copy ? spec_.seq_len / 2 - 1 : 0;
  for (int t = first; t + 1 < len; ++t) targets[static_cast<std::size_t>(t)] = ex.tokens[static_cast<std::size_t>(t + 1)];
  return targets;
}

// ---------------------------------------------------------------------------
// evaluation

double evaluate_with(const task& t,
                     const std::function<int(const std::vector<int>&)>& predict) {
  if (!t.is_lm()) throw config_error("evaluate_with: predictor form is for LM tasks");
  std::int64_t hits = 0, total = 0;
  for (const lm_example& ex : t.eval_lm()) {
    const std::vector<int> targets = t.targets_for(ex);
    for (std::size_t pos = 0; pos < targets.size(); ++pos) {
      if (targets[pos] < 0) continue;
      const std::vector<int> context(ex.tokens.begin(),
                                     ex.tokens.begin() + static_cast<std::ptrdiff_t>(pos) + 1);
      hits += predict(context) == targets[pos];
      ++total;
    }
  }
  if (total == 0) throw config_error("evaluate_with: no scored positions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

double evaluate(const model& m, const task& t) {
  if (t.is_lm()) {
    if (m.spec().kind != model_kind::tiny_lm) throw config_error("evaluate: LM task needs an LM");
    std::int64_t hits = 0, total = 0;
    for (const lm_example& ex : t.eval_lm()) {
      // One forward scores every position; causal attention keeps each
      // position's prediction a function of its prefix only.
      const tensor logits = m.logits(ex.tokens);
      const std::vector<int> targets = t.targets_for(ex);
      const std::int64_t vocab = logits.shape[1];
      for (std::size_t pos = 0; pos < targets.size(); ++pos) {
        if (targets[pos] < 0) continue;
        const double* row = logits.data.data() + static_cast<std::int64_t>(pos) * vocab;
        int best = 0;
        for (std::int64_t j = 1; j < vocab; ++j) {
          if (row[j] > row[best]) best = static_cast<int>(j);
        }
        hits += best == targets[pos];
        ++total;
      }
    }
    if (total == 0) throw config_error("evaluate: no scored positions");
    return static_cast<double>(hits) / static_cast<double>(total);
  }

  if (m.spec().kind != model_kind::mlp) throw config_error("evaluate: MLP task needs an MLP");
  double se = 0.0;
  std::int64_t count = 0;
  for (const mlp_example& ex : t.eval_mlp()) {
    const tensor out = m.forward(probe_input::vec(ex.x));
    for (std::size_t i = 0; i < ex.y.size(); ++i) {
      const double d = out.data[i] - ex.y[i];
      se += d * d;
    }
    count += static_cast<std::int64_t>(ex.y.size());
  }
  const double mse = se / static_cast<double>(count);
  return 1.0 / (1.0 + mse);
}

// ---------------------------------------------------------------------------
// gradients

double batch_gradients(const model& m, const task& t, const std::vector<std::int64_t>& indices,
                       bool train_split, loss_kind loss, grad_table& out) {
  out.clear();
  for (const scorable_param& p : m.scorable_params())
    out[p.name].assign(static_cast<std::size_t>(tensor::numel_of(p.shape)), 0.0);

  double loss_sum = 0.0;
  for (std::int64_t idx : indices) {
    node_id loss_node = no_node;
    capture_result cap;
    if (t.is_lm()) {
      if (loss != loss_kind::cross_entropy)
        throw config_error("LM tasks train with cross-entropy loss");
      const auto& set = train_split ? t.train_lm() : t.eval_lm();
      const lm_example& ex = set[static_cast<std::size_t>(idx)];
      cap = m.capture(probe_input::seq(ex.tokens), "output-raw");
      loss_node = cap.g.cross_entropy(cap.taps.back().z, t.targets_for(ex));
    } else {
      if (loss != loss_kind::mse) throw config_error("MLP regression trains with mse loss");
      const auto& set = train_split ? t.train_mlp() : t.eval_mlp();
      const mlp_example& ex = set[static_cast<std::size_t>(idx)];
      cap = m.capture(probe_input::vec(ex.x));
      loss_node = cap.g.mse(cap.output, tensor::from({static_cast<std::int64_t>(ex.y.size())}, ex.y));
    }
    cap.g.backward(loss_node);
    m.counters().backwards.fetch_add(1, std::memory_order_relaxed);
    loss_sum += cap.g.value(loss_node).data[0];
    for (auto& [name, grad] : out) {
      const std::vector<double>& pg = cap.g.grad(cap.param_nodes.at(name));
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += pg[i];
    }
  }

  const double inv = 1.0 / static_cast<double>(indices.size());
  for (auto& [name, grad] : out) {
    for (double& v : grad) v *= inv;
  }
  return loss_sum * inv;
}

// ---------------------------------------------------------------------------
// sparse trainer

sparse_trainer::sparse_trainer(model& m, const mask_set& mask, const train_config& cfg)
    : model_(m), mask_(mask), cfg_(cfg) {
  const std::vector<scorable_param> params = m.scorable_params();
  if (mask_.layers.size() != params.size())
    throw config_error("sparse_trainer: mask does not cover the scorable parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask_.layers[i].name != params[i].name || mask_.layers[i].shape != params[i].shape)
      throw config_error("sparse_trainer: mask mismatch at " + params[i].name);
  }
  if (cfg_.optimizer == optimizer_kind::adam) {
    moments_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::size_t k = static_cast<std::size_t>(mask_.layers[i].popcount());
      moments_[i].m1.assign(k, 0.0);  // moments exist only for trainable entries
      moments_[i].m2.assign(k, 0.0);
    }
  }
}

void sparse_trainer::apply_step(const grad_table& grads) {
  const std::vector<scorable_param> params = model_.scorable_params();
  for (const scorable_param& p : params) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw config_error("apply_step: missing gradient for " + p.name);
    if (it->second.size() != static_cast<std::size_t>(tensor::numel_of(p.shape)))
      throw config_error("apply_step: gradient size mismatch for " + p.name);
    for (double v : it->second) {
      if (!std::isfinite(v)) throw numerical_error("apply_step: NaN gradient in " + p.name);
    }
  }

  // Clip on the masked gradient: frozen entries must not influence the norm.
  double clip_scale = 1.0;
  if (cfg_.clip_norm) {
    double sq = 0.0;
    for (std::size_t li = 0; li < params.size(); ++li) {
      const mask_set::layer_mask& lm = mask_.layers[li];
      const std::vector<double>& g = grads.at(params[li].name);
      for (std::int64_t i = 0; i < lm.numel(); ++i) {
        if (lm.get(i)) sq += g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > *cfg_.clip_norm) clip_scale = *cfg_.clip_norm / norm;
  }

  ++step_count_;
  for (std::size_t li = 0; li < params.size(); ++li) {
    const mask_set::layer_mask& lm = mask_.layers[li];
    const std::vector<double>& g = grads.at(params[li].name);
    tensor& theta = model_.state().param(params[li].name);
    if (cfg_.optimizer == optimizer_kind::sgd) {
      for (std::int64_t i = 0; i < lm.numel(); ++i) {
        if (!lm.get(i)) continue;
        theta.data[static_cast<std::size_t>(i)] -= cfg_.lr * clip_scale * g[static_cast<std::size_t>(i)];
      }
      continue;
    }
    moment_slot& slot = moments_[li];
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    std::size_t k = 0;
    for (std::int64_t i = 0; i < lm.numel(); ++i) {
      if (!lm.get(i)) continue;
      const double gi = clip_scale * g[static_cast<std::size_t>(i)];
      slot.m1[k] = cfg_.beta1 * slot.m1[k] + (1.0 - cfg_.beta1) * gi;
      slot.m2[k] = cfg_.beta2 * slot.m2[k] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = slot.m1[k] / bc1;
      const double vhat = slot.m2[k] / bc2;
      theta.data[static_cast<std::size_t>(i)] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      ++k;
    }
  }
}

namespace {

std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::int64_t{0});
  rng gen(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(gen.next_below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

template <typename Stepper>
train_result run_epochs(const model& m, const task& t, const train_config& cfg, Stepper&& step,
                        const std::function<void(int, double)>& on_epoch) {
  const std::int64_t n = t.is_lm() ? static_cast<std::int64_t>(t.train_lm().size())
                                   : static_cast<std::int64_t>(t.train_mlp().size());
  if (n == 0) throw config_error("train: empty training set");
  train_result result;
  grad_table grads;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::int64_t> order =
        shuffled_indices(n, mix64(cfg.seed, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t stop = std::min<std::int64_t>(start + cfg.batch_size, n);
      const std::vector<std::int64_t> batch(order.begin() + start, order.begin() + stop);
      const double loss = batch_gradients(m, t, batch, /*train_split=*/true, cfg.loss, grads);
      step(grads);
      loss_sum += loss;
      ++batches;
    }
    const double epoch_loss = loss_sum / static_cast<double>(batches);
    if (!std::isfinite(epoch_loss) || epoch_loss > 1e6) {
      throw numerical_error("train: diverged at epoch " + std::to_string(epoch) +
                            " (loss = " + std::to_string(epoch_loss) + ")");
    }
    result.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return result;
}

}  // namespace

train_result sparse_trainer::train(const task& t,
                                   const std::function<void(int, double)>& on_epoch) {
  if (cfg_.epochs == 0) return {};
  return run_epochs(model_, t, cfg_, [this](const grad_table& g) { apply_step(g); }, on_epoch);
}

memory_report sparse_trainer::memory() const {
  memory_report report;
  report.param_bytes = static_cast<std::size_t>(model_.state().total_numel()) * sizeof(double);
  report.grad_bytes = static_cast<std::size_t>(model_.scorable_numel()) * sizeof(double);
  for (const moment_slot& slot : moments_)
    report.moment_bytes += (slot.m1.size() + slot.m2.size()) * sizeof(double);
  report.mask_payload_bytes = mask_.payload_bytes();
  report.mask_header_bytes = mask_.header_bytes();
  return report;
}

// ---------------------------------------------------------------------------
// dense reference trainer

dense_trainer::dense_trainer(model& m, const train_config& cfg) : model_(m), cfg_(cfg) {
  if (cfg_.optimizer == optimizer_kind::adam) {
    const std::vector<scorable_param> params = m.scorable_params();
    m1_.resize(params.size());
    m2_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::size_t n = static_cast<std::size_t>(tensor::numel_of(params[i].shape));
      m1_[i].assign(n, 0.0);
      m2_[i].assign(n, 0.0);
    }
  }
}

void dense_trainer::apply_step(const grad_table& grads) {
  const std::vector<scorable_param> params = model_.scorable_params();
  double clip_scale = 1.0;
  if (cfg_.clip_norm) {
    double sq = 0.0;
    for (const scorable_param& p : params) {
      for (double v : grads.at(p.name)) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > *cfg_.clip_norm) clip_scale = *cfg_.clip_norm / norm;
  }

  ++step_count_;
  for (std::size_t li = 0; li < params.size(); ++li) {
    const std::vector<double>& g = grads.at(params[li].name);
    tensor& theta = model_.state().param(params[li].name);
    if (cfg_.optimizer == optimizer_kind::sgd) {
      for (std::size_t i = 0; i < g.size(); ++i) theta.data[i] -= cfg_.lr * clip_scale * g[i];
      continue;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = clip_scale * g[i];
      m1_[li][i] = cfg_.beta1 * m1_[li][i] + (1.0 - cfg_.beta1) * gi;
      m2_[li][i] = cfg_.beta2 * m2_[li][i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m1_[li][i] / bc1;
      const double vhat = m2_[li][i] / bc2;
      theta.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

train_result dense_trainer::train(const task& t) {
  if (cfg_.epochs == 0) return {};
  return run_epochs(model_, t, cfg_, [this](const grad_table& g) { apply_step(g); }, {});
}

// ---------------------------------------------------------------------------

std::uint64_t frozen_hash(const model& m, const mask_set& mask) {
  std::vector<double> frozen;
  const std::vector<scorable_param> params = m.scorable_params();
  for (std::size_t li = 0; li < params.size(); ++li) {
    const mask_set::layer_mask& lm = mask.layer(params[li].name);
    const tensor& theta = m.state().param(params[li].name);
    for (std::int64_t i = 0; i < lm.numel(); ++i) {
      if (!lm.get(i)) frozen.push_back(theta.data[static_cast<std::size_t>(i)]);
    }
  }
  for (const auto& [name, t] : m.state().params()) {
    bool scorable = false;
    for (const scorable_param& p : params) {
      if (p.name == name) {
        scorable = true;
        break;
      }
    }
    if (!scorable) frozen.insert(frozen.end(), t.data.begin(), t.data.end());
  }
  return fnv1a64(frozen.data(), frozen.size() * sizeof(double));
}

}  // namespace dowser

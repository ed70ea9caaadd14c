#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dowser/model.hpp"
#include "dowser/score.hpp"

namespace dowser {

enum class optimizer_kind : std::uint8_t { sgd, adam };
enum class loss_kind : std::uint8_t { cross_entropy, mse };

struct train_config {
  double lr = 1e-2;
  int epochs = 1;
  int batch_size = 8;
  optimizer_kind optimizer = optimizer_kind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  loss_kind loss = loss_kind::cross_entropy;
  std::uint64_t seed = 0;
  std::optional<double> clip_norm;

  void validate() const;
};

enum class task_kind : std::uint8_t { mlp_synthetic, lm_bigram, lm_copy };

struct task_spec {
  task_kind kind = task_kind::lm_bigram;
  std::uint64_t gen_seed = 0;
  int train_size = 256;
  int eval_size = 256;
  // lm tasks
  std::int64_t vocab = 16;
  int seq_len = 8;
  double peak = 0.8;  // bigram: probability mass on each row's preferred token
  // mlp regression
  std::int64_t in_dim = 8;
  std::int64_t out_dim = 4;
  double noise = 0.1;
};

struct lm_example {
  std::vector<int> tokens;
};

struct mlp_example {
  std::vector<double> x;
  std::vector<double> y;
};

// Materialized task data. Train and eval sets come from disjoint RNG streams
// of the generator seed.
class task {
 public:
  static task make(const task_spec& spec);

  const task_spec& spec() const { return spec_; }
  const std::vector<lm_example>& train_lm() const { return train_lm_; }
  const std::vector<lm_example>& eval_lm() const { return eval_lm_; }
  const std::vector<mlp_example>& train_mlp() const { return train_mlp_; }
  const std::vector<mlp_example>& eval_mlp() const { return eval_mlp_; }
  bool is_lm() const { return spec_.kind != task_kind::mlp_synthetic; }

  // Next-token targets per position; -1 marks positions that do not count
  // (the unconstrained prefix of a copy sequence).
  std::vector<int> targets_for(const lm_example& ex) const;

  // Bigram transition matrix [vocab, vocab] (rows sum to 1); empty otherwise.
  const tensor& transitions() const { return transitions_; }

  // The regression map behind mlp_synthetic, for closed-form oracles.
  const tensor& regression_matrix() const { return reg_a_; }
  const tensor& regression_bias() const { return reg_b_; }

 private:
  task_spec spec_;
  std::vector<lm_example> train_lm_, eval_lm_;
  std::vector<mlp_example> train_mlp_, eval_mlp_;
  tensor transitions_;
  tensor reg_a_, reg_b_;
};

// Exact-match next-token accuracy for LM tasks; 1/(1+mse) for regression.
double evaluate(const model& m, const task& t);

// Same scoring loop with an arbitrary predictor (context -> next token).
// Lets tests plug in oracle predictors without constructing a model.
double evaluate_with(const task& t,
                     const std::function<int(const std::vector<int>&)>& predict);

struct train_result {
  std::vector<double> epoch_loss;
};

struct memory_report {
  std::size_t param_bytes = 0;
  std::size_t grad_bytes = 0;
  std::size_t moment_bytes = 0;
  std::size_t mask_payload_bytes = 0;
  std::size_t mask_header_bytes = 0;
  std::size_t total() const {
    return param_bytes + grad_bytes + moment_bytes + mask_payload_bytes + mask_header_bytes;
  }
};

using grad_table = std::map<std::string, std::vector<double>>;

// Masked-gradient optimizer over a model's scorable parameters. Entries with
// M=0 are never touched: no update, no moment allocation, bit-identical
// values across any number of steps. Non-scorable parameters are implicitly
// frozen.
class sparse_trainer {
 public:
  sparse_trainer(model& m, const mask_set& mask, const train_config& cfg);

  // One optimizer step from externally computed gradients. Gradient clipping
  // (when configured) applies to the masked gradient.
  void apply_step(const grad_table& grads);

  // Epoch loop over the task's training set; returns per-epoch mean loss.
  // Aborts with a diagnostic if the loss diverges (NaN or > 1e6). The
  // callback, when given, fires after every epoch.
  train_result train(const task& t,
                     const std::function<void(int epoch, double loss)>& on_epoch = {});

  memory_report memory() const;
  const mask_set& mask() const { return mask_; }
  std::int64_t steps_taken() const { return step_count_; }

 private:
  model& model_;
  mask_set mask_;
  train_config cfg_;
  struct moment_slot {
    std::vector<double> m1;
    std::vector<double> m2;
  };
  std::vector<moment_slot> moments_;  // adam: one pair per trainable entry, mask order
  std::int64_t step_count_ = 0;
};

// Unmasked reference: plain dense updates over every scorable parameter.
// Exists so masked training with an all-ones mask can be checked
// bit-for-bit against an implementation with no masking logic at all.
class dense_trainer {
 public:
  dense_trainer(model& m, const train_config& cfg);
  void apply_step(const grad_table& grads);
  train_result train(const task& t);

 private:
  model& model_;
  train_config cfg_;
  std::vector<std::vector<double>> m1_, m2_;
  std::int64_t step_count_ = 0;
};

// Mean gradient of the configured loss over a batch of examples, keyed by
// scorable parameter name. Also returns the mean loss.
double batch_gradients(const model& m, const task& t, const std::vector<std::int64_t>& indices,
                       bool train_split, loss_kind loss, grad_table& out);

// FNV hash over the raw bytes of every frozen entry (M=0 scorable entries
// plus all non-scorable parameters).
std::uint64_t frozen_hash(const model& m, const mask_set& mask);

}  // namespace dowser

#include <cmath>
#include <cstring>

#include "doctest.h"

#include "dowser/trainer.hpp"
#include "test_util.hpp"

using namespace dowser;

namespace {

train_config sgd_cfg(double lr) {
  train_config cfg;
  cfg.optimizer = optimizer_kind::sgd;
  cfg.lr = lr;
  cfg.loss = loss_kind::mse;
  return cfg;
}

std::vector<double> snapshot(const model& m) {
  std::vector<double> all;
  for (const auto& [name, t] : m.state().params()) all.insert(all.end(), t.data.begin(), t.data.end());
  return all;
}

// Least-squares optimum of mean((W x + b - y)^2) over the training set,
// solved through the normal equations on the augmented design matrix.
// Gaussian elimination only; no trainer machinery.
double closed_form_ls_loss(const task& t) {
  const auto& train = t.train_mlp();
  const std::int64_t d = static_cast<std::int64_t>(train[0].x.size());
  const std::int64_t k = static_cast<std::int64_t>(train[0].y.size());
  const std::int64_t n = static_cast<std::int64_t>(train.size());
  const std::int64_t da = d + 1;

  // gram = X~^T X~, rhs = X~^T Y
  std::vector<double> gram(static_cast<std::size_t>(da * da), 0.0);
  std::vector<double> rhs(static_cast<std::size_t>(da * k), 0.0);
  auto aug = [&](const mlp_example& ex, std::int64_t j) {
    return j < d ? ex.x[static_cast<std::size_t>(j)] : 1.0;
  };
  for (const mlp_example& ex : train) {
    for (std::int64_t a = 0; a < da; ++a) {
      for (std::int64_t b = 0; b < da; ++b) gram[static_cast<std::size_t>(a * da + b)] += aug(ex, a) * aug(ex, b);
      for (std::int64_t c = 0; c < k; ++c)
        rhs[static_cast<std::size_t>(a * k + c)] += aug(ex, a) * ex.y[static_cast<std::size_t>(c)];
    }
  }

  // solve gram * B = rhs with partial pivoting
  for (std::int64_t col = 0; col < da; ++col) {
    std::int64_t pivot = col;
    for (std::int64_t r = col + 1; r < da; ++r) {
      if (std::fabs(gram[static_cast<std::size_t>(r * da + col)]) >
          std::fabs(gram[static_cast<std::size_t>(pivot * da + col)]))
        pivot = r;
    }
    for (std::int64_t c = 0; c < da; ++c)
      std::swap(gram[static_cast<std::size_t>(col * da + c)], gram[static_cast<std::size_t>(pivot * da + c)]);
    for (std::int64_t c = 0; c < k; ++c)
      std::swap(rhs[static_cast<std::size_t>(col * k + c)], rhs[static_cast<std::size_t>(pivot * k + c)]);
    const double diag = gram[static_cast<std::size_t>(col * da + col)];
    for (std::int64_t r = 0; r < da; ++r) {
      if (r == col) continue;
      const double f = gram[static_cast<std::size_t>(r * da + col)] / diag;
      for (std::int64_t c = 0; c < da; ++c)
        gram[static_cast<std::size_t>(r * da + c)] -= f * gram[static_cast<std::size_t>(col * da + c)];
      for (std::int64_t c = 0; c < k; ++c)
        rhs[static_cast<std::size_t>(r * k + c)] -= f * rhs[static_cast<std::size_t>(col * k + c)];
    }
  }
  std::vector<double> beta(static_cast<std::size_t>(da * k));
  for (std::int64_t a = 0; a < da; ++a) {
    for (std::int64_t c = 0; c < k; ++c)
      beta[static_cast<std::size_t>(a * k + c)] =
          rhs[static_cast<std::size_t>(a * k + c)] / gram[static_cast<std::size_t>(a * da + a)];
  }

  double se = 0.0;
  for (const mlp_example& ex : train) {
    for (std::int64_t c = 0; c < k; ++c) {
      double pred = 0.0;
      for (std::int64_t a = 0; a < da; ++a) pred += aug(ex, a) * beta[static_cast<std::size_t>(a * k + c)];
      const double dlt = pred - ex.y[static_cast<std::size_t>(c)];
      se += dlt * dlt;
    }
  }
  return se / static_cast<double>(n * k);
}

}  // namespace

TEST_CASE("masked step arithmetic") {
  model m = build_mlp({2, 1}, "linear", 0);
  m.state().param("layer0.weight") = tensor::from({1, 2}, {1.0, 2.0});

  grad_table grads;
  grads["layer0.weight"] = {0.5, 0.5};
  grads["layer0.bias"] = {0.25};

  SUBCASE("all-zero mask leaves parameters bit-identical") {
    const std::vector<double> before = snapshot(m);
    sparse_trainer trainer(m, zero_mask(m.scorable_params()), sgd_cfg(0.1));
    trainer.apply_step(grads);
    const std::vector<double> after = snapshot(m);
    CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(double)) == 0);
  }

  SUBCASE("all-ones mask is an ordinary sgd step") {
    sparse_trainer trainer(m, full_mask(m.scorable_params()), sgd_cfg(0.1));
    trainer.apply_step(grads);
    CHECK(m.state().param("layer0.weight").data == std::vector<double>{0.95, 1.95});
    CHECK(m.state().param("layer0.bias").data == std::vector<double>{-0.025});
  }

  SUBCASE("single-entry mask: theta = [1,2] -> [0.95, 2]") {
    mask_set mask = zero_mask(m.scorable_params());
    mask.layers[0].set(0);  // layer0.weight entry 0 only
    sparse_trainer trainer(m, mask, sgd_cfg(0.1));
    trainer.apply_step(grads);
    CHECK(m.state().param("layer0.weight").data == std::vector<double>{0.95, 2.0});
    CHECK(m.state().param("layer0.bias").data == std::vector<double>{0.0});
  }

  SUBCASE("nan gradients abort") {
    grads["layer0.weight"][1] = std::nan("");
    sparse_trainer trainer(m, full_mask(m.scorable_params()), sgd_cfg(0.1));
    CHECK_THROWS_AS(trainer.apply_step(grads), numerical_error);
  }

  SUBCASE("mask that does not match the parameters is rejected") {
    model other = build_mlp({3, 3}, "linear", 1);
    const mask_set wrong = full_mask(other.scorable_params());
    CHECK_THROWS_AS(sparse_trainer(m, wrong, sgd_cfg(0.1)), config_error);
  }
}

TEST_CASE("zero epochs leave the state unchanged") {
  model m = build_mlp({4, 6, 2}, "gelu", 10);
  const std::vector<double> before = snapshot(m);

  task_spec spec;
  spec.kind = task_kind::mlp_synthetic;
  spec.in_dim = 4;
  spec.out_dim = 2;
  spec.train_size = 16;
  spec.eval_size = 8;
  const task t = task::make(spec);

  train_config cfg = sgd_cfg(0.1);
  cfg.epochs = 0;
  sparse_trainer trainer(m, full_mask(m.scorable_params()), cfg);
  const train_result result = trainer.train(t);
  CHECK(result.epoch_loss.empty());
  CHECK(snapshot(m) == before);
}

TEST_CASE("full-mask training reaches the closed-form least-squares loss") {
  task_spec spec;
  spec.kind = task_kind::mlp_synthetic;
  spec.gen_seed = 33;
  spec.in_dim = 6;
  spec.out_dim = 3;
  spec.train_size = 128;
  spec.eval_size = 64;
  spec.noise = 0.2;
  const task t = task::make(spec);
  const double target_loss = closed_form_ls_loss(t);

  model m = build_mlp({6, 3}, "linear", 71);
  train_config cfg;
  cfg.optimizer = optimizer_kind::adam;
  cfg.lr = 0.02;
  cfg.epochs = 300;
  cfg.batch_size = 128;  // full batch
  cfg.loss = loss_kind::mse;
  cfg.seed = 4;
  sparse_trainer trainer(m, full_mask(m.scorable_params()), cfg);
  const train_result result = trainer.train(t);

  CHECK(result.epoch_loss.back() < result.epoch_loss.front());
  CHECK(std::fabs(result.epoch_loss.back() - target_loss) < 1e-3);
}

TEST_CASE("frozen entries carry a stable checksum through training") {
  model m = build_tiny_lm(12, 8, 16, 2, 41);
  task_spec spec;
  spec.kind = task_kind::lm_bigram;
  spec.gen_seed = 5;
  spec.vocab = 12;
  spec.seq_len = 8;
  spec.train_size = 32;
  spec.eval_size = 16;
  const task t = task::make(spec);

  const mask_set mask = random_mask(m.scorable_params(), 0.1, 8);
  const std::uint64_t before = frozen_hash(m, mask);

  train_config cfg;
  cfg.optimizer = optimizer_kind::adam;
  cfg.lr = 1e-2;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.seed = 9;
  sparse_trainer trainer(m, mask, cfg);
  trainer.train(t);

  CHECK(frozen_hash(m, mask) == before);
  // and training did move the trainable entries
  CHECK(frozen_hash(m, full_mask(m.scorable_params())) != before);
}

TEST_CASE("all-ones masked trajectory is bit-identical to the dense reference") {
  task_spec spec;
  spec.kind = task_kind::lm_bigram;
  spec.gen_seed = 71;
  spec.vocab = 10;
  spec.seq_len = 6;
  spec.train_size = 24;
  spec.eval_size = 8;
  const task t = task::make(spec);

  for (optimizer_kind opt : {optimizer_kind::sgd, optimizer_kind::adam}) {
    model masked = build_tiny_lm(10, 6, 12, 1, 3);
    model dense = build_tiny_lm(10, 6, 12, 1, 3);

    train_config cfg;
    cfg.optimizer = opt;
    cfg.lr = 5e-3;
    cfg.epochs = 2;
    cfg.batch_size = 6;
    cfg.seed = 12;
    cfg.clip_norm = 0.75;

    sparse_trainer a(masked, full_mask(masked.scorable_params()), cfg);
    a.train(t);
    dense_trainer b(dense, cfg);
    b.train(t);

    const std::vector<double> sa = snapshot(masked);
    const std::vector<double> sb = snapshot(dense);
    CHECK(std::memcmp(sa.data(), sb.data(), sa.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("gradient clipping applies to the masked gradient only") {
  model m = build_mlp({2, 1}, "linear", 0);
  m.state().param("layer0.weight") = tensor::from({1, 2}, {1.0, 1.0});

  // Unmasked norm = 5 (entry 1 dominates); masked norm = 0.3.
  grad_table grads;
  grads["layer0.weight"] = {0.3, 5.0};
  grads["layer0.bias"] = {0.0};
  mask_set mask = zero_mask(m.scorable_params());
  mask.layers[0].set(0);

  train_config cfg = sgd_cfg(1.0);
  cfg.clip_norm = 1.0;
  sparse_trainer trainer(m, mask, cfg);
  trainer.apply_step(grads);
  // masked norm 0.3 < 1.0: no rescaling, update is exactly lr * g
  CHECK(m.state().param("layer0.weight").data[0] == doctest::Approx(0.7).epsilon(1e-15));

  // second step with a large masked gradient does get clipped
  grads["layer0.weight"] = {2.0, 0.0};
  trainer.apply_step(grads);
  CHECK(m.state().param("layer0.weight").data[0] == doctest::Approx(0.7 - 1.0).epsilon(1e-12));
}

TEST_CASE("training diverges loudly") {
  task_spec spec;
  spec.kind = task_kind::mlp_synthetic;
  spec.gen_seed = 2;
  spec.in_dim = 4;
  spec.out_dim = 2;
  spec.train_size = 32;
  spec.eval_size = 8;
  const task t = task::make(spec);

  model m = build_mlp({4, 8, 2}, "gelu", 5);
  train_config cfg = sgd_cfg(1e6);  // hopeless step size
  cfg.epochs = 50;
  sparse_trainer trainer(m, full_mask(m.scorable_params()), cfg);
  CHECK_THROWS_AS(trainer.train(t), numerical_error);
}

TEST_CASE("evaluate: chance level, oracle, determinism") {
  task_spec spec;
  spec.kind = task_kind::lm_bigram;
  spec.gen_seed = 123;
  spec.vocab = 16;
  spec.seq_len = 8;
  spec.train_size = 4;
  spec.eval_size = 256;
  const task t = task::make(spec);

  SUBCASE("untrained lm sits at chance level 1/16") {
    model lm = build_tiny_lm(16, 8, 32, 2, 99);
    const double acc = evaluate(lm, t);
    // 256 x 7 scored positions; +-5 binomial sigmas around 1/16
    const double sigma = std::sqrt((1.0 / 16.0) * (15.0 / 16.0) / (256.0 * 7.0));
    CHECK(std::fabs(acc - 1.0 / 16.0) < 5.0 * sigma);
  }

  SUBCASE("evaluate twice gives the identical value") {
    model lm = build_tiny_lm(16, 8, 16, 1, 7);
    CHECK(evaluate(lm, t) == evaluate(lm, t));
  }

  SUBCASE("perfect-copy oracle scores 1.0 on the copy task") {
    task_spec copy_spec;
    copy_spec.kind = task_kind::lm_copy;
    copy_spec.gen_seed = 9;
    copy_spec.vocab = 16;
    copy_spec.seq_len = 8;
    copy_spec.train_size = 4;
    copy_spec.eval_size = 64;
    const task copy_task = task::make(copy_spec);
    const int period = copy_spec.seq_len / 2;
    const double acc = evaluate_with(copy_task, [&](const std::vector<int>& context) {
      return context[context.size() - static_cast<std::size_t>(period)];
    });
    CHECK(acc == 1.0);
  }
}

TEST_CASE("memory report matches the allocation model") {
  SUBCASE("sgd trainer: params + grads + packed mask") {
    model m = build_mlp({16, 32, 16}, "gelu", 3);  // every parameter scorable
    const std::int64_t p = m.state().total_numel();
    sparse_trainer trainer(m, random_mask(m.scorable_params(), 0.5, 2), sgd_cfg(0.1));
    const memory_report report = trainer.memory();
    CHECK(report.param_bytes == static_cast<std::size_t>(8 * p));
    CHECK(report.grad_bytes == static_cast<std::size_t>(8 * p));
    CHECK(report.moment_bytes == 0);
    CHECK(report.mask_payload_bytes <= static_cast<std::size_t>(p / 8) + 6);  // one byte slack per layer
    CHECK(report.total() <= static_cast<std::size_t>(2 * 8 * p + p / 8) + 256);
  }

  SUBCASE("1024-entry layer packs into 128 bytes") {
    model m = build_mlp({32, 32}, "linear", 1);  // weight 32x32 = 1024
    const mask_set mask = random_mask(m.scorable_params(), 0.5, 3);
    CHECK(mask.layers[0].bits.size() == 128);
  }

  SUBCASE("adam moments cover only trainable entries") {
    model m = build_mlp({16, 32, 16}, "gelu", 4);
    const double rho = 0.1;
    const mask_set mask = random_mask(m.scorable_params(), rho, 5);
    train_config cfg;
    cfg.optimizer = optimizer_kind::adam;
    cfg.loss = loss_kind::mse;
    sparse_trainer trainer(m, mask, cfg);
    const memory_report report = trainer.memory();
    CHECK(report.moment_bytes == static_cast<std::size_t>(2 * 8 * mask.total_popcount()));
    CHECK(report.moment_bytes <=
          static_cast<std::size_t>(2.0 * 8.0 * rho * static_cast<double>(m.scorable_numel())) + 16);
  }
}

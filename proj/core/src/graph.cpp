#include "dowser/graph.hpp"

#include <algorithm>
#include <cmath>

namespace dowser {

namespace {

constexpr double k_inv_sqrt2 = 0.70710678118654752440;
constexpr double k_inv_sqrt_2pi = 0.39894228040143267794;
constexpr double k_rms_eps = 1e-8;

void require(bool ok, const std::string& what) {
  if (!ok) throw config_error(what);
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * k_inv_sqrt2)); }

double gelu_derivative(double x) {
  const double phi = k_inv_sqrt_2pi * std::exp(-0.5 * x * x);
  const double cdf = 0.5 * (1.0 + std::erf(x * k_inv_sqrt2));
  return cdf + x * phi;
}

double silu_value(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return x * s;
}

double silu_derivative(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

const std::vector<std::string>& activations_supported() {
  static const std::vector<std::string> kinds = {"linear", "gelu", "silu", "glu"};
  return kinds;
}

std::size_t graph::check(node_id id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "graph: invalid node id");
  return static_cast<std::size_t>(id);
}

node_id graph::push(node n, const char* what) {
  n.value.check_finite(what);
  nodes_.push_back(std::move(n));
  return static_cast<node_id>(nodes_.size() - 1);
}

node_id graph::input(tensor value) {
  node n;
  n.op = op_kind::leaf;
  n.value = std::move(value);
  return push(std::move(n), "input");
}

node_id graph::param(const tensor& value) {
  node n;
  n.op = op_kind::leaf;
  n.value = value;
  n.value.grad.clear();
  return push(std::move(n), "param");
}

node_id graph::linear(node_id h, node_id w, node_id b) {
  const tensor& hv = value(h);
  const tensor& wv = value(w);
  require(wv.ndim() == 2, "linear: weight must be 2-D");
  const std::int64_t dout = wv.shape[0];
  const std::int64_t din = wv.shape[1];
  require(hv.cols() == din, "linear: input dim " + shape_string(hv.shape) +
                                " does not match weight " + shape_string(wv.shape));
  const std::int64_t rows = hv.rows();

  node n;
  n.op = op_kind::linear;
  n.a = h;
  n.b = w;
  n.c = b;
  n.value = hv.ndim() == 2 ? tensor::zeros({rows, dout}) : tensor::zeros({dout});
  const double* bias = nullptr;
  if (b != no_node) {
    const tensor& bv = value(b);
    require(bv.numel() == dout, "linear: bias length mismatch");
    bias = bv.data.data();
  }
  for (std::int64_t t = 0; t < rows; ++t) {
    const double* hrow = hv.data.data() + t * din;
    double* zrow = n.value.data.data() + t * dout;
    for (std::int64_t i = 0; i < dout; ++i) {
      const double* wrow = wv.data.data() + i * din;
      double acc = bias ? bias[i] : 0.0;
      for (std::int64_t j = 0; j < din; ++j) acc += wrow[j] * hrow[j];
      zrow[i] = acc;
    }
  }
  return push(std::move(n), "linear");
}

node_id graph::gelu(node_id x) {
  node n;
  n.op = op_kind::gelu;
  n.a = x;
  n.value = value(x);
  n.value.grad.clear();
  for (double& v : n.value.data) v = gelu_value(v);
  return push(std::move(n), "gelu");
}

node_id graph::silu(node_id x) {
  node n;
  n.op = op_kind::silu;
  n.a = x;
  n.value = value(x);
  n.value.grad.clear();
  for (double& v : n.value.data) v = silu_value(v);
  return push(std::move(n), "silu");
}

node_id graph::add(node_id a, node_id b) {
  const tensor& av = value(a);
  const tensor& bv = value(b);
  require(av.same_shape(bv), "add: shape mismatch");
  node n;
  n.op = op_kind::add;
  n.a = a;
  n.b = b;
  n.value = av;
  n.value.grad.clear();
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += bv.data[i];
  return push(std::move(n), "add");
}

node_id graph::mul(node_id a, node_id b) {
  const tensor& av = value(a);
  const tensor& bv = value(b);
  require(av.same_shape(bv), "mul: shape mismatch");
  node n;
  n.op = op_kind::mul;
  n.a = a;
  n.b = b;
  n.value = av;
  n.value.grad.clear();
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= bv.data[i];
  return push(std::move(n), "mul");
}

node_id graph::scale(node_id x, double c) {
  node n;
  n.op = op_kind::scale;
  n.a = x;
  n.scalar = c;
  n.value = value(x);
  n.value.grad.clear();
  for (double& v : n.value.data) v *= c;
  return push(std::move(n), "scale");
}

node_id graph::rms_norm(node_id x, node_id gain) {
  const tensor& xv = value(x);
  const tensor& gv = value(gain);
  const std::int64_t cols = xv.cols();
  require(gv.numel() == cols, "rms_norm: gain length mismatch");
  const std::int64_t rows = xv.rows();

  node n;
  n.op = op_kind::rms_norm;
  n.a = x;
  n.b = gain;
  n.value = xv;
  n.value.grad.clear();
  n.aux = tensor::zeros({rows});  // cached rms per row
  for (std::int64_t t = 0; t < rows; ++t) {
    const double* row = xv.data.data() + t * cols;
    double ss = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) ss += row[j] * row[j];
    const double rms = std::sqrt(ss / static_cast<double>(cols) + k_rms_eps);
    n.aux.at(t) = rms;
    double* out = n.value.data.data() + t * cols;
    for (std::int64_t j = 0; j < cols; ++j) out[j] = gv.data[static_cast<std::size_t>(j)] * row[j] / rms;
  }
  return push(std::move(n), "rms_norm");
}

node_id graph::matmul(node_id a, node_id b) {
  const tensor& av = value(a);
  const tensor& bv = value(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.shape[1] == bv.shape[0], "matmul: shape mismatch");
  const std::int64_t m = av.shape[0], k = av.shape[1], n_cols = bv.shape[1];
  node n;
  n.op = op_kind::matmul;
  n.a = a;
  n.b = b;
  n.value = tensor::zeros({m, n_cols});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = av.at(i, p);
      if (aip == 0.0) continue;
      const double* brow = bv.data.data() + p * n_cols;
      double* orow = n.value.data.data() + i * n_cols;
      for (std::int64_t j = 0; j < n_cols; ++j) orow[j] += aip * brow[j];
    }
  }
  return push(std::move(n), "matmul");
}

node_id graph::matmul_nt(node_id a, node_id b) {
  const tensor& av = value(a);
  const tensor& bv = value(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.shape[1] == bv.shape[1], "matmul_nt: shape mismatch");
  const std::int64_t m = av.shape[0], k = av.shape[1], n_rows = bv.shape[0];
  node n;
  n.op = op_kind::matmul_nt;
  n.a = a;
  n.b = b;
  n.value = tensor::zeros({m, n_rows});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = av.data.data() + i * k;
    for (std::int64_t j = 0; j < n_rows; ++j) {
      const double* brow = bv.data.data() + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      n.value.at(i, j) = acc;
    }
  }
  return push(std::move(n), "matmul_nt");
}

node_id graph::causal_softmax(node_id s) {
  const tensor& sv = value(s);
  require(sv.ndim() == 2 && sv.shape[0] == sv.shape[1], "causal_softmax: expects square scores");
  const std::int64_t t_len = sv.shape[0];
  node n;
  n.op = op_kind::causal_softmax;
  n.a = s;
  n.value = tensor::zeros({t_len, t_len});
  for (std::int64_t t = 0; t < t_len; ++t) {
    const double* row = sv.data.data() + t * t_len;
    double* out = n.value.data.data() + t * t_len;
    double mx = row[0];
    for (std::int64_t j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j <= t; ++j) {
      out[j] = std::exp(row[j] - mx);
      denom += out[j];
    }
    for (std::int64_t j = 0; j <= t; ++j) out[j] /= denom;
  }
  return push(std::move(n), "causal_softmax");
}

node_id graph::embedding(node_id table, std::vector<int> ids) {
  const tensor& ev = value(table);
  require(ev.ndim() == 2, "embedding: table must be 2-D");
  const std::int64_t vocab = ev.shape[0], dim = ev.shape[1];
  node n;
  n.op = op_kind::embedding;
  n.a = table;
  n.ids = std::move(ids);
  n.value = tensor::zeros({static_cast<std::int64_t>(n.ids.size()), dim});
  for (std::size_t t = 0; t < n.ids.size(); ++t) {
    require(n.ids[t] >= 0 && n.ids[t] < vocab, "embedding: token id out of range");
    std::copy_n(ev.data.data() + static_cast<std::int64_t>(n.ids[t]) * dim, dim,
                n.value.data.data() + static_cast<std::int64_t>(t) * dim);
  }
  return push(std::move(n), "embedding");
}

node_id graph::take_row(node_id x, std::int64_t row) {
  const tensor& xv = value(x);
  require(xv.ndim() == 2 && row >= 0 && row < xv.shape[0], "take_row: row out of range");
  node n;
  n.op = op_kind::take_row;
  n.a = x;
  n.index = row;
  n.value = tensor::zeros({xv.shape[1]});
  std::copy_n(xv.data.data() + row * xv.shape[1], xv.shape[1], n.value.data.data());
  return push(std::move(n), "take_row");
}

node_id graph::cross_entropy(node_id logits, std::vector<int> targets) {
  const tensor& lv = value(logits);
  require(lv.ndim() == 2, "cross_entropy: logits must be 2-D");
  require(static_cast<std::int64_t>(targets.size()) == lv.shape[0],
          "cross_entropy: one target per position");
  const std::int64_t t_len = lv.shape[0], vocab = lv.shape[1];

  node n;
  n.op = op_kind::cross_entropy;
  n.a = logits;
  n.ids = std::move(targets);
  n.aux = tensor::zeros({t_len, vocab});  // cached softmax rows for backward
  double total = 0.0;
  std::int64_t valid = 0;
  for (std::int64_t t = 0; t < t_len; ++t) {
    const int y = n.ids[static_cast<std::size_t>(t)];
    if (y < 0) continue;  // ignored position
    require(y < vocab, "cross_entropy: target out of range");
    const double* row = lv.data.data() + t * vocab;
    double mx = row[0];
    for (std::int64_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* soft = n.aux.data.data() + t * vocab;
    for (std::int64_t j = 0; j < vocab; ++j) {
      soft[j] = std::exp(row[j] - mx);
      denom += soft[j];
    }
    for (std::int64_t j = 0; j < vocab; ++j) soft[j] /= denom;
    total += std::log(denom) + mx - row[y];
    ++valid;
  }
  require(valid > 0, "cross_entropy: no valid targets");
  n.scalar = static_cast<double>(valid);
  n.value = tensor::from({1}, {total / static_cast<double>(valid)});
  return push(std::move(n), "cross_entropy");
}

node_id graph::mse(node_id pred, tensor target) {
  const tensor& pv = value(pred);
  require(pv.same_shape(target), "mse: target shape mismatch");
  node n;
  n.op = op_kind::mse;
  n.a = pred;
  n.aux = std::move(target);
  double total = 0.0;
  for (std::size_t i = 0; i < pv.data.size(); ++i) {
    const double d = pv.data[i] - n.aux.data[i];
    total += d * d;
  }
  n.value = tensor::from({1}, {total / static_cast<double>(pv.data.size())});
  return push(std::move(n), "mse");
}

void graph::backward(node_id output, const tensor& seed) {
  require(!nodes_.empty(), "backward: empty graph (run forward first)");
  const std::size_t out = check(output);
  require(nodes_[out].value.shape == seed.shape,
          "backward: seed shape " + shape_string(seed.shape) + " does not match output " +
              shape_string(nodes_[out].value.shape));
  seed.check_finite("backward seed");

  for (node& n : nodes_) {
    n.value.ensure_grad();
    n.value.zero_grad();
  }
  nodes_[out].value.grad = seed.data;

  for (std::size_t i = nodes_.size(); i-- > 0;) {
    backprop(nodes_[i]);
  }
}

void graph::backprop(const node& n) {
  const std::vector<double>& d = n.value.grad;
  switch (n.op) {
    case op_kind::leaf:
      return;
    case op_kind::linear: {
      const tensor& hv = nodes_[check(n.a)].value;
      const tensor& wv = nodes_[check(n.b)].value;
      tensor& h = nodes_[check(n.a)].value;
      tensor& w = nodes_[check(n.b)].value;
      const std::int64_t rows = hv.rows();
      const std::int64_t dout = wv.shape[0], din = wv.shape[1];
      for (std::int64_t t = 0; t < rows; ++t) {
        const double* drow = d.data() + t * dout;
        const double* hrow = hv.data.data() + t * din;
        double* hgrad = h.grad.data() + t * din;
        for (std::int64_t i = 0; i < dout; ++i) {
          const double di = drow[i];
          if (di == 0.0) continue;
          const double* wrow = wv.data.data() + i * din;
          double* wgrad = w.grad.data() + i * din;
          for (std::int64_t j = 0; j < din; ++j) {
            hgrad[j] += di * wrow[j];
            wgrad[j] += di * hrow[j];
          }
        }
      }
      if (n.c != no_node) {
        tensor& b = nodes_[check(n.c)].value;
        for (std::int64_t t = 0; t < rows; ++t) {
          const double* drow = d.data() + t * dout;
          for (std::int64_t i = 0; i < dout; ++i) b.grad[static_cast<std::size_t>(i)] += drow[i];
        }
      }
      return;
    }
    case op_kind::gelu: {
      tensor& x = nodes_[check(n.a)].value;
      for (std::size_t i = 0; i < d.size(); ++i) x.grad[i] += d[i] * gelu_derivative(x.data[i]);
      return;
    }
    case op_kind::silu: {
      tensor& x = nodes_[check(n.a)].value;
      for (std::size_t i = 0; i < d.size(); ++i) x.grad[i] += d[i] * silu_derivative(x.data[i]);
      return;
    }
    case op_kind::add: {
      tensor& a = nodes_[check(n.a)].value;
      tensor& b = nodes_[check(n.b)].value;
      for (std::size_t i = 0; i < d.size(); ++i) {
        a.grad[i] += d[i];
        b.grad[i] += d[i];
      }
      return;
    }
    case op_kind::mul: {
      tensor& a = nodes_[check(n.a)].value;
      tensor& b = nodes_[check(n.b)].value;
      for (std::size_t i = 0; i < d.size(); ++i) {
        a.grad[i] += d[i] * b.data[i];
        b.grad[i] += d[i] * a.data[i];
      }
      return;
    }
    case op_kind::scale: {
      tensor& x = nodes_[check(n.a)].value;
      for (std::size_t i = 0; i < d.size(); ++i) x.grad[i] += d[i] * n.scalar;
      return;
    }
    case op_kind::rms_norm: {
      tensor& x = nodes_[check(n.a)].value;
      tensor& g = nodes_[check(n.b)].value;
      const std::int64_t rows = x.rows(), cols = x.cols();
      for (std::int64_t t = 0; t < rows; ++t) {
        const double rms = n.aux.at(t);
        const double* xrow = x.data.data() + t * cols;
        const double* drow = d.data() + t * cols;
        double inner = 0.0;  // sum_i d_i g_i x_i
        for (std::int64_t j = 0; j < cols; ++j) inner += drow[j] * g.data[static_cast<std::size_t>(j)] * xrow[j];
        const double scale = inner / (static_cast<double>(cols) * rms * rms * rms);
        double* xgrad = x.grad.data() + t * cols;
        for (std::int64_t j = 0; j < cols; ++j) {
          xgrad[j] += drow[j] * g.data[static_cast<std::size_t>(j)] / rms - xrow[j] * scale;
          g.grad[static_cast<std::size_t>(j)] += drow[j] * xrow[j] / rms;
        }
      }
      return;
    }
    case op_kind::matmul: {
      tensor& a = nodes_[check(n.a)].value;
      tensor& b = nodes_[check(n.b)].value;
      const std::int64_t m = a.shape[0], k = a.shape[1], cols = b.shape[1];
      for (std::int64_t i = 0; i < m; ++i) {
        const double* drow = d.data() + i * cols;
        for (std::int64_t p = 0; p < k; ++p) {
          const double* brow = b.data.data() + p * cols;
          double* bgrad = b.grad.data() + p * cols;
          double acc = 0.0;
          const double aip = a.data[static_cast<std::size_t>(i * k + p)];
          for (std::int64_t j = 0; j < cols; ++j) {
            acc += drow[j] * brow[j];
            bgrad[j] += drow[j] * aip;
          }
          a.grad[static_cast<std::size_t>(i * k + p)] += acc;
        }
      }
      return;
    }
    case op_kind::matmul_nt: {
      tensor& a = nodes_[check(n.a)].value;
      tensor& b = nodes_[check(n.b)].value;
      const std::int64_t m = a.shape[0], k = a.shape[1], rows_b = b.shape[0];
      for (std::int64_t i = 0; i < m; ++i) {
        const double* drow = d.data() + i * rows_b;
        double* agrad = a.grad.data() + i * k;
        const double* arow = a.data.data() + i * k;
        for (std::int64_t j = 0; j < rows_b; ++j) {
          const double dij = drow[j];
          if (dij == 0.0) continue;
          const double* brow = b.data.data() + j * k;
          double* bgrad = b.grad.data() + j * k;
          for (std::int64_t p = 0; p < k; ++p) {
            agrad[p] += dij * brow[p];
            bgrad[p] += dij * arow[p];
          }
        }
      }
      return;
    }
    case op_kind::causal_softmax: {
      tensor& s = nodes_[check(n.a)].value;
      const std::int64_t t_len = s.shape[0];
      for (std::int64_t t = 0; t < t_len; ++t) {
        const double* p = n.value.data.data() + t * t_len;
        const double* dp = d.data() + t * t_len;
        double dot = 0.0;
        for (std::int64_t j = 0; j <= t; ++j) dot += dp[j] * p[j];
        double* sgrad = s.grad.data() + t * t_len;
        for (std::int64_t j = 0; j <= t; ++j) sgrad[j] += p[j] * (dp[j] - dot);
      }
      return;
    }
    case op_kind::embedding: {
      tensor& e = nodes_[check(n.a)].value;
      const std::int64_t dim = e.shape[1];
      for (std::size_t t = 0; t < n.ids.size(); ++t) {
        const double* drow = d.data() + static_cast<std::int64_t>(t) * dim;
        double* egrad = e.grad.data() + static_cast<std::int64_t>(n.ids[t]) * dim;
        for (std::int64_t j = 0; j < dim; ++j) egrad[j] += drow[j];
      }
      return;
    }
    case op_kind::take_row: {
      tensor& x = nodes_[check(n.a)].value;
      double* xgrad = x.grad.data() + n.index * x.shape[1];
      for (std::size_t j = 0; j < d.size(); ++j) xgrad[j] += d[j];
      return;
    }
    case op_kind::cross_entropy: {
      tensor& logits = nodes_[check(n.a)].value;
      const std::int64_t t_len = logits.shape[0], vocab = logits.shape[1];
      const double dl = d[0] / n.scalar;
      for (std::int64_t t = 0; t < t_len; ++t) {
        const int y = n.ids[static_cast<std::size_t>(t)];
        if (y < 0) continue;
        const double* soft = n.aux.data.data() + t * vocab;
        double* lgrad = logits.grad.data() + t * vocab;
        for (std::int64_t j = 0; j < vocab; ++j) lgrad[j] += dl * (soft[j] - (j == y ? 1.0 : 0.0));
      }
      return;
    }
    case op_kind::mse: {
      tensor& pred = nodes_[check(n.a)].value;
      const double dl = d[0] * 2.0 / static_cast<double>(pred.data.size());
      for (std::size_t i = 0; i < pred.data.size(); ++i)
        pred.grad[i] += dl * (pred.data[i] - n.aux.data[i]);
      return;
    }
  }
}

}  // namespace dowser

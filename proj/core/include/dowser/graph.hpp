#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dowser/tensor.hpp"

namespace dowser {

using node_id = std::int32_t;
inline constexpr node_id no_node = -1;

enum class op_kind : std::uint8_t {
  leaf,            // input or parameter, no backward of its own
  linear,          // z = h W^T (+ b), h [T,din] or [din], W [dout,din], b [dout]
  gelu,            // exact erf formulation
  silu,            // x * sigmoid(x)
  add,             // elementwise
  mul,             // elementwise (GLU-style gating)
  scale,           // x * constant
  rms_norm,        // per-row x / rms(x) * gain
  matmul,          // [m,k] x [k,n]
  matmul_nt,       // a b^T: [m,k] x [n,k]
  causal_softmax,  // row-wise softmax over columns <= row index
  embedding,       // gather rows of E by token id
  take_row,        // single row of a 2-D tensor
  cross_entropy,   // mean NLL over positions with target >= 0
  mse              // mean squared error against a constant target
};

// Define-by-run tape. Values are computed eagerly as nodes are appended, so
// building the graph *is* the forward pass; backward replays the tape in
// reverse. A graph instance is single-owner and is rebuilt per forward call.
class graph {
 public:
  // Leaves. Parameters are copied in; gradients are read back per node.
  node_id input(tensor value);
  node_id param(const tensor& value);

  node_id linear(node_id h, node_id w, node_id b = no_node);
  node_id gelu(node_id x);
  node_id silu(node_id x);
  node_id add(node_id a, node_id b);
  node_id mul(node_id a, node_id b);
  node_id scale(node_id x, double c);
  node_id rms_norm(node_id x, node_id gain);
  node_id matmul(node_id a, node_id b);
  node_id matmul_nt(node_id a, node_id b);
  node_id causal_softmax(node_id s);
  node_id embedding(node_id table, std::vector<int> ids);
  node_id take_row(node_id x, std::int64_t row);
  node_id cross_entropy(node_id logits, std::vector<int> targets);
  node_id mse(node_id pred, tensor target);

  const tensor& value(node_id id) const { return nodes_[check(id)].value; }
  const std::vector<double>& grad(node_id id) const { return nodes_[check(id)].value.grad; }
  std::size_t size() const { return nodes_.size(); }

  // Populates grad(v) = d(seed . output)/dv for every node on the tape.
  // Repeatable: each call zeroes gradients first. Throws if the graph is
  // empty or the seed shape differs from the output shape.
  void backward(node_id output, const tensor& seed);

  // Convenience for scalar outputs (loss nodes).
  void backward(node_id output) { backward(output, tensor::from({1}, {1.0})); }

 private:
  struct node {
    op_kind op = op_kind::leaf;
    node_id a = no_node;
    node_id b = no_node;
    node_id c = no_node;
    tensor value;
    double scalar = 0.0;        // scale factor
    std::int64_t index = 0;     // take_row index
    std::vector<int> ids;       // embedding / cross_entropy token ids
    tensor aux;                 // op-specific cache (rms values, softmax, mse target)
  };

  std::size_t check(node_id id) const;
  node_id push(node n, const char* what);
  void backprop(const node& n);

  std::vector<node> nodes_;
};

// Activation kinds the graph exports, by name. Stable list; "linear" is the
// identity map, "glu" names the gated (elementwise product) block style.
const std::vector<std::string>& activations_supported();

// Scalar activation evaluation + derivatives, shared with tests.
double gelu_value(double x);
double gelu_derivative(double x);
double silu_value(double x);
double silu_derivative(double x);

}  // namespace dowser

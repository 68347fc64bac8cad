#pragma once

// Reverse-mode automatic differentiation over dense float64 matrices, plus a
// decoupled-weight-decay Adam optimizer. A Tape records one forward pass; Var
// is a cheap handle into it. Every op validates shapes and checks its output
// for NaN/Inf. A recording supports exactly one backward() call.
//
// The op set is deliberately small: what the fixed model architectures in this
// project need, nothing speculative.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "botarena/util.hpp"

namespace botarena::diffmath {

class Tape;

class Var {
 public:
  Var() = default;
  bool defined() const { return tape_ != nullptr; }
  int rows() const;
  int cols() const;
  std::size_t size() const { return static_cast<std::size_t>(rows()) * cols(); }
  const std::vector<double>& value() const;
  // Gradient of the loss w.r.t. this node; valid after Tape::backward, and
  // only for nodes on a path from a differentiable leaf to the loss.
  const std::vector<double>& grad() const;
  double scalar_value() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t idx) : tape_(tape), idx_(idx) {}
  Tape* tape_ = nullptr;
  std::size_t idx_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. input() copies the data in; constant() never receives gradient.
  Var input(int rows, int cols, std::span<const double> values, bool requires_grad);
  Var constant(int rows, int cols, std::span<const double> values);
  Var scalar(double v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);            // same shape
  Var add_rowvec(Var m, Var row);   // broadcast a 1 x c row over every row of m
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);            // elementwise
  Var scale(Var a, double c);
  Var concat_cols(std::span<const Var> parts);
  Var leaky_relu(Var a, double negative_slope);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var log(Var a);
  Var log_sigmoid(Var a);
  Var softmax_rows(Var a);
  Var log_softmax_rows(Var a);
  Var sum_all(Var a);    // 1x1
  Var mean_all(Var a);   // 1x1
  // Inverted dropout with an externally supplied 0/1 mask: out = a*mask/(1-p).
  // The mask is part of the call so training is reproducible by construction.
  Var dropout(Var a, std::span<const double> mask, double p);
  // out[i, :] = a[rows[i], :]; duplicate indices allowed (grads accumulate).
  Var gather_rows(Var a, std::span<const int> row_index);
  // out[i, 0] = a[i, cols[i]].
  Var pick_per_row(Var a, std::span<const int> col_index);
  // a is n x 1; out[s, 0] = sum of a[i, 0] with segment_of_row[i] == s.
  Var segment_sum(Var a, std::span<const int> segment_of_row, int n_segments);
  // out[v, :] = mean of h[u, :] over u in nbrs[v]; zero row when empty.
  Var neighbor_mean(Var h, const std::vector<std::vector<int>>& nbrs);

  // Seeds d(loss)/d(loss) = 1 and runs the recorded adjoints in reverse.
  // loss must be 1x1. A second call on the same tape is an error.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<double> val;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void()> back;  // empty for leaves
  };

  Node& node(std::size_t i) { return nodes_[i]; }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  Var make_node(int rows, int cols, bool needs_grad, const char* op);
  void check_same_tape(Var v, const char* op) const;
  void check_finite(std::size_t idx, const char* op) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
// Moments are kept per named parameter; each name carries its own step count.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  void step(const std::string& name, std::span<double> param, std::span<const double> grad);

  void reset() { slots_.clear(); }

 private:
  struct Slot {
    std::vector<double> m, v;
    std::int64_t t = 0;
  };
  AdamConfig cfg_;
  std::vector<std::pair<std::string, Slot>> slots_;
};

}  // namespace botarena::diffmath

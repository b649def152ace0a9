#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Var is a handle to a graph node. Operations on Vars record a node holding
// the forward value, references to the parent nodes and a closure that pushes
// the node's gradient into its parents. Nodes are shared, so the graph lives as
// long as some Var still refers to its tail. Leaves created with
// `parameter()` accumulate gradients across calls to `backward()` until
// `zero_grad()`.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dmha/tensor.hpp"

namespace dmha::ad {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  bool has_grad() const;
  // Returns the gradient buffer, allocating zeros on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  // Mutable access for optimizers and finite-difference probes.
  Tensor& mutable_value() { return node_->value; }
  // Gradient after backward(); zeros of value's shape if never reached.
  Tensor grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  const char* op() const { return node_->op; }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// While alive, operations on this thread record no graph: results are plain
// constants even when their inputs require grad.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Records an operation defined outside this file. `backward_fn` receives the
// new node and must accumulate into the grad_buffer() of every parent that
// requires grad. Parents and the closure are dropped when no parent requires
// grad.
Var custom_op(Tensor value, std::vector<std::shared_ptr<Node>> parents, const char* op,
              std::function<void(Node&)> backward_fn);

// Nodes reachable from `root` in topological order (parents before children).
// Each node appears exactly once.
std::vector<Node*> topological_order(const Var& root);

// Seeds d(loss)/d(loss) = 1 and propagates to every node that requires grad.
// The loss must hold exactly one element.
void backward(const Var& loss);

// Linear algebra on rank-2 tensors.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise; shapes must match exactly.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var relu(const Var& a);

// x[m,n] + bias[n] broadcast over rows.
Var add_row_bias(const Var& x, const Var& bias);

// Same data under a new shape with equal element count.
Var reshape(const Var& a, Shape shape);

// Sum of all elements as a rank-0 tensor.
Var sum(const Var& a);
Var mean(const Var& a);

// Rank-2 structural ops. Axis 0 stacks/slices rows, axis 1 columns.
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);

// Softmax of a rank-1 or rank-2 tensor along `axis`, with max subtraction.
Var softmax(const Var& z, std::size_t axis);

// 3x3 convolution, stride 1, zero padding 1. x is [C,H,W], w is [O,C,3,3],
// bias (optional, may be undefined) is [O]. Output is [O,H,W].
Var conv2d_same(const Var& x, const Var& w, const Var& bias = Var{});

// 2x2 max pooling with stride 2 on [C,H,W]; odd trailing rows/columns are
// dropped. Ties resolve to the first cell in row-major window order.
Var maxpool2x2(const Var& x);

// [C,T,F] -> [T, C*F], channel index varying slowest within a row.
Var flatten_channels(const Var& x);

enum class BatchNormMode { kTrain, kEval };

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

// Per-feature batch normalization of x [B,F]. Training mode uses the batch
// mean and biased variance and updates the running statistics with
// `momentum` (unbiased variance, as is conventional). Evaluation mode uses the
// running statistics.
Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
              BatchNormMode mode, double momentum = 0.1, double eps = 1e-5);

// Rows (or columns) divided by max(norm, eps).
Var l2_normalize_rows(const Var& x, double eps = 1e-12);
Var l2_normalize_cols(const Var& x, double eps = 1e-12);

// While alive, records which side of every ReLU and max-pool decision the
// forward passes on this thread take. Two forward passes with equal
// signatures lie on the same smooth piece of the function.
class KinkTrace {
 public:
  KinkTrace();
  ~KinkTrace();
  KinkTrace(const KinkTrace&) = delete;
  KinkTrace& operator=(const KinkTrace&) = delete;

  std::uint64_t signature() const { return hash_; }
  void reset() { hash_ = kSeed; }
  void record(std::uint64_t decision);

 private:
  static constexpr std::uint64_t kSeed = 0xcbf29ce484222325ULL;
  KinkTrace* previous_;
  std::uint64_t hash_ = kSeed;
};

// Relative error used by all gradient checks:
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double relative_error(double analytic, double numeric);

// Central-difference check of a scalar function of one tensor.
// Returns the largest relative error over all coordinates.
double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                  double eps = 1e-5);

// Central-difference check of `loss` with respect to the given leaves. The
// leaves are perturbed in place and restored. When `max_coords_per_leaf` is
// nonzero, only that many coordinates per leaf are probed (evenly strided).
double grad_check_leaves(const std::function<Var()>& loss, std::span<Var> leaves,
                         double eps = 1e-5, std::size_t max_coords_per_leaf = 0);

// As above, but probes whose +-eps evaluations switch a ReLU or max-pool
// decision relative to the unperturbed point are excluded (a central
// difference across a kink estimates neither one-sided derivative).
struct GradCheckStats {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes straddling a kink
};
GradCheckStats grad_check_smooth(const std::function<Var()>& loss, std::span<Var> leaves,
                                 double eps = 1e-5, std::size_t max_coords_per_leaf = 0);

}  // namespace dmha::ad

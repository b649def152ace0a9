#include "dmha/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace dmha::ad {
namespace {

using NodePtr = std::shared_ptr<Node>;

thread_local bool grad_enabled = true;
thread_local KinkTrace* active_trace = nullptr;

Var make_result(Tensor value, std::vector<NodePtr> parents, const char* op,
                std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->requires_grad =
      grad_enabled && std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  require(v.defined(), std::string(op) + ": undefined operand");
  require(v.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_str(v.shape()));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

bool Node::has_grad() const {
  return grad.size() == value.size() && grad.shape() == value.shape();
}

Tensor& Node::grad_buffer() {
  if (!has_grad()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Tensor Var::grad() const {
  if (!node_->has_grad()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

void Var::zero_grad() { node_->grad = Tensor(); }

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }

NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

Var custom_op(Tensor value, std::vector<std::shared_ptr<Node>> parents, const char* op,
              std::function<void(Node&)> backward_fn) {
  return make_result(std::move(value), std::move(parents), op, std::move(backward_fn));
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

std::vector<Node*> topological_order(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; deep graphs must not blow the stack.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Var& loss) {
  require(loss.defined(), "backward: undefined loss");
  require(loss.value().size() == 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                 " x " + shape_str(b.shape()));
  Tensor out({m, n}, 0.0);
  const double* A = a.value().data();
  const double* B = b.value().data();
  double* C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return make_result(std::move(out), {a.node(), b.node()}, "matmul", [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      // dA = G * B^T
      double* dA = pa.grad_buffer().data();
      const double* B = pb.value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          dA[i * k + p] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      // dB = A^T * G
      double* dB = pb.grad_buffer().data();
      const double* A = pa.value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
        }
      }
    }
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
  return make_result(std::move(out), {a.node()}, "transpose", [r, c](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g.at(i, j) += self.grad.at(j, i);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a.node(), b.node()}, "add", [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a.node(), b.node()}, "sub", [](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a.node(), b.node()}, "mul", [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return make_result(std::move(out), {a.node()}, "scale", [factor](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  if (active_trace)
    for (double v : out.values()) active_trace->record(v > 0.0);
  return make_result(std::move(out), {a.node()}, "relu", [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const Tensor& x = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) g[i] += self.grad[i];
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  require(bias.shape()[0] == n, "add_row_bias: bias " + shape_str(bias.shape()) +
                                    " does not match " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bias.value()[j];
  return make_result(std::move(out), {x.node(), bias.node()}, "add_row_bias", [m, n](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a.node()}, "reshape", [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return make_result(Tensor::scalar(total), {a.node()}, "sum", [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (double& v : g.values()) v += self.grad[0];
  });
}

Var mean(const Var& a) {
  require(a.value().size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), "concat: no operands");
  const std::size_t rank = parts[0].value().rank();
  require(rank == 1 || rank == 2, "concat: rank-1 or rank-2 operands only");
  require(axis < rank, "concat: axis out of range");
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.value().rank() == rank, "concat: rank mismatch");
    if (rank == 2) {
      const std::size_t other = 1 - axis;
      require(p.shape()[other] == parts[0].shape()[other],
              "concat: extent mismatch " + shape_str(p.shape()) + " vs " +
                  shape_str(parts[0].shape()));
    }
    extents.push_back(p.shape()[axis]);
    total += p.shape()[axis];
    nodes.push_back(p.node());
  }
  Shape shape = parts[0].shape();
  shape[axis] = total;
  Tensor out(shape);
  // Copy plan: for axis 0 (or rank 1) parts are contiguous blocks; for axis 1
  // each output row interleaves the parts' rows.
  const std::size_t rows = (rank == 2 && axis == 1) ? shape[0] : 1;
  const std::size_t out_stride = out.size() / rows;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.value().size() / rows;
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.value().data() + r * block, block, out.data() + r * out_stride + offset);
    offset += block;
  }
  return make_result(std::move(out), std::move(nodes), "concat",
                     [rows, out_stride, offsets](Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Node& p = *self.parents[k];
                         if (!p.requires_grad) continue;
                         Tensor& g = p.grad_buffer();
                         const std::size_t block = g.size() / rows;
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < block; ++i)
                             g[r * block + i] += self.grad[r * out_stride + offsets[k] + i];
                       }
                     });
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  const std::size_t rank = a.value().rank();
  require(rank == 1 || rank == 2, "slice: rank-1 or rank-2 operand only");
  require(axis < rank, "slice: axis out of range");
  require(start + length <= a.shape()[axis],
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") exceeds extent " + std::to_string(a.shape()[axis]));
  Shape shape = a.shape();
  shape[axis] = length;
  Tensor out(shape);
  const std::size_t rows = (rank == 2 && axis == 1) ? shape[0] : 1;
  const std::size_t in_stride = a.value().size() / rows;
  const std::size_t inner = (rank == 2 && axis == 0) ? shape[1] : 1;
  const std::size_t block = length * inner;
  const std::size_t offset = start * inner;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.value().data() + r * in_stride + offset, block, out.data() + r * block);
  return make_result(std::move(out), {a.node()}, "slice",
                     [rows, in_stride, block, offset](Node& self) {
                       Tensor& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < block; ++i)
                           g[r * in_stride + offset + i] += self.grad[r * block + i];
                     });
}

namespace {

// Layout of a softmax over one axis: `groups` independent vectors of
// `length` elements at `stride` apart; group g starts at base(g).
struct AxisLayout {
  std::size_t groups, length, stride;
  std::size_t base(std::size_t g) const { return stride == 1 ? g * length : g; }
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (shape.size() == 1) return {1, shape[0], 1};
  if (axis == 1) return {shape[0], shape[1], 1};
  return {shape[1], shape[0], shape[1]};
}

}  // namespace

Var softmax(const Var& z, std::size_t axis) {
  const std::size_t rank = z.value().rank();
  require(rank == 1 || rank == 2, "softmax: rank-1 or rank-2 operand only");
  require(axis < rank, "softmax: axis out of range");
  const AxisLayout lay = axis_layout(z.shape(), axis);
  Tensor out(z.shape());
  const Tensor& in = z.value();
  for (std::size_t g = 0; g < lay.groups; ++g) {
    const std::size_t b = lay.base(g);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < lay.length; ++i) mx = std::max(mx, in[b + i * lay.stride]);
    double total = 0.0;
    for (std::size_t i = 0; i < lay.length; ++i) {
      const double e = std::exp(in[b + i * lay.stride] - mx);
      out[b + i * lay.stride] = e;
      total += e;
    }
    for (std::size_t i = 0; i < lay.length; ++i) out[b + i * lay.stride] /= total;
  }
  return make_result(std::move(out), {z.node()}, "softmax", [lay](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const Tensor& y = self.value;
    for (std::size_t k = 0; k < lay.groups; ++k) {
      const std::size_t b = lay.base(k);
      double dot = 0.0;
      for (std::size_t i = 0; i < lay.length; ++i) {
        const std::size_t idx = b + i * lay.stride;
        dot += self.grad[idx] * y[idx];
      }
      for (std::size_t i = 0; i < lay.length; ++i) {
        const std::size_t idx = b + i * lay.stride;
        g[idx] += y[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

Var conv2d_same(const Var& x, const Var& w, const Var& bias) {
  require_rank(x, 3, "conv2d_same");
  require_rank(w, 4, "conv2d_same");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t O = w.shape()[0];
  require(w.shape()[1] == C, "conv2d_same: kernel expects " + std::to_string(w.shape()[1]) +
                                 " input channels, input has " + std::to_string(C));
  require(w.shape()[2] == 3 && w.shape()[3] == 3,
          "conv2d_same: only 3x3 kernels supported, got " + shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_rank(bias, 1, "conv2d_same");
    require(bias.shape()[0] == O, "conv2d_same: bias has " + std::to_string(bias.shape()[0]) +
                                      " entries for " + std::to_string(O) + " channels");
  }

  // For kernel column kx the valid output columns are [x_lo, x_hi) and the
  // input column is x + kx - 1.
  auto col_range = [W](std::size_t kx) -> std::pair<std::size_t, std::size_t> {
    const std::size_t lo = kx == 0 ? 1 : 0;
    const std::size_t hi = kx == 2 ? W - 1 : W;
    return {lo, std::max(lo, hi)};
  };

  Tensor out({O, H, W}, 0.0);
  const double* in = x.value().data();
  const double* ker = w.value().data();
  for (std::size_t o = 0; o < O; ++o) {
    double* op = out.data() + o * H * W;
    if (has_bias) std::fill_n(op, H * W, bias.value()[o]);
    for (std::size_t c = 0; c < C; ++c) {
      const double* ip = in + c * H * W;
      const double* k = ker + (o * C + c) * 9;
      for (std::size_t y = 0; y < H; ++y) {
        double* orow = op + y * W;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          if ((y == 0 && ky == 0) || (y + 1 == H && ky == 2)) continue;
          const double* irow = ip + (y + ky - 1) * W;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double wv = k[ky * 3 + kx];
            const auto [lo, hi] = col_range(kx);
            const double* src = irow + kx - 1;
            for (std::size_t xx = lo; xx < hi; ++xx) orow[xx] += wv * src[xx];
          }
        }
      }
    }
  }

  std::vector<NodePtr> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_result(
      std::move(out), std::move(parents), "conv2d_same",
      [C, H, W, O, has_bias, col_range](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        const double* G = self.grad.data();
        if (has_bias && self.parents[2]->requires_grad) {
          Tensor& gb = self.parents[2]->grad_buffer();
          for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < H * W; ++i) acc += G[o * H * W + i];
            gb[o] += acc;
          }
        }
        std::vector<double> partial(W);
        if (pw.requires_grad) {
          double* gw = pw.grad_buffer().data();
          const double* in = px.value.data();
          for (std::size_t o = 0; o < O; ++o) {
            const double* gp = G + o * H * W;
            for (std::size_t c = 0; c < C; ++c) {
              const double* ip = in + c * H * W;
              for (std::size_t ky = 0; ky < 3; ++ky) {
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const auto [lo, hi] = col_range(kx);
                  std::fill(partial.begin(), partial.end(), 0.0);
                  for (std::size_t y = 0; y < H; ++y) {
                    if ((y == 0 && ky == 0) || (y + 1 == H && ky == 2)) continue;
                    const double* irow = ip + (y + ky - 1) * W + kx - 1;
                    const double* grow = gp + y * W;
                    for (std::size_t xx = lo; xx < hi; ++xx) partial[xx] += grow[xx] * irow[xx];
                  }
                  double acc = 0.0;
                  for (std::size_t xx = lo; xx < hi; ++xx) acc += partial[xx];
                  gw[(o * C + c) * 9 + ky * 3 + kx] += acc;
                }
              }
            }
          }
        }
        if (px.requires_grad) {
          double* gx = px.grad_buffer().data();
          const double* ker = pw.value.data();
          for (std::size_t o = 0; o < O; ++o) {
            const double* gp = G + o * H * W;
            for (std::size_t c = 0; c < C; ++c) {
              double* xp = gx + c * H * W;
              const double* k = ker + (o * C + c) * 9;
              for (std::size_t y = 0; y < H; ++y) {
                const double* grow = gp + y * W;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                  if ((y == 0 && ky == 0) || (y + 1 == H && ky == 2)) continue;
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    const double wv = k[ky * 3 + kx];
                    const auto [lo, hi] = col_range(kx);
                    double* dst = xp + (y + ky - 1) * W + kx - 1;
                    for (std::size_t xx = lo; xx < hi; ++xx) dst[xx] += wv * grow[xx];
                  }
                }
              }
            }
          }
        }
      });
}

Var maxpool2x2(const Var& x) {
  require_rank(x, 3, "maxpool2x2");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  require(H >= 2 && W >= 2, "maxpool2x2: spatial extent " + shape_str(x.shape()) +
                                " is below the 2x2 window");
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({C, Ho, Wo});
  std::vector<std::size_t> argmax(C * Ho * Wo);
  const double* in = x.value().data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const std::size_t base = c * H * W + 2 * y * W + 2 * xx;
        const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
        std::size_t best = cand[0];
        for (std::size_t i = 1; i < 4; ++i)
          if (in[cand[i]] > in[best]) best = cand[i];
        const std::size_t o = (c * Ho + y) * Wo + xx;
        out[o] = in[best];
        argmax[o] = best;
        if (active_trace) active_trace->record(best - base);
      }
    }
  }
  return make_result(std::move(out), {x.node()}, "maxpool2x2",
                     [argmax = std::move(argmax)](Node& self) {
                       Tensor& g = self.parents[0]->grad_buffer();
                       for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                     });
}

Var flatten_channels(const Var& x) {
  require_rank(x, 3, "flatten_channels");
  const std::size_t C = x.shape()[0], T = x.shape()[1], F = x.shape()[2];
  Tensor out({T, C * F});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) out[t * C * F + c * F + f] = x.value()[(c * T + t) * F + f];
  return make_result(std::move(out), {x.node()}, "flatten_channels", [C, T, F](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < F; ++f) g[(c * T + t) * F + f] += self.grad[t * C * F + c * F + f];
  });
}

Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
              BatchNormMode mode, double momentum, double eps) {
  require_rank(x, 2, "batchnorm");
  const std::size_t B = x.shape()[0], F = x.shape()[1];
  require(gamma.shape() == Shape{F} && beta.shape() == Shape{F},
          "batchnorm: affine parameters must have shape " + shape_str({F}));
  require(stats.running_mean.shape() == Shape{F} && stats.running_var.shape() == Shape{F},
          "batchnorm: running statistics must have shape " + shape_str({F}));
  std::vector<double> mu(F, 0.0), inv_std(F, 0.0);
  if (mode == BatchNormMode::kTrain) {
    require(B >= 2, "batchnorm: training mode needs a batch of at least 2, got " +
                        std::to_string(B));
    std::vector<double> var(F, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f) mu[f] += x.value().at(b, f);
    for (double& m : mu) m /= static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f) {
        const double d = x.value().at(b, f) - mu[f];
        var[f] += d * d;
      }
    const double unbias = static_cast<double>(B) / static_cast<double>(B - 1);
    for (std::size_t f = 0; f < F; ++f) {
      var[f] /= static_cast<double>(B);
      inv_std[f] = 1.0 / std::sqrt(var[f] + eps);
      stats.running_mean[f] = (1.0 - momentum) * stats.running_mean[f] + momentum * mu[f];
      stats.running_var[f] = (1.0 - momentum) * stats.running_var[f] + momentum * var[f] * unbias;
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) {
      mu[f] = stats.running_mean[f];
      inv_std[f] = 1.0 / std::sqrt(stats.running_var[f] + eps);
    }
  }
  Tensor xhat({B, F});
  Tensor out({B, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f) {
      xhat.at(b, f) = (x.value().at(b, f) - mu[f]) * inv_std[f];
      out.at(b, f) = gamma.value()[f] * xhat.at(b, f) + beta.value()[f];
    }
  const bool train = mode == BatchNormMode::kTrain;
  return make_result(
      std::move(out), {x.node(), gamma.node(), beta.node()}, "batchnorm",
      [B, F, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const Tensor& G = self.grad;
        std::vector<double> sum_g(F, 0.0), sum_gx(F, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t f = 0; f < F; ++f) {
            sum_g[f] += G.at(b, f);
            sum_gx[f] += G.at(b, f) * xhat.at(b, f);
          }
        if (pg.requires_grad) {
          Tensor& g = pg.grad_buffer();
          for (std::size_t f = 0; f < F; ++f) g[f] += sum_gx[f];
        }
        if (pb.requires_grad) {
          Tensor& g = pb.grad_buffer();
          for (std::size_t f = 0; f < F; ++f) g[f] += sum_g[f];
        }
        if (px.requires_grad) {
          Tensor& g = px.grad_buffer();
          const double n = static_cast<double>(B);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f) {
              const double k = pg.value[f] * inv_std[f];
              if (train) {
                g.at(b, f) += k * (G.at(b, f) - sum_g[f] / n - xhat.at(b, f) * sum_gx[f] / n);
              } else {
                g.at(b, f) += k * G.at(b, f);
              }
            }
        }
      });
}

namespace {

// Normalizes `count` vectors of `length` elements, element i of vector v at
// base(v) + i * stride.
Var l2_normalize(const Var& x, AxisLayout lay, double eps, const char* op) {
  Tensor out = x.value();
  std::vector<double> norms(lay.groups);
  for (std::size_t g = 0; g < lay.groups; ++g) {
    const std::size_t b = lay.base(g);
    double ss = 0.0;
    for (std::size_t i = 0; i < lay.length; ++i) ss += out[b + i * lay.stride] * out[b + i * lay.stride];
    norms[g] = std::sqrt(ss);
    const double denom = std::max(norms[g], eps);
    for (std::size_t i = 0; i < lay.length; ++i) out[b + i * lay.stride] /= denom;
  }
  return make_result(std::move(out), {x.node()}, op, [lay, eps, norms](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const Tensor& y = self.value;
    for (std::size_t k = 0; k < lay.groups; ++k) {
      const std::size_t b = lay.base(k);
      if (norms[k] > eps) {
        double dot = 0.0;
        for (std::size_t i = 0; i < lay.length; ++i) {
          const std::size_t idx = b + i * lay.stride;
          dot += y[idx] * self.grad[idx];
        }
        for (std::size_t i = 0; i < lay.length; ++i) {
          const std::size_t idx = b + i * lay.stride;
          g[idx] += (self.grad[idx] - y[idx] * dot) / norms[k];
        }
      } else {
        for (std::size_t i = 0; i < lay.length; ++i) {
          const std::size_t idx = b + i * lay.stride;
          g[idx] += self.grad[idx] / eps;
        }
      }
    }
  });
}

}  // namespace

Var l2_normalize_rows(const Var& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  return l2_normalize(x, axis_layout(x.shape(), 1), eps, "l2_normalize_rows");
}

Var l2_normalize_cols(const Var& x, double eps) {
  require_rank(x, 2, "l2_normalize_cols");
  return l2_normalize(x, axis_layout(x.shape(), 0), eps, "l2_normalize_cols");
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

KinkTrace::KinkTrace() : previous_(active_trace) { active_trace = this; }

KinkTrace::~KinkTrace() { active_trace = previous_; }

void KinkTrace::record(std::uint64_t decision) {
  hash_ = (hash_ ^ (decision + 0x9e3779b97f4a7c15ULL)) * 0x100000001b3ULL;
  hash_ ^= hash_ >> 29;
}

double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps) {
  std::vector<Var> leaves{parameter(x)};
  Var leaf = leaves[0];
  return grad_check_leaves([&] { return f(leaf); }, leaves, eps);
}

double grad_check_leaves(const std::function<Var()>& loss, std::span<Var> leaves, double eps,
                         std::size_t max_coords_per_leaf) {
  for (Var& leaf : leaves) leaf.zero_grad();
  backward(loss());
  std::vector<Tensor> analytic;
  for (const Var& leaf : leaves) analytic.push_back(leaf.grad());
  auto eval = [&] { return loss().value()[0]; };

  double worst = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor& v = leaves[l].mutable_value();
    const std::size_t n = v.size();
    const std::size_t probes = max_coords_per_leaf == 0 ? n : std::min(n, max_coords_per_leaf);
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t i = probes == n ? p : (p * n) / probes + (n / probes) / 2;
      const double saved = v[i];
      v[i] = saved + eps;
      const double up = eval();
      v[i] = saved - eps;
      const double down = eval();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, relative_error(analytic[l][i], numeric));
    }
  }
  for (Var& leaf : leaves) leaf.zero_grad();
  return worst;
}

GradCheckStats grad_check_smooth(const std::function<Var()>& loss, std::span<Var> leaves,
                                 double eps, std::size_t max_coords_per_leaf) {
  KinkTrace trace;
  for (Var& leaf : leaves) leaf.zero_grad();
  backward(loss());
  const std::uint64_t base = trace.signature();
  std::vector<Tensor> analytic;
  for (const Var& leaf : leaves) analytic.push_back(leaf.grad());
  auto eval = [&](std::uint64_t& sig) {
    trace.reset();
    const double v = loss().value()[0];
    sig = trace.signature();
    return v;
  };

  GradCheckStats stats;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor& v = leaves[l].mutable_value();
    const std::size_t n = v.size();
    const std::size_t probes = max_coords_per_leaf == 0 ? n : std::min(n, max_coords_per_leaf);
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t i = probes == n ? p : (p * n) / probes + (n / probes) / 2;
      const double saved = v[i];
      std::uint64_t sig_up = 0, sig_down = 0;
      v[i] = saved + eps;
      const double up = eval(sig_up);
      v[i] = saved - eps;
      const double down = eval(sig_down);
      v[i] = saved;
      if (sig_up != base || sig_down != base) {
        ++stats.skipped;
        continue;
      }
      ++stats.checked;
      stats.max_rel_err = std::max(stats.max_rel_err, relative_error(analytic[l][i], (up - down) / (2.0 * eps)));
    }
  }
  for (Var& leaf : leaves) leaf.zero_grad();
  return stats;
}

}  // namespace dmha::ad

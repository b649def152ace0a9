#include "dmha/pooling.hpp"

#include <cmath>
#include <stdexcept>

#include "dmha/rng.hpp"

namespace dmha {

std::string_view to_string(PoolingKind kind) {
  switch (kind) {
    case PoolingKind::kAttention: return "attention";
    case PoolingKind::kMha: return "mha";
    case PoolingKind::kDoubleMha: return "dmha";
  }
  return "?";
}

PoolingKind parse_pooling_kind(std::string_view name) {
  if (name == "attention") return PoolingKind::kAttention;
  if (name == "mha") return PoolingKind::kMha;
  if (name == "dmha") return PoolingKind::kDoubleMha;
  throw std::invalid_argument("unknown pooling kind '" + std::string(name) +
                              "' (expected attention, mha or dmha)");
}

namespace {

void check_heads(std::size_t input_dim, std::size_t heads) {
  if (heads == 0 || input_dim % heads != 0) {
    throw std::invalid_argument("pooling: " + std::to_string(heads) +
                                " heads do not divide hidden dimension " +
                                std::to_string(input_dim));
  }
}

void check_sequence(const ad::Var& h, const ad::Var& u, std::size_t heads) {
  if (h.shape().size() != 2 || h.shape()[0] == 0) {
    throw std::invalid_argument("pooling: expected a non-empty [T, D] sequence, got " +
                                shape_str(h.shape()));
  }
  check_heads(h.shape()[1], heads);
  if (u.shape() != Shape{h.shape()[1]}) {
    throw std::invalid_argument("pooling: attention vector " + shape_str(u.shape()) +
                                " does not match hidden dimension " +
                                std::to_string(h.shape()[1]));
  }
}

}  // namespace

std::size_t pooled_dim(PoolingKind kind, std::size_t input_dim, std::size_t heads) {
  check_heads(input_dim, heads);
  return kind == PoolingKind::kDoubleMha ? input_dim / heads : input_dim;
}

std::vector<NamedParam> PoolingParams::named_parameters() const {
  std::vector<NamedParam> out{{"pool.u", u}};
  if (kind == PoolingKind::kDoubleMha) out.push_back({"pool.u_prime", u_prime});
  return out;
}

PoolingParams init_pooling(PoolingKind kind, std::size_t input_dim, std::size_t heads,
                           std::uint64_t seed) {
  if (kind == PoolingKind::kAttention) heads = 1;
  check_heads(input_dim, heads);
  const std::size_t dh = input_dim / heads;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dh));
  PoolingParams p;
  p.kind = kind;
  p.heads = heads;
  Rng ur = make_stream(seed, "init/pool.u");
  p.u = ad::parameter(normal_tensor({input_dim}, stddev, ur));
  if (kind == PoolingKind::kDoubleMha) {
    Rng vr = make_stream(seed, "init/pool.u_prime");
    p.u_prime = ad::parameter(normal_tensor({dh}, stddev, vr));
  }
  return p;
}

Tensor head_split(const Tensor& h, std::size_t heads) {
  if (h.rank() != 2) throw std::invalid_argument("head_split: expected [T, D], got " + shape_str(h.shape()));
  check_heads(h.dim(1), heads);
  // Row-major [T, D] already stores head j of step t contiguously.
  return h.reshaped({h.dim(0), heads, h.dim(1) / heads});
}

namespace {

struct HeadContexts {
  std::vector<ad::Var> contexts;  // K x [1, d_h]
  Tensor weights;                 // [T, K]
};

HeadContexts attend_heads(const ad::Var& h, const ad::Var& u, std::size_t heads) {
  check_sequence(h, u, heads);
  const std::size_t T = h.shape()[0];
  const std::size_t dh = h.shape()[1] / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const ad::Var u_col = ad::reshape(u, {u.shape()[0], 1});
  HeadContexts out{{}, Tensor({T, heads})};
  for (std::size_t j = 0; j < heads; ++j) {
    const ad::Var hj = heads == 1 ? h : ad::slice(h, 1, j * dh, dh);
    const ad::Var uj = heads == 1 ? u_col : ad::slice(u_col, 0, j * dh, dh);
    const ad::Var logits = ad::scale(ad::matmul(hj, uj), inv_scale);  // [T, 1]
    const ad::Var w = ad::softmax(logits, 0);
    for (std::size_t t = 0; t < T; ++t) out.weights.at(t, j) = w.value()[t];
    out.contexts.push_back(ad::matmul(ad::transpose(w), hj));  // [1, d_h]
  }
  return out;
}

}  // namespace

PoolingOutput mha_pool(const ad::Var& h, const ad::Var& u, std::size_t heads) {
  HeadContexts hc = attend_heads(h, u, heads);
  ad::Var c = heads == 1 ? hc.contexts[0] : ad::concat(hc.contexts, 1);
  return {std::move(c), std::move(hc.weights), Tensor()};
}

PoolingOutput self_attention_pool(const ad::Var& h, const ad::Var& u) {
  return mha_pool(h, u, 1);
}

PoolingOutput double_mha_pool(const ad::Var& h, const ad::Var& u, const ad::Var& u_prime,
                              std::size_t heads) {
  HeadContexts hc = attend_heads(h, u, heads);
  const std::size_t dh = h.shape()[1] / heads;
  if (u_prime.shape() != Shape{dh}) {
    throw std::invalid_argument("double_mha_pool: head attention vector " +
                                shape_str(u_prime.shape()) + " does not match head dimension " +
                                std::to_string(dh));
  }
  const ad::Var stacked = heads == 1 ? hc.contexts[0] : ad::concat(hc.contexts, 0);  // [K, d_h]
  const ad::Var logits = ad::matmul(stacked, ad::reshape(u_prime, {dh, 1}));        // [K, 1]
  const ad::Var w = ad::softmax(logits, 0);
  ad::Var c = ad::matmul(ad::transpose(w), stacked);  // [1, d_h]
  return {std::move(c), std::move(hc.weights), w.value().reshaped({heads})};
}

PoolingOutput pool(const ad::Var& h, const PoolingParams& params) {
  switch (params.kind) {
    case PoolingKind::kAttention: return self_attention_pool(h, params.u);
    case PoolingKind::kMha: return mha_pool(h, params.u, params.heads);
    case PoolingKind::kDoubleMha: return double_mha_pool(h, params.u, params.u_prime, params.heads);
  }
  throw std::logic_error("unreachable pooling kind");
}

}  // namespace dmha

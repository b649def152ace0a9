#pragma once

// Utterance-level attention pooling over an encoded sequence h [T, D].
//
// Self multi-head attention splits every h_t into K contiguous slices of
// d_h = D / K values. Head j scores each step with the scaled dot product
// h_tj . u_j / sqrt(d_h), turns the scores into weights with a softmax over
// time and averages its slices with those weights into c_j. The pooled vector
// is the concatenation [c_1 ... c_K].
//
// Double multi-head attention adds a second attention over the K head
// contexts: w'_i = softmax_i(c_i . u') (unscaled) and c = sum_i w'_i c_i, so
// the output has d_h values.
//
// Vanilla self attention is the K = 1 case of the multi-head form, including
// the 1 / sqrt(D) score scale.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dmha/autodiff.hpp"
#include "dmha/params.hpp"

namespace dmha {

enum class PoolingKind { kAttention, kMha, kDoubleMha };

std::string_view to_string(PoolingKind kind);
// Accepts "attention", "mha" and "dmha".
PoolingKind parse_pooling_kind(std::string_view name);

// Dimension of the pooled vector: D for attention and MHA, D / K for double
// MHA. Throws when K does not divide D.
std::size_t pooled_dim(PoolingKind kind, std::size_t input_dim, std::size_t heads);

struct PoolingParams {
  PoolingKind kind = PoolingKind::kDoubleMha;
  std::size_t heads = 1;
  ad::Var u;        // [D], head j owns [j * d_h, (j + 1) * d_h)
  ad::Var u_prime;  // [d_h], double MHA only

  std::size_t input_dim() const { return u.shape()[0]; }
  std::size_t head_dim() const { return input_dim() / heads; }
  std::size_t output_dim() const { return pooled_dim(kind, input_dim(), heads); }

  std::vector<NamedParam> named_parameters() const;
};

// u and u' ~ N(0, 1 / d_h). Attention forces heads = 1.
PoolingParams init_pooling(PoolingKind kind, std::size_t input_dim, std::size_t heads,
                           std::uint64_t seed);

struct PoolingOutput {
  ad::Var context;      // [1, pooled_dim]
  Tensor weights;       // [T, K], column j holds head j's alignment over time
  Tensor head_weights;  // [K] for double MHA, empty otherwise
};

// [T, D] -> [T, K, D / K]; head j of step t is the contiguous slice
// [j * D / K, (j + 1) * D / K) of row t.
Tensor head_split(const Tensor& h, std::size_t heads);

PoolingOutput mha_pool(const ad::Var& h, const ad::Var& u, std::size_t heads);
PoolingOutput self_attention_pool(const ad::Var& h, const ad::Var& u);
PoolingOutput double_mha_pool(const ad::Var& h, const ad::Var& u, const ad::Var& u_prime,
                              std::size_t heads);

// Dispatches on params.kind.
PoolingOutput pool(const ad::Var& h, const PoolingParams& params);

}  // namespace dmha

#pragma once

// Classifier head on top of the pooled vector:
//
//   FC1 -> BN -> ReLU -> FC2 -> BN -> ReLU  (speaker embedding tap)
//       -> FC3 (linear) -> cosine layer against one weight per speaker
//
// trained with the additive-margin softmax loss.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmha/autodiff.hpp"
#include "dmha/params.hpp"

namespace dmha {

struct HeadConfig {
  std::size_t in_dim = 5120;
  std::size_t hidden = 400;
  std::size_t num_speakers = 5994;
  double s = 30.0;
  double m = 0.4;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const;
};

struct Linear {
  ad::Var weight;  // [in, out]
  ad::Var bias;    // [out]
};

struct BatchNormLayer {
  ad::Var gamma;  // [F]
  ad::Var beta;   // [F]
  ad::BatchNormStats stats;
};

struct HeadParams {
  HeadConfig config;
  Linear fc1, fc2, fc3;
  BatchNormLayer bn1, bn2;
  ad::Var class_weights;  // [hidden, num_speakers], normalized per column on use

  std::vector<NamedParam> named_parameters() const;
  std::vector<NamedBuffer> named_buffers();
};

HeadParams init_head(const HeadConfig& config, std::uint64_t seed);

struct HeadOutput {
  ad::Var embedding;   // [B, hidden], after FC2's batch norm and ReLU
  ad::Var cos_logits;  // [B, num_speakers]
};

// c: [B, in_dim]. Training mode needs B >= 2 for batch statistics.
HeadOutput head_forward(const ad::Var& c, HeadParams& params, ad::BatchNormMode mode);

// Mean over the batch of
//   -log( e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j != y} e^{s cos_j}) ).
ad::Var am_softmax_loss(const ad::Var& cos_logits, std::span<const std::size_t> labels, double s,
                        double m);

}  // namespace dmha

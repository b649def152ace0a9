#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dmha/encoder.hpp"
#include "dmha/features.hpp"
#include "dmha/head.hpp"
#include "dmha/params.hpp"
#include "dmha/pooling.hpp"

namespace dmha {

struct ModelConfig {
  EncoderConfig encoder;
  PoolingKind pooling = PoolingKind::kDoubleMha;
  std::size_t heads = 16;  // ignored (treated as 1) for plain attention
  std::size_t hidden = 400;
  std::size_t num_speakers = 5994;
  double am_scale = 30.0;
  double am_margin = 0.4;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t effective_heads() const { return pooling == PoolingKind::kAttention ? 1 : heads; }
  std::size_t encoded_dim() const { return output_dim(encoder); }
  std::size_t pooled_dim() const;
  HeadConfig head_config() const;
  // Cross-field checks: K divides D, dimensions chain, head settings valid.
  void validate() const;
};

// Encoder, pooling and head with their parameters.
class SpeakerModel {
 public:
  SpeakerModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Stable order: encoder, pooling, head.
  std::vector<NamedParam> named_parameters() const;
  std::vector<NamedBuffer> named_buffers();

  struct Output {
    ad::Var embeddings;  // [B, hidden]
    ad::Var cos_logits;  // [B, num_speakers]
    std::vector<PoolingOutput> pooling;
  };

  // inputs: B feature matrices [N_b, n_mels], lengths may differ.
  Output forward(std::span<const Tensor> inputs, ad::BatchNormMode mode);

  // Embedding of one utterance with batch norm in evaluation mode.
  Tensor embed(const MelSpectrogram& features);
  Tensor embed(const MelSpectrogram& features, PoolingOutput* pooling_out);

 private:
  ModelConfig config_;
  EncoderParams encoder_;
  PoolingParams pooling_;
  HeadParams head_;
};

// Smallest number of samples whose features reach the 16 frames the encoder
// needs.
std::size_t min_samples_for_embedding(const FeatureConfig& features);

// Audio -> features -> encoder -> pooling -> head up to the embedding tap.
Tensor extract_embedding(std::span<const double> audio, int sample_rate,
                         const FeatureConfig& features, SpeakerModel& model);

}  // namespace dmha

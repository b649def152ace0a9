#include "dmha/model.hpp"

#include <stdexcept>
#include <string>

namespace dmha {

std::size_t ModelConfig::pooled_dim() const {
  return dmha::pooled_dim(pooling, encoded_dim(), effective_heads());
}

HeadConfig ModelConfig::head_config() const {
  HeadConfig h;
  h.in_dim = pooled_dim();
  h.hidden = hidden;
  h.num_speakers = num_speakers;
  h.s = am_scale;
  h.m = am_margin;
  h.bn_momentum = bn_momentum;
  h.bn_eps = bn_eps;
  return h;
}

void ModelConfig::validate() const {
  encoder.validate();
  (void)pooled_dim();
  head_config().validate();
}

SpeakerModel::SpeakerModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  encoder_ = init_encoder(config_.encoder, seed);
  pooling_ = init_pooling(config_.pooling, config_.encoded_dim(), config_.effective_heads(), seed);
  head_ = init_head(config_.head_config(), seed);
}

std::vector<NamedParam> SpeakerModel::named_parameters() const {
  std::vector<NamedParam> out = encoder_.named_parameters();
  for (auto& p : pooling_.named_parameters()) out.push_back(std::move(p));
  for (auto& p : head_.named_parameters()) out.push_back(std::move(p));
  return out;
}

std::vector<NamedBuffer> SpeakerModel::named_buffers() { return head_.named_buffers(); }

SpeakerModel::Output SpeakerModel::forward(std::span<const Tensor> inputs, ad::BatchNormMode mode) {
  if (inputs.empty()) throw std::invalid_argument("forward: empty batch");
  Output out;
  std::vector<ad::Var> pooled;
  pooled.reserve(inputs.size());
  for (const Tensor& frames : inputs) {
    ad::Var h = encode(ad::constant(frames), encoder_);
    PoolingOutput p = pool(h, pooling_);
    pooled.push_back(p.context);
    out.pooling.push_back(std::move(p));
  }
  ad::Var batch = pooled.size() == 1 ? pooled[0] : ad::concat(pooled, 0);
  HeadOutput head = head_forward(batch, head_, mode);
  out.embeddings = std::move(head.embedding);
  out.cos_logits = std::move(head.cos_logits);
  return out;
}

Tensor SpeakerModel::embed(const MelSpectrogram& features) { return embed(features, nullptr); }

Tensor SpeakerModel::embed(const MelSpectrogram& features, PoolingOutput* pooling_out) {
  const Tensor inputs[1] = {features.frames};
  Output out = forward(inputs, ad::BatchNormMode::kEval);
  if (pooling_out) *pooling_out = out.pooling[0];
  return out.embeddings.value().reshaped({config_.hidden});
}

std::size_t min_samples_for_embedding(const FeatureConfig& features) {
  return features.win_length + (kDownsampling - 1) * features.hop;
}

Tensor extract_embedding(std::span<const double> audio, int sample_rate,
                         const FeatureConfig& features, SpeakerModel& model) {
  const std::size_t need = min_samples_for_embedding(features);
  if (audio.size() < need) {
    throw std::invalid_argument("audio too short for an embedding: " + std::to_string(audio.size()) +
                                " samples, need at least " + std::to_string(need) + " (16 frames)");
  }
  return model.embed(compute_features(audio, sample_rate, features));
}

}  // namespace dmha

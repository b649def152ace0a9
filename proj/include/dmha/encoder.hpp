#pragma once

// VGG-style front-end: four blocks of (3x3 conv, ReLU, 3x3 conv, ReLU,
// 2x2 max pool) over a single-channel time x frequency input, flattened to
// one vector per remaining time step.

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dmha/autodiff.hpp"
#include "dmha/features.hpp"
#include "dmha/params.hpp"

namespace dmha {

inline constexpr std::size_t kEncoderBlocks = 4;
inline constexpr std::size_t kDownsampling = 16;

struct EncoderConfig {
  // Output channels of each block; input has one channel.
  std::array<std::size_t, kEncoderBlocks> channels{128, 256, 512, 1024};
  std::size_t n_mels = 80;

  std::size_t final_channels() const { return channels.back(); }
  // Frequency extent after four halvings; requires n_mels % 16 == 0.
  std::size_t freq_extent() const;
  void validate() const;

  // Channel plan c, 2c, 4c, 8c.
  static EncoderConfig scaled(std::size_t base_channels, std::size_t n_mels = 80);
};

// Hidden dimension D = M * D' of the encoded sequence.
std::size_t output_dim(const EncoderConfig& config);

// Sequence length after four floor-halvings of n_frames.
std::size_t encoded_length(std::size_t n_frames);

struct ConvLayer {
  ad::Var weight;  // [out, in, 3, 3]
  ad::Var bias;    // [out]
};

struct EncoderParams {
  EncoderConfig config;
  std::vector<ConvLayer> convs;  // 2 per block, in order conv11, conv12, conv21, ...

  std::vector<NamedParam> named_parameters() const;
};

// He-normal weights (std sqrt(2 / fan_in)), zero biases; each tensor draws
// from its own named stream.
EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed);

// frames: [N, n_mels] with N >= 16. Returns h: [T, D].
ad::Var encode(const ad::Var& frames, const EncoderParams& params);
ad::Var encode(const MelSpectrogram& m, const EncoderParams& params);

}  // namespace dmha

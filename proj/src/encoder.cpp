#include "dmha/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dmha/rng.hpp"

namespace dmha {

std::size_t EncoderConfig::freq_extent() const {
  if (n_mels % kDownsampling != 0) {
    throw std::invalid_argument("encoder: n_mels " + std::to_string(n_mels) +
                                " is not divisible by 16");
  }
  return n_mels / kDownsampling;
}

void EncoderConfig::validate() const {
  for (std::size_t c : channels)
    if (c == 0) throw std::invalid_argument("encoder: channel counts must be positive");
  (void)freq_extent();
}

EncoderConfig EncoderConfig::scaled(std::size_t base_channels, std::size_t n_mels) {
  EncoderConfig c;
  c.channels = {base_channels, 2 * base_channels, 4 * base_channels, 8 * base_channels};
  c.n_mels = n_mels;
  return c;
}

std::size_t output_dim(const EncoderConfig& config) {
  return config.final_channels() * config.freq_extent();
}

std::size_t encoded_length(std::size_t n_frames) {
  for (std::size_t b = 0; b < kEncoderBlocks; ++b) n_frames /= 2;
  return n_frames;
}

std::vector<NamedParam> EncoderParams::named_parameters() const {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const std::string base =
        "encoder.conv" + std::to_string(i / 2 + 1) + std::to_string(i % 2 + 1);
    out.push_back({base + ".weight", convs[i].weight});
    out.push_back({base + ".bias", convs[i].bias});
  }
  return out;
}

EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderParams p{config, {}};
  std::size_t in = 1;
  for (std::size_t b = 0; b < kEncoderBlocks; ++b) {
    for (std::size_t i = 0; i < 2; ++i) {
      const std::size_t out = config.channels[b];
      const std::string name =
          "encoder.conv" + std::to_string(b + 1) + std::to_string(i + 1) + ".weight";
      Rng rng = make_stream(seed, "init/" + name);
      const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
      p.convs.push_back({ad::parameter(normal_tensor({out, in, 3, 3}, stddev, rng)),
                         ad::parameter(Tensor({out}, 0.0))});
      in = out;
    }
  }
  return p;
}

ad::Var encode(const ad::Var& frames, const EncoderParams& params) {
  const auto& shape = frames.shape();
  if (shape.size() != 2 || shape[1] != params.config.n_mels) {
    throw std::invalid_argument("encode: expected [N, " + std::to_string(params.config.n_mels) +
                                "] input, got " + shape_str(shape));
  }
  if (shape[0] < kDownsampling) {
    throw std::invalid_argument("encode: utterance too short for 16x downsampling (" +
                                std::to_string(shape[0]) + " frames, need at least 16)");
  }
  ad::Var x = ad::reshape(frames, {1, shape[0], shape[1]});
  for (std::size_t b = 0; b < kEncoderBlocks; ++b) {
    for (std::size_t i = 0; i < 2; ++i) {
      const ConvLayer& conv = params.convs[2 * b + i];
      x = ad::relu(ad::conv2d_same(x, conv.weight, conv.bias));
    }
    x = ad::maxpool2x2(x);
  }
  return ad::flatten_channels(x);
}

ad::Var encode(const MelSpectrogram& m, const EncoderParams& params) {
  return encode(ad::constant(m.frames), params);
}

}  // namespace dmha

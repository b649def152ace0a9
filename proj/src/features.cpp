#include "dmha/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dmha {
namespace {

// Owns an FFTW real-to-complex plan and its buffers.
class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(fftw_alloc_real(n)),
        out_(fftw_alloc_complex(n / 2 + 1)),
        plan_(fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE)) {
    if (!in_ || !out_ || !plan_) throw std::runtime_error("FFTW plan allocation failed");
  }
  ~RealFft() {
    fftw_destroy_plan(plan_);
    fftw_free(out_);
    fftw_free(in_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }

  // Executes the plan and writes |X_k|^2 for k in [0, n/2].
  void power(std::span<double> out) {
    fftw_execute(plan_);
    for (std::size_t k = 0; k <= n_ / 2; ++k) out[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  std::size_t n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

}  // namespace

void FeatureConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("feature config: " + what); };
  if (sample_rate <= 0) fail("sample_rate must be positive");
  if (win_length == 0 || hop == 0) fail("win_length and hop must be positive");
  if (win_length > n_fft) fail("win_length exceeds n_fft");
  if (hop > win_length) fail("hop exceeds win_length");
  if (n_mels < 1) fail("n_mels must be at least 1");
  if (fmin < 0.0 || fmin >= fmax) fail("need 0 <= fmin < fmax");
  if (fmax > sample_rate / 2.0) fail("fmax exceeds the Nyquist frequency");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t frame_count(std::size_t num_samples, const FeatureConfig& config) {
  if (num_samples < config.win_length) {
    throw std::invalid_argument("signal of " + std::to_string(num_samples) +
                                " samples is shorter than one window of " +
                                std::to_string(config.win_length));
  }
  return 1 + (num_samples - config.win_length) / config.hop;
}

namespace {

// n_mels + 2 edge frequencies equally spaced on the mel scale.
std::vector<double> filter_edges(const FeatureConfig& config) {
  const double lo = hz_to_mel(config.fmin);
  const double hi = hz_to_mel(config.fmax);
  std::vector<double> edges(config.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(config.n_mels + 1));
  return edges;
}

}  // namespace

std::vector<double> mel_center_frequencies(const FeatureConfig& config) {
  auto edges = filter_edges(config);
  return {edges.begin() + 1, edges.end() - 1};
}

Tensor mel_filterbank(const FeatureConfig& config) {
  config.validate();
  const std::size_t bins = config.n_fft / 2 + 1;
  const auto edges = filter_edges(config);
  Tensor fb({config.n_mels, bins}, 0.0);
  for (std::size_t m = 0; m < config.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * config.sample_rate / static_cast<double>(config.n_fft);
      const double rise = (f - left) / (center - left);
      const double fall = (right - f) / (right - center);
      fb.at(m, k) = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

std::vector<double> hamming_window(std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (length < 2) return w;
  for (std::size_t n = 0; n < length; ++n)
    w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                  static_cast<double>(length - 1));
  return w;
}

MelSpectrogram log_mel(std::span<const double> audio, int sample_rate,
                       const FeatureConfig& config) {
  config.validate();
  if (sample_rate != config.sample_rate) {
    throw std::invalid_argument("audio at " + std::to_string(sample_rate) + " Hz, features expect " +
                                std::to_string(config.sample_rate) + " Hz (no resampling)");
  }
  const std::size_t frames = frame_count(audio.size(), config);
  const std::size_t bins = config.n_fft / 2 + 1;
  const Tensor fb = mel_filterbank(config);
  const auto window = hamming_window(config.win_length);

  RealFft fft(config.n_fft);
  std::vector<double> power(bins);
  MelSpectrogram out{Tensor({frames, config.n_mels})};
  for (std::size_t t = 0; t < frames; ++t) {
    double* in = fft.input();
    const double* src = audio.data() + t * config.hop;
    for (std::size_t n = 0; n < config.win_length; ++n) in[n] = src[n] * window[n];
    std::fill(in + config.win_length, in + config.n_fft, 0.0);
    fft.power(power);
    for (std::size_t m = 0; m < config.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb.at(m, k) * power[k];
      out.frames.at(t, m) = std::log(std::max(e, kEnergyFloor));
    }
  }
  return out;
}

MelSpectrogram cmn(const MelSpectrogram& m) {
  MelSpectrogram out = m;
  const std::size_t n = m.num_frames(), d = m.num_bins();
  if (n == 0) throw std::invalid_argument("cmn: empty spectrogram");
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < n; ++t) mean += m.frames.at(t, j);
    mean /= static_cast<double>(n);
    for (std::size_t t = 0; t < n; ++t) out.frames.at(t, j) -= mean;
  }
  return out;
}

MelSpectrogram compute_features(std::span<const double> audio, int sample_rate,
                                const FeatureConfig& config) {
  return cmn(log_mel(audio, sample_rate, config));
}

}  // namespace dmha

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmha/tensor.hpp"

namespace dmha {

struct FeatureConfig {
  int sample_rate = 16000;
  std::size_t win_length = 400;  // 25 ms
  std::size_t hop = 160;         // 10 ms
  std::size_t n_fft = 512;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;

  // Throws std::invalid_argument when the fields are inconsistent.
  void validate() const;
};

// Log mel energies, one row per frame.
struct MelSpectrogram {
  Tensor frames;  // [N, n_mels]

  std::size_t num_frames() const { return frames.empty() ? 0 : frames.dim(0); }
  std::size_t num_bins() const { return frames.empty() ? 0 : frames.dim(1); }
};

inline constexpr double kEnergyFloor = 1e-10;

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Number of whole frames in a signal; the tail that does not fill a window is
// discarded. Throws if the signal is shorter than one window.
std::size_t frame_count(std::size_t num_samples, const FeatureConfig& config);

// Center frequencies (Hz) of the n_mels triangular filters.
std::vector<double> mel_center_frequencies(const FeatureConfig& config);

// Triangular filterbank [n_mels, n_fft/2 + 1] over the power spectrum bins.
Tensor mel_filterbank(const FeatureConfig& config);

// Symmetric Hamming window of the given length.
std::vector<double> hamming_window(std::size_t length);

// Log mel spectrogram of mono PCM in [-1, 1], before mean normalization.
MelSpectrogram log_mel(std::span<const double> audio, int sample_rate,
                       const FeatureConfig& config);

// Per-coefficient mean subtraction over frames.
MelSpectrogram cmn(const MelSpectrogram& m);

// log_mel followed by cmn.
MelSpectrogram compute_features(std::span<const double> audio, int sample_rate,
                                const FeatureConfig& config);

}  // namespace dmha

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "doctest.h"
#include "dmha/features.hpp"
#include "support.hpp"

using namespace dmha;

namespace {

// Triangles built directly in Hz from the HTK mel formula.
Tensor filterbank_oracle(const FeatureConfig& c) {
  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<double> edges(c.n_mels + 2);
  const double lo = mel(c.fmin), hi = mel(c.fmax);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(c.n_mels + 1));
  const std::size_t bins = c.n_fft / 2 + 1;
  Tensor fb({c.n_mels, bins});
  for (std::size_t m = 0; m < c.n_mels; ++m)
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * c.sample_rate / static_cast<double>(c.n_fft);
      const double rise = (f - edges[m]) / (edges[m + 1] - edges[m]);
      const double fall = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      fb.at(m, k) = std::max(0.0, std::min(rise, fall));
    }
  return fb;
}

std::vector<double> tone(double freq, std::size_t n, double amp = 0.5) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / 16000.0);
  return x;
}

}  // namespace

TEST_CASE("frame_count") {
  const FeatureConfig c;
  CHECK(frame_count(400, c) == 1);
  CHECK(frame_count(560, c) == 2);
  CHECK(frame_count(16000, c) == 98);
  CHECK_THROWS_AS(frame_count(399, c), std::invalid_argument);
}

TEST_CASE("mel scale") {
  CHECK(hz_to_mel(0.0) == 0.0);
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)).epsilon(1e-14));
  for (double f : {0.0, 55.0, 1000.0, 7999.0}) CHECK(std::abs(mel_to_hz(hz_to_mel(f)) - f) <= 1e-9);
}

TEST_CASE("symmetric hamming window") {
  const auto w = hamming_window(400);
  REQUIRE(w.size() == 400);
  CHECK(w.front() == doctest::Approx(0.08).epsilon(1e-14));
  CHECK(w.back() == doctest::Approx(0.08).epsilon(1e-14));
  for (std::size_t n = 0; n < 400; ++n) {
    CHECK(std::abs(w[n] - w[399 - n]) <= 1e-15);
    CHECK(std::abs(w[n] - (0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / 399.0))) <= 1e-15);
  }
}

TEST_CASE("filterbank matches the Hz-domain triangle oracle") {
  for (std::size_t n_mels : {80u, 40u, 16u}) {
    FeatureConfig c;
    c.n_mels = n_mels;
    const Tensor fb = mel_filterbank(c);
    const Tensor ref = filterbank_oracle(c);
    REQUIRE(fb.shape() == ref.shape());
    CHECK(max_abs_diff(fb, ref) <= 1e-12);
  }
}

TEST_CASE("filterbank structure") {
  const FeatureConfig c;
  const Tensor fb = mel_filterbank(c);
  const std::size_t bins = fb.dim(1);
  for (double v : fb.values()) CHECK(v >= 0.0);
  for (std::size_t k = 1; k + 1 < bins; ++k) {
    double covered = 0;
    for (std::size_t m = 0; m < c.n_mels; ++m) covered += fb.at(m, k);
    CHECK(covered > 0.0);
  }
  const auto centers = mel_center_frequencies(c);
  REQUIRE(centers.size() == c.n_mels);
  // Each triangle ends at the next-but-one center, so neighbours overlap.
  for (std::size_t m = 0; m + 2 < centers.size(); ++m) {
    CHECK(centers[m] < centers[m + 1]);
    CHECK(centers[m + 1] < centers[m + 2]);
  }
}

TEST_CASE("flat spectrum reproduces filterbank row sums") {
  // A unit impulse at sample n0 of the first frame has a flat power spectrum
  // of height w[n0]^2 after windowing.
  const FeatureConfig c;
  std::vector<double> x(400, 0.0);
  const std::size_t n0 = 173;
  x[n0] = 0.75;
  const MelSpectrogram m = log_mel(x, 16000, c);
  REQUIRE(m.num_frames() == 1);
  const Tensor fb = mel_filterbank(c);
  const double height = std::pow(0.75 * hamming_window(400)[n0], 2);
  for (std::size_t b = 0; b < c.n_mels; ++b) {
    double row = 0;
    for (std::size_t k = 0; k < fb.dim(1); ++k) row += fb.at(b, k);
    CHECK(std::abs(m.frames.at(0, b) - std::log(std::max(height * row, 1e-10))) <= 1e-9);
  }
}

TEST_CASE("silence floors every bin") {
  const FeatureConfig c;
  const MelSpectrogram m = log_mel(std::vector<double>(1600, 0.0), 16000, c);
  CHECK(m.num_frames() == 8);
  for (double v : m.frames.values()) CHECK(v == std::log(1e-10));
}

TEST_CASE("1 kHz tone peaks in a filter bracketing 1 kHz") {
  const FeatureConfig c;
  const MelSpectrogram m = log_mel(tone(1000.0, 4000), 16000, c);
  // Centers from the mel formula directly.
  const double top = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  std::size_t below = 0;
  for (std::size_t i = 0; i < c.n_mels; ++i) {
    const double f = 700.0 * (std::pow(10.0, top * (i + 1) / 81.0 / 2595.0) - 1.0);
    if (f <= 1000.0) below = i;
  }
  for (std::size_t t = 0; t < m.num_frames(); ++t) {
    std::size_t arg = 0;
    for (std::size_t b = 1; b < c.n_mels; ++b)
      if (m.frames.at(t, b) > m.frames.at(t, arg)) arg = b;
    CHECK((arg == below || arg == below + 1));
  }
}

TEST_CASE("log_mel shape and rate check") {
  const FeatureConfig c;
  for (std::size_t n : {400u, 401u, 559u, 560u, 4321u}) {
    const MelSpectrogram m = log_mel(tone(440.0, n), 16000, c);
    CHECK(m.num_frames() == frame_count(n, c));
    CHECK(m.num_bins() == 80);
  }
  CHECK_THROWS_AS(log_mel(tone(440.0, 800), 8000, c), std::invalid_argument);
}

TEST_CASE("cmn") {
  const MelSpectrogram constant = cmn(MelSpectrogram{Tensor({4, 3}, 2.5)});
  for (double v : constant.frames.values()) CHECK(v == 0.0);
  const MelSpectrogram single = cmn(MelSpectrogram{testing::random_tensor({1, 5}, 3)});
  for (double v : single.frames.values()) CHECK(v == 0.0);

  MelSpectrogram r{testing::random_tensor({5, 7}, 4, 10.0)};
  const MelSpectrogram once = cmn(r);
  for (std::size_t b = 0; b < 7; ++b) {
    double mean = 0;
    for (std::size_t t = 0; t < 5; ++t) mean += once.frames.at(t, b);
    CHECK(std::abs(mean / 5.0) <= 1e-12);
    // Variance is untouched: differences between frames survive.
    CHECK(std::abs((once.frames.at(1, b) - once.frames.at(0, b)) - (r.frames.at(1, b) - r.frames.at(0, b))) <= 1e-12);
  }
  CHECK(max_abs_diff(cmn(once).frames, once.frames) <= 1e-12);
}

TEST_CASE("feature config validation") {
  FeatureConfig c;
  c.win_length = 600;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = FeatureConfig{};
  c.fmax = 9000;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = FeatureConfig{};
  c.hop = 500;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

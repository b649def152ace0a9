#pragma once

// Harmonic-plus-noise speaker corpus. Each speaker is a fundamental frequency
// and a formant envelope; each utterance adds its own pitch contour, a random
// recording channel (gain and spectral tilt) and white noise at a fixed SNR.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmha/config.hpp"
#include "dmha/eval.hpp"
#include "dmha/manifest.hpp"
#include "dmha/rng.hpp"

namespace dmha {

struct Formant {
  double freq = 500.0;       // Hz
  double bandwidth = 100.0;  // Hz, half width at half height
  double gain = 0.0;         // linear boost at the peak
};

struct SyntheticSpeaker {
  std::string id;
  double f0 = 120.0;
  std::array<Formant, 3> formants{};
  double tilt_db_per_octave = -6.0;
  // Per-utterance ranges, as fractions of the nominal value.
  double f0_offset_jitter = 0.015;   // utterance mean pitch
  double f0_contour_jitter = 0.03;   // drift within a voiced segment
  double formant_jitter = 0.03;
  // Envelope sampled at the harmonics of f0 below the synthesis limit.
  std::vector<double> harmonic_gains;
};

// Linear magnitude of the speaker's spectral envelope at `freq` Hz.
double envelope_gain(const SyntheticSpeaker& speaker, double freq);

struct SynthConfig {
  std::size_t num_speakers = 16;
  std::size_t utts_per_speaker = 10;
  std::size_t test_utts_per_speaker = 3;  // held out of train.tsv
  double duration_s = 4.0;
  int sample_rate = 16000;
  double snr_db = 20.0;
  double f0_min = 85.0;
  double f0_max = 255.0;
  double min_f0_margin = 0.02;  // relative f0 spacing between any two speakers
  double max_harmonic_hz = 4000.0;
  double channel_gain_db = 10.0;   // uniform in +-
  double channel_tilt_db = 6.0;    // dB per octave, uniform in +-
  std::uint64_t seed = 0;
  // Trial counts drawn over test.tsv; nullopt takes every pair.
  std::optional<std::size_t> trials_target;
  std::optional<std::size_t> trials_nontarget;

  void validate() const;
};

// Keys: speakers, utts_per_speaker, test_utts_per_speaker, duration, snr_db,
// f0_min, f0_max, min_f0_margin, channel_gain_db, channel_tilt_db, seed,
// trials_target, trials_nontarget ("all" or a count).
void apply(SynthConfig& config, const KeyValues& kv);

// Pitches lie on a geometric grid over [f0_min, f0_max], assigned to speakers
// in a seeded order; formants are drawn per speaker.
std::vector<SyntheticSpeaker> make_speakers(const SynthConfig& config);

// One utterance of `duration_s` seconds: voiced segments of 200 to 500 ms
// separated by 50 to 150 ms pauses, then channel and noise.
std::vector<double> synthesize_utterance(const SyntheticSpeaker& speaker, const SynthConfig& config,
                                         Rng& rng);

struct Corpus {
  std::vector<SyntheticSpeaker> speakers;
  std::vector<ManifestEntry> manifest;  // wav paths relative to the corpus directory
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
};

// Writes wav/<utt>.wav, manifest.tsv, train.tsv and test.tsv under `out_dir`.
// Utterance u of speaker s uses stream ("utterance", s * utts_per_speaker + u);
// the last test_utts_per_speaker utterances of each speaker go to test.tsv.
Corpus generate_corpus(const SynthConfig& config, const std::filesystem::path& out_dir);

std::string speaker_id(std::size_t index);
std::string utterance_id(std::size_t speaker, std::size_t utterance);

// Unordered pair counts available from a manifest.
std::size_t max_target_pairs(const std::vector<ManifestEntry>& manifest);
std::size_t max_nontarget_pairs(const std::vector<ManifestEntry>& manifest);

// Samples distinct unordered pairs without replacement: targets share a
// speaker, nontargets do not, no utterance is paired with itself. Requests
// above what the manifest offers are rejected; nullopt means all pairs.
std::vector<Trial> make_trials(const std::vector<ManifestEntry>& manifest,
                               std::optional<std::size_t> num_target,
                               std::optional<std::size_t> num_nontarget, std::uint64_t seed);

}  // namespace dmha

#include "dmha/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <stdexcept>

#include "dmha/wav.hpp"

namespace dmha {
namespace {

constexpr std::size_t kAmplitudeBlock = 80;  // samples between envelope updates
constexpr double kRamp = 0.010;             // seconds of fade at segment edges
constexpr double kSignalRms = 0.03;         // before channel gain

double db_to_linear(double db) { return std::pow(10.0, db / 20.0); }

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

std::vector<double> sample_harmonics(const SyntheticSpeaker& s, double max_hz) {
  std::vector<double> g;
  for (std::size_t h = 1; static_cast<double>(h) * s.f0 <= max_hz; ++h)
    g.push_back(envelope_gain(s, static_cast<double>(h) * s.f0));
  return g;
}

}  // namespace

double envelope_gain(const SyntheticSpeaker& speaker, double freq) {
  const double octaves = std::log2(freq / speaker.f0);
  double bumps = 1.0;
  for (const auto& f : speaker.formants) {
    const double x = (freq - f.freq) / f.bandwidth;
    bumps += f.gain / (1.0 + x * x);
  }
  return db_to_linear(speaker.tilt_db_per_octave * octaves) * bumps;
}

void SynthConfig::validate() const {
  if (num_speakers < 2) throw std::invalid_argument("synth: need at least 2 speakers");
  if (utts_per_speaker < 1) throw std::invalid_argument("synth: need at least 1 utterance per speaker");
  if (test_utts_per_speaker >= utts_per_speaker && test_utts_per_speaker != 0) {
    throw std::invalid_argument("synth: test_utts_per_speaker must leave training utterances");
  }
  if (!(duration_s > 0.0)) throw std::invalid_argument("synth: duration must be positive");
  if (sample_rate <= 0) throw std::invalid_argument("synth: sample rate must be positive");
  if (!(f0_min > 0.0 && f0_max > f0_min)) throw std::invalid_argument("synth: need 0 < f0_min < f0_max");
  if (!(max_harmonic_hz > f0_max && max_harmonic_hz < sample_rate / 2.0)) {
    throw std::invalid_argument("synth: max_harmonic_hz must lie between f0_max and Nyquist");
  }
  const double ratio = std::pow(f0_max / f0_min, 1.0 / static_cast<double>(num_speakers - 1));
  if (ratio - 1.0 < min_f0_margin) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "synth: %zu speakers do not fit in [%g, %g] Hz with relative f0 margin %g",
                  num_speakers, f0_min, f0_max, min_f0_margin);
    throw std::invalid_argument(buf);
  }
}

void apply(SynthConfig& config, const KeyValues& kv) {
  auto count = [](const std::string& k, const std::string& v) -> std::optional<std::size_t> {
    if (v == "all") return std::nullopt;
    return to_size(k, v);
  };
  for (const auto& [k, v] : kv) {
    if (k == "speakers") config.num_speakers = to_size(k, v);
    else if (k == "utts_per_speaker") config.utts_per_speaker = to_size(k, v);
    else if (k == "test_utts_per_speaker") config.test_utts_per_speaker = to_size(k, v);
    else if (k == "duration") config.duration_s = to_double(k, v);
    else if (k == "snr_db") config.snr_db = to_double(k, v);
    else if (k == "f0_min") config.f0_min = to_double(k, v);
    else if (k == "f0_max") config.f0_max = to_double(k, v);
    else if (k == "min_f0_margin") config.min_f0_margin = to_double(k, v);
    else if (k == "channel_gain_db") config.channel_gain_db = to_double(k, v);
    else if (k == "channel_tilt_db") config.channel_tilt_db = to_double(k, v);
    else if (k == "seed") config.seed = to_u64(k, v);
    else if (k == "trials_target") config.trials_target = count(k, v);
    else if (k == "trials_nontarget") config.trials_nontarget = count(k, v);
    else throw std::invalid_argument("synth config: unknown key '" + k + "'");
  }
}

std::string speaker_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%02zu", index);
  return buf;
}

std::string utterance_id(std::size_t speaker, std::size_t utterance) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_utt%02zu", utterance);
  return speaker_id(speaker) + buf;
}

std::vector<SyntheticSpeaker> make_speakers(const SynthConfig& config) {
  config.validate();
  const std::size_t n = config.num_speakers;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng order_rng = make_stream(config.seed, "speaker-order");
  shuffle(order, order_rng);

  std::vector<SyntheticSpeaker> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSpeaker& s = out[i];
    Rng rng = make_stream(config.seed, "speaker", i);
    s.id = speaker_id(i);
    s.f0 = config.f0_min *
           std::pow(config.f0_max / config.f0_min,
                    static_cast<double>(order[i]) / static_cast<double>(n - 1));
    s.formants[0] = {uniform(rng, 300.0, 800.0), 80.0, uniform(rng, 2.0, 6.0)};
    s.formants[1] = {uniform(rng, 900.0, 2200.0), 120.0, uniform(rng, 2.0, 6.0)};
    s.formants[2] = {uniform(rng, 2300.0, 3400.0), 160.0, uniform(rng, 2.0, 6.0)};
    s.tilt_db_per_octave = uniform(rng, -9.0, -5.0);
    s.harmonic_gains = sample_harmonics(s, config.max_harmonic_hz);
  }
  return out;
}

std::vector<double> synthesize_utterance(const SyntheticSpeaker& speaker, const SynthConfig& config,
                                         Rng& rng) {
  const double sr = static_cast<double>(config.sample_rate);
  const std::size_t n = static_cast<std::size_t>(std::llround(config.duration_s * sr));

  // Utterance-level draws.
  SyntheticSpeaker voice = speaker;
  const double f0 = speaker.f0 * (1.0 + uniform(rng, -speaker.f0_offset_jitter, speaker.f0_offset_jitter));
  for (auto& f : voice.formants)
    f.freq *= 1.0 + uniform(rng, -speaker.formant_jitter, speaker.formant_jitter);
  const double gain = db_to_linear(uniform(rng, -config.channel_gain_db, config.channel_gain_db));
  const double channel_tilt = uniform(rng, -config.channel_tilt_db, config.channel_tilt_db);

  std::vector<double> clean(n, 0.0);
  std::vector<double> amps;
  const std::size_t ramp = static_cast<std::size_t>(kRamp * sr);
  std::size_t pos = static_cast<std::size_t>(uniform(rng, 0.05, 0.15) * sr);
  while (pos < n) {
    const std::size_t len =
        std::min(n - pos, static_cast<std::size_t>(uniform(rng, 0.2, 0.5) * sr));
    const double f_start =
        f0 * (1.0 + uniform(rng, -speaker.f0_contour_jitter, speaker.f0_contour_jitter));
    const double f_end =
        f0 * (1.0 + uniform(rng, -speaker.f0_contour_jitter, speaker.f0_contour_jitter));
    double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);

    for (std::size_t b = 0; b < len; b += kAmplitudeBlock) {
      const std::size_t blen = std::min(kAmplitudeBlock, len - b);
      const double mid = (static_cast<double>(b) + 0.5 * static_cast<double>(blen)) /
                         static_cast<double>(len);
      const double fb = f_start + (f_end - f_start) * mid;
      amps.clear();
      for (std::size_t h = 1; static_cast<double>(h) * fb <= config.max_harmonic_hz; ++h) {
        const double fh = static_cast<double>(h) * fb;
        amps.push_back(envelope_gain(voice, fh) *
                       db_to_linear(channel_tilt * std::log2(fh / 1000.0)));
      }
      for (std::size_t k = 0; k < blen; ++k) {
        const std::size_t i = b + k;
        const double frac = static_cast<double>(i) / static_cast<double>(len);
        phase += 2.0 * std::numbers::pi * (f_start + (f_end - f_start) * frac) / sr;
        // cos(h * phase) by the Chebyshev recurrence.
        const double c1 = std::cos(phase);
        double prev = 1.0, cur = c1, sum = amps[0] * c1;
        for (std::size_t h = 1; h < amps.size(); ++h) {
          const double next = 2.0 * c1 * cur - prev;
          prev = cur;
          cur = next;
          sum += amps[h] * cur;
        }
        double fade = 1.0;
        if (i < ramp) fade = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp);
        if (len - 1 - i < ramp)
          fade *= 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(len - 1 - i) / ramp);
        clean[pos + i] = sum * fade;
      }
      phase = std::fmod(phase, 2.0 * std::numbers::pi);
    }
    pos += len + static_cast<std::size_t>(uniform(rng, 0.05, 0.15) * sr);
  }

  double power = 0.0;
  for (double v : clean) power += v * v;
  const double rms = std::sqrt(power / static_cast<double>(n));
  const double scale = rms > 0.0 ? kSignalRms * gain / rms : 0.0;
  const double noise_std = kSignalRms * gain / db_to_linear(config.snr_db);
  for (double& v : clean) v = v * scale + noise_std * normal(rng);
  return clean;
}

Corpus generate_corpus(const SynthConfig& config, const std::filesystem::path& out_dir) {
  Corpus corpus;
  corpus.speakers = make_speakers(config);
  std::filesystem::create_directories(out_dir / "wav");
  for (std::size_t s = 0; s < config.num_speakers; ++s) {
    for (std::size_t u = 0; u < config.utts_per_speaker; ++u) {
      const std::string utt = utterance_id(s, u);
      Rng rng = make_stream(config.seed, "utterance", s * config.utts_per_speaker + u);
      const auto audio = synthesize_utterance(corpus.speakers[s], config, rng);
      const std::filesystem::path rel = std::filesystem::path("wav") / (utt + ".wav");
      write_wav(out_dir / rel, audio, config.sample_rate);
      ManifestEntry e{corpus.speakers[s].id, utt, rel};
      corpus.manifest.push_back(e);
      (u + config.test_utts_per_speaker >= config.utts_per_speaker ? corpus.test : corpus.train)
          .push_back(e);
    }
  }
  write_manifest(out_dir / "manifest.tsv", corpus.manifest);
  write_manifest(out_dir / "train.tsv", corpus.train);
  write_manifest(out_dir / "test.tsv", corpus.test);
  return corpus;
}

namespace {

struct PairSets {
  std::vector<std::pair<std::size_t, std::size_t>> target, nontarget;
};

PairSets enumerate_pairs(const std::vector<ManifestEntry>& manifest) {
  std::set<std::string> ids, speakers;
  for (const auto& e : manifest) {
    if (!ids.insert(e.utterance).second)
      throw std::invalid_argument("duplicate utterance id in manifest: " + e.utterance);
    speakers.insert(e.speaker);
  }
  if (speakers.size() < 2) throw std::invalid_argument("trials need at least 2 speakers");
  PairSets p;
  for (std::size_t i = 0; i < manifest.size(); ++i)
    for (std::size_t j = i + 1; j < manifest.size(); ++j)
      (manifest[i].speaker == manifest[j].speaker ? p.target : p.nontarget).emplace_back(i, j);
  return p;
}

void take(std::vector<std::pair<std::size_t, std::size_t>>& pairs, std::optional<std::size_t> n,
          const char* kind, Rng& rng) {
  if (!n) return;
  if (*n > pairs.size()) {
    throw std::invalid_argument("requested " + std::to_string(*n) + " " + kind +
                                " trials, maximum available is " + std::to_string(pairs.size()));
  }
  // Partial Fisher-Yates: the first n entries become a uniform sample.
  for (std::size_t i = 0; i < *n; ++i)
    std::swap(pairs[i], pairs[i + uniform_index(rng, pairs.size() - i)]);
  pairs.resize(*n);
}

}  // namespace

std::size_t max_target_pairs(const std::vector<ManifestEntry>& manifest) {
  return enumerate_pairs(manifest).target.size();
}

std::size_t max_nontarget_pairs(const std::vector<ManifestEntry>& manifest) {
  return enumerate_pairs(manifest).nontarget.size();
}

std::vector<Trial> make_trials(const std::vector<ManifestEntry>& manifest,
                               std::optional<std::size_t> num_target,
                               std::optional<std::size_t> num_nontarget, std::uint64_t seed) {
  PairSets p = enumerate_pairs(manifest);
  Rng rt = make_stream(seed, "trials-target");
  Rng rn = make_stream(seed, "trials-nontarget");
  take(p.target, num_target, "target", rt);
  take(p.nontarget, num_nontarget, "nontarget", rn);
  std::vector<Trial> out;
  out.reserve(p.target.size() + p.nontarget.size());
  for (auto [i, j] : p.target) out.push_back({true, manifest[i].utterance, manifest[j].utterance});
  for (auto [i, j] : p.nontarget) out.push_back({false, manifest[i].utterance, manifest[j].utterance});
  return out;
}

}  // namespace dmha

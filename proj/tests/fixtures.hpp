#pragma once

// Small in-memory training setups shared by the trainer tests and the
// acceptance checks.

#include <cmath>
#include <cstdint>
#include <string>

#include "dmha/config.hpp"
#include "dmha/rng.hpp"
#include "dmha/trainer.hpp"

namespace testing {

inline dmha::RunConfig tiny_run_config(std::uint64_t seed = 1) {
  dmha::RunConfig c;
  c.features.n_mels = c.model.encoder.n_mels = 16;
  c.model.encoder.channels = {2, 2, 4, 4};
  c.model.pooling = dmha::PoolingKind::kDoubleMha;
  c.model.heads = 2;
  c.model.hidden = 8;
  c.train.chunk_frames = 32;
  c.train.batch_size = 4;
  c.train.lr = 1e-3;
  c.train.weight_decay = 1e-4;
  c.train.max_epochs = 5;
  c.train.anneal_patience = 2;
  c.train.validation_fraction = 0.25;
  c.train.seed = seed;
  return c;
}

// Each speaker raises its own pair of mel bins above unit-variance noise.
// Utterance lengths vary so chunking both crops and wraps.
inline dmha::Dataset pattern_dataset(std::size_t speakers, std::size_t utts, std::size_t n_mels,
                                     std::uint64_t seed) {
  dmha::Dataset d;
  for (std::size_t s = 0; s < speakers; ++s) {
    d.speakers.push_back("s" + std::to_string(s));
    for (std::size_t u = 0; u < utts; ++u) {
      dmha::Rng rng = dmha::make_stream(seed, "pattern-dataset", s * 1000 + u);
      const std::size_t n = 24 + 8 * ((s + u) % 4);
      dmha::Tensor frames({n, n_mels});
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t f = 0; f < n_mels; ++f) {
          const bool on = f == (2 * s) % n_mels || f == (2 * s + 5) % n_mels;
          frames.at(t, f) = dmha::normal(rng) + (on ? 3.0 : 0.0);
        }
      d.utterances.push_back({d.speakers.back() + "_u" + std::to_string(u), s, std::move(frames)});
    }
  }
  return d;
}

}  // namespace testing

#pragma once

// Glue between corpus files, models and the scoring back-end.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dmha/eval.hpp"
#include "dmha/manifest.hpp"
#include "dmha/model.hpp"

namespace dmha {

// Utterance id -> manifest entry; duplicate ids are rejected.
std::map<std::string, ManifestEntry> index_manifest(const std::vector<ManifestEntry>& manifest);

using Embedder = std::function<std::vector<double>(const ManifestEntry&)>;

// Model embedding of one wav file. When `attention_dir` is non-empty the
// pooling weights are written to <attention_dir>/<utterance>.att.
Embedder model_embedder(SpeakerModel& model, const FeatureConfig& features,
                        const std::filesystem::path& attention_dir = {});

// Time-averaged log mel spectrogram without mean normalization.
Embedder baseline_embedder(const FeatureConfig& features);

// One embedding per manifest entry, in manifest order.
EmbeddingTable embed_manifest(const std::vector<ManifestEntry>& manifest, const Embedder& embed);

// Embeds exactly the utterances referenced by the trials (once each), scores
// and evaluates them. Ids absent from the manifest are rejected as a list.
TrialEvaluation evaluate_with(const std::vector<Trial>& trials,
                              const std::vector<ManifestEntry>& manifest, const Embedder& embed,
                              const DcfConfig& dcf = {});

// One line per time step with K weights, then for double MHA one line with
// the K head weights.
void write_attention(const std::filesystem::path& path, const PoolingOutput& pooling);

}  // namespace dmha

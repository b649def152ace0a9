#include "dmha/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "dmha/wav.hpp"

namespace dmha {

std::map<std::string, ManifestEntry> index_manifest(const std::vector<ManifestEntry>& manifest) {
  std::map<std::string, ManifestEntry> out;
  for (const auto& e : manifest) {
    if (!out.emplace(e.utterance, e).second)
      throw std::invalid_argument("duplicate utterance id in manifest: " + e.utterance);
  }
  return out;
}

Embedder model_embedder(SpeakerModel& model, const FeatureConfig& features,
                        const std::filesystem::path& attention_dir) {
  if (!attention_dir.empty()) std::filesystem::create_directories(attention_dir);
  return [&model, features, attention_dir](const ManifestEntry& e) {
    const auto audio = read_wav(e.wav, features.sample_rate);
    if (audio.size() < min_samples_for_embedding(features)) {
      throw std::invalid_argument("utterance " + e.utterance + " is too short: " +
                                  std::to_string(audio.size()) + " samples, need at least " +
                                  std::to_string(min_samples_for_embedding(features)));
    }
    PoolingOutput pooling;
    const Tensor emb = model.embed(compute_features(audio, features.sample_rate, features), &pooling);
    if (!attention_dir.empty()) write_attention(attention_dir / (e.utterance + ".att"), pooling);
    return std::vector<double>(emb.values().begin(), emb.values().end());
  };
}

Embedder baseline_embedder(const FeatureConfig& features) {
  return [features](const ManifestEntry& e) {
    const auto audio = read_wav(e.wav, features.sample_rate);
    return mean_log_mel_embedding(log_mel(audio, features.sample_rate, features));
  };
}

EmbeddingTable embed_manifest(const std::vector<ManifestEntry>& manifest, const Embedder& embed) {
  EmbeddingTable table;
  for (const auto& e : manifest) table.add(e.utterance, embed(e));
  return table;
}

TrialEvaluation evaluate_with(const std::vector<Trial>& trials,
                              const std::vector<ManifestEntry>& manifest, const Embedder& embed,
                              const DcfConfig& dcf) {
  const auto index = index_manifest(manifest);
  std::set<std::string> missing;
  for (const auto& t : trials) {
    if (!index.count(t.enroll)) missing.insert(t.enroll);
    if (!index.count(t.test)) missing.insert(t.test);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : " ") + id;
    throw std::invalid_argument("utterances not in manifest: " + list);
  }
  return evaluate_trials(
      trials, [&](const std::string& id) { return embed(index.at(id)); }, dcf);
}

void write_attention(const std::filesystem::path& path, const PoolingOutput& pooling) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write attention weights " + path.string());
  const Tensor& w = pooling.weights;
  char buf[40];
  for (std::size_t t = 0; t < w.dim(0); ++t) {
    for (std::size_t j = 0; j < w.dim(1); ++j) {
      std::snprintf(buf, sizeof buf, j ? " %.9g" : "%.9g", w.at(t, j));
      out << buf;
    }
    out << '\n';
  }
  if (!pooling.head_weights.empty()) {
    for (std::size_t j = 0; j < pooling.head_weights.size(); ++j) {
      std::snprintf(buf, sizeof buf, j ? " %.9g" : "%.9g", pooling.head_weights[j]);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace dmha

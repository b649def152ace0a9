#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace dmha {

// One line of a corpus manifest: "speaker-id<TAB>utterance-id<TAB>wav-path".
// Relative wav paths are resolved against the manifest's directory on read.
struct ManifestEntry {
  std::string speaker;
  std::string utterance;
  std::filesystem::path wav;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

// Paths are written as given (relative paths stay relative).
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

}  // namespace dmha

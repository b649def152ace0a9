#include "dmha/manifest.hpp"

#include <fstream>
#include <stdexcept>

namespace dmha {

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected speaker<TAB>utterance<TAB>path");
    }
    std::filesystem::path wav = line.substr(t2 + 1);
    if (wav.is_relative()) wav = base / wav;
    out.push_back({line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), wav});
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : entries) out << e.speaker << '\t' << e.utterance << '\t' << e.wav.string() << '\n';
}

}  // namespace dmha

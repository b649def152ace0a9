#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace dmha {

// RIFF PCM, 16-bit signed little-endian, mono, 16 kHz. Anything else is
// rejected with a std::runtime_error naming the offending field.
std::vector<double> read_wav(const std::filesystem::path& path, int expected_rate = 16000);

// Samples are clipped to [-1, 1] and rounded to the nearest 16-bit code.
void write_wav(const std::filesystem::path& path, std::span<const double> samples,
               int sample_rate = 16000);

}  // namespace dmha

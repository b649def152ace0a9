#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "dmha/rng.hpp"
#include "dmha/tensor.hpp"

namespace testing {

inline dmha::Tensor random_tensor(dmha::Shape shape, std::uint64_t seed, double stddev = 1.0) {
  dmha::Rng rng = dmha::make_stream(seed, "test-tensor");
  return dmha::normal_tensor(std::move(shape), stddev, rng);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("dmha-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace testing

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <doctest.h>

#include "corpus.hpp"
#include "error.hpp"
#include "preprocess.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("bfm_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

inline bfm::corpus::RawVolume ramp_volume(bfm::corpus::Dims d, float scale = 1.0f) {
  bfm::corpus::RawVolume v;
  v.dims = d;
  v.voxels.resize(bfm::corpus::voxel_count(d));
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = scale * static_cast<float>(i % 97);
  return v;
}

// Full-extent preprocess::Volume with the given voxels.
inline bfm::preprocess::Volume make_volume(bfm::corpus::Dims d, std::vector<float> voxels) {
  bfm::preprocess::Volume v;
  v.dims = d;
  v.voxels = std::move(voxels);
  v.valid_extent.hi = d;
  return v;
}

}  // namespace testutil

#define CHECK_THROWS_CODE(expr, code_value)                           \
  do {                                                                \
    bool caught_ = false;                                             \
    try {                                                             \
      (void)(expr);                                                   \
    } catch (const bfm::Error& e_) {                                  \
      caught_ = true;                                                 \
      CHECK_MESSAGE(e_.code() == (code_value), e_.what());            \
    }                                                                 \
    CHECK_MESSAGE(caught_, "expected bfm::Error from " #expr);         \
  } while (0)

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace bfm::corpus {

using Dims = std::array<int, 3>;
using Spacing = std::array<double, 3>;

// Voxels are stored x-fastest (NIfTI order): index = x + nx * (y + ny * z).
inline std::size_t voxel_index(const Dims& d, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(d[0]) * (static_cast<std::size_t>(y) +
                                           static_cast<std::size_t>(d[1]) * z);
}

inline std::size_t voxel_count(const Dims& d) {
  return static_cast<std::size_t>(d[0]) * d[1] * d[2];
}

struct RawVolume {
  Dims dims{1, 1, 1};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> voxels;
  std::string modality;
};

// Session-level case index: case_id -> modality -> path. Paths are kept
// relative to `root` so a corpus can be moved as a unit.
struct CaseManifest {
  std::filesystem::path root;
  std::map<std::string, std::map<std::string, std::string>> entries;

  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }

  friend bool operator==(const CaseManifest&, const CaseManifest&) = default;
};

struct Session {
  std::string case_id;
  std::map<std::string, RawVolume> volumes;
};

// File stems reserved for annotation volumes; scan_corpus does not treat
// them as modalities.
bool is_label_stem(const std::string& canonical);

CaseManifest scan_corpus(const std::filesystem::path& root);

// JSON {case_id: {modality: path}}, paths relative to the manifest file's
// directory, keys sorted, written via temp file + rename.
void save_manifest(const CaseManifest& m, const std::filesystem::path& file);
CaseManifest load_manifest(const std::filesystem::path& file);

RawVolume read_volume(const std::filesystem::path& path);
void write_volume(const RawVolume& v, const std::filesystem::path& path);

Session load_session(const CaseManifest& m, const std::string& case_id);

// <case dir>/label.nii next to the case's first modality, if it exists.
std::filesystem::path label_path_for(const CaseManifest& m, const std::string& case_id);

}  // namespace bfm::corpus

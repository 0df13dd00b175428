#include "corpus.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <system_error>

#include <json.hpp>

#include "error.hpp"
#include "modality_embed.hpp"

namespace fs = std::filesystem;

namespace bfm::corpus {

namespace {

constexpr std::int32_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

// NIfTI-1 datatype codes handled by the reader.
enum Datatype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
};

template <typename T>
T load(const char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap && sizeof(T) > 1) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  }
  return v;
}

template <typename T>
void store_le(char* p, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
  std::memcpy(p, &v, sizeof(T));
}

std::vector<char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::IoError, "read failed for " + path.string());
  return bytes;
}

void write_atomically(const fs::path& file, const std::string& contents) {
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + tmp.string());
    out << contents;
    if (!out) fail(ErrorCode::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) fail(ErrorCode::IoError, "rename to " + file.string() + " failed: " + ec.message());
}

}  // namespace

bool is_label_stem(const std::string& canonical) {
  return canonical == "label" || canonical == "seg";
}

CaseManifest scan_corpus(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec))
    fail(ErrorCode::IoError, "corpus root " + root.string() + " is not a readable directory");

  CaseManifest m;
  m.root = root;
  std::vector<fs::path> case_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) case_dirs.push_back(entry.path());
  }
  for (const auto& dir : case_dirs) {
    std::map<std::string, std::string> modalities;
    for (const auto& file : fs::directory_iterator(dir)) {
      if (!file.is_regular_file() || file.path().extension() != ".nii") continue;
      const std::string name = embed::normalize_modality_name(file.path().filename().string());
      if (is_label_stem(name)) continue;
      const std::string case_id = dir.filename().string();
      if (modalities.count(name))
        fail(ErrorCode::DuplicateModality, "case '" + case_id + "' modality '" + name + "'");
      std::ifstream probe(file.path(), std::ios::binary);
      if (!probe) fail(ErrorCode::IoError, "unreadable file " + file.path().string());
      modalities[name] = fs::relative(file.path(), root).generic_string();
    }
    if (!modalities.empty()) m.entries[dir.filename().string()] = std::move(modalities);
  }
  return m;
}

void save_manifest(const CaseManifest& m, const fs::path& file) {
  const fs::path dir = fs::absolute(file).parent_path();
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [case_id, mods] : m.entries) {
    nlohmann::json inner = nlohmann::json::object();
    for (const auto& [name, rel] : mods) {
      inner[name] = fs::relative(fs::absolute(m.resolve(rel)), dir).generic_string();
    }
    doc[case_id] = std::move(inner);
  }
  write_atomically(file, doc.dump(2) + "\n");
}

CaseManifest load_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::IoError, "cannot open manifest " + file.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, "manifest " + file.string() + ": " + e.what());
  }
  if (!doc.is_object()) fail(ErrorCode::FormatError, "manifest must be a JSON object");
  CaseManifest m;
  m.root = fs::absolute(file).parent_path();
  for (const auto& [case_id, mods] : doc.items()) {
    if (!mods.is_object()) fail(ErrorCode::FormatError, "case '" + case_id + "' is not an object");
    auto& entry = m.entries[case_id];
    for (const auto& [name, rel] : mods.items()) {
      if (!rel.is_string()) fail(ErrorCode::FormatError, "path for " + case_id + "/" + name);
      const std::string canonical = embed::normalize_modality_name(name);
      if (entry.count(canonical))
        fail(ErrorCode::DuplicateModality, "case '" + case_id + "' modality '" + canonical + "'");
      entry[canonical] = rel.get<std::string>();
    }
  }
  return m;
}

RawVolume read_volume(const fs::path& path) {
  const std::vector<char> bytes = read_all(path);
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize))
    fail(ErrorCode::IoError, path.string() + ": truncated header");
  const char* h = bytes.data();

  bool swap = false;
  if (load<std::int32_t>(h, false) != kHeaderSize) {
    if (load<std::int32_t>(h, true) != kHeaderSize)
      fail(ErrorCode::FormatError, path.string() + ": bad header size field");
    swap = true;
  }
  if (std::memcmp(h + 344, "n+1\0", 4) != 0)
    fail(ErrorCode::FormatError, path.string() + ": bad magic (single-file NIfTI-1 expected)");

  const auto ndim = load<std::int16_t>(h + 40, swap);
  if (ndim != 3)
    fail(ErrorCode::UnsupportedShape, path.string() + ": " + std::to_string(ndim) + "-D image");

  RawVolume v;
  for (int a = 0; a < 3; ++a) {
    const auto n = load<std::int16_t>(h + 42 + 2 * a, swap);
    if (n <= 0) fail(ErrorCode::UnsupportedShape, path.string() + ": non-positive dimension");
    v.dims[a] = n;
    const double pix = std::fabs(static_cast<double>(load<float>(h + 80 + 4 * a, swap)));
    v.spacing[a] = (std::isfinite(pix) && pix > 0.0) ? pix : 1.0;
  }

  const auto datatype = load<std::int16_t>(h + 70, swap);
  std::size_t width = 0;
  switch (datatype) {
    case kUint8: case kInt8: width = 1; break;
    case kInt16: case kUint16: width = 2; break;
    case kFloat32: width = 4; break;
    case kFloat64: width = 8; break;
    default:
      fail(ErrorCode::UnsupportedDatatype, path.string() + ": datatype " + std::to_string(datatype));
  }

  const double vox_offset = load<float>(h + 108, swap);
  const auto offset = static_cast<std::size_t>(vox_offset < kHeaderSize ? kVoxOffset : vox_offset);
  const std::size_t n = voxel_count(v.dims);
  if (bytes.size() < offset + n * width)
    fail(ErrorCode::IoError, path.string() + ": truncated data section");

  const double slope = load<float>(h + 112, swap);
  const double inter = load<float>(h + 116, swap);
  const bool scaled = std::isfinite(slope) && slope != 0.0 && !(slope == 1.0 && inter == 0.0);

  v.voxels.resize(n);
  const char* body = h + offset;
  for (std::size_t i = 0; i < n; ++i) {
    const char* p = body + i * width;
    double x = 0.0;
    switch (datatype) {
      case kUint8: x = load<std::uint8_t>(p, swap); break;
      case kInt8: x = load<std::int8_t>(p, swap); break;
      case kInt16: x = load<std::int16_t>(p, swap); break;
      case kUint16: x = load<std::uint16_t>(p, swap); break;
      case kFloat32: {
        const float f = load<float>(p, swap);
        if (!scaled) {
          v.voxels[i] = f;
          continue;
        }
        x = f;
        break;
      }
      case kFloat64: x = load<double>(p, swap); break;
    }
    if (scaled) x = x * slope + inter;
    v.voxels[i] = static_cast<float>(x);
  }
  v.modality = embed::normalize_modality_name(path.filename().string());
  return v;
}

void write_volume(const RawVolume& v, const fs::path& path) {
  const std::size_t n = voxel_count(v.dims);
  if (v.voxels.size() != n) fail(ErrorCode::ShapeError, "voxel count does not match dims");
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] <= 0 || v.dims[a] > 32767)
      fail(ErrorCode::UnsupportedShape, "dimension out of NIfTI-1 range");
  }

  std::string buf(kVoxOffset + n * sizeof(float), '\0');
  char* h = buf.data();
  store_le<std::int32_t>(h, kHeaderSize);
  store_le<std::int16_t>(h + 40, 3);
  for (int a = 0; a < 3; ++a) store_le<std::int16_t>(h + 42 + 2 * a, static_cast<std::int16_t>(v.dims[a]));
  for (int a = 3; a < 8; ++a) store_le<std::int16_t>(h + 42 + 2 * a, 1);
  store_le<std::int16_t>(h + 70, kFloat32);
  store_le<std::int16_t>(h + 72, 32);
  store_le<float>(h + 76, 1.0f);  // qfac
  for (int a = 0; a < 3; ++a) store_le<float>(h + 80 + 4 * a, static_cast<float>(v.spacing[a]));
  store_le<float>(h + 108, static_cast<float>(kVoxOffset));
  store_le<float>(h + 112, 1.0f);
  store_le<float>(h + 116, 0.0f);
  h[123] = 2;  // xyzt_units: millimetres
  std::memcpy(h + 344, "n+1\0", 4);
  std::memcpy(h + kVoxOffset, v.voxels.data(), n * sizeof(float));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

Session load_session(const CaseManifest& m, const std::string& case_id) {
  auto it = m.entries.find(case_id);
  if (it == m.entries.end()) fail(ErrorCode::NotFound, "case '" + case_id + "' not in manifest");
  Session s;
  s.case_id = case_id;
  for (const auto& [name, rel] : it->second) {
    RawVolume v = read_volume(m.resolve(rel));
    v.modality = name;
    s.volumes.emplace(name, std::move(v));
  }
  return s;
}

fs::path label_path_for(const CaseManifest& m, const std::string& case_id) {
  auto it = m.entries.find(case_id);
  if (it == m.entries.end() || it->second.empty())
    fail(ErrorCode::NotFound, "case '" + case_id + "' not in manifest");
  return m.resolve(it->second.begin()->second).parent_path() / "label.nii";
}

}  // namespace bfm::corpus

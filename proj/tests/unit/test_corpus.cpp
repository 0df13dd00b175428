#include <algorithm>
#include <cstring>

#include "corpus.hpp"
#include "helpers.hpp"

using namespace bfm;
using testutil::TempDir;

namespace {

template <typename T>
void put(std::vector<char>& b, std::size_t off, T value, bool big_endian) {
  char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if (big_endian) std::reverse(raw, raw + sizeof(T));
  std::memcpy(b.data() + off, raw, sizeof(T));
}

// Hand-built single-file NIfTI-1 image, float32 body.
std::vector<char> craft_nifti(const std::array<std::int16_t, 3>& dims, const std::vector<float>& body,
                              bool big_endian, const char* magic = "n+1") {
  std::vector<char> b(352 + body.size() * 4, 0);
  put<std::int32_t>(b, 0, 348, big_endian);
  put<std::int16_t>(b, 40, 3, big_endian);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(b, 42 + 2 * a, dims[a], big_endian);
  put<std::int16_t>(b, 70, 16, big_endian);
  put<std::int16_t>(b, 72, 32, big_endian);
  for (int a = 0; a < 3; ++a) put<float>(b, 80 + 4 * a, 1.0f, big_endian);
  put<float>(b, 108, 352.0f, big_endian);
  std::memcpy(b.data() + 344, magic, std::strlen(magic) + 1);
  for (std::size_t i = 0; i < body.size(); ++i) put<float>(b, 352 + 4 * i, body[i], big_endian);
  return b;
}

std::vector<float> body64() {
  std::vector<float> v(64);
  for (int i = 0; i < 64; ++i) v[i] = 0.25f * static_cast<float>(i) - 3.0f;
  return v;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("crafted float32 fixture reads bit-exact") {
  TempDir dir("nii");
  testutil::write_bytes(dir / "t1.nii", craft_nifti({4, 4, 4}, body64(), false));
  const auto v = corpus::read_volume(dir / "t1.nii");
  CHECK(v.dims == corpus::Dims{4, 4, 4});
  REQUIRE(v.voxels.size() == 64);
  CHECK(std::memcmp(v.voxels.data(), body64().data(), 64 * sizeof(float)) == 0);
  CHECK(v.modality == "t1");
}

TEST_CASE("byte-swapped header gives the same volume") {
  TempDir dir("nii_be");
  testutil::write_bytes(dir / "le.nii", craft_nifti({4, 4, 4}, body64(), false));
  testutil::write_bytes(dir / "be.nii", craft_nifti({4, 4, 4}, body64(), true));
  const auto a = corpus::read_volume(dir / "le.nii");
  const auto b = corpus::read_volume(dir / "be.nii");
  CHECK(a.dims == b.dims);
  CHECK(a.voxels == b.voxels);
}

TEST_CASE("read_volume error paths") {
  TempDir dir("nii_err");
  testutil::write_bytes(dir / "magic.nii", craft_nifti({4, 4, 4}, body64(), false, "xxx"));
  CHECK_THROWS_CODE(corpus::read_volume(dir / "magic.nii"), ErrorCode::FormatError);

  auto four_d = craft_nifti({4, 4, 4}, body64(), false);
  put<std::int16_t>(four_d, 40, 4, false);
  testutil::write_bytes(dir / "4d.nii", four_d);
  CHECK_THROWS_CODE(corpus::read_volume(dir / "4d.nii"), ErrorCode::UnsupportedShape);

  auto dtype = craft_nifti({4, 4, 4}, body64(), false);
  put<std::int16_t>(dtype, 70, 32, false);  // complex64
  testutil::write_bytes(dir / "dtype.nii", dtype);
  CHECK_THROWS_CODE(corpus::read_volume(dir / "dtype.nii"), ErrorCode::UnsupportedDatatype);

  auto trunc = craft_nifti({4, 4, 4}, body64(), false);
  trunc.resize(trunc.size() - 10);
  testutil::write_bytes(dir / "trunc.nii", trunc);
  CHECK_THROWS_CODE(corpus::read_volume(dir / "trunc.nii"), ErrorCode::IoError);

  CHECK_THROWS_CODE(corpus::read_volume(dir / "missing.nii"), ErrorCode::IoError);
}

TEST_CASE("write_volume byte accounting and round trip") {
  TempDir dir("nii_w");
  corpus::RawVolume one;
  one.voxels = {0.0f};
  corpus::write_volume(one, dir / "one.nii");
  CHECK(std::filesystem::file_size(dir / "one.nii") == 356);

  auto v = testutil::ramp_volume({5, 3, 2}, 0.37f);
  v.spacing = {0.5, 1.25, 2.0};
  v.voxels[3] = -1e-30f;
  corpus::write_volume(v, dir / "ramp.nii");
  const auto r = corpus::read_volume(dir / "ramp.nii");
  CHECK(r.dims == v.dims);
  CHECK(r.spacing == v.spacing);
  CHECK(std::memcmp(r.voxels.data(), v.voxels.data(), v.voxels.size() * 4) == 0);
}

TEST_CASE("write_volume to an unwritable path fails with IoError") {
  TempDir dir("nii_ro");
  corpus::RawVolume one;
  one.voxels = {1.0f};
  CHECK_THROWS_CODE(corpus::write_volume(one, dir / "no_such_dir" / "x.nii"), ErrorCode::IoError);
}

TEST_CASE("scan_corpus indexes sessions and rejects duplicates") {
  TempDir dir("scan");
  const auto vol = testutil::ramp_volume({4, 4, 4});
  std::filesystem::create_directories(dir / "sub_01");
  corpus::write_volume(vol, dir / "sub_01/t1.nii");
  corpus::write_volume(vol, dir / "sub_01/flair.nii");
  corpus::write_volume(vol, dir / "sub_01/label.nii");
  const auto m = corpus::scan_corpus(dir.path());
  REQUIRE(m.entries.size() == 1);
  const auto& e = m.entries.at("sub_01");
  CHECK(e.size() == 2);
  CHECK(e.count("t1") == 1);
  CHECK(e.count("flair") == 1);

  TempDir empty("scan_empty");
  CHECK(corpus::scan_corpus(empty.path()).entries.empty());

  TempDir dup("scan_dup");
  std::filesystem::create_directories(dup / "sub_01");
  corpus::write_volume(vol, dup / "sub_01/t1.nii");
  corpus::write_volume(vol, dup / "sub_01/T1.nii");
  try {
    corpus::scan_corpus(dup.path());
    FAIL("expected DuplicateModality");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::DuplicateModality);
    const std::string msg = err.what();
    CHECK(msg.find("sub_01") != std::string::npos);
    CHECK(msg.find("t1") != std::string::npos);
  }
}

TEST_CASE("manifest save/load round trip and load_session order") {
  TempDir dir("manifest");
  const auto vol = testutil::ramp_volume({4, 4, 4});
  for (const char* c : {"a", "b"}) {
    std::filesystem::create_directories(dir / c);
    corpus::write_volume(vol, dir / (std::string(c) + "/t1.nii"));
  }
  corpus::write_volume(vol, dir / "a/flair.nii");
  const auto m = corpus::scan_corpus(dir.path());
  corpus::save_manifest(m, dir / "manifest.json");
  const auto back = corpus::load_manifest(dir / "manifest.json");
  CHECK(back.entries == m.entries);
  CHECK(std::filesystem::equivalent(back.root, m.root));

  const auto s = corpus::load_session(back, "a");
  REQUIRE(s.volumes.size() == 2);
  CHECK(s.volumes.begin()->first == "flair");
  CHECK(std::next(s.volumes.begin())->first == "t1");
  CHECK(corpus::load_session(back, "b").volumes.size() == 1);
  CHECK_THROWS_CODE(corpus::load_session(back, "zzz"), ErrorCode::NotFound);
}

}  // TEST_SUITE

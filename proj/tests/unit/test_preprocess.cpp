#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "helpers.hpp"
#include "preprocess.hpp"
#include "rng.hpp"

using namespace bfm;
using namespace bfm::preprocess;
using nlohmann::json;

namespace {

json golden() {
  std::ifstream in(std::string(BFM_TEST_DATA_DIR) + "/preprocess_golden.json");
  REQUIRE(in.good());
  return json::parse(in);
}

Volume volume_from(const json& j) {
  Volume v;
  v.dims = j["dims"].get<Dims>();
  v.valid_extent.lo = j["lo"].get<std::array<int, 3>>();
  v.valid_extent.hi = j["hi"].get<std::array<int, 3>>();
  for (double x : j["voxels"]) v.voxels.push_back(static_cast<float>(x));
  return v;
}

// Largest absolute difference; also counts exact matches.
double max_diff(const Volume& a, const Volume& b, int* exact = nullptr) {
  REQUIRE(a.voxels.size() == b.voxels.size());
  double m = 0.0;
  int same = 0;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a.voxels[i]) - b.voxels[i]));
    same += a.voxels[i] == b.voxels[i];
  }
  if (exact) *exact = same;
  return m;
}

corpus::RawVolume raw(Dims d, float fill) {
  corpus::RawVolume r;
  r.dims = d;
  r.voxels.assign(corpus::voxel_count(d), fill);
  return r;
}

}  // namespace

TEST_SUITE("preprocess") {

TEST_CASE("counter RNG matches the scripted oracle") {
  const json g = golden()["rng"];
  CounterRng r = CounterRng::stream(g["stream_seed"].get<std::uint64_t>(), {1, 2});
  for (const auto& s : g["u64"]) CHECK(r.next_u64() == std::stoull(s.get<std::string>()));
  CHECK(stable_hash("t1") == std::stoull(g["fnv1a_t1"].get<std::string>()));
}

TEST_CASE("crop_or_pad index arithmetic") {
  auto same = testutil::ramp_volume({8, 8, 8});
  const Volume a = crop_or_pad(same, {8, 8, 8});
  CHECK(a.voxels == same.voxels);
  CHECK(a.valid_extent.lo == std::array<int, 3>{0, 0, 0});
  CHECK(a.valid_extent.hi == std::array<int, 3>{8, 8, 8});

  const Volume b = crop_or_pad(raw({130, 126, 128}, 1.0f), {128, 128, 128});
  CHECK(b.dims == Dims{128, 128, 128});
  CHECK(b.valid_extent.lo == std::array<int, 3>{0, 1, 0});
  CHECK(b.valid_extent.hi == std::array<int, 3>{128, 127, 128});
  CHECK(b.at(5, 0, 5) == 0.0f);
  CHECK(b.at(5, 1, 5) == 1.0f);
  CHECK(b.at(5, 127, 5) == 0.0f);

  // Source x index 1 lands on output x 0 when one voxel is cropped per side.
  auto ramp = raw({130, 1, 1}, 0.0f);
  for (int x = 0; x < 130; ++x) ramp.voxels[x] = static_cast<float>(x);
  CHECK(crop_or_pad(ramp, {128, 1, 1}).at(0, 0, 0) == 1.0f);

  const Volume c = crop_or_pad(raw({64, 64, 64}, 0.0f), {128, 128, 128});
  CHECK(c.valid_extent.lo == std::array<int, 3>{32, 32, 32});
  CHECK(c.valid_extent.hi == std::array<int, 3>{96, 96, 96});
  CHECK(std::all_of(c.voxels.begin(), c.voxels.end(), [](float x) { return x == 0.0f; }));
}

TEST_CASE("divisible_pad") {
  const Volume full = crop_or_pad(raw({32, 16, 16}, 1.0f), {32, 16, 16});
  CHECK(divisible_pad(full, {16, 16, 16}).dims == Dims{32, 16, 16});
  CHECK(divisible_pad(crop_or_pad(raw({30, 30, 30}, 1.0f), {30, 30, 30}), {16, 16, 16}).dims ==
        Dims{32, 32, 32});
  const Volume p = divisible_pad(crop_or_pad(raw({17, 16, 16}, 1.0f), {17, 16, 16}), {16, 16, 16});
  CHECK(p.dims == Dims{32, 16, 16});
  CHECK(p.valid_extent.lo[0] == 7);
  CHECK(p.valid_extent.hi[0] == 24);
}

TEST_CASE("bias field") {
  const json g = golden();
  const Volume src = volume_from(g["input"]);
  CounterRng r0 = stage_rng(7, "golden", 0, Stage::BiasField, "t1");
  const Volume same = rand_bias_field(src, r0, 0.0, {0.3, 0.6});
  CHECK(same.voxels == src.voxels);

  CHECK(bias_field_terms().size() == 20);
  CHECK(apply_bias_field(src, std::vector<double>(20, 0.0)).voxels == src.voxels);

  CounterRng r = stage_rng(7, "golden", 0, Stage::BiasField, "t1");
  std::vector<double> coeffs;
  const Volume out = rand_bias_field(src, r, 1.0, {0.3, 0.6}, &coeffs);
  const auto& gc = g["bias_field"]["coefficients"];
  REQUIRE(coeffs.size() == gc.size());
  for (std::size_t i = 0; i < coeffs.size(); ++i) CHECK(coeffs[i] == gc[i].get<double>());
  int exact = 0;
  CHECK(max_diff(out, volume_from(g["bias_field"]["output"]), &exact) <= 1e-6);
  MESSAGE("bias field: " << exact << " / " << out.voxels.size() << " voxels bit-exact");
}

TEST_CASE("gaussian noise") {
  const json g = golden();
  const Volume src = volume_from(g["input"]);
  CounterRng r0(1);
  CHECK(rand_gaussian_noise(src, r0, 0.0, 0.0, 1.0).voxels == src.voxels);

  CounterRng r1(1);
  const Volume shifted = rand_gaussian_noise(src, r1, 1.0, 0.5, 0.0);
  for (int z = 0; z < src.dims[2]; ++z)
    for (int y = 0; y < src.dims[1]; ++y)
      for (int x = 0; x < src.dims[0]; ++x) {
        const float want = src.valid_extent.contains(x, y, z) ? src.at(x, y, z) + 0.5f : src.at(x, y, z);
        CHECK(shifted.at(x, y, z) == want);
      }

  CounterRng r = stage_rng(7, "golden", 0, Stage::Noise, "t1");
  const Volume out = rand_gaussian_noise(src, r, 1.0, 0.0, 0.05);
  CHECK(max_diff(out, volume_from(g["noise"]["output"])) <= 1e-6);
}

TEST_CASE("contrast adjustment") {
  const Volume src = volume_from(golden()["input"]);
  CHECK(adjust_contrast(src, 1.0).voxels == src.voxels);

  Volume flat = src;
  for (auto& x : flat.voxels) x = 2.0f;
  CHECK(adjust_contrast(flat, 0.5).voxels == flat.voxels);

  const Volume bin = testutil::make_volume({2, 2, 1}, {0.0f, 1.0f, 1.0f, 0.0f});
  CHECK(adjust_contrast(bin, 2.0).voxels == bin.voxels);

  CounterRng r(3);
  CHECK(rand_adjust_contrast(src, r, 0.0, {0.7, 1.5}).voxels == src.voxels);
}

TEST_CASE("flip") {
  const json g = golden();
  const Volume src = volume_from(g["input"]);
  CHECK(flip(src, {false, false, false}).voxels == src.voxels);

  const Volume all = flip(src, {true, true, true});
  CHECK(all.at(0, 0, 0) == src.at(11, 9, 7));
  CHECK(flip(all, {true, true, true}).voxels == src.voxels);
  CHECK(flip(all, {true, true, true}).valid_extent == src.valid_extent);

  CounterRng r = stage_rng(7, "golden", 0, Stage::Flip);
  const auto axes = sample_flip(r, 0.5);
  const auto want = g["flip"]["axes"].get<std::array<bool, 3>>();
  CHECK(axes == want);
  const Volume out = flip(src, axes);
  const Volume gold = volume_from(g["flip"]["output"]);
  CHECK(out.voxels == gold.voxels);
  CHECK(out.valid_extent == gold.valid_extent);
}

TEST_CASE("rotation") {
  const json g = golden();
  const Volume src = volume_from(g["input"]);
  CHECK(rotate(src, {0.0, 0.0, 0.0}).voxels == src.voxels);

  // 3x3x1 slab, 90 degrees about z: out(x, y) = in(y, 2 - x).
  std::vector<float> slab{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const Volume s = testutil::make_volume({3, 3, 1}, slab);
  const Volume r = rotate(s, {0.0, 0.0, std::numbers::pi / 2});
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) CHECK(std::fabs(r.at(x, y, 0) - s.at(y, 2 - x, 0)) <= 1e-6);

  CounterRng ar = stage_rng(7, "golden", 0, Stage::Affine);
  const auto angles = sample_angles(ar, std::numbers::pi / 12);
  const auto want = g["affine"]["angles"];
  for (int a = 0; a < 3; ++a) CHECK(angles[a] == want[a].get<double>());
  int exact = 0;
  CHECK(max_diff(rotate(src, angles), volume_from(g["affine"]["output"]), &exact) <= 1e-5);
  MESSAGE("rotation: " << exact << " / " << src.voxels.size() << " voxels bit-exact");
}

TEST_CASE("normalize and sanitize") {
  const Volume v = testutil::make_volume({4, 1, 1}, {2.0f, 0.0f, 4.0f, 0.0f});
  const Volume n = normalize_intensity(v);
  CHECK(n.voxels == std::vector<float>{-1.0f, 0.0f, 1.0f, 0.0f});

  const Volume zeros = testutil::make_volume({3, 1, 1}, {0.0f, 0.0f, 0.0f});
  CHECK(normalize_intensity(zeros).voxels == zeros.voxels);
  const Volume constant = testutil::make_volume({3, 1, 1}, {5.0f, 5.0f, 5.0f});
  CHECK(normalize_intensity(constant).voxels == constant.voxels);

  const float nan = std::numeric_limits<float>::quiet_NaN();
  const float inf = std::numeric_limits<float>::infinity();
  const Volume dirty = testutil::make_volume({5, 1, 1}, {nan, 5.0f, -3.9f, inf, -inf});
  CHECK(sanitize(dirty).voxels == std::vector<float>{0.0f, 4.0f, -3.9f, 0.0f, 0.0f});
}

TEST_CASE("preprocess_session") {
  corpus::Session s;
  s.case_id = "sess";
  s.volumes["t1"] = testutil::ramp_volume({10, 12, 9});
  s.volumes["flair"] = testutil::ramp_volume({10, 12, 9}, 0.5f);

  PreprocessConfig quiet;
  quiet.target_shape = {8, 8, 8};
  quiet.patch_size = {4, 4, 4};
  quiet.bias_field_prob = quiet.noise_prob = quiet.contrast_prob = quiet.flip_prob = 0.0;
  quiet.rotation_bound = 0.0;
  const auto plain = preprocess_session(s, quiet);
  const Volume expect =
      sanitize(normalize_intensity(divisible_pad(crop_or_pad(s.volumes["t1"], {8, 8, 8}), {4, 4, 4})));
  CHECK(plain.volumes.at("t1").voxels == expect.voxels);

  PreprocessConfig noisy = quiet;
  noisy.seed = 7;
  noisy.flip_prob = 0.5;
  noisy.bias_field_prob = noisy.noise_prob = noisy.contrast_prob = 1.0;
  noisy.rotation_bound = std::numbers::pi / 12;
  const auto a = preprocess_session(s, noisy);
  const auto b = preprocess_session(s, noisy);
  CHECK(a.volumes.at("t1").voxels == b.volumes.at("t1").voxels);
  CHECK(applied_ops_json(a) == applied_ops_json(b));

  // Every modality logs the same sampled flip axes and angles.
  std::vector<json> flips, angles;
  for (const auto& op : a.applied_ops) {
    if (op.op == "rand_flip") flips.push_back(op.params["axes"]);
    if (op.op == "rand_affine") angles.push_back(op.params["angles"]);
  }
  REQUIRE(flips.size() == 2);
  CHECK(flips[0] == flips[1]);
  REQUIRE(angles.size() == 2);
  CHECK(angles[0] == angles[1]);
  CHECK(a.volumes.at("t1").valid_extent == a.volumes.at("flair").valid_extent);

  corpus::Session mixed;
  mixed.case_id = "mixed";
  mixed.volumes["t1"] = raw({130, 126, 128}, 1.0f);
  mixed.volumes["t2"] = raw({128, 128, 128}, 1.0f);
  PreprocessConfig big;
  big.bias_field_prob = big.noise_prob = big.contrast_prob = big.flip_prob = 0.0;
  big.rotation_bound = 0.0;
  const auto m = preprocess_session(mixed, big);
  CHECK(m.volumes.at("t1").dims == Dims{128, 128, 128});
  CHECK(m.volumes.at("t2").dims == Dims{128, 128, 128});

  corpus::Session empty;
  CHECK_THROWS_CODE(preprocess_session(empty, quiet), ErrorCode::EmptySession);

  PreprocessConfig bad = quiet;
  bad.noise_prob = 1.5;
  CHECK_THROWS_CODE(bad.validate(), ErrorCode::ConfigError);
}

}  // TEST_SUITE

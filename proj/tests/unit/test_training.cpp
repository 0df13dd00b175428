#include <cmath>
#include <fstream>

#include "config.hpp"
#include "helpers.hpp"
#include "training.hpp"

using namespace bfm;
using namespace bfm::training;
using testutil::TempDir;

namespace {

ParamSet scalar(double v) {
  ParamSet p;
  p.add("theta", {1}).data[0] = v;
  return p;
}

RunConfig tiny_run() {
  RunConfig c = tiny_config();
  c.epochs = 2;
  c.warm_epochs = 1;
  return c;
}

std::size_t count_set(const corpus::RawVolume& v) {
  std::size_t n = 0;
  for (float x : v.voxels) n += x > 0.5f;
  return n;
}

// Two-modality phantoms; class 1 carries a large lesion.
LabeledCase lesion_case(std::uint64_t seed, const std::string& id, bool lesion) {
  SynthSpec spec;
  spec.dims = {16, 16, 16};
  spec.lesion = lesion;
  spec.lesion_radius = 3;
  spec.lesion_center = std::array<int, 3>{8, 8, 8};
  auto sc = synth_session(seed, id, spec);
  return {std::move(sc.session), std::move(sc.label), lesion ? 1 : 0};
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("adamw hand examples") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  {
    ParamSet p = scalar(1.0);
    OptimState st = OptimState::zeros_like(p);
    adamw_step(p, scalar(1.0), st, cfg);
    CHECK(p.at("theta").data[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(st.t == 1);
  }
  {
    ParamSet p = scalar(1.0);
    OptimState st = OptimState::zeros_like(p);
    AdamWConfig zero = cfg;
    zero.lr = 0.0;
    adamw_step(p, scalar(1.0), st, zero);
    CHECK(p.at("theta").data[0] == 1.0);
    CHECK(st.m.at("theta").data[0] == doctest::Approx(0.1));
    CHECK(st.v.at("theta").data[0] == doctest::Approx(0.001));
  }
  {
    ParamSet p = scalar(1.0);
    OptimState st = OptimState::zeros_like(p);
    AdamWConfig wd = cfg;
    wd.weight_decay = 0.1;
    adamw_step(p, scalar(0.0), st, wd);
    CHECK(p.at("theta").data[0] == doctest::Approx(0.99).epsilon(1e-15));
  }
  {
    ParamSet p = scalar(1.0);
    OptimState st = OptimState::zeros_like(p);
    CHECK_THROWS_CODE(adamw_step(p, scalar(std::nan("")), st, cfg), ErrorCode::NonFiniteGradient);
    CHECK(p.at("theta").data[0] == 1.0);
    CHECK(st.t == 0);
  }
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 100, 0.1, 1e-3, 1e-5) == 0.0);
  CHECK(lr_schedule(5, 100, 0.1, 1e-3, 1e-5) == doctest::Approx(5e-4));
  CHECK(lr_schedule(10, 100, 0.1, 1e-3, 1e-5) == 1e-3);
  CHECK(lr_schedule(100, 100, 0.1, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_schedule(55, 100, 0.1, 1e-3, 1e-5) == doctest::Approx(1e-5 + 0.5 * (1e-3 - 1e-5)));
  CHECK_THROWS_CODE(lr_schedule(101, 100, 0.1, 1e-3, 1e-5), ErrorCode::RangeError);
  CHECK_THROWS_CODE(lr_schedule(-1, 100, 0.1, 1e-3, 1e-5), ErrorCode::RangeError);
}

TEST_CASE("synthetic phantoms") {
  SynthSpec spec;
  const auto a = synth_session(3, "case_000", spec);
  const auto b = synth_session(3, "case_000", spec);
  CHECK(a.session.volumes.at("t1").voxels == b.session.volumes.at("t1").voxels);
  CHECK(a.session.volumes.at("flair").voxels == b.session.volumes.at("flair").voxels);

  SynthSpec lesion = spec;
  lesion.lesion = true;
  lesion.lesion_radius = 4;
  lesion.lesion_center = std::array<int, 3>{16, 16, 16};
  const auto l = synth_session(3, "case_000", lesion);
  REQUIRE(l.label.has_value());
  CHECK(count_set(*l.label) == 257);

  SynthSpec single = spec;
  single.modalities = {"t1"};
  CHECK(synth_session(3, "x", single).session.volumes.size() == 1);

  SynthSpec small = spec;
  small.dims = {8, 8, 8};
  CHECK_THROWS_CODE(synth_session(3, "x", small), ErrorCode::RangeError);
}

TEST_CASE("checkpoint round trip and corruption") {
  TempDir dir("ckpt");
  Checkpoint c;
  c.config = tiny_config();
  c.step = 17;
  c.epoch = 3;
  c.params = network::init_params(c.config.net, 9);
  c.optim = OptimState::zeros_like(c.params);
  c.optim.t = 17;
  c.optim.m.begin()->second.data[0] = 1.0 / 3.0;
  c.extra = {{"note", "x"}};
  save_checkpoint(c, dir / "c.bfmc");
  const auto back = load_checkpoint(dir / "c.bfmc");
  CHECK(back.params == c.params);
  CHECK(back.optim.m == c.optim.m);
  CHECK(back.optim.v == c.optim.v);
  CHECK(back.optim.t == 17);
  CHECK(back.step == 17);
  CHECK(back.epoch == 3);
  CHECK(to_json(back.config) == to_json(c.config));
  CHECK(back.extra == c.extra);

  auto bytes = testutil::read_bytes(dir / "c.bfmc");
  auto cut = bytes;
  cut.resize(cut.size() / 2);
  testutil::write_bytes(dir / "cut.bfmc", cut);
  CHECK_THROWS_CODE(load_checkpoint(dir / "cut.bfmc"), ErrorCode::FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  testutil::write_bytes(dir / "magic.bfmc", magic);
  CHECK_THROWS_CODE(load_checkpoint(dir / "magic.bfmc"), ErrorCode::FormatError);

  auto version = bytes;
  version[4] = static_cast<char>(kCheckpointVersion + 1);
  testutil::write_bytes(dir / "version.bfmc", version);
  CHECK_THROWS_CODE(load_checkpoint(dir / "version.bfmc"), ErrorCode::VersionError);
}

TEST_CASE("pretrain: zero epochs and determinism") {
  RunConfig cfg = tiny_run();
  const auto data = synthetic_provider(cfg);
  cfg.epochs = 0;
  const auto none = pretrain_loop(cfg, *data);
  CHECK(none.metrics.empty());
  CHECK(none.checkpoint.params == network::init_params(cfg.net, cfg.seed));

  cfg.epochs = 10;
  cfg.synth_cases = 2;
  const auto a = pretrain_loop(cfg, *data);
  const auto b = pretrain_loop(cfg, *data);
  REQUIRE(a.metrics.size() == 10);
  CHECK(a.metrics == b.metrics);
  CHECK(a.checkpoint.params == b.checkpoint.params);
  for (const auto& m : a.metrics) {
    for (const char* k : {"step", "lr", "l_mae", "l_var", "l_cov", "l_total", "grad_norm"})
      CHECK(m.contains(k));
  }
}

TEST_CASE("pretrain: loss decreases on a cached session") {
  RunConfig cfg = tiny_config();
  cfg.synth_cases = 1;
  cfg.batch_size = 2;
  cfg.epochs = 200;
  cfg.mask_ratio = 0.5;
  cfg.lr_max = 1e-2;
  const auto data = synthetic_provider(cfg);
  const auto r = pretrain_loop(cfg, *data);
  REQUIRE(r.metrics.size() == 200);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += r.metrics[i]["l_mae"].get<double>();
    tail += r.metrics[190 + i]["l_mae"].get<double>();
  }
  CHECK_MESSAGE(tail < 0.5 * head, "first 10 mean " << head / 10 << ", last 10 mean " << tail / 10);
}

TEST_CASE("finetune: frozen encoder only moves the head") {
  RunConfig cfg = tiny_run();
  cfg.freeze_encoder = true;
  cfg.epochs = 2;
  cfg.patience = 5;
  cfg.synth_lesion_fraction = 1.0;
  const auto data = synthetic_provider(cfg);
  Checkpoint init;
  init.config = cfg;
  init.params = network::init_params(cfg.net, 4);
  init.optim = OptimState::zeros_like(init.params);
  const auto res = finetune(cfg, Task::Segmentation, init, *data, *data);
  CHECK(res.checkpoint.task == "segmentation");
  bool head_moved = false;
  for (const auto& [name, t] : res.checkpoint.params) {
    if (name.rfind("head.seg", 0) == 0) {
      head_moved = head_moved || !(t == init.params.at(name));
    } else {
      CHECK_MESSAGE(t == init.params.at(name), name);
    }
  }
  CHECK(head_moved);

  RunConfig other = cfg;
  other.net.embed_dim = 32;
  Checkpoint wrong = init;
  wrong.params = network::init_params(other.net, 0);
  CHECK_THROWS_CODE(finetune(cfg, Task::Segmentation, wrong, *data, *data), ErrorCode::ShapeError);
}

TEST_CASE("finetune: separable classification reaches accuracy 1") {
  RunConfig cfg = tiny_config();
  cfg.batch_size = 4;
  cfg.epochs = 200;
  cfg.patience = 200;
  cfg.lr_max = 3e-3;
  cfg.warmup_fraction = 0.0;
  std::vector<LabeledCase> cases;
  for (int i = 0; i < 4; ++i) cases.push_back(lesion_case(11, "c" + std::to_string(i), i % 2 == 1));
  const auto train = in_memory_provider(std::move(cases));
  Checkpoint init;
  init.params = network::init_params(cfg.net, 2);
  const auto res = finetune(cfg, Task::Classification, init, *train, *train);
  CHECK(res.best_metric == 1.0);
  CHECK(res.checkpoint.step <= 200);

  embed::EmbeddingCache cache;
  const auto src = cfg.embedding_source();
  int correct = 0;
  for (std::size_t i = 0; i < train->size(); ++i) {
    const auto c = train->load(i);
    const auto prep = preprocess::preprocess_session(c.session, cfg.effective_prep());
    const auto tok = tokenize_unmasked(prep, cfg, src, &cache);
    const auto f = classify_forward(res.checkpoint.params, cfg.net, tok);
    correct += (f.logits[1] > f.logits[0] ? 1 : 0) == *c.class_label;
  }
  CHECK(correct == 4);
}

TEST_CASE("finetune: patience stops after non-improving epochs") {
  RunConfig cfg = tiny_config();
  cfg.batch_size = 2;
  cfg.epochs = 20;
  cfg.lr_max = 1e-2;
  std::vector<LabeledCase> cases;
  for (int i = 0; i < 2; ++i) cases.push_back(lesion_case(5, "n" + std::to_string(i), false));
  const auto data = in_memory_provider(std::move(cases));
  Checkpoint init;
  init.params = network::init_params(cfg.net, 2);
  // Every case is class 0, so accuracy is 1 from the first epoch and can never improve.
  for (int patience : {1, 3}) {
    cfg.patience = patience;
    const auto res = finetune(cfg, Task::Classification, init, *data, *data);
    REQUIRE(res.history.front()["val_accuracy"].get<double>() == 1.0);
    CHECK(res.epochs_run == patience + 1);
  }
}

}  // TEST_SUITE

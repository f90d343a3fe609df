#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ddaunet/trainer.hpp"

using namespace ddaunet;
namespace fs = std::filesystem;

namespace {

struct TinySetup {
  fs::path dir;
  Manifest manifest;
};

// A very small corpus + config so trainer tests stay fast.
TinySetup tiny_corpus(const std::string& name, uint64_t seed) {
  TinySetup s;
  s.dir = fs::temp_directory_path() / ("ddaunet_trainer_" + name);
  fs::remove_all(s.dir);
  CorpusConfig cfg;
  cfg.n = 5;
  cfg.seed = seed;
  cfg.dims = {24, 24, 12};
  cfg.train_fraction = 0.6;
  cfg.val_fraction = 0.2;
  cfg.test_fraction = 0.2;
  s.manifest = generate_corpus(cfg, s.dir);
  return s;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.network = NetworkConfig::from_variant("DDAUnet");
  cfg.network.stem_channels = 4;
  cfg.network.growth = 4;
  cfg.network.bottleneck = 4;
  cfg.network.sub_ddbs = 2;
  cfg.network.variant = "DDAUnet";
  cfg.sampler.patch_size = {8, 8, 8};
  cfg.sampler.noise_sigma_max = 0.02;
  cfg.batch_size = 2;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  cfg.seed = 5;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("bookkeeping: one step per steps_per_epoch, monotone indices") {
  TinySetup s = tiny_corpus("book", 51);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.steps_per_epoch = 1;
  TrainResult r = train(cfg, s.manifest, s.dir, s.dir / "run");
  CHECK(r.steps_run == 1);
  REQUIRE(r.log.entries.size() == 1);
  CHECK(r.log.entries[0].step == 1);
  CHECK(r.log.entries[0].epoch == 1);
  CHECK(r.log.entries[0].val_dsc.has_value());
  CHECK(fs::exists(r.best_checkpoint));
  CHECK(fs::exists(r.final_checkpoint));
  CHECK(fs::exists(s.dir / "run" / "trainlog.csv"));
}

TEST_CASE("two runs with the same seed produce identical train logs") {
  TinySetup s = tiny_corpus("det", 52);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  cfg.steps_per_epoch = 3;
  train(cfg, s.manifest, s.dir, s.dir / "run_a");
  train(cfg, s.manifest, s.dir, s.dir / "run_b");
  const std::string a = slurp(s.dir / "run_a" / "trainlog.csv");
  const std::string b = slurp(s.dir / "run_b" / "trainlog.csv");
  CHECK(a == b);
  CHECK(!a.empty());
}

TEST_CASE("one optimizer step decreases the loss of a fixed batch at tiny lr") {
  TinySetup s = tiny_corpus("probe", 53);
  TrainConfig cfg = tiny_config();

  // Reproduce the trainer's inner step by hand on one fixed batch.
  SamplerConfig sampler = cfg.sampler;
  sampler.seed = 99;
  auto loader = manifest_loader(s.manifest, s.dir, "train");
  auto cs = loader(0);
  Rng rng(3);
  std::vector<PatchSample> patches;
  for (int i = 0; i < 2; ++i) patches.push_back(sample_patch(*cs, sampler, rng));

  Network net(cfg.network, 7);
  const auto [px, py, pz] = sampler.patch_size;
  const int64_t plane = px * py * pz;
  Tensor input(2, 1, pz, py, px);
  for (int64_t i = 0; i < 2; ++i)
    std::copy(patches[static_cast<size_t>(i)].input.begin(),
              patches[static_cast<size_t>(i)].input.end(), input.chan(i, 0));

  auto batch_loss = [&](bool with_grad, Tensor* grad_out) {
    const Tensor& probs = net.forward(input, /*training=*/true);
    double loss = 0;
    if (grad_out) grad_out->fill(0.f);
    for (int64_t i = 0; i < 2; ++i)
      loss += combined_loss(cfg.loss, probs.chan(i, 1), patches[static_cast<size_t>(i)].label.data(),
                            patches[static_cast<size_t>(i)].sdf.data(), plane, 3.0,
                            with_grad ? grad_out->chan(i, 1) : nullptr);
    return loss / 2;
  };

  Tensor grad(2, 2, pz, py, px);
  const double before = batch_loss(true, &grad);
  for (float& g : grad.v) g *= 0.5f;
  net.zero_grad();
  net.backward(grad);

  // plain gradient-descent probe at lr = 1e-5
  for (const auto& p : net.params())
    for (size_t i = 0; i < p.value->v.size(); ++i)
      p.value->v[i] -= 1e-5f * p.grad->v[i];
  const double after = batch_loss(false, nullptr);
  CHECK(after < before);
}

TEST_CASE("validation evaluation never mutates parameters") {
  TinySetup s = tiny_corpus("frozen", 54);
  TrainConfig cfg = tiny_config();
  Network net(cfg.network, 11);
  std::vector<std::vector<float>> before;
  for (const auto& p : net.params()) before.push_back(p.value->v);
  evaluate_mean_dsc(net, s.manifest.split("val"), s.dir);
  size_t idx = 0;
  for (const auto& p : net.params()) CHECK(p.value->v == before[idx++]);
}

TEST_CASE("divergence aborts with a diagnostic record") {
  TinySetup s = tiny_corpus("diverge", 55);
  TrainConfig cfg = tiny_config();
  // A boundary weight at the double overflow edge drives the very first loss
  // to +/-inf, which must abort with the divergence diagnostic.
  cfg.loss.w_boundary = 1e308;
  cfg.epochs = 5;
  cfg.steps_per_epoch = 10;
  CHECK_THROWS_AS(train(cfg, s.manifest, s.dir, s.dir / "run_div"), DivergenceError);
  // the partial log exists for diagnosis
  CHECK(fs::exists(s.dir / "run_div" / "trainlog.csv"));
}

TEST_CASE("checkpoint round trip via trainer outputs") {
  TinySetup s = tiny_corpus("ckpt", 56);
  TrainConfig cfg = tiny_config();
  TrainResult r = train(cfg, s.manifest, s.dir, s.dir / "run");
  Network net = load_checkpoint(r.final_checkpoint, cfg.network);
  Tensor probe(1, 1, 8, 8, 8);
  Rng rng(1);
  for (float& v : probe.v) v = static_cast<float>(rng.uniform(0, 1));
  const Tensor& p1 = net.forward(probe);
  Network net2 = load_checkpoint(r.final_checkpoint);
  const Tensor& p2 = net2.forward(probe);
  CHECK(p1.v == p2.v);
}

TEST_CASE("split re-assignment is deterministic, disjoint and size-preserving") {
  TinySetup s = tiny_corpus("split", 57);
  for (int split_id = 1; split_id <= 3; ++split_id) {
    SplitAssignment a = assign_split(s.manifest, split_id);
    SplitAssignment b = assign_split(s.manifest, split_id);
    CHECK(a.train.size() == s.manifest.split("train").size());
    CHECK(a.val.size() == s.manifest.split("val").size());
    CHECK(a.test.size() == s.manifest.split("test").size());
    for (size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i]->id == b.train[i]->id);
    // train and val are disjoint
    for (const ManifestCase* t : a.train)
      for (const ManifestCase* v : a.val) CHECK(t->id != v->id);
    // test untouched
    for (const ManifestCase* t : a.test) CHECK(t->split == "test");
  }
  // different split ids give different partitions (with 3 train+val cases
  // the probability of collision across all three ids is negligible)
  SplitAssignment s1 = assign_split(s.manifest, 1);
  SplitAssignment s2 = assign_split(s.manifest, 2);
  bool any_diff = false;
  for (size_t i = 0; i < s1.train.size(); ++i) any_diff |= s1.train[i]->id != s2.train[i]->id;
  CHECK(any_diff);
}

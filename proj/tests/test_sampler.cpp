#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <tuple>

#include "ddaunet/phantom.hpp"
#include "ddaunet/sampler.hpp"

using namespace ddaunet;
namespace fs = std::filesystem;

namespace {

PhantomCase small_case(uint64_t seed) {
  PhantomSpec spec;
  spec.dims = {40, 40, 20};
  spec.spacing = {1, 1, 3};
  spec.tumor_length_mm = 24;
  spec.tumor_radius_mm = 7;
  spec.esophagus_radius_mm = 4;
  spec.noise_hu = 5;
  spec.seed = seed;
  return generate_phantom(spec);
}

SamplerConfig small_cfg() {
  SamplerConfig cfg;
  cfg.patch_size = {16, 16, 8};
  cfg.tumor_fraction = 0.5;
  cfg.seed = 9;
  return cfg;
}

}  // namespace

TEST_CASE("tumor_fraction = 1 centers every patch on a GTV voxel") {
  PreparedCase cs = prepare_case(small_case(1), "c1");
  SamplerConfig cfg = small_cfg();
  cfg.tumor_fraction = 1.0;
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    PatchSample p = sample_patch(cs, cfg, rng);
    const auto [px, py, pz] = cfg.patch_size;
    const int64_t center = ((pz / 2) * py + py / 2) * px + px / 2;
    CHECK(p.label[static_cast<size_t>(center)] == 1);
  }
}

TEST_CASE("fully interior patches copy the source sub-array exactly") {
  PhantomCase pc = small_case(2);
  PreparedCase cs = prepare_case(pc, "c2");
  SamplerConfig cfg = small_cfg();
  cfg.tumor_fraction = 1.0;  // tumor is central, so patches stay interior
  Rng rng(5);
  PatchSample p = sample_patch(cs, cfg, rng);
  const auto [px, py, pz] = cfg.patch_size;
  REQUIRE(p.corner[0] >= 0);
  REQUIRE(p.corner[1] >= 0);
  REQUIRE(p.corner[2] >= 0);
  REQUIRE(p.corner[0] + px <= cs.normalized.dims.nx);
  for (int64_t z = 0; z < pz; ++z)
    for (int64_t y = 0; y < py; ++y)
      for (int64_t x = 0; x < px; ++x) {
        const float expect =
            cs.normalized.at(p.corner[0] + x, p.corner[1] + y, p.corner[2] + z);
        CHECK(p.input[static_cast<size_t>((z * py + y) * px + x)] == expect);
      }
}

TEST_CASE("z overhang pads exactly the overhanging slices with zeros") {
  PhantomCase pc = small_case(3);
  PreparedCase cs = prepare_case(pc, "c3");
  SamplerConfig cfg = small_cfg();
  const auto [px, py, pz] = cfg.patch_size;

  // Build the patch manually around a center near the z=0 border and compare
  // against a pad-then-crop oracle.
  // Force the corner two slices above the top: center with ck such that
  // z0 = ck - pz/2 = -2.
  const int64_t ck = pz / 2 - 2;
  // emulate sample_patch's crop by calling it with a crafted rng that draws
  // the body voxel at (20, 20, ck): easier to test the helper directly by
  // scanning draws until the corner lands at z0 = -2.
  Rng rng(7);
  bool found = false;
  for (int trial = 0; trial < 5000 && !found; ++trial) {
    PatchSample p = sample_patch(cs, cfg, rng);
    if (p.corner[2] != -2) continue;
    found = true;
    for (int64_t z = 0; z < pz; ++z)
      for (int64_t y = 0; y < py; ++y)
        for (int64_t x = 0; x < px; ++x) {
          const int64_t xi = p.corner[0] + x, yi = p.corner[1] + y, zi = p.corner[2] + z;
          const bool inside = xi >= 0 && xi < cs.normalized.dims.nx && yi >= 0 &&
                              yi < cs.normalized.dims.ny && zi >= 0 &&
                              zi < cs.normalized.dims.nz;
          const float expect = inside ? cs.normalized.at(xi, yi, zi) : 0.f;
          const size_t at = static_cast<size_t>((z * py + y) * px + x);
          CHECK(p.input[at] == expect);
          if (!inside) CHECK(p.label[at] == 0);
        }
    // the first two z slabs are fully outside
    for (int64_t y = 0; y < py; ++y)
      for (int64_t x = 0; x < px; ++x) {
        CHECK(p.input[static_cast<size_t>((0 * py + y) * px + x)] == 0.f);
        CHECK(p.input[static_cast<size_t>((1 * py + y) * px + x)] == 0.f);
      }
  }
  CHECK(found);
}

TEST_CASE("augmentation: zero sigma is identity, labels untouched, stats match") {
  PreparedCase cs = prepare_case(small_case(4), "c4");
  SamplerConfig cfg = small_cfg();
  Rng rng(11);
  PatchSample p = sample_patch(cs, cfg, rng);

  SamplerConfig zero = cfg;
  zero.noise_sigma_max = 0;
  Rng arng(12);
  PatchSample q = augment_gaussian_noise(p, zero, arng);
  CHECK(q.input == p.input);
  CHECK(q.label == p.label);

  // sigma' forced to 5 via a degenerate [5,5]... the bound is the max, so use
  // a config whose draw is deterministic: noise_sigma_max=5 and a wrapper
  // that replicates the draw to recover sigma.
  SamplerConfig five = cfg;
  five.noise_sigma_max = 5;
  Rng brng(13);
  const double sigma = Rng(13).uniform(0.0, 5.0);  // the exact draw augment will make
  PatchSample big = p;
  big.input.assign(1'000'000, 0.f);
  big.label.assign(1'000'000, 0);
  big.sdf.assign(1'000'000, 0.0);
  big.size = {100, 100, 100};
  PatchSample noisy = augment_gaussian_noise(big, five, brng);
  CHECK(noisy.label == big.label);
  double mean = 0;
  for (float v : noisy.input) mean += v;
  mean /= static_cast<double>(noisy.input.size());
  double var = 0;
  for (float v : noisy.input) var += (v - mean) * (v - mean);
  var /= static_cast<double>(noisy.input.size());
  const double std_emp = std::sqrt(var);
  CHECK(std::abs(std_emp - sigma) / sigma < 0.01);
  CHECK(std::abs(mean) < 0.05 * sigma);
}

TEST_CASE("empty GTV with tumor_fraction > 0 raises a sampling error") {
  PreparedCase cs;
  cs.scan_id = "empty";
  cs.normalized = make_volume({16, 16, 8}, {1, 1, 3}, {0, 0, 0}, 0.5f);
  cs.gtv = make_mask({16, 16, 8}, {1, 1, 3}, {0, 0, 0});
  cs.sdf.dims = cs.gtv.dims;
  cs.sdf.spacing = cs.gtv.spacing;
  cs.sdf.phi.assign(cs.gtv.voxels.size(), 100.0);
  for (int64_t i = 0; i < cs.normalized.dims.count(); ++i) cs.body_voxels.push_back(i);
  SamplerConfig cfg = small_cfg();
  cfg.tumor_fraction = 1.0;
  Rng rng(3);
  CHECK_THROWS_AS(sample_patch(cs, cfg, rng), SamplingError);
}

TEST_CASE("sampler respects tumor_fraction within a 3-sigma binomial bound") {
  PreparedCase cs = prepare_case(small_case(5), "c5");
  SamplerConfig cfg = small_cfg();
  cfg.tumor_fraction = 0.5;
  Rng rng(21);
  const int n = 1200;
  int centered = 0;
  const auto [px, py, pz] = cfg.patch_size;
  const int64_t center = ((pz / 2) * py + py / 2) * px + px / 2;
  for (int i = 0; i < n; ++i) {
    PatchSample p = sample_patch(cs, cfg, rng);
    centered += p.label[static_cast<size_t>(center)] == 1 ? 1 : 0;
  }
  // tumor-centered draws are labeled 1 at the center; body draws may also
  // land on the tumor occasionally, so compare against p with slack.
  const double p_hat = static_cast<double>(centered) / n;
  const double sigma3 = 3 * std::sqrt(0.5 * 0.5 / n);
  CHECK(p_hat >= 0.5 - sigma3);        // at least the tumor-centered half
  CHECK(p_hat <= 0.5 + sigma3 + 0.1);  // plus a small body-hit allowance
}

TEST_CASE("batch stream: counts, determinism, worker-count invariance") {
  fs::path dir = fs::temp_directory_path() / "ddaunet_stream_test";
  fs::remove_all(dir);
  CorpusConfig ccfg;
  ccfg.n = 5;
  ccfg.seed = 31;
  ccfg.dims = {32, 32, 16};
  ccfg.train_fraction = 0.6;
  ccfg.val_fraction = 0.2;
  ccfg.test_fraction = 0.2;
  Manifest manifest = generate_corpus(ccfg, dir);

  SamplerConfig cfg = small_cfg();
  auto loader = manifest_loader(manifest, dir, "train");
  const int64_t n_train = static_cast<int64_t>(manifest.split("train").size());

  // 14 patches, batch 7 -> exactly 2 full batches
  {
    BatchStream stream(loader, n_train, cfg, 7, 14, 1, true);
    stream.begin_epoch(0);
    auto b1 = stream.next();
    auto b2 = stream.next();
    auto b3 = stream.next();
    REQUIRE(b1);
    REQUIRE(b2);
    CHECK(!b3);
    CHECK(b1->patches.size() == 7);
    CHECK(b2->patches.size() == 7);
    CHECK(!b1->short_batch);
    CHECK(!b2->short_batch);
  }
  // 16 patches, batch 7 -> short flagged final batch of 2
  {
    BatchStream stream(loader, n_train, cfg, 7, 16, 1, true);
    stream.begin_epoch(0);
    stream.next();
    stream.next();
    auto tail = stream.next();
    REQUIRE(tail);
    CHECK(tail->patches.size() == 2);
    CHECK(tail->short_batch);
  }

  // single worker determinism: byte-identical sequences
  auto run_epoch = [&](int workers) {
    BatchStream stream(loader, n_train, cfg, 7, 21, workers, true);
    stream.begin_epoch(3);
    std::vector<PatchSample> all;
    while (auto b = stream.next())
      for (PatchSample& p : b->patches) all.push_back(std::move(p));
    return all;
  };
  std::vector<PatchSample> a = run_epoch(1);
  std::vector<PatchSample> b = run_epoch(1);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].scan_id == b[i].scan_id);
    CHECK(a[i].corner == b[i].corner);
    CHECK(a[i].seed == b[i].seed);
    CHECK(a[i].input == b[i].input);
    CHECK(a[i].label == b[i].label);
  }

  // 4 workers vs 1 worker: same multiset keyed by (scan_id, corner, seed)
  std::vector<PatchSample> c = run_epoch(4);
  REQUIRE(c.size() == a.size());
  using Key = std::tuple<std::string, int64_t, int64_t, int64_t, uint64_t>;
  std::map<Key, int> ma, mc;
  for (const PatchSample& p : a)
    ++ma[{p.scan_id, p.corner[0], p.corner[1], p.corner[2], p.seed}];
  for (const PatchSample& p : c)
    ++mc[{p.scan_id, p.corner[0], p.corner[1], p.corner[2], p.seed}];
  CHECK(ma == mc);
}

TEST_CASE("augmentation mean bound over large samples") {
  // |empirical mean| < 0.05 * sigma' for the noise added to a large patch
  SamplerConfig cfg = small_cfg();
  cfg.noise_sigma_max = 5.0;
  PatchSample p;
  p.size = {64, 64, 64};
  p.input.assign(64 * 64 * 64, 0.f);
  p.label.assign(64 * 64 * 64, 0);
  p.sdf.assign(64 * 64 * 64, 0.0);
  Rng rng(77);
  const double sigma = Rng(77).uniform(0.0, 5.0);
  PatchSample q = augment_gaussian_noise(p, cfg, rng);
  double mean = 0;
  for (float v : q.input) mean += v;
  mean /= static_cast<double>(q.input.size());
  CHECK(std::abs(mean) < 0.05 * sigma);
}

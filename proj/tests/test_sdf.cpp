#include <doctest.h>

#include <cmath>
#include <limits>

#include "ddaunet/rng.hpp"
#include "ddaunet/sdf.hpp"

using namespace ddaunet;

namespace {

// Brute-force oracle: distance of every voxel center to the nearest boundary
// voxel center, negated inside. Boundary = foreground with an in-volume
// background 6-neighbor.
std::vector<double> brute_force_sdf(const BinaryMask& mask) {
  std::vector<uint8_t> boundary = boundary_voxels(mask);
  const Dims3& d = mask.dims;
  std::vector<std::array<int64_t, 3>> seeds;
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      for (int64_t i = 0; i < d.nx; ++i)
        if (boundary[static_cast<size_t>(mask.index(i, j, k))]) seeds.push_back({i, j, k});
  std::vector<double> phi(mask.voxels.size());
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      for (int64_t i = 0; i < d.nx; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& s : seeds) {
          const double dx = static_cast<double>(i - s[0]) * mask.spacing.x;
          const double dy = static_cast<double>(j - s[1]) * mask.spacing.y;
          const double dz = static_cast<double>(k - s[2]) * mask.spacing.z;
          best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        const int64_t idx = mask.index(i, j, k);
        phi[static_cast<size_t>(idx)] =
            (mask.voxels[static_cast<size_t>(idx)] ? -1.0 : 1.0) * std::sqrt(best);
      }
  return phi;
}

BinaryMask random_mask(Rng& rng, Dims3 d, Vec3 spacing, double p) {
  BinaryMask m = make_mask(d, spacing, {0, 0, 0});
  for (uint8_t& v : m.voxels) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("single foreground voxel: zero at the voxel, +spacing at neighbors") {
  BinaryMask m = make_mask({5, 5, 5}, {1, 1, 1}, {0, 0, 0});
  m.at(2, 2, 2) = 1;
  SignedDistanceField sdf = signed_distance_map(m);
  CHECK(sdf.at(2, 2, 2) == 0.0);
  CHECK(sdf.at(1, 2, 2) == 1.0);
  CHECK(sdf.at(3, 2, 2) == 1.0);
  CHECK(sdf.at(2, 1, 2) == 1.0);
  CHECK(sdf.at(2, 2, 1) == 1.0);
  CHECK(sdf.at(2, 2, 3) == 1.0);
  CHECK(sdf.at(0, 2, 2) == 2.0);
  CHECK(sdf.at(1, 1, 2) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("solid cube: center is strictly inside at distance -1") {
  BinaryMask m = make_mask({5, 5, 5}, {1, 1, 1}, {0, 0, 0});
  for (int64_t k = 1; k <= 3; ++k)
    for (int64_t j = 1; j <= 3; ++j)
      for (int64_t i = 1; i <= 3; ++i) m.at(i, j, k) = 1;
  SignedDistanceField sdf = signed_distance_map(m);
  CHECK(sdf.at(2, 2, 2) == -1.0);
  // every non-center cube voxel is itself boundary
  CHECK(sdf.at(1, 1, 1) == 0.0);
  CHECK(sdf.at(3, 2, 1) == 0.0);
}

TEST_CASE("sign flips exactly across the mask boundary") {
  Rng rng(21);
  BinaryMask m = random_mask(rng, {8, 7, 6}, {1, 1, 3}, 0.35);
  if (m.foreground_count() == 0) m.at(3, 3, 3) = 1;
  SignedDistanceField sdf = signed_distance_map(m);
  std::vector<uint8_t> boundary = boundary_voxels(m);
  for (size_t i = 0; i < m.voxels.size(); ++i) {
    if (boundary[i]) {
      CHECK(sdf.phi[i] == 0.0);
    } else if (m.voxels[i]) {
      CHECK(sdf.phi[i] < 0.0);
    } else {
      CHECK(sdf.phi[i] > 0.0);
    }
  }
}

TEST_CASE("matches the brute-force oracle exactly on random masks") {
  Rng rng(42);
  for (int trial = 0; trial < 25; ++trial) {
    Dims3 d{static_cast<int64_t>(2 + rng.next_below(11)),
            static_cast<int64_t>(2 + rng.next_below(11)),
            static_cast<int64_t>(2 + rng.next_below(11))};
    Vec3 spacing = trial % 2 ? Vec3{1, 1, 3} : Vec3{1, 1, 1};
    BinaryMask m = random_mask(rng, d, spacing, 0.2 + 0.4 * rng.next_double());
    const int64_t fg = m.foreground_count();
    if (fg == 0 || fg == d.count()) continue;
    SignedDistanceField sdf = signed_distance_map(m);
    std::vector<double> oracle = brute_force_sdf(m);
    for (size_t i = 0; i < oracle.size(); ++i) CHECK(sdf.phi[i] == oracle[i]);
  }
}

TEST_CASE("1-Lipschitz (up to grid error) along grid axes") {
  Rng rng(5);
  BinaryMask m = random_mask(rng, {10, 10, 8}, {1, 1, 3}, 0.3);
  if (m.foreground_count() == 0) m.at(5, 5, 4) = 1;
  SignedDistanceField sdf = signed_distance_map(m);
  const Dims3& d = m.dims;
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      for (int64_t i = 0; i + 1 < d.nx; ++i)
        CHECK(std::abs(sdf.at(i + 1, j, k) - sdf.at(i, j, k)) <= m.spacing.x + 1e-12);
}

TEST_CASE("empty and full masks are degenerate") {
  BinaryMask empty = make_mask({4, 4, 4}, {1, 1, 1}, {0, 0, 0});
  CHECK_THROWS_AS(signed_distance_map(empty), DegenerateError);
  BinaryMask full = make_mask({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, 1);
  CHECK_THROWS_AS(signed_distance_map(full), DegenerateError);
}

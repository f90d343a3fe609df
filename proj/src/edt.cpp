#include "ddaunet/edt.hpp"

#include <cmath>
#include <limits>

#include "ddaunet/errors.hpp"

namespace ddaunet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One pass of the lower-envelope (parabola) distance transform along a line
// with sample positions i*s: g[i] = min_j (s2*(i-j)^2 + f[j]).
void dt_line(const double* f, double* g, int64_t n, int64_t stride, double s2,
             std::vector<int64_t>& v, std::vector<double>& z, std::vector<double>& fv) {
  v.resize(static_cast<size_t>(n));
  z.resize(static_cast<size_t>(n) + 1);
  fv.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) fv[static_cast<size_t>(i)] = f[i * stride];

  int64_t k = 0;
  bool any = false;
  for (int64_t q = 0; q < n; ++q) {
    if (fv[static_cast<size_t>(q)] == kInf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      any = true;
      continue;
    }
    double s;
    for (;;) {
      int64_t p = v[static_cast<size_t>(k)];
      s = ((fv[static_cast<size_t>(q)] + s2 * static_cast<double>(q) * static_cast<double>(q)) -
           (fv[static_cast<size_t>(p)] + s2 * static_cast<double>(p) * static_cast<double>(p))) /
          (2.0 * s2 * static_cast<double>(q - p));
      if (s <= z[static_cast<size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = kInf;
  }
  if (!any) return;  // line has no finite entries; leave g as +inf

  k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < static_cast<double>(q)) ++k;
    int64_t p = v[static_cast<size_t>(k)];
    double d = static_cast<double>(q - p);
    g[q * stride] = s2 * d * d + fv[static_cast<size_t>(p)];
  }
}

}  // namespace

std::vector<double> squared_distance_to_seeds(const std::vector<uint8_t>& seed,
                                              const Dims3& dims, const Vec3& spacing) {
  if (static_cast<int64_t>(seed.size()) != dims.count())
    throw ParameterError("seed mask size does not match dims");
  std::vector<double> d(seed.size());
  bool any = false;
  for (size_t i = 0; i < seed.size(); ++i) {
    d[i] = seed[i] ? 0.0 : kInf;
    any |= seed[i] != 0;
  }
  if (!any) throw DegenerateError("distance transform requires at least one seed voxel");

  const int64_t nx = dims.nx, ny = dims.ny, nz = dims.nz;
  std::vector<int64_t> v;
  std::vector<double> z, fv, line(static_cast<size_t>(std::max({nx, ny, nz})));

  // x axis
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t j = 0; j < ny; ++j) {
      double* row = d.data() + (k * ny + j) * nx;
      dt_line(row, row, nx, 1, spacing.x * spacing.x, v, z, fv);
    }
  // y axis
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t i = 0; i < nx; ++i) {
      double* col = d.data() + k * ny * nx + i;
      dt_line(col, col, ny, nx, spacing.y * spacing.y, v, z, fv);
    }
  // z axis
  for (int64_t j = 0; j < ny; ++j)
    for (int64_t i = 0; i < nx; ++i) {
      double* col = d.data() + j * nx + i;
      dt_line(col, col, nz, nx * ny, spacing.z * spacing.z, v, z, fv);
    }
  return d;
}

}  // namespace ddaunet

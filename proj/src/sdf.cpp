#include "ddaunet/sdf.hpp"

#include <cmath>

#include "ddaunet/edt.hpp"
#include "ddaunet/errors.hpp"

namespace ddaunet {

std::vector<uint8_t> boundary_voxels(const BinaryMask& mask) {
  const Dims3& d = mask.dims;
  std::vector<uint8_t> b(mask.voxels.size(), 0);
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      for (int64_t i = 0; i < d.nx; ++i) {
        if (!mask.at(i, j, k)) continue;
        bool bg_neighbor = (i > 0 && !mask.at(i - 1, j, k)) ||
                           (i + 1 < d.nx && !mask.at(i + 1, j, k)) ||
                           (j > 0 && !mask.at(i, j - 1, k)) ||
                           (j + 1 < d.ny && !mask.at(i, j + 1, k)) ||
                           (k > 0 && !mask.at(i, j, k - 1)) ||
                           (k + 1 < d.nz && !mask.at(i, j, k + 1));
        if (bg_neighbor) b[static_cast<size_t>(mask.index(i, j, k))] = 1;
      }
  return b;
}

SignedDistanceField signed_distance_map(const BinaryMask& mask) {
  mask.validate();
  int64_t fg = mask.foreground_count();
  if (fg == 0) throw DegenerateError("signed distance map of an empty mask");
  if (fg == mask.dims.count())
    throw DegenerateError("signed distance map of a full mask");

  std::vector<uint8_t> b = boundary_voxels(mask);
  std::vector<double> sq = squared_distance_to_seeds(b, mask.dims, mask.spacing);

  SignedDistanceField sdf;
  sdf.dims = mask.dims;
  sdf.spacing = mask.spacing;
  sdf.origin = mask.origin;
  sdf.phi.resize(sq.size());
  for (size_t i = 0; i < sq.size(); ++i) {
    double dist = std::sqrt(sq[i]);
    sdf.phi[i] = mask.voxels[i] ? -dist : dist;
  }
  return sdf;
}

}  // namespace ddaunet

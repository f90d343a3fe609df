#pragma once

#include <vector>

#include "ddaunet/volume.hpp"

namespace ddaunet {

// Level-set representation of a mask boundary: exact Euclidean distance in mm
// from each voxel center to the nearest boundary voxel center, negated
// strictly inside the mask. Boundary voxels (foreground with an in-volume
// background 6-neighbor) carry exactly 0.
struct SignedDistanceField {
  Dims3 dims;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  std::vector<double> phi;  // mm

  int64_t index(int64_t i, int64_t j, int64_t k) const {
    return (k * dims.ny + j) * dims.nx + i;
  }
  double at(int64_t i, int64_t j, int64_t k) const { return phi[index(i, j, k)]; }
};

// Throws DegenerateError for an empty or full mask (no boundary exists).
SignedDistanceField signed_distance_map(const BinaryMask& mask);

// Boundary voxels in the signed-distance sense: foreground voxels with at
// least one in-volume background 6-neighbor.
std::vector<uint8_t> boundary_voxels(const BinaryMask& mask);

}  // namespace ddaunet

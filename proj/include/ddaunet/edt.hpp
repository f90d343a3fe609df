#pragma once

#include <vector>

#include "ddaunet/volume.hpp"

namespace ddaunet {

// Exact squared Euclidean distance (mm^2) from every voxel center to the
// nearest seed voxel center, via the separable lower-envelope transform run
// once per axis with anisotropic spacing. Seeds are the nonzero entries of
// `seed`; at least one seed is required.
//
// For spacings whose squares are exactly representable (the integer/half
// spacings used throughout), every arithmetic step is exact in double, so the
// result matches a brute-force min over seed points bit for bit.
std::vector<double> squared_distance_to_seeds(const std::vector<uint8_t>& seed,
                                              const Dims3& dims, const Vec3& spacing);

}  // namespace ddaunet

#pragma once

#include <array>
#include <cstdint>

#include "ddaunet/network.hpp"
#include "ddaunet/volume.hpp"

namespace ddaunet {

struct InferenceOptions {
  // Volumes larger than this (after padding to a multiple of 4) are processed
  // in overlapping tiles stitched by center-cropping.
  int64_t max_voxels = 2'000'000;
  std::array<int64_t, 3> tile{64, 64, 32};
};

// Whole-volume fully-convolutional inference. `volume` holds normalized
// intensities; the result is the tumor-channel probability on the same grid.
// Dims not divisible by 4 are padded internally and cropped back.
VolumeGrid infer_volume(Network& net, const VolumeGrid& volume,
                        const InferenceOptions& opts = {});

// voxel = 1 iff tumor probability > tau (strictly).
BinaryMask binarize(const VolumeGrid& prob, double tau = 0.5);

// Keeps only the largest 26-connected component; ties broken by the first
// component encountered in raster order. Empty input stays empty.
BinaryMask largest_component(const BinaryMask& mask);

// Labels 26-connected components; returns the number of components and fills
// `labels` with 0 (background) or the 1-based component id in raster order of
// first encounter.
int64_t label_components(const BinaryMask& mask, std::vector<int32_t>& labels);

}  // namespace ddaunet

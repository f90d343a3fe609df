#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddaunet/errors.hpp"

namespace ddaunet {

struct Dims3 {
  int64_t nx = 0, ny = 0, nz = 0;
  int64_t count() const { return nx * ny * nz; }
  bool operator==(const Dims3&) const = default;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
  bool operator==(const Vec3&) const = default;
};

// Dense 3D scalar field with physical spacing. Voxel (i,j,k) sits at world
// coordinate origin + (i*sx, j*sy, k*sz); storage is x-fastest:
// voxels[(k*ny + j)*nx + i].
struct VolumeGrid {
  Dims3 dims;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  std::vector<float> voxels;

  int64_t index(int64_t i, int64_t j, int64_t k) const {
    return (k * dims.ny + j) * dims.nx + i;
  }
  float at(int64_t i, int64_t j, int64_t k) const { return voxels[index(i, j, k)]; }
  float& at(int64_t i, int64_t j, int64_t k) { return voxels[index(i, j, k)]; }

  void validate() const;
};

// Boolean field on the same grid geometry as its paired VolumeGrid.
struct BinaryMask {
  Dims3 dims;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  std::vector<uint8_t> voxels;  // strictly 0 or 1

  int64_t index(int64_t i, int64_t j, int64_t k) const {
    return (k * dims.ny + j) * dims.nx + i;
  }
  uint8_t at(int64_t i, int64_t j, int64_t k) const { return voxels[index(i, j, k)]; }
  uint8_t& at(int64_t i, int64_t j, int64_t k) { return voxels[index(i, j, k)]; }

  int64_t foreground_count() const;
  void validate() const;
  bool same_geometry(const Dims3& d, const Vec3& s, const Vec3& o) const {
    return dims == d && spacing == s && origin == o;
  }
};

VolumeGrid make_volume(Dims3 dims, Vec3 spacing, Vec3 origin, float fill = 0.f);
BinaryMask make_mask(Dims3 dims, Vec3 spacing, Vec3 origin, uint8_t fill = 0);

// --- File I/O -------------------------------------------------------------
//
// Minimal MetaImage-style format: a text header of `Key = value` lines
// (NDims, DimSize, ElementSpacing, Offset, ElementType, ElementDataFile =
// LOCAL) followed immediately by the little-endian raw payload in the same
// file. ElementType is one of MET_SHORT, MET_FLOAT, MET_UCHAR.

VolumeGrid load_volume(const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path);
void save_volume(const VolumeGrid& grid, const std::filesystem::path& path);
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);

// --- Resampling ------------------------------------------------------------
//
// Output dims = round(input_extent / target_spacing) with a minimum of 1 per
// axis; the origin header field is preserved. Sample positions are
// edge-aligned: along each axis the j-th output sample lies at
// origin - 0.5*s_in + (j + 0.5)*s_out, interpolated trilinearly (scalar) or
// by nearest neighbor (mask), clamping at the volume border.

VolumeGrid resample_volume(const VolumeGrid& grid, Vec3 target_spacing);
BinaryMask resample_mask(const BinaryMask& mask, Vec3 target_spacing);

// --- Intensity normalization -----------------------------------------------

inline constexpr float kHuWindowLo = -200.f;
inline constexpr float kHuWindowHi = 300.f;

// Soft-tissue window: clip HU to [-200, 300], scale linearly to [0, 1].
VolumeGrid normalize_hu_window(const VolumeGrid& grid);

}  // namespace ddaunet

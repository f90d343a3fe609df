#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "ddaunet/volume.hpp"

namespace ddaunet {

// Intensity / geometry constants for the synthetic CT phantoms. All values
// are stand-ins kept in one table so they can be tuned without touching the
// generator logic.
struct PhantomPalette {
  float air_hu = -1000.f;
  float body_hu = 0.f;
  float lung_hu = -800.f;
  float wall_hu = 40.f;
  float tumor_contrast_hu = 20.f;  // tumor = wall + contrast
  float tube_hu = 500.f;
  double air_pocket_radius_mm = 2.5;
  double air_pocket_length_fraction = 0.6;
  double tube_radius_mm = 1.6;
  double dislocation_offset_mm = 10.0;
  bool operator==(const PhantomPalette&) const = default;
};

struct PhantomSpec {
  Dims3 dims{96, 96, 48};
  Vec3 spacing{1, 1, 3};
  double tumor_center_z = 0.5;  // fraction of volume height in [0.1, 0.9]
  double tumor_length_mm = 36;
  double tumor_radius_mm = 8;
  double esophagus_radius_mm = 4;
  double curvature_amplitude_mm = 6;
  bool has_air_pocket = false;
  bool has_feeding_tube = false;
  std::set<std::string> tags;
  double noise_hu = 10;
  uint64_t seed = 0;
  PhantomPalette palette;

  void validate() const;
};

// Known tag vocabulary (mirrors the per-case grouping used in the report).
const std::set<std::string>& phantom_tag_vocabulary();

struct PhantomCase {
  VolumeGrid volume;  // raw HU
  BinaryMask gtv;
  PhantomSpec spec;
};

// Deterministic given (spec, spec.seed).
PhantomCase generate_phantom(const PhantomSpec& spec);

struct CorpusConfig {
  int64_t n = 80;
  double train_fraction = 0.6, val_fraction = 0.2, test_fraction = 0.2;
  uint64_t seed = 0;
  Dims3 dims{96, 96, 48};
  Vec3 spacing{1, 1, 3};
  double noise_hu = 10;
  double air_pocket_prob = 0.3;
  double feeding_tube_prob = 0.2;
  double junction_prob = 0.15;
  double proximal_prob = 0.1;
  double hernia_prob = 0.05;
  double dislocated_prob = 0.05;
  double large_gtv_volume_cc = 30.0;  // volume above which the large_gtv tag applies
  double max_tumor_radius_mm = 9.5;

  void validate() const;
  std::string to_json() const;
  static CorpusConfig from_json(const std::string& text);
};

struct ManifestCase {
  std::string id;
  std::string volume_path;  // relative to the manifest directory
  std::string gtv_path;
  std::string split;  // train | val | test
  std::vector<std::string> tags;
  uint64_t seed = 0;
};

struct Manifest {
  uint64_t seed = 0;
  std::vector<ManifestCase> cases;

  std::vector<const ManifestCase*> split(const std::string& name) const;
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
};

// Generates n phantom cases with randomized specs, writes volume/gtv files
// and the manifest into out_dir, and returns the manifest. Deterministic
// given cfg.seed.
Manifest generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir);

// Draws the randomized per-case spec (exposed for tests).
PhantomSpec draw_case_spec(const CorpusConfig& cfg, int64_t case_index);

}  // namespace ddaunet

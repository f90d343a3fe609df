#pragma once

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ddaunet/phantom.hpp"
#include "ddaunet/rng.hpp"
#include "ddaunet/sdf.hpp"
#include "ddaunet/volume.hpp"

namespace ddaunet {

struct SamplerConfig {
  std::array<int64_t, 3> patch_size{72, 72, 24};  // (px, py, pz), each divisible by 4
  double tumor_fraction = 0.5;  // probability a patch is centered on a GTV voxel
  double noise_sigma_max = 5.0;  // sigma' upper bound, normalized-intensity units
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static SamplerConfig from_json(const std::string& text);
};

struct PatchSample {
  std::vector<float> input;   // normalized intensities, x fastest
  std::vector<uint8_t> label;
  std::vector<double> sdf;    // ground-truth level set crop (mm)
  std::array<int64_t, 3> size{0, 0, 0};    // (px, py, pz)
  std::array<int64_t, 3> corner{0, 0, 0};  // may be negative (zero-padded crop)
  Vec3 spacing{1, 1, 1};
  std::string scan_id;
  uint64_t seed = 0;
};

// Per-case data prepared once: normalized intensities, the ground-truth level
// set, and the candidate center voxel lists (fetch stage of the pipeline).
struct PreparedCase {
  std::string scan_id;
  VolumeGrid normalized;
  BinaryMask gtv;
  SignedDistanceField sdf;
  std::vector<int64_t> gtv_voxels;   // flat indices
  std::vector<int64_t> body_voxels;  // flat indices, raw HU > -500
};

PreparedCase prepare_case(const PhantomCase& pc, const std::string& scan_id);
PreparedCase prepare_case(const VolumeGrid& raw, const BinaryMask& gtv,
                          const std::string& scan_id);

// Draws one patch: with probability tumor_fraction the center is a uniform
// GTV voxel, otherwise a uniform body voxel; crops around the center with
// zero padding (input/label) and edge clamping (sdf) on overhang.
PatchSample sample_patch(const PreparedCase& cs, const SamplerConfig& cfg, Rng& rng);
PatchSample sample_patch(const PhantomCase& pc, const SamplerConfig& cfg, Rng& rng);

// sigma' ~ U(0, noise_sigma_max) once per patch, then i.i.d. N(0, sigma')
// added to the input only.
PatchSample augment_gaussian_noise(PatchSample patch, const SamplerConfig& cfg, Rng& rng);

struct Batch {
  std::vector<PatchSample> patches;
  bool short_batch = false;  // emitted when the epoch plan ran out mid-batch
  int64_t epoch = 0;
  int64_t index = 0;
};

// Three-stage producer/consumer patch pipeline (fetch -> extract -> feed).
// One epoch draws `patches_per_epoch` patches; entry i of the plan uses case
// order[i % n_cases] with a per-entry seed derived from (cfg.seed, epoch, i),
// so a single worker yields a deterministic sequence and any worker count
// yields the same patch multiset per epoch.
class BatchStream {
 public:
  using CaseLoader = std::function<std::shared_ptr<const PreparedCase>(int64_t)>;

  BatchStream(CaseLoader loader, int64_t n_cases, SamplerConfig cfg, int64_t batch_size,
              int64_t patches_per_epoch, int workers = 1, bool augment = true);
  ~BatchStream();

  void begin_epoch(int64_t epoch);
  std::optional<Batch> next();  // nullopt once the epoch is exhausted

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Loader over a corpus directory (cases read and prepared lazily, cached).
BatchStream::CaseLoader manifest_loader(const Manifest& manifest,
                                        const std::filesystem::path& root,
                                        const std::string& split);
BatchStream::CaseLoader manifest_loader(std::vector<const ManifestCase*> cases,
                                        const std::filesystem::path& root);

}  // namespace ddaunet

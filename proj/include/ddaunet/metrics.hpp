#pragma once

#include <array>
#include <string>
#include <vector>

#include "ddaunet/volume.hpp"

namespace ddaunet {

struct SegmentationMetrics {
  double dsc = 0;
  double msd = 0;   // mm
  double hd95 = 0;  // mm
  double crd = 0;   // mm, signed
  double cad = 0;   // mm, signed
  bool distance_degenerate = false;  // one of the masks was empty
  bool both_empty = false;
};

// World coordinates (mm) of foreground voxels with at least one background
// 6-neighbor; foreground voxels on the volume border count as boundary.
std::vector<std::array<double, 3>> surface_points(const BinaryMask& mask);

// 2|S and G| / (|S| + |G|); both masks empty gives 1 by convention.
double dice_coefficient(const BinaryMask& pred, const BinaryMask& gt);

// 0.5 * (mean_a d(a, G_surface) + mean_b d(b, S_surface)), Euclidean in mm.
double mean_surface_distance(const BinaryMask& pred, const BinaryMask& gt);

// max over both directions of the q-th percentile (linear interpolation of
// order statistics) of nearest-surface distances. q = 0.95 for HD95, 1 for
// the exact Hausdorff distance.
double hausdorff_percentile(const BinaryMask& pred, const BinaryMask& gt, double q);
inline double hausdorff95(const BinaryMask& pred, const BinaryMask& gt) {
  return hausdorff_percentile(pred, gt, 0.95);
}

// crd = (topmost gt slice - topmost pred slice) * sz;
// cad = (bottommost gt slice - bottommost pred slice) * sz.
// Higher slice index = cranial.
std::array<double, 2> cranial_caudal_errors(const BinaryMask& pred, const BinaryMask& gt);

SegmentationMetrics evaluate_scan(const BinaryMask& pred, const BinaryMask& gt);

struct PrPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  int64_t tp = 0, fp = 0, fn = 0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per threshold, grid order
  double auc = 0;               // trapezoid over recall after sorting by recall
};

// Voxelwise TP/FP/FN pooled over all scans per threshold; prediction positive
// iff probability > threshold. Thresholds must be a descending grid in [0,1].
PrCurve precision_recall_auc(const std::vector<const VolumeGrid*>& probs,
                             const std::vector<const BinaryMask*>& gts,
                             const std::vector<double>& thresholds);

std::vector<double> default_pr_thresholds(int n = 101);  // 1.00, ..., 0.00

}  // namespace ddaunet

#include "ddaunet/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ddaunet/edt.hpp"
#include "ddaunet/errors.hpp"

namespace ddaunet {

namespace {

void check_same_geometry(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_geometry(b.dims, b.spacing, b.origin))
    throw ShapeError("masks do not share grid geometry");
}

// Surface voxels in the metrics sense (volume border counts as background).
std::vector<uint8_t> surface_voxels(const BinaryMask& mask) {
  const Dims3& d = mask.dims;
  std::vector<uint8_t> surf(mask.voxels.size(), 0);
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      for (int64_t i = 0; i < d.nx; ++i) {
        if (!mask.at(i, j, k)) continue;
        bool boundary = i == 0 || i + 1 == d.nx || j == 0 || j + 1 == d.ny || k == 0 ||
                        k + 1 == d.nz || !mask.at(i - 1, j, k) || !mask.at(i + 1, j, k) ||
                        !mask.at(i, j - 1, k) || !mask.at(i, j + 1, k) ||
                        !mask.at(i, j, k - 1) || !mask.at(i, j, k + 1);
        if (boundary) surf[static_cast<size_t>(mask.index(i, j, k))] = 1;
      }
  return surf;
}

// Distances (mm) from each surface voxel of `from` to the nearest surface
// voxel of `to`. Both point sets live on voxel centers of the shared grid, so
// an exact distance transform seeded at `to` read off at `from` equals the
// all-pairs minimum exactly.
std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to) {
  std::vector<uint8_t> from_surf = surface_voxels(from);
  std::vector<uint8_t> to_surf = surface_voxels(to);
  std::vector<double> sq = squared_distance_to_seeds(to_surf, to.dims, to.spacing);
  std::vector<double> out;
  for (size_t i = 0; i < from_surf.size(); ++i)
    if (from_surf[i]) out.push_back(std::sqrt(sq[i]));
  return out;
}

double percentile_linear(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const size_t m = values.size();
  if (m == 1) return values[0];
  const double pos = q * static_cast<double>(m - 1);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, m - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace

std::vector<std::array<double, 3>> surface_points(const BinaryMask& mask) {
  mask.validate();
  if (mask.foreground_count() == 0)
    throw DegenerateError("surface points of an empty mask");
  std::vector<uint8_t> surf = surface_voxels(mask);
  std::vector<std::array<double, 3>> pts;
  const Dims3& d = mask.dims;
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      for (int64_t i = 0; i < d.nx; ++i)
        if (surf[static_cast<size_t>(mask.index(i, j, k))])
          pts.push_back({mask.origin.x + i * mask.spacing.x,
                         mask.origin.y + j * mask.spacing.y,
                         mask.origin.z + k * mask.spacing.z});
  return pts;
}

double dice_coefficient(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_geometry(pred, gt);
  int64_t inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.voxels.size(); ++i) {
    np += pred.voxels[i];
    ng += gt.voxels[i];
    inter += pred.voxels[i] & gt.voxels[i];
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

double mean_surface_distance(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_geometry(pred, gt);
  if (pred.foreground_count() == 0 || gt.foreground_count() == 0)
    throw DegenerateError("mean surface distance with an empty mask");
  std::vector<double> a = directed_surface_distances(pred, gt);
  std::vector<double> b = directed_surface_distances(gt, pred);
  double sa = 0, sb = 0;
  for (double v : a) sa += v;
  for (double v : b) sb += v;
  return 0.5 * (sa / static_cast<double>(a.size()) + sb / static_cast<double>(b.size()));
}

double hausdorff_percentile(const BinaryMask& pred, const BinaryMask& gt, double q) {
  check_same_geometry(pred, gt);
  if (q < 0 || q > 1) throw ParameterError("percentile must lie in [0,1]");
  if (pred.foreground_count() == 0 || gt.foreground_count() == 0)
    throw DegenerateError("hausdorff distance with an empty mask");
  std::vector<double> a = directed_surface_distances(pred, gt);
  std::vector<double> b = directed_surface_distances(gt, pred);
  return std::max(percentile_linear(std::move(a), q), percentile_linear(std::move(b), q));
}

std::array<double, 2> cranial_caudal_errors(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_geometry(pred, gt);
  auto z_range = [](const BinaryMask& m) -> std::array<int64_t, 2> {
    int64_t lo = -1, hi = -1;
    const int64_t slice = m.dims.nx * m.dims.ny;
    for (int64_t k = 0; k < m.dims.nz; ++k) {
      const uint8_t* p = m.voxels.data() + k * slice;
      bool any = false;
      for (int64_t i = 0; i < slice; ++i)
        if (p[i]) {
          any = true;
          break;
        }
      if (any) {
        if (lo < 0) lo = k;
        hi = k;
      }
    }
    return {lo, hi};
  };
  auto [plo, phi] = z_range(pred);
  auto [glo, ghi] = z_range(gt);
  if (plo < 0 || glo < 0)
    throw DegenerateError("cranial/caudal errors with an empty mask");
  const double sz = pred.spacing.z;
  const double crd = static_cast<double>(ghi - phi) * sz;
  const double cad = static_cast<double>(glo - plo) * sz;
  return {crd, cad};
}

SegmentationMetrics evaluate_scan(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_geometry(pred, gt);
  SegmentationMetrics m;
  const bool pred_empty = pred.foreground_count() == 0;
  const bool gt_empty = gt.foreground_count() == 0;
  m.dsc = dice_coefficient(pred, gt);
  if (pred_empty || gt_empty) {
    m.distance_degenerate = true;
    m.both_empty = pred_empty && gt_empty;
    return m;
  }
  m.msd = mean_surface_distance(pred, gt);
  m.hd95 = hausdorff95(pred, gt);
  auto [crd, cad] = cranial_caudal_errors(pred, gt);
  m.crd = crd;
  m.cad = cad;
  return m;
}

std::vector<double> default_pr_thresholds(int n) {
  if (n < 2) throw ParameterError("need at least 2 thresholds");
  std::vector<double> t(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    t[static_cast<size_t>(i)] = 1.0 - static_cast<double>(i) / static_cast<double>(n - 1);
  return t;
}

PrCurve precision_recall_auc(const std::vector<const VolumeGrid*>& probs,
                             const std::vector<const BinaryMask*>& gts,
                             const std::vector<double>& thresholds) {
  if (probs.empty() || probs.size() != gts.size())
    throw ParameterError("need matched probability/ground-truth scans");
  if (thresholds.empty()) throw ParameterError("empty threshold grid");
  for (size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] < 0 || thresholds[i] > 1)
      throw ParameterError("thresholds must lie in [0,1]");
    if (i > 0 && thresholds[i] >= thresholds[i - 1])
      throw ParameterError("thresholds must be strictly descending");
  }

  const size_t nt = thresholds.size();
  // bucket[j] counts voxels whose probability p satisfies
  // thresholds[j] < p (and p <= thresholds[j-1]); predicted positive at
  // threshold t_j iff bucket index <= j.
  std::vector<int64_t> tp_new(nt, 0), fp_new(nt, 0);
  int64_t total_gt = 0;
  for (size_t s = 0; s < probs.size(); ++s) {
    const VolumeGrid& p = *probs[s];
    const BinaryMask& g = *gts[s];
    if (!g.same_geometry(p.dims, p.spacing, p.origin))
      throw ShapeError("probability/ground-truth geometry mismatch");
    for (size_t i = 0; i < p.voxels.size(); ++i) {
      const double v = p.voxels[i];
      // first threshold index j with thresholds[j] < v (descending grid)
      const auto it = std::upper_bound(thresholds.begin(), thresholds.end(), v,
                                       [](double val, double thr) { return thr < val; });
      const size_t j = static_cast<size_t>(it - thresholds.begin());
      if (j < nt) {
        if (g.voxels[i])
          ++tp_new[j];
        else
          ++fp_new[j];
      }
      total_gt += g.voxels[i];
    }
  }
  if (total_gt == 0) throw DegenerateError("recall undefined: ground truth empty everywhere");

  PrCurve curve;
  int64_t tp = 0, fp = 0;
  for (size_t j = 0; j < nt; ++j) {
    tp += tp_new[j];
    fp += fp_new[j];
    PrPoint pt;
    pt.threshold = thresholds[j];
    pt.tp = tp;
    pt.fp = fp;
    pt.fn = total_gt - tp;
    pt.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.recall = static_cast<double>(tp) / static_cast<double>(total_gt);
    curve.points.push_back(pt);
  }

  std::vector<std::pair<double, double>> rp;
  for (const PrPoint& pt : curve.points) rp.emplace_back(pt.recall, pt.precision);
  std::stable_sort(rp.begin(), rp.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  double auc = 0;
  for (size_t i = 1; i < rp.size(); ++i)
    auc += (rp[i].first - rp[i - 1].first) * 0.5 * (rp[i].second + rp[i - 1].second);
  curve.auc = auc;
  return curve;
}

}  // namespace ddaunet

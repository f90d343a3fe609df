#pragma once

#include <cstdint>
#include <vector>

#include "ddaunet/sdf.hpp"

namespace ddaunet {

struct LossConfig {
  double w_dice = 1.0;
  double w_boundary = 1.0;
  double w_distmap = 0.0;
  double w_focal = 0.0;
  double boundary_alpha = 0.01;
  double focal_beta = 2.0;
  double dice_smooth = 1e-5;

  void validate() const;
  std::string to_json() const;
  static LossConfig from_json(const std::string& text);
  bool operator==(const LossConfig&) const = default;
};

// All losses operate on the tumor-channel probability patch and, when `grad`
// is non-null, accumulate scale * dLoss/dprob into it. Values and internal
// accumulation are double regardless of the probability scalar type.

// Smoothed Dice coefficient (2*sum(s*g) + eps) / (sum(s^2) + sum(g^2) + eps).
template <typename S>
double soft_dice(const S* probs, const uint8_t* gt, int64_t n, double eps);

template <typename S>
double dice_loss(const S* probs, const uint8_t* gt, int64_t n, double eps, double scale = 1.0,
                 S* grad = nullptr);

// Quadrature of the ground-truth level set weighted by predicted probability:
// sum(phi * s) * voxel_volume.
template <typename S>
double boundary_loss(const S* probs, const double* phi, int64_t n, double voxel_volume,
                     double scale = 1.0, S* grad = nullptr);

// Voxelwise binary cross-entropy weighted by 1 + |phi| / max|phi|.
template <typename S>
double distance_map_loss(const S* probs, const uint8_t* gt, const double* phi, int64_t n,
                         double scale = 1.0, S* grad = nullptr);

// 1 - DSC^(1/beta); beta >= 1.
template <typename S>
double focal_dice_loss(const S* probs, const uint8_t* gt, int64_t n, double eps, double beta,
                       double scale = 1.0, S* grad = nullptr);

// w_dice*(1-DSC) + w_boundary*alpha*L_B + w_distmap*L_DM + w_focal*L_FD.
template <typename S>
double combined_loss(const LossConfig& cfg, const S* probs, const uint8_t* gt, const double* phi,
                     int64_t n, double voxel_volume, S* grad = nullptr);

// Shape-checked convenience overloads on whole fields.
double soft_dice(const std::vector<float>& probs, const std::vector<uint8_t>& gt, double eps);
double boundary_loss(const std::vector<float>& probs, const SignedDistanceField& sdf);

}  // namespace ddaunet

#include "ddaunet/losses.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "ddaunet/errors.hpp"

namespace ddaunet {

void LossConfig::validate() const {
  auto ok = [](double w) { return std::isfinite(w) && w >= 0.0; };
  if (!ok(w_dice) || !ok(w_boundary) || !ok(w_distmap) || !ok(w_focal))
    throw ConfigError("loss weights must be finite and >= 0");
  if (w_dice == 0 && w_boundary == 0 && w_distmap == 0 && w_focal == 0)
    throw ConfigError("at least one loss weight must be nonzero");
  if (focal_beta < 1.0) throw ParameterError("focal beta must be >= 1");
  if (!(dice_smooth > 0)) throw ConfigError("dice smoothing must be positive");
}

std::string LossConfig::to_json() const {
  nlohmann::json j;
  j["w_dice"] = w_dice;
  j["w_boundary"] = w_boundary;
  j["w_distmap"] = w_distmap;
  j["w_focal"] = w_focal;
  j["boundary_alpha"] = boundary_alpha;
  j["focal_beta"] = focal_beta;
  j["dice_smooth"] = dice_smooth;
  return j.dump();
}

LossConfig LossConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad loss config json: ") + e.what());
  }
  LossConfig cfg;
  cfg.w_dice = j.value("w_dice", cfg.w_dice);
  cfg.w_boundary = j.value("w_boundary", cfg.w_boundary);
  cfg.w_distmap = j.value("w_distmap", cfg.w_distmap);
  cfg.w_focal = j.value("w_focal", cfg.w_focal);
  cfg.boundary_alpha = j.value("boundary_alpha", cfg.boundary_alpha);
  cfg.focal_beta = j.value("focal_beta", cfg.focal_beta);
  cfg.dice_smooth = j.value("dice_smooth", cfg.dice_smooth);
  cfg.validate();
  return cfg;
}

namespace {

struct DiceSums {
  double inter = 0, s2 = 0, g2 = 0;
};

template <typename S>
DiceSums dice_sums(const S* probs, const uint8_t* gt, int64_t n) {
  DiceSums d;
  for (int64_t i = 0; i < n; ++i) {
    const double s = static_cast<double>(probs[i]);
    const double g = static_cast<double>(gt[i]);
    d.inter += s * g;
    d.s2 += s * s;
    d.g2 += g;
  }
  return d;
}

// Accumulates scale * dDSC/ds_i.
template <typename S>
void add_dsc_grad(const S* probs, const uint8_t* gt, int64_t n, const DiceSums& d, double eps,
                  double scale, S* grad) {
  const double num = 2.0 * d.inter + eps;
  const double den = d.s2 + d.g2 + eps;
  for (int64_t i = 0; i < n; ++i) {
    const double s = static_cast<double>(probs[i]);
    const double g = static_cast<double>(gt[i]);
    const double dd = (2.0 * g * den - num * 2.0 * s) / (den * den);
    grad[i] += static_cast<S>(scale * dd);
  }
}

}  // namespace

template <typename S>
double soft_dice(const S* probs, const uint8_t* gt, int64_t n, double eps) {
  const DiceSums d = dice_sums(probs, gt, n);
  return (2.0 * d.inter + eps) / (d.s2 + d.g2 + eps);
}

template <typename S>
double dice_loss(const S* probs, const uint8_t* gt, int64_t n, double eps, double scale,
                 S* grad) {
  const DiceSums d = dice_sums(probs, gt, n);
  const double dsc = (2.0 * d.inter + eps) / (d.s2 + d.g2 + eps);
  if (grad) add_dsc_grad(probs, gt, n, d, eps, -scale, grad);
  return 1.0 - dsc;
}

template <typename S>
double boundary_loss(const S* probs, const double* phi, int64_t n, double voxel_volume,
                     double scale, S* grad) {
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += phi[i] * static_cast<double>(probs[i]);
  if (grad)
    for (int64_t i = 0; i < n; ++i) grad[i] += static_cast<S>(scale * phi[i] * voxel_volume);
  return acc * voxel_volume;
}

template <typename S>
double distance_map_loss(const S* probs, const uint8_t* gt, const double* phi, int64_t n,
                         double scale, S* grad) {
  double max_abs = 0;
  for (int64_t i = 0; i < n; ++i) max_abs = std::max(max_abs, std::abs(phi[i]));
  const double inv_max = max_abs > 0 ? 1.0 / max_abs : 0.0;  // phi == 0 -> plain BCE
  constexpr double clip = 1e-7;
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double s = std::clamp(static_cast<double>(probs[i]), clip, 1.0 - clip);
    const double g = static_cast<double>(gt[i]);
    const double w = 1.0 + std::abs(phi[i]) * inv_max;
    acc += w * -(g * std::log(s) + (1.0 - g) * std::log(1.0 - s));
    if (grad) grad[i] += static_cast<S>(scale * w * (s - g) / (s * (1.0 - s)) / n);
  }
  return acc / static_cast<double>(n);
}

template <typename S>
double focal_dice_loss(const S* probs, const uint8_t* gt, int64_t n, double eps, double beta,
                       double scale, S* grad) {
  if (beta < 1.0) throw ParameterError("focal beta must be >= 1");
  const DiceSums d = dice_sums(probs, gt, n);
  const double dsc = (2.0 * d.inter + eps) / (d.s2 + d.g2 + eps);
  const double powed = std::pow(dsc, 1.0 / beta);
  if (grad) {
    // d/ds [1 - dsc^(1/beta)] = -(1/beta) dsc^(1/beta - 1) * dDSC/ds
    const double factor = -(1.0 / beta) * std::pow(dsc, 1.0 / beta - 1.0);
    add_dsc_grad(probs, gt, n, d, eps, scale * factor, grad);
  }
  return 1.0 - powed;
}

template <typename S>
double combined_loss(const LossConfig& cfg, const S* probs, const uint8_t* gt, const double* phi,
                     int64_t n, double voxel_volume, S* grad) {
  cfg.validate();
  double total = 0;
  if (cfg.w_dice > 0)
    total += cfg.w_dice * dice_loss(probs, gt, n, cfg.dice_smooth, cfg.w_dice, grad);
  if (cfg.w_boundary > 0) {
    const double ws = cfg.w_boundary * cfg.boundary_alpha;
    total += ws * boundary_loss(probs, phi, n, voxel_volume, ws, grad);
  }
  if (cfg.w_distmap > 0)
    total += cfg.w_distmap * distance_map_loss(probs, gt, phi, n, cfg.w_distmap, grad);
  if (cfg.w_focal > 0)
    total += cfg.w_focal *
             focal_dice_loss(probs, gt, n, cfg.dice_smooth, cfg.focal_beta, cfg.w_focal, grad);
  return total;
}

#define DDAUNET_INSTANTIATE_LOSSES(S)                                                        \
  template double soft_dice<S>(const S*, const uint8_t*, int64_t, double);                   \
  template double dice_loss<S>(const S*, const uint8_t*, int64_t, double, double, S*);       \
  template double boundary_loss<S>(const S*, const double*, int64_t, double, double, S*);    \
  template double distance_map_loss<S>(const S*, const uint8_t*, const double*, int64_t,     \
                                       double, S*);                                          \
  template double focal_dice_loss<S>(const S*, const uint8_t*, int64_t, double, double,      \
                                     double, S*);                                            \
  template double combined_loss<S>(const LossConfig&, const S*, const uint8_t*,              \
                                   const double*, int64_t, double, S*)

DDAUNET_INSTANTIATE_LOSSES(float);
DDAUNET_INSTANTIATE_LOSSES(double);
#undef DDAUNET_INSTANTIATE_LOSSES

double soft_dice(const std::vector<float>& probs, const std::vector<uint8_t>& gt, double eps) {
  if (probs.size() != gt.size()) throw ShapeError("probability/label size mismatch");
  return soft_dice(probs.data(), gt.data(), static_cast<int64_t>(probs.size()), eps);
}

double boundary_loss(const std::vector<float>& probs, const SignedDistanceField& sdf) {
  if (probs.size() != sdf.phi.size()) throw ShapeError("probability/sdf size mismatch");
  const double vv = sdf.spacing.x * sdf.spacing.y * sdf.spacing.z;
  return boundary_loss(probs.data(), sdf.phi.data(), static_cast<int64_t>(probs.size()), vv);
}

}  // namespace ddaunet

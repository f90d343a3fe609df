#include "ddaunet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "ddaunet/errors.hpp"

namespace ddaunet {

namespace {

int64_t pad_to4(int64_t v) { return (v + 3) / 4 * 4; }

// Runs the network on one sub-block [off, off+size) of the volume (zero
// padding outside) and writes the tumor channel of the core region
// [core_lo, core_hi) into out.
void forward_block(Network& net, const VolumeGrid& vol, const std::array<int64_t, 3>& off,
                   const std::array<int64_t, 3>& size, const std::array<int64_t, 3>& core_lo,
                   const std::array<int64_t, 3>& core_hi, VolumeGrid& out) {
  Tensor x(1, 1, size[2], size[1], size[0]);
  const Dims3& d = vol.dims;
  for (int64_t z = 0; z < size[2]; ++z) {
    const int64_t zi = off[2] + z;
    if (zi < 0 || zi >= d.nz) continue;
    for (int64_t y = 0; y < size[1]; ++y) {
      const int64_t yi = off[1] + y;
      if (yi < 0 || yi >= d.ny) continue;
      const int64_t x0 = std::max<int64_t>(0, -off[0]);
      const int64_t x1 = std::min<int64_t>(size[0], d.nx - off[0]);
      if (x1 <= x0) continue;
      std::copy_n(vol.voxels.data() + (zi * d.ny + yi) * d.nx + off[0] + x0, x1 - x0,
                  x.v.data() + (z * size[1] + y) * size[0] + x0);
    }
  }
  const Tensor& probs = net.forward(x, /*training=*/false);
  const float* tumor = probs.chan(0, 1);
  for (int64_t z = core_lo[2]; z < core_hi[2]; ++z)
    for (int64_t y = core_lo[1]; y < core_hi[1]; ++y)
      for (int64_t xx = core_lo[0]; xx < core_hi[0]; ++xx)
        out.at(off[0] + xx, off[1] + y, off[2] + z) =
            tumor[(z * size[1] + y) * size[0] + xx];
}

// Tile start offsets covering [0, n) with the given tile size and step.
std::vector<int64_t> tile_starts(int64_t n, int64_t tile, int64_t step) {
  std::vector<int64_t> starts;
  for (int64_t s = 0;; s += step) {
    if (s + tile >= n) {
      starts.push_back(std::max<int64_t>(0, n - tile));
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

}  // namespace

VolumeGrid infer_volume(Network& net, const VolumeGrid& volume, const InferenceOptions& opts) {
  volume.validate();
  const Dims3& d = volume.dims;
  VolumeGrid out = make_volume(d, volume.spacing, volume.origin);

  const std::array<int64_t, 3> padded{pad_to4(d.nx), pad_to4(d.ny), pad_to4(d.nz)};
  const int64_t padded_voxels = padded[0] * padded[1] * padded[2];

  if (padded_voxels <= opts.max_voxels) {
    forward_block(net, volume, {0, 0, 0}, padded, {0, 0, 0}, {d.nx, d.ny, d.nz}, out);
    return out;
  }

  // Tiled path: overlap of at least half the receptive field on each side.
  const auto rf = receptive_field(net.config());
  std::array<int64_t, 3> tile, overlap, step;
  const std::array<int64_t, 3> vol_dims{d.nx, d.ny, d.nz};
  for (int a = 0; a < 3; ++a) {
    overlap[a] = pad_to4((rf[static_cast<size_t>(a)] + 1) / 2);
    tile[a] = std::max(pad_to4(opts.tile[static_cast<size_t>(a)]), 4 * overlap[a]);
    tile[a] = std::min(tile[a], pad_to4(vol_dims[static_cast<size_t>(a)]));
    step[a] = std::max<int64_t>(1, tile[a] - 2 * overlap[a]);
  }

  for (int64_t sz : tile_starts(d.nz, tile[2], step[2]))
    for (int64_t sy : tile_starts(d.ny, tile[1], step[1]))
      for (int64_t sx : tile_starts(d.nx, tile[0], step[0])) {
        const std::array<int64_t, 3> off{sx, sy, sz};
        std::array<int64_t, 3> lo, hi;
        for (int a = 0; a < 3; ++a) {
          const int64_t s = off[static_cast<size_t>(a)];
          const int64_t nvol = vol_dims[static_cast<size_t>(a)];
          const int64_t t = tile[static_cast<size_t>(a)];
          lo[static_cast<size_t>(a)] = s == 0 ? 0 : overlap[static_cast<size_t>(a)];
          hi[static_cast<size_t>(a)] =
              (s + t >= nvol) ? std::min(t, nvol - s) : t - overlap[static_cast<size_t>(a)];
        }
        forward_block(net, volume, off, tile, lo, hi, out);
      }
  return out;
}

BinaryMask binarize(const VolumeGrid& prob, double tau) {
  prob.validate();
  if (tau < 0 || tau > 1) throw ParameterError("threshold must lie in [0,1]");
  BinaryMask mask = make_mask(prob.dims, prob.spacing, prob.origin);
  for (size_t i = 0; i < prob.voxels.size(); ++i)
    mask.voxels[i] = prob.voxels[i] > tau ? 1 : 0;
  return mask;
}

int64_t label_components(const BinaryMask& mask, std::vector<int32_t>& labels) {
  const Dims3& d = mask.dims;
  labels.assign(mask.voxels.size(), 0);
  int32_t next_label = 0;
  std::deque<int64_t> frontier;
  for (int64_t start = 0; start < d.count(); ++start) {
    if (!mask.voxels[static_cast<size_t>(start)] || labels[static_cast<size_t>(start)]) continue;
    ++next_label;
    labels[static_cast<size_t>(start)] = next_label;
    frontier.push_back(start);
    while (!frontier.empty()) {
      const int64_t cur = frontier.front();
      frontier.pop_front();
      const int64_t ci = cur % d.nx;
      const int64_t cj = (cur / d.nx) % d.ny;
      const int64_t ck = cur / (d.nx * d.ny);
      for (int64_t dk = -1; dk <= 1; ++dk)
        for (int64_t dj = -1; dj <= 1; ++dj)
          for (int64_t di = -1; di <= 1; ++di) {
            if (!di && !dj && !dk) continue;
            const int64_t ni = ci + di, nj = cj + dj, nk = ck + dk;
            if (ni < 0 || ni >= d.nx || nj < 0 || nj >= d.ny || nk < 0 || nk >= d.nz) continue;
            const int64_t n = (nk * d.ny + nj) * d.nx + ni;
            if (mask.voxels[static_cast<size_t>(n)] && !labels[static_cast<size_t>(n)]) {
              labels[static_cast<size_t>(n)] = next_label;
              frontier.push_back(n);
            }
          }
    }
  }
  return next_label;
}

BinaryMask largest_component(const BinaryMask& mask) {
  mask.validate();
  std::vector<int32_t> labels;
  const int64_t n_components = label_components(mask, labels);
  BinaryMask out = make_mask(mask.dims, mask.spacing, mask.origin);
  if (n_components == 0) return out;

  std::vector<int64_t> counts(static_cast<size_t>(n_components) + 1, 0);
  for (int32_t l : labels)
    if (l) ++counts[static_cast<size_t>(l)];
  int32_t best = 1;
  for (int32_t l = 2; l <= n_components; ++l)
    if (counts[static_cast<size_t>(l)] > counts[static_cast<size_t>(best)]) best = l;
  // Ties keep the smaller label, i.e. the component first encountered in
  // raster order.
  for (size_t i = 0; i < labels.size(); ++i) out.voxels[i] = labels[i] == best ? 1 : 0;
  return out;
}

}  // namespace ddaunet

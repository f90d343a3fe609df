#pragma once

#include <cstdint>
#include <vector>

#include "ddaunet/errors.hpp"

namespace ddaunet {

// Dense 5D tensor (n, c, z, y, x), x fastest. Float for production paths,
// double for the finite-difference test instantiation.
template <typename S>
struct TensorT {
  int64_t n = 0, c = 0, z = 0, y = 0, x = 0;
  std::vector<S> v;

  TensorT() = default;
  TensorT(int64_t n_, int64_t c_, int64_t z_, int64_t y_, int64_t x_, S fill = S(0))
      : n(n_), c(c_), z(z_), y(y_), x(x_) {
    if (n < 0 || c < 0 || z < 0 || y < 0 || x < 0)
      throw ShapeError("negative tensor dimension");
    v.assign(static_cast<size_t>(numel()), fill);
  }

  int64_t numel() const { return n * c * z * y * x; }
  int64_t plane() const { return z * y * x; }          // voxels per channel
  int64_t item_stride() const { return c * plane(); }  // elements per batch item

  S* item(int64_t in) { return v.data() + in * item_stride(); }
  const S* item(int64_t in) const { return v.data() + in * item_stride(); }
  S* chan(int64_t in, int64_t ic) { return item(in) + ic * plane(); }
  const S* chan(int64_t in, int64_t ic) const { return item(in) + ic * plane(); }

  bool same_shape(const TensorT& o) const {
    return n == o.n && c == o.c && z == o.z && y == o.y && x == o.x;
  }
  void fill(S value) { std::fill(v.begin(), v.end(), value); }
};

using Tensor = TensorT<float>;

}  // namespace ddaunet

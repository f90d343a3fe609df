#pragma once

// Static computation graph for the 3D segmentation networks: nodes own their
// output and gradient buffers, forward runs in construction order, backward
// in reverse. Convolutions go through im2col + Eigen GEMM; all reductions
// accumulate in a fixed order so training runs are bit-reproducible for a
// fixed thread count.

#include <Eigen/Core>
#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "ddaunet/tensor.hpp"

namespace ddaunet {

void set_compute_threads(int n);  // pins the worker/GEMM thread count
int compute_threads();

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMapRM = Eigen::Map<const MatrixRM<S>>;

template <typename S>
class Node {
 public:
  virtual ~Node() = default;
  virtual void forward(bool training) = 0;
  virtual void backward() = 0;

  TensorT<S> out;
  TensorT<S> grad;  // dLoss/dout, accumulated by consumers
  std::vector<Node<S>*> ins;
  std::string name;

  void ensure_grad() {
    if (!grad.same_shape(out)) grad = TensorT<S>(out.n, out.c, out.z, out.y, out.x);
  }

  // Reuses the output buffer across steps when the shape is unchanged.
  void ensure_out(int64_t n, int64_t c, int64_t z, int64_t y, int64_t x) {
    if (!(out.n == n && out.c == c && out.z == z && out.y == y && out.x == x))
      out = TensorT<S>(n, c, z, y, x);
  }
};

template <typename S>
class InputNode : public Node<S> {
 public:
  void forward(bool) override {}
  void backward() override {}
  void set(const TensorT<S>& value) { this->out = value; }
};

template <typename S>
class ParamNode : public Node<S> {
 public:
  void forward(bool) override {}
  void backward() override {}
};

// --- Convolution ------------------------------------------------------------

// 3D convolution, kernel 1 or 3 per axis, dilation d, zero "same" padding
// (pad = d for k=3). Weights (co, ci, k, k, k), bias (co).
//
// Batched items are processed in parallel; parameter gradients accumulate
// per-item partials that are reduced in item order, so results do not depend
// on the thread count.
template <typename S>
class Conv3dNode : public Node<S> {
 public:
  Conv3dNode(Node<S>* x, ParamNode<S>* w, ParamNode<S>* b, int kernel, int dilation)
      : kernel_(kernel), dilation_(dilation) {
    this->ins = {x, w, b};
    if (kernel != 1 && kernel != 3) throw ConfigError("conv kernel must be 1 or 3");
  }

  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    const TensorT<S>& w = this->ins[1]->out;
    const TensorT<S>& b = this->ins[2]->out;
    const int64_t co = w.n, ci = w.c;
    if (x.c != ci) throw ShapeError("conv input channels mismatch");
    this->ensure_out(x.n, co, x.z, x.y, x.x);
    const int64_t plane = x.plane();
    // GEMMs run single-threaded (they are faster that way at these shapes and
    // keep results independent of the batch layout); parallelism comes from
    // batch items or, for single-item inference, from output chunks.
    if (x.n > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
      for (int64_t n = 0; n < x.n; ++n) forward_item_(x, w, b, n);
    } else if (kernel_ == 3) {
      const auto ranges = chunk_ranges_(x);
      ConstMapRM<S> W(w.v.data(), co, ci * 27);
      const int64_t slice = x.y * x.x;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
      for (size_t r = 0; r < ranges.size(); ++r) {
        static thread_local MatrixRM<S> col;
        const auto [z0, z1] = ranges[r];
        col.resize(ci * 27, (z1 - z0) * slice);
        im2col_(x, 0, z0, z1, col);
        MapRM<S> O(this->out.item(0), co, plane);
        O.middleCols(z0 * slice, (z1 - z0) * slice).noalias() = W * col;
      }
      add_bias_(b, 0);
    } else {
      // k = 1, single item: N is large at inference, split columns
      ConstMapRM<S> W(w.v.data(), co, ci);
      const int64_t block = 1 << 16;
      const int64_t nblocks = (plane + block - 1) / block;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
      for (int64_t bi = 0; bi < nblocks; ++bi) {
        const int64_t c0 = bi * block, nc = std::min(block, plane - c0);
        ConstMapRM<S> X(x.item(0), ci, plane);
        MapRM<S> O(this->out.item(0), co, plane);
        O.middleCols(c0, nc).noalias() = W * X.middleCols(c0, nc);
      }
      add_bias_(b, 0);
    }
  }

  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    const TensorT<S>& w = this->ins[1]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    TensorT<S>& gw = this->ins[1]->grad;
    TensorT<S>& gb = this->ins[2]->grad;
    const TensorT<S>& go = this->grad;
    const int64_t co = w.n, ci = w.c, plane = x.plane();
    const int64_t K = kernel_ == 1 ? ci : ci * 27;

    gw_items_.assign(static_cast<size_t>(x.n * co * K), S(0));
    gb_items_.assign(static_cast<size_t>(x.n * co), S(0));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (x.n > 1)
#endif
    for (int64_t n = 0; n < x.n; ++n) {
      S* gbp = gb_items_.data() + n * co;
      for (int64_t c = 0; c < co; ++c) {
        S s = 0;
        const S* p = go.chan(n, c);
        for (int64_t i = 0; i < plane; ++i) s += p[i];
        gbp[c] = s;
      }
      MapRM<S> GWn(gw_items_.data() + n * co * K, co, K);
      if (kernel_ == 1) {
        ConstMapRM<S> W(w.v.data(), co, ci);
        ConstMapRM<S> X(x.item(n), ci, plane);
        ConstMapRM<S> GO(go.item(n), co, plane);
        MapRM<S> GX(gx.item(n), ci, plane);
        GX.noalias() += W.transpose() * GO;
        GWn.noalias() = GO * X.transpose();
      } else {
        ConstMapRM<S> W(w.v.data(), co, ci * 27);
        static thread_local MatrixRM<S> colg;
        run_chunks_(x, n, [&](int64_t v0, int64_t nv, const MatrixRM<S>& col) {
          ConstMapRM<S> GO(go.item(n), co, plane);
          auto goc = GO.middleCols(v0, nv);
          GWn.noalias() += goc * col.transpose();
          colg.resize(ci * 27, nv);
          colg.noalias() = W.transpose() * goc;
          col2im_(colg, x, gx, n, v0, nv);
        });
      }
    }

    // fixed-order reduction over items keeps training bit-reproducible
    MapRM<S> GW(gw.v.data(), co, K);
    for (int64_t n = 0; n < x.n; ++n) {
      ConstMapRM<S> GWn(gw_items_.data() + n * co * K, co, K);
      GW.noalias() += GWn;
      const S* gbp = gb_items_.data() + n * co;
      for (int64_t c = 0; c < co; ++c) gb.v[static_cast<size_t>(c)] += gbp[c];
    }
  }

 private:
  void forward_item_(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int64_t n) {
    const int64_t co = w.n, ci = w.c, plane = x.plane();
    if (kernel_ == 1) {
      ConstMapRM<S> W(w.v.data(), co, ci);
      ConstMapRM<S> X(x.item(n), ci, plane);
      MapRM<S> O(this->out.item(n), co, plane);
      O.noalias() = W * X;
    } else {
      ConstMapRM<S> W(w.v.data(), co, ci * 27);
      run_chunks_(x, n, [&](int64_t v0, int64_t nv, const MatrixRM<S>& col) {
        MapRM<S> O(this->out.item(n), co, plane);
        O.middleCols(v0, nv).noalias() = W * col;
      });
    }
    add_bias_(b, n);
  }

  void add_bias_(const TensorT<S>& b, int64_t n) {
    const int64_t co = this->out.c, plane = this->out.plane();
    for (int64_t c = 0; c < co; ++c) {
      S* p = this->out.chan(n, c);
      const S bias = b.v[static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) p[i] += bias;
    }
  }

  std::vector<std::pair<int64_t, int64_t>> chunk_ranges_(const TensorT<S>& x) const {
    const int64_t slice = x.y * x.x;
    const int64_t K = x.c * 27;
    // col buffer capped at ~16MB per thread, and enough chunks to keep the
    // workers busy when parallelizing over chunks instead of items
    int64_t slices_per_chunk =
        std::max<int64_t>(1, (int64_t(1) << 22) / std::max<int64_t>(1, K * slice));
    const int64_t target_chunks = 2 * std::max(1, compute_threads());
    slices_per_chunk = std::min(slices_per_chunk,
                                std::max<int64_t>(1, (x.z + target_chunks - 1) / target_chunks));
    std::vector<std::pair<int64_t, int64_t>> ranges;
    for (int64_t z0 = 0; z0 < x.z; z0 += slices_per_chunk)
      ranges.emplace_back(z0, std::min(x.z, z0 + slices_per_chunk));
    return ranges;
  }

  // Invokes fn over contiguous chunks of whole z-slices; col holds the im2col
  // rows (ci*27 x chunk voxels) for the current chunk.
  template <typename Fn>
  void run_chunks_(const TensorT<S>& x, int64_t n, Fn&& fn) {
    const int64_t slice = x.y * x.x;
    static thread_local MatrixRM<S> col;
    for (const auto& [z0, z1] : chunk_ranges_(x)) {
      int64_t v0 = z0 * slice, nv = (z1 - z0) * slice;
      col.resize(x.c * 27, nv);
      im2col_(x, n, z0, z1, col);
      fn(v0, nv, col);
    }
  }

  void im2col_(const TensorT<S>& x, int64_t n, int64_t z0, int64_t z1, MatrixRM<S>& col) {
    const int64_t nx = x.x, ny = x.y, nz = x.z, slice = ny * nx;
    const int d = dilation_;
    for (int64_t ci = 0; ci < x.c; ++ci) {
      const S* src = x.chan(n, ci);
      for (int tz = 0; tz < 3; ++tz)
        for (int ty = 0; ty < 3; ++ty)
          for (int tx = 0; tx < 3; ++tx) {
            const int64_t dz = (tz - 1) * d, dy = (ty - 1) * d, dx = (tx - 1) * d;
            S* row = col.data() + (((ci * 3 + tz) * 3 + ty) * 3 + tx) * col.cols();
            for (int64_t z = z0; z < z1; ++z) {
              const int64_t zi = z + dz;
              for (int64_t y = 0; y < ny; ++y) {
                S* dst = row + ((z - z0) * ny + y) * nx;
                const int64_t yi = y + dy;
                if (zi < 0 || zi >= nz || yi < 0 || yi >= ny) {
                  std::memset(dst, 0, sizeof(S) * static_cast<size_t>(nx));
                  continue;
                }
                const S* s = src + zi * slice + yi * nx;
                // valid output x range given the tap shift dx
                const int64_t xa = std::max<int64_t>(0, -dx);
                const int64_t xb = std::min<int64_t>(nx, nx - dx);
                if (xa > 0) std::memset(dst, 0, sizeof(S) * static_cast<size_t>(xa));
                if (xb > xa)
                  std::memcpy(dst + xa, s + xa + dx, sizeof(S) * static_cast<size_t>(xb - xa));
                if (xb < nx) std::memset(dst + xb, 0, sizeof(S) * static_cast<size_t>(nx - xb));
              }
            }
          }
    }
  }

  void col2im_(const MatrixRM<S>& colg, const TensorT<S>& x, TensorT<S>& gx, int64_t n,
               int64_t v0, int64_t nv) {
    const int64_t nx = x.x, ny = x.y, nz = x.z, slice = ny * nx;
    const int64_t z0 = v0 / slice, z1 = z0 + nv / slice;
    const int d = dilation_;
    for (int64_t ci = 0; ci < x.c; ++ci) {
      S* dst0 = gx.chan(n, ci);
      for (int tz = 0; tz < 3; ++tz)
        for (int ty = 0; ty < 3; ++ty)
          for (int tx = 0; tx < 3; ++tx) {
            const int64_t dz = (tz - 1) * d, dy = (ty - 1) * d, dx = (tx - 1) * d;
            const S* row = colg.data() + (((ci * 3 + tz) * 3 + ty) * 3 + tx) * colg.cols();
            for (int64_t z = z0; z < z1; ++z) {
              const int64_t zi = z + dz;
              if (zi < 0 || zi >= nz) continue;
              for (int64_t y = 0; y < ny; ++y) {
                const int64_t yi = y + dy;
                if (yi < 0 || yi >= ny) continue;
                const S* s = row + ((z - z0) * ny + y) * nx;
                S* dst = dst0 + zi * slice + yi * nx;
                const int64_t xa = std::max<int64_t>(0, -dx);
                const int64_t xb = std::min<int64_t>(nx, nx - dx);
                for (int64_t xx = xa; xx < xb; ++xx) dst[xx + dx] += s[xx];
              }
            }
          }
    }
  }

  int kernel_;
  int dilation_;
  std::vector<S> gw_items_, gb_items_;  // per-item gradient partials
};

// --- Batch normalization ----------------------------------------------------

template <typename S>
class BatchNormNode : public Node<S> {
 public:
  BatchNormNode(Node<S>* x, ParamNode<S>* gamma, ParamNode<S>* beta, int64_t channels)
      : channels_(channels) {
    this->ins = {x, gamma, beta};
    running_mean.assign(static_cast<size_t>(channels), S(0));
    running_var.assign(static_cast<size_t>(channels), S(1));
  }

  void forward(bool training) override {
    const TensorT<S>& x = this->ins[0]->out;
    const TensorT<S>& g = this->ins[1]->out;
    const TensorT<S>& b = this->ins[2]->out;
    if (x.c != channels_) throw ShapeError("batchnorm channel mismatch");
    this->ensure_out(x.n, x.c, x.z, x.y, x.x);
    const int64_t plane = x.plane();
    const S m = static_cast<S>(x.n * plane);
    mean_.assign(static_cast<size_t>(channels_), S(0));
    invstd_.assign(static_cast<size_t>(channels_), S(0));
    trained_ = training;
    if (training && reestimate_) ++reestimate_count_;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t c = 0; c < channels_; ++c) {
      S mu, var;
      if (training) {
        S sum = 0, sq = 0;
        for (int64_t n = 0; n < x.n; ++n) {
          const S* p = x.chan(n, c);
          for (int64_t i = 0; i < plane; ++i) {
            sum += p[i];
            sq += p[i] * p[i];
          }
        }
        mu = sum / m;
        var = std::max<S>(sq / m - mu * mu, S(0));
        // In re-estimation mode the running stats become the exact cumulative
        // average over the forwards seen since the mode began.
        const S mom = reestimate_ ? S(1) / static_cast<S>(reestimate_count_) : momentum_;
        running_mean[static_cast<size_t>(c)] =
            (S(1) - mom) * running_mean[static_cast<size_t>(c)] + mom * mu;
        running_var[static_cast<size_t>(c)] =
            (S(1) - mom) * running_var[static_cast<size_t>(c)] + mom * var;
      } else {
        mu = running_mean[static_cast<size_t>(c)];
        var = running_var[static_cast<size_t>(c)];
      }
      const S istd = S(1) / std::sqrt(var + eps_);
      mean_[static_cast<size_t>(c)] = mu;
      invstd_[static_cast<size_t>(c)] = istd;
      const S gc = g.v[static_cast<size_t>(c)], bc = b.v[static_cast<size_t>(c)];
      for (int64_t n = 0; n < x.n; ++n) {
        const S* p = x.chan(n, c);
        S* q = this->out.chan(n, c);
        for (int64_t i = 0; i < plane; ++i) q[i] = gc * (p[i] - mu) * istd + bc;
      }
    }
  }

  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    const TensorT<S>& g = this->ins[1]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    TensorT<S>& gg = this->ins[1]->grad;
    TensorT<S>& gb = this->ins[2]->grad;
    const TensorT<S>& go = this->grad;
    const int64_t plane = x.plane();
    const S m = static_cast<S>(x.n * plane);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t c = 0; c < channels_; ++c) {
      const S mu = mean_[static_cast<size_t>(c)], istd = invstd_[static_cast<size_t>(c)];
      const S gc = g.v[static_cast<size_t>(c)];
      S sum_dy = 0, sum_dy_xhat = 0;
      for (int64_t n = 0; n < x.n; ++n) {
        const S* p = x.chan(n, c);
        const S* dy = go.chan(n, c);
        for (int64_t i = 0; i < plane; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (p[i] - mu) * istd;
        }
      }
      gb.v[static_cast<size_t>(c)] += sum_dy;
      gg.v[static_cast<size_t>(c)] += sum_dy_xhat;
      if (trained_) {
        const S k1 = sum_dy / m, k2 = sum_dy_xhat / m;
        for (int64_t n = 0; n < x.n; ++n) {
          const S* p = x.chan(n, c);
          const S* dy = go.chan(n, c);
          S* dx = gx.chan(n, c);
          for (int64_t i = 0; i < plane; ++i) {
            const S xhat = (p[i] - mu) * istd;
            dx[i] += gc * istd * (dy[i] - k1 - xhat * k2);
          }
        }
      } else {
        for (int64_t n = 0; n < x.n; ++n) {
          const S* dy = go.chan(n, c);
          S* dx = gx.chan(n, c);
          for (int64_t i = 0; i < plane; ++i) dx[i] += gc * istd * dy[i];
        }
      }
    }
  }

  std::vector<S> running_mean, running_var;

  // Exact re-estimation of the running statistics: while enabled, training
  // forwards accumulate the cumulative average of the batch stats.
  void begin_reestimate() {
    reestimate_ = true;
    reestimate_count_ = 0;
  }
  void end_reestimate() { reestimate_ = false; }

 private:
  int64_t channels_;
  S eps_ = S(1e-5);
  S momentum_ = S(0.1);
  std::vector<S> mean_, invstd_;
  bool trained_ = false;
  bool reestimate_ = false;
  int64_t reestimate_count_ = 0;
};

// --- Elementwise ------------------------------------------------------------

template <typename S>
class ReluNode : public Node<S> {
 public:
  explicit ReluNode(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, x.c, x.z, x.y, x.x);
    const int64_t n = static_cast<int64_t>(x.v.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i) {
      const S v = x.v[static_cast<size_t>(i)];
      this->out.v[static_cast<size_t>(i)] = v > S(0) ? v : S(0);
    }
  }
  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t n = static_cast<int64_t>(gx.v.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i)
      if (x.v[static_cast<size_t>(i)] > S(0))
        gx.v[static_cast<size_t>(i)] += this->grad.v[static_cast<size_t>(i)];
  }
};

template <typename S>
class SigmoidNode : public Node<S> {
 public:
  explicit SigmoidNode(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, x.c, x.z, x.y, x.x);
    const int64_t n = static_cast<int64_t>(x.v.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i)
      this->out.v[static_cast<size_t>(i)] =
          S(1) / (S(1) + std::exp(-x.v[static_cast<size_t>(i)]));
  }
  void backward() override {
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t n = static_cast<int64_t>(gx.v.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i) {
      const S y = this->out.v[static_cast<size_t>(i)];
      gx.v[static_cast<size_t>(i)] += this->grad.v[static_cast<size_t>(i)] * y * (S(1) - y);
    }
  }
};

// --- Pooling / upsampling ---------------------------------------------------

template <typename S>
class MaxPool2Node : public Node<S> {
 public:
  explicit MaxPool2Node(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    if (x.z % 2 || x.y % 2 || x.x % 2) throw ShapeError("maxpool input dims must be even");
    this->ensure_out(x.n, x.c, x.z / 2, x.y / 2, x.x / 2);
    argmax_.resize(this->out.v.size());
    const int64_t slice = x.y * x.x;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        S* dst = this->out.chan(n, c);
        int64_t* am = argmax_.data() + (n * x.c + c) * this->out.plane();
        int64_t o = 0;
        for (int64_t z = 0; z < x.z; z += 2)
          for (int64_t y = 0; y < x.y; y += 2)
            for (int64_t xx = 0; xx < x.x; xx += 2, ++o) {
              S best = src[z * slice + y * x.x + xx];
              int64_t besti = z * slice + y * x.x + xx;
              for (int dz = 0; dz < 2; ++dz)
                for (int dy = 0; dy < 2; ++dy)
                  for (int dx = 0; dx < 2; ++dx) {
                    int64_t idx = (z + dz) * slice + (y + dy) * x.x + (xx + dx);
                    if (src[idx] > best) {
                      best = src[idx];
                      besti = idx;
                    }
                  }
              dst[o] = best;
              am[o] = besti;
            }
      }
  }
  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    TensorT<S>& gx = this->ins[0]->grad;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        S* dst = gx.chan(n, c);
        const S* g = this->grad.chan(n, c);
        const int64_t* am = argmax_.data() + (n * x.c + c) * this->out.plane();
        for (int64_t o = 0; o < this->out.plane(); ++o) dst[am[o]] += g[o];
      }
  }

 private:
  std::vector<int64_t> argmax_;
};

// Trilinear x2 upsampling. Output sample o maps to input coordinate
// o/2 - 0.25, clamped at the borders.
template <typename S>
class Upsample2Node : public Node<S> {
 public:
  explicit Upsample2Node(Node<S>* x) { this->ins = {x}; }

  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, x.c, x.z * 2, x.y * 2, x.x * 2);
    fill_axis_(x.z, iz_);
    fill_axis_(x.y, iy_);
    fill_axis_(x.x, ix_);
    const int64_t slice_in = x.y * x.x, slice_out = this->out.y * this->out.x;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        S* dst = this->out.chan(n, c);
        for (int64_t z = 0; z < this->out.z; ++z) {
          const auto& [z0, z1, fz] = iz_[static_cast<size_t>(z)];
          for (int64_t y = 0; y < this->out.y; ++y) {
            const auto& [y0, y1, fy] = iy_[static_cast<size_t>(y)];
            const S* s00 = src + z0 * slice_in + y0 * x.x;
            const S* s01 = src + z0 * slice_in + y1 * x.x;
            const S* s10 = src + z1 * slice_in + y0 * x.x;
            const S* s11 = src + z1 * slice_in + y1 * x.x;
            S* d = dst + z * slice_out + y * this->out.x;
            for (int64_t xx = 0; xx < this->out.x; ++xx) {
              const auto& [x0, x1, fx] = ix_[static_cast<size_t>(xx)];
              const S c00 = s00[x0] * (S(1) - fx) + s00[x1] * fx;
              const S c01 = s01[x0] * (S(1) - fx) + s01[x1] * fx;
              const S c10 = s10[x0] * (S(1) - fx) + s10[x1] * fx;
              const S c11 = s11[x0] * (S(1) - fx) + s11[x1] * fx;
              const S c0 = c00 * (S(1) - fy) + c01 * fy;
              const S c1 = c10 * (S(1) - fy) + c11 * fy;
              d[xx] = c0 * (S(1) - fz) + c1 * fz;
            }
          }
        }
      }
  }

  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t slice_in = x.y * x.x, slice_out = this->out.y * this->out.x;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        S* dst = gx.chan(n, c);
        const S* g = this->grad.chan(n, c);
        for (int64_t z = 0; z < this->out.z; ++z) {
          const auto& [z0, z1, fz] = iz_[static_cast<size_t>(z)];
          for (int64_t y = 0; y < this->out.y; ++y) {
            const auto& [y0, y1, fy] = iy_[static_cast<size_t>(y)];
            const S* gr = g + z * slice_out + y * this->out.x;
            for (int64_t xx = 0; xx < this->out.x; ++xx) {
              const auto& [x0, x1, fx] = ix_[static_cast<size_t>(xx)];
              const S gv = gr[xx];
              const S wz0 = S(1) - fz, wy0 = S(1) - fy, wx0 = S(1) - fx;
              dst[z0 * slice_in + y0 * x.x + x0] += gv * wz0 * wy0 * wx0;
              dst[z0 * slice_in + y0 * x.x + x1] += gv * wz0 * wy0 * fx;
              dst[z0 * slice_in + y1 * x.x + x0] += gv * wz0 * fy * wx0;
              dst[z0 * slice_in + y1 * x.x + x1] += gv * wz0 * fy * fx;
              dst[z1 * slice_in + y0 * x.x + x0] += gv * fz * wy0 * wx0;
              dst[z1 * slice_in + y0 * x.x + x1] += gv * fz * wy0 * fx;
              dst[z1 * slice_in + y1 * x.x + x0] += gv * fz * fy * wx0;
              dst[z1 * slice_in + y1 * x.x + x1] += gv * fz * fy * fx;
            }
          }
        }
      }
  }

 private:
  struct AxisTap {
    int64_t i0, i1;
    S f;
  };
  void fill_axis_(int64_t n_in, std::vector<AxisTap>& taps) {
    taps.resize(static_cast<size_t>(n_in * 2));
    for (int64_t o = 0; o < n_in * 2; ++o) {
      double u = static_cast<double>(o) / 2.0 - 0.25;
      int64_t i0 = static_cast<int64_t>(std::floor(u));
      double f = u - static_cast<double>(i0);
      int64_t i1 = i0 + 1;
      if (i0 < 0) {
        i0 = 0;
        i1 = 0;
        f = 0;
      } else if (i1 >= n_in) {
        i0 = n_in - 1;
        i1 = n_in - 1;
        f = 0;
      }
      taps[static_cast<size_t>(o)] = {i0, i1, static_cast<S>(f)};
    }
  }
  std::vector<AxisTap> iz_, iy_, ix_;
};

// --- Structure --------------------------------------------------------------

// Channel concatenation; inputs whose spatial dims exceed the smallest are
// center-cropped (skip connections may in principle arrive larger).
template <typename S>
class ConcatNode : public Node<S> {
 public:
  explicit ConcatNode(std::vector<Node<S>*> xs) { this->ins = std::move(xs); }

  void forward(bool) override {
    int64_t zc = this->ins[0]->out.z, yc = this->ins[0]->out.y, xc = this->ins[0]->out.x;
    int64_t ctot = 0;
    for (Node<S>* in : this->ins) {
      zc = std::min(zc, in->out.z);
      yc = std::min(yc, in->out.y);
      xc = std::min(xc, in->out.x);
      ctot += in->out.c;
    }
    const int64_t n = this->ins[0]->out.n;
    this->ensure_out(n, ctot, zc, yc, xc);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 1)
#endif
    for (int64_t b = 0; b < n; ++b) {
      int64_t coff = 0;
      for (Node<S>* in : this->ins) {
        const TensorT<S>& t = in->out;
        const int64_t oz = (t.z - zc) / 2, oy = (t.y - yc) / 2, ox = (t.x - xc) / 2;
        for (int64_t c = 0; c < t.c; ++c) {
          const S* src = t.chan(b, c);
          S* dst = this->out.chan(b, coff + c);
          for (int64_t z = 0; z < zc; ++z)
            for (int64_t y = 0; y < yc; ++y)
              std::memcpy(dst + (z * yc + y) * xc,
                          src + ((z + oz) * t.y + (y + oy)) * t.x + ox,
                          sizeof(S) * static_cast<size_t>(xc));
        }
        coff += t.c;
      }
    }
  }

  void backward() override {
    const int64_t zc = this->out.z, yc = this->out.y, xc = this->out.x;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (this->out.n > 1)
#endif
    for (int64_t b = 0; b < this->out.n; ++b) {
      int64_t coff = 0;
      for (Node<S>* in : this->ins) {
        TensorT<S>& g = in->grad;
        const TensorT<S>& t = in->out;
        const int64_t oz = (t.z - zc) / 2, oy = (t.y - yc) / 2, ox = (t.x - xc) / 2;
        for (int64_t c = 0; c < t.c; ++c) {
          S* dst = g.chan(b, c);
          const S* src = this->grad.chan(b, coff + c);
          for (int64_t z = 0; z < zc; ++z)
            for (int64_t y = 0; y < yc; ++y) {
              S* drow = dst + ((z + oz) * t.y + (y + oy)) * t.x + ox;
              const S* srow = src + (z * yc + y) * xc;
              for (int64_t i = 0; i < xc; ++i) drow[i] += srow[i];
            }
        }
        coff += t.c;
      }
    }
  }
};

// Per-voxel softmax over the channel axis.
template <typename S>
class SoftmaxChannelNode : public Node<S> {
 public:
  explicit SoftmaxChannelNode(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, x.c, x.z, x.y, x.x);
    const int64_t plane = x.plane();
    const int64_t total = x.n * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t t = 0; t < total; ++t) {
      const int64_t n = t / plane, i = t % plane;
      S mx = x.chan(n, 0)[i];
      for (int64_t c = 1; c < x.c; ++c) mx = std::max(mx, x.chan(n, c)[i]);
      S sum = 0;
      for (int64_t c = 0; c < x.c; ++c) {
        const S e = std::exp(x.chan(n, c)[i] - mx);
        this->out.chan(n, c)[i] = e;
        sum += e;
      }
      for (int64_t c = 0; c < x.c; ++c) this->out.chan(n, c)[i] /= sum;
    }
  }
  void backward() override {
    const TensorT<S>& y = this->out;
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t plane = y.plane();
    const int64_t total = y.n * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t t = 0; t < total; ++t) {
      const int64_t n = t / plane, i = t % plane;
      S dot = 0;
      for (int64_t c = 0; c < y.c; ++c) dot += this->grad.chan(n, c)[i] * y.chan(n, c)[i];
      for (int64_t c = 0; c < y.c; ++c)
        gx.chan(n, c)[i] += y.chan(n, c)[i] * (this->grad.chan(n, c)[i] - dot);
    }
  }
};

// --- Attention-gate building blocks ------------------------------------------

template <typename S>
class ChannelMeanNode : public Node<S> {
 public:
  explicit ChannelMeanNode(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, 1, x.z, x.y, x.x);
    const int64_t plane = x.plane();
    const S inv = S(1) / static_cast<S>(x.c);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (x.n > 1)
#endif
    for (int64_t n = 0; n < x.n; ++n) {
      S* dst = this->out.chan(n, 0);
      std::fill(dst, dst + plane, S(0));
      for (int64_t c = 0; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
      }
      for (int64_t i = 0; i < plane; ++i) dst[i] *= inv;
    }
  }
  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t plane = x.plane();
    const S inv = S(1) / static_cast<S>(x.c);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (x.n > 1)
#endif
    for (int64_t n = 0; n < x.n; ++n) {
      const S* g = this->grad.chan(n, 0);
      for (int64_t c = 0; c < x.c; ++c) {
        S* dst = gx.chan(n, c);
        for (int64_t i = 0; i < plane; ++i) dst[i] += g[i] * inv;
      }
    }
  }
};

template <typename S>
class ChannelMaxNode : public Node<S> {
 public:
  explicit ChannelMaxNode(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, 1, x.z, x.y, x.x);
    argmax_.resize(static_cast<size_t>(x.n * x.plane()));
    const int64_t plane = x.plane();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (x.n > 1)
#endif
    for (int64_t n = 0; n < x.n; ++n) {
      S* dst = this->out.chan(n, 0);
      int64_t* am = argmax_.data() + n * plane;
      const S* c0 = x.chan(n, 0);
      for (int64_t i = 0; i < plane; ++i) {
        dst[i] = c0[i];
        am[i] = 0;
      }
      for (int64_t c = 1; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        for (int64_t i = 0; i < plane; ++i)
          if (src[i] > dst[i]) {
            dst[i] = src[i];
            am[i] = c;
          }
      }
    }
  }
  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t plane = x.plane();
    for (int64_t n = 0; n < x.n; ++n) {
      const S* g = this->grad.chan(n, 0);
      const int64_t* am = argmax_.data() + n * plane;
      for (int64_t i = 0; i < plane; ++i) gx.chan(n, am[i])[i] += g[i];
    }
  }

 private:
  std::vector<int64_t> argmax_;
};

template <typename S>
class GlobalAvgPoolNode : public Node<S> {
 public:
  explicit GlobalAvgPoolNode(Node<S>* x) { this->ins = {x}; }
  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    this->ensure_out(x.n, x.c, 1, 1, 1);
    const int64_t plane = x.plane();
    const S inv = S(1) / static_cast<S>(plane);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        S s = 0;
        for (int64_t i = 0; i < plane; ++i) s += src[i];
        this->out.chan(n, c)[0] = s * inv;
      }
  }
  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    const int64_t plane = x.plane();
    const S inv = S(1) / static_cast<S>(plane);
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        const S g = this->grad.chan(n, c)[0] * inv;
        S* dst = gx.chan(n, c);
        for (int64_t i = 0; i < plane; ++i) dst[i] += g;
      }
  }
};

// y = x * gate, where the gate broadcasts either over channels (gate.c == 1,
// spatial attention) or over space (gate.plane() == 1, channel attention).
template <typename S>
class MulBroadcastNode : public Node<S> {
 public:
  MulBroadcastNode(Node<S>* x, Node<S>* gate) { this->ins = {x, gate}; }

  void forward(bool) override {
    const TensorT<S>& x = this->ins[0]->out;
    const TensorT<S>& g = this->ins[1]->out;
    spatial_gate_ = g.c == 1 && g.plane() == x.plane();
    if (!spatial_gate_ && !(g.plane() == 1 && g.c == x.c))
      throw ShapeError("gate shape does not broadcast over input");
    this->ensure_out(x.n, x.c, x.z, x.y, x.x);
    const int64_t plane = x.plane();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        S* dst = this->out.chan(n, c);
        if (spatial_gate_) {
          const S* gv = g.chan(n, 0);
          for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * gv[i];
        } else {
          const S gv = g.chan(n, c)[0];
          for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * gv;
        }
      }
  }

  void backward() override {
    const TensorT<S>& x = this->ins[0]->out;
    const TensorT<S>& g = this->ins[1]->out;
    TensorT<S>& gx = this->ins[0]->grad;
    TensorT<S>& gg = this->ins[1]->grad;
    const int64_t plane = x.plane();
    for (int64_t n = 0; n < x.n; ++n)
      for (int64_t c = 0; c < x.c; ++c) {
        const S* src = x.chan(n, c);
        const S* dy = this->grad.chan(n, c);
        S* dx = gx.chan(n, c);
        if (spatial_gate_) {
          const S* gv = g.chan(n, 0);
          S* dg = gg.chan(n, 0);
          for (int64_t i = 0; i < plane; ++i) {
            dx[i] += dy[i] * gv[i];
            dg[i] += dy[i] * src[i];
          }
        } else {
          const S gv = g.chan(n, c)[0];
          S acc = 0;
          for (int64_t i = 0; i < plane; ++i) {
            dx[i] += dy[i] * gv;
            acc += dy[i] * src[i];
          }
          gg.chan(n, c)[0] += acc;
        }
      }
  }

 private:
  bool spatial_gate_ = false;
};

}  // namespace ddaunet

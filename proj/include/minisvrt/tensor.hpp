#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "minisvrt/errors.hpp"
#include "minisvrt/parallel.hpp"

namespace minisvrt {

// Dense row-major N-dimensional array. float for training, double for
// gradient verification.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), T(0));
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel_of(shape_))
      throw ShapeError("Tensor: data length does not match shape");
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

// Trainable (or tracked, for BN running stats) model state. value, gradient
// and momentum buffer always share one shape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> momentum;
  bool trainable = true;
  bool grad_ready = false;

  Parameter(std::string param_name, Tensor<T> v, bool is_trainable = true)
      : name(std::move(param_name)),
        value(std::move(v)),
        grad(Tensor<T>::zeros_like(value)),
        momentum(Tensor<T>::zeros_like(value)),
        trainable(is_trainable) {}

  void zero_grad() {
    std::fill(grad.data(), grad.data() + grad.numel(), T(0));
    grad_ready = false;
  }
};

namespace nn {

// ---------------------------------------------------------------------------
// im2col helpers shared by conv2d forward and backward
// ---------------------------------------------------------------------------

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* col) {
  // col layout: [channels*k*k, out_h*out_w]
  const std::size_t patch = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * patch;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                              static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, T(0));
            dst += out_w;
            continue;
          }
          const T* row = x + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
            *dst++ = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width))
                         ? row[static_cast<std::size_t>(ix)]
                         : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h,
                std::size_t out_w, T* x) {
  const std::size_t patch = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * patch;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                              static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            src += out_w;
            continue;
          }
          T* row = x + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width))
              row[static_cast<std::size_t>(ix)] += *src;
            ++src;
          }
        }
      }
    }
  }
}

// Dot product with eight independent accumulator lanes. The fixed lane
// order keeps results deterministic while letting the compiler vectorize
// what a strict serial reduction would forbid.
template <typename T>
T dot_lanes(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  std::size_t main = n - n % 8;
  for (std::size_t p = 0; p < main; p += 8)
    for (std::size_t j = 0; j < 8; ++j) lanes[j] += a[p + j] * b[p + j];
  T tail = T(0);
  for (std::size_t p = main; p < n; ++p) tail += a[p] * b[p];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// out[rows, cols] += a[rows, inner] * b[inner, cols], all row-major.
// k-outer with a 4-wide k tile: each b row is streamed exactly once and each
// out row is touched once per four k's, so the multi-MB column matrix never
// gets re-read and cache traffic on out drops fourfold.
template <typename T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t rows, std::size_t inner,
              std::size_t cols) {
  std::size_t q = 0;
  for (; q + 4 <= inner; q += 4) {
    const T* b0 = b + q * cols;
    const T* b1 = b0 + cols;
    const T* b2 = b1 + cols;
    const T* b3 = b2 + cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* ar = a + r * inner + q;
      T a0 = ar[0], a1 = ar[1], a2 = ar[2], a3 = ar[3];
      if (a0 == T(0) && a1 == T(0) && a2 == T(0) && a3 == T(0)) continue;
      T* out_row = out + r * cols;
      for (std::size_t c = 0; c < cols; ++c)
        out_row[c] += a0 * b0[c] + a1 * b1[c] + a2 * b2[c] + a3 * b3[c];
    }
  }
  for (; q < inner; ++q) {
    const T* b_row = b + q * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      T av = a[r * inner + q];
      if (av == T(0)) continue;
      T* out_row = out + r * cols;
      for (std::size_t c = 0; c < cols; ++c) out_row[c] += av * b_row[c];
    }
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

// Records the forward graph as it is built (so the node list is already a
// topological order) and replays it once in reverse. A tape is consumed by
// its backward pass; reuse raises StateError.
template <typename T>
class Tape {
 public:
  using NodeId = std::size_t;
  static constexpr NodeId kNoNode = static_cast<NodeId>(-1);

  explicit Tape(bool checked = false) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Constant leaf: no gradient is ever materialized for it.
  NodeId input(Tensor<T> value) { return push(std::move(value)); }

  // Trainable leaf bound to persistent parameter state.
  NodeId param(Parameter<T>& p) {
    NodeId id = push(p.value);
    nodes_[id].bound_param = &p;
    bound_.push_back(id);
    return id;
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }

  // -------------------------------------------------------------------------
  // Ops
  // -------------------------------------------------------------------------

  NodeId conv2d(NodeId x_id, NodeId w_id, NodeId b_id, std::size_t stride = 1,
                std::size_t pad = 0) {
    const Tensor<T>& x = value_checked(x_id, "conv2d input");
    const Tensor<T>& w = value_checked(w_id, "conv2d weight");
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: x must be NCHW, w FCkk");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    std::size_t f = w.dim(0), wc = w.dim(1), k = w.dim(2), k2 = w.dim(3);
    if (k != k2 || wc != c) throw ShapeError("conv2d: kernel shape mismatch");
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (h + 2 * pad < k || wd + 2 * pad < k) throw ShapeError("conv2d: kernel larger than input");
    if ((h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0)
      throw ShapeError("conv2d: output size is not integral");
    std::size_t oh = (h + 2 * pad - k) / stride + 1;
    std::size_t ow = (wd + 2 * pad - k) / stride + 1;
    const Tensor<T>* bias = nullptr;
    if (b_id != kNoNode) {
      bias = &value_checked(b_id, "conv2d bias");
      if (bias->rank() != 1 || bias->dim(0) != f) throw ShapeError("conv2d: bias shape mismatch");
    }

    Tensor<T> out({n, f, oh, ow});
    const std::size_t ck2 = c * k * k;
    const std::size_t patch = oh * ow;
    const std::size_t chw = c * h * wd;
    {
      // One scratch column buffer per worker, reused across its samples.
      std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
      std::size_t chunk = (n + workers - 1) / workers;
      parallel_for(workers, [&](std::size_t wk) {
        std::size_t s0 = wk * chunk, s1 = std::min(n, s0 + chunk);
        if (s0 >= s1) return;
        std::vector<T> col(ck2 * patch);
        for (std::size_t s = s0; s < s1; ++s) {
          nn::im2col(x.data() + s * chw, c, h, wd, k, stride, pad, oh, ow, col.data());
          T* dst = out.data() + s * f * patch;
          if (bias)
            for (std::size_t fi = 0; fi < f; ++fi)
              std::fill(dst + fi * patch, dst + (fi + 1) * patch, (*bias)[fi]);
          nn::gemm_acc(w.data(), col.data(), dst, f, ck2, patch);
        }
      });
    }

    return push(std::move(out), [=, this](Tape& t) {
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      const Tensor<T>& xv = t.nodes_[x_id].value;
      const Tensor<T>& wv = t.nodes_[w_id].value;
      if (b_id != kNoNode && t.wants_grad(b_id)) {
        Tensor<T>& db = t.grad_buffer(b_id);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t fi = 0; fi < f; ++fi) {
            const T* g = dy.data() + (s * f + fi) * patch;
            T acc = T(0);
            for (std::size_t p = 0; p < patch; ++p) acc += g[p];
            db[fi] += acc;
          }
      }
      const bool want_w = t.wants_grad(w_id);
      const bool want_x = t.wants_grad(x_id);
      if (!want_w && !want_x) return;
      Tensor<T>* dw = want_w ? &t.grad_buffer(w_id) : nullptr;
      Tensor<T>* dx = want_x ? &t.grad_buffer(x_id) : nullptr;

      // Sample-blocked backward: each block materializes its columns once,
      // shared by the weight-gradient rows (worker-owned, batch order fixed,
      // so sums are worker-count invariant) and the input-gradient scatter.
      const std::size_t workers = static_cast<std::size_t>(max_threads());
      const std::size_t block = std::min<std::size_t>(n, std::max<std::size_t>(workers, 4));
      std::vector<T> slab(block * ck2 * patch);
      const std::size_t q_chunk = (ck2 + workers - 1) / workers;
      for (std::size_t s0 = 0; s0 < n; s0 += block) {
        const std::size_t cnt = std::min(block, n - s0);
        parallel_for(cnt, [&](std::size_t i) {
          nn::im2col(xv.data() + (s0 + i) * chw, c, h, wd, k, stride, pad, oh, ow,
                     slab.data() + i * ck2 * patch);
        });
        if (want_w) {
          // q-outer: each column row is streamed once; the dy rows of the
          // sample (<= a few hundred KB) stay cache-resident.
          parallel_for(workers, [&](std::size_t wk) {
            std::size_t q0 = wk * q_chunk, q1 = std::min(ck2, q0 + q_chunk);
            for (std::size_t i = 0; i < cnt; ++i) {
              const T* col = slab.data() + i * ck2 * patch;
              const T* gbase = dy.data() + (s0 + i) * f * patch;
              for (std::size_t q = q0; q < q1; ++q) {
                const T* cr = col + q * patch;
                for (std::size_t fi = 0; fi < f; ++fi)
                  dw->data()[fi * ck2 + q] += nn::dot_lanes(gbase + fi * patch, cr, patch);
              }
            }
          });
        }
        if (want_x) {
          parallel_for(cnt, [&](std::size_t i) {
            // the column slot is free after the dw phase; reuse it for dcol
            T* dcol = slab.data() + i * ck2 * patch;
            const T* gbase = dy.data() + (s0 + i) * f * patch;
            for (std::size_t q = 0; q < ck2; ++q) {
              T* dst = dcol + q * patch;
              std::fill(dst, dst + patch, T(0));
              std::size_t fi = 0;
              for (; fi + 4 <= f; fi += 4) {
                T w0 = wv[fi * ck2 + q], w1 = wv[(fi + 1) * ck2 + q];
                T w2 = wv[(fi + 2) * ck2 + q], w3 = wv[(fi + 3) * ck2 + q];
                const T* g0 = gbase + fi * patch;
                const T* g1 = g0 + patch;
                const T* g2 = g1 + patch;
                const T* g3 = g2 + patch;
                for (std::size_t p = 0; p < patch; ++p)
                  dst[p] += w0 * g0[p] + w1 * g1[p] + w2 * g2[p] + w3 * g3[p];
              }
              for (; fi < f; ++fi) {
                T wvq = wv[fi * ck2 + q];
                if (wvq == T(0)) continue;
                const T* g = gbase + fi * patch;
                for (std::size_t p = 0; p < patch; ++p) dst[p] += wvq * g[p];
              }
            }
            nn::col2im_add(dcol, c, h, wd, k, stride, pad, oh, ow,
                           dx->data() + (s0 + i) * chw);
          });
        }
      }
    });
  }

  // Per-channel batch normalization over [N, C, H, W]. Train mode uses batch
  // statistics and updates the running buffers in place; eval mode reads the
  // running buffers.
  NodeId batchnorm2d(NodeId x_id, NodeId gamma_id, NodeId beta_id, Tensor<T>* running_mean,
                     Tensor<T>* running_var, bool training, T momentum = T(0.1),
                     T eps = T(1e-5)) {
    const Tensor<T>& x = value_checked(x_id, "batchnorm2d input");
    if (x.rank() != 4) throw ShapeError("batchnorm2d: input must be NCHW");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Tensor<T>& gamma = value_checked(gamma_id, "batchnorm2d gamma");
    const Tensor<T>& beta = value_checked(beta_id, "batchnorm2d beta");
    if (gamma.numel() != c || beta.numel() != c)
      throw ShapeError("batchnorm2d: gamma/beta must have one entry per channel");
    if (!running_mean || !running_var || running_mean->numel() != c || running_var->numel() != c)
      throw ShapeError("batchnorm2d: running stats must have one entry per channel");
    if (training && n < 2)
      throw ArgumentError("batchnorm2d: train mode needs batch size >= 2");

    const std::size_t hw = h * w;
    const std::size_t m = n * hw;
    auto mean = std::make_shared<std::vector<T>>(c);
    auto inv_std = std::make_shared<std::vector<T>>(c);
    Tensor<T> out({n, c, h, w});
    parallel_for(c, [&](std::size_t ci) {
      T mu, var;
      if (training) {
        T acc = T(0);
        for (std::size_t s = 0; s < n; ++s) {
          const T* px = x.data() + (s * c + ci) * hw;
          for (std::size_t i = 0; i < hw; ++i) acc += px[i];
        }
        mu = acc / static_cast<T>(m);
        T vacc = T(0);
        for (std::size_t s = 0; s < n; ++s) {
          const T* px = x.data() + (s * c + ci) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            T d = px[i] - mu;
            vacc += d * d;
          }
        }
        var = vacc / static_cast<T>(m);
        (*running_mean)[ci] = (T(1) - momentum) * (*running_mean)[ci] + momentum * mu;
        T unbiased = m > 1 ? vacc / static_cast<T>(m - 1) : var;
        (*running_var)[ci] = (T(1) - momentum) * (*running_var)[ci] + momentum * unbiased;
      } else {
        mu = (*running_mean)[ci];
        var = (*running_var)[ci];
      }
      T is = T(1) / std::sqrt(var + eps);
      (*mean)[ci] = mu;
      (*inv_std)[ci] = is;
      T g = gamma[ci], b = beta[ci];
      for (std::size_t s = 0; s < n; ++s) {
        const T* px = x.data() + (s * c + ci) * hw;
        T* py = out.data() + (s * c + ci) * hw;
        for (std::size_t i = 0; i < hw; ++i) py[i] = g * ((px[i] - mu) * is) + b;
      }
    });

    return push(std::move(out), [=, this](Tape& t) {
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      const Tensor<T>& xv = t.nodes_[x_id].value;
      const Tensor<T>& gv = t.nodes_[gamma_id].value;
      bool want_x = t.wants_grad(x_id);
      Tensor<T>* dgamma = t.wants_grad(gamma_id) ? &t.grad_buffer(gamma_id) : nullptr;
      Tensor<T>* dbeta = t.wants_grad(beta_id) ? &t.grad_buffer(beta_id) : nullptr;
      Tensor<T>* dx = want_x ? &t.grad_buffer(x_id) : nullptr;
      parallel_for(c, [&](std::size_t ci) {
        T mu = (*mean)[ci], is = (*inv_std)[ci], g = gv[ci];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::size_t s = 0; s < n; ++s) {
          const T* pdy = dy.data() + (s * c + ci) * hw;
          const T* px = xv.data() + (s * c + ci) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_dy += pdy[i];
            sum_dy_xhat += pdy[i] * ((px[i] - mu) * is);
          }
        }
        if (dbeta) (*dbeta)[ci] += sum_dy;
        if (dgamma) (*dgamma)[ci] += sum_dy_xhat;
        if (!dx) return;
        if (training) {
          T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t s = 0; s < n; ++s) {
            const T* pdy = dy.data() + (s * c + ci) * hw;
            const T* px = xv.data() + (s * c + ci) * hw;
            T* pdx = dx->data() + (s * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              T xhat = (px[i] - mu) * is;
              pdx[i] += g * is * inv_m *
                        (static_cast<T>(m) * pdy[i] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        } else {
          for (std::size_t s = 0; s < n; ++s) {
            const T* pdy = dy.data() + (s * c + ci) * hw;
            T* pdx = dx->data() + (s * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) pdx[i] += g * is * pdy[i];
          }
        }
      });
    });
  }

  NodeId relu(NodeId x_id) {
    const Tensor<T>& x = value_checked(x_id, "relu input");
    Tensor<T> out(x.shape());
    parallel_for_ranges(x.numel(), [&](std::size_t b, std::size_t e) {
      const T* src = x.data();
      T* dst = out.data();
      for (std::size_t i = b; i < e; ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
    });
    return push(std::move(out), [=, this](Tape& t) {
      if (!t.wants_grad(x_id)) return;
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      const Tensor<T>& xv = t.nodes_[x_id].value;
      Tensor<T>& dx = t.grad_buffer(x_id);
      // subgradient at 0 is 0
      parallel_for_ranges(dx.numel(), [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i)
          if (xv[i] > T(0)) dx[i] += dy[i];
      });
    });
  }

  // 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
  NodeId maxpool2(NodeId x_id) {
    const Tensor<T>& x = value_checked(x_id, "maxpool2 input");
    if (x.rank() != 4) throw ShapeError("maxpool2: input must be NCHW");
    std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw ShapeError("maxpool2: input too small");
    Tensor<T> out({n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
    parallel_for(n * c, [&](std::size_t sc) {
      const T* px = x.data() + sc * h * w;
      T* py = out.data() + sc * oh * ow;
      std::uint32_t* pa = argmax->data() + sc * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t base = (oy * 2) * w + ox * 2;
          std::size_t best = base;
          T bv = px[base];
          for (std::size_t q : {base + 1, base + w, base + w + 1}) {
            if (px[q] > bv) {
              bv = px[q];
              best = q;
            }
          }
          py[oy * ow + ox] = bv;
          pa[oy * ow + ox] = static_cast<std::uint32_t>(best);
        }
    });
    return push(std::move(out), [=, this](Tape& t) {
      if (!t.wants_grad(x_id)) return;
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      Tensor<T>& dx = t.grad_buffer(x_id);
      parallel_for(n * c, [&](std::size_t sc) {
        const T* pdy = dy.data() + sc * oh * ow;
        const std::uint32_t* pa = argmax->data() + sc * oh * ow;
        T* pdx = dx.data() + sc * h * w;
        for (std::size_t i = 0; i < oh * ow; ++i) pdx[pa[i]] += pdy[i];
      });
    });
  }

  NodeId global_avg_pool(NodeId x_id) {
    const Tensor<T>& x = value_checked(x_id, "global_avg_pool input");
    if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be NCHW");
    std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out({n, c});
    for (std::size_t sc = 0; sc < n * c; ++sc) {
      const T* px = x.data() + sc * hw;
      T acc = T(0);
      for (std::size_t i = 0; i < hw; ++i) acc += px[i];
      out[sc] = acc / static_cast<T>(hw);
    }
    return push(std::move(out), [=, this](Tape& t) {
      if (!t.wants_grad(x_id)) return;
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      Tensor<T>& dx = t.grad_buffer(x_id);
      T inv = T(1) / static_cast<T>(hw);
      for (std::size_t sc = 0; sc < n * c; ++sc) {
        T g = dy[sc] * inv;
        T* pdx = dx.data() + sc * hw;
        for (std::size_t i = 0; i < hw; ++i) pdx[i] += g;
      }
    });
  }

  NodeId dense(NodeId x_id, NodeId w_id, NodeId b_id) {
    const Tensor<T>& x = value_checked(x_id, "dense input");
    const Tensor<T>& w = value_checked(w_id, "dense weight");
    const Tensor<T>& b = value_checked(b_id, "dense bias");
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
      throw ShapeError("dense: expects x[N,D], w[D,E], b[E]");
    std::size_t n = x.dim(0), d = x.dim(1), e = w.dim(1);
    if (w.dim(0) != d || b.dim(0) != e) throw ShapeError("dense: dimension mismatch");
    Tensor<T> out({n, e});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t j = 0; j < e; ++j) out[s * e + j] = b[j];
    nn::gemm_acc(x.data(), w.data(), out.data(), n, d, e);
    return push(std::move(out), [=, this](Tape& t) {
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      const Tensor<T>& xv = t.nodes_[x_id].value;
      const Tensor<T>& wv = t.nodes_[w_id].value;
      if (t.wants_grad(b_id)) {
        Tensor<T>& db = t.grad_buffer(b_id);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t j = 0; j < e; ++j) db[j] += dy[s * e + j];
      }
      if (t.wants_grad(w_id)) {
        Tensor<T>& dw = t.grad_buffer(w_id);
        // dw[d, e] += x^T * dy
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t q = 0; q < d; ++q) {
            T xv_sq = xv[s * d + q];
            if (xv_sq == T(0)) continue;
            for (std::size_t j = 0; j < e; ++j) dw[q * e + j] += xv_sq * dy[s * e + j];
          }
      }
      if (t.wants_grad(x_id)) {
        Tensor<T>& dx = t.grad_buffer(x_id);
        // dx[n, d] += dy * w^T
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t j = 0; j < e; ++j) {
            T g = dy[s * e + j];
            if (g == T(0)) continue;
            for (std::size_t q = 0; q < d; ++q) dx[s * d + q] += g * wv[q * e + j];
          }
      }
    });
  }

  NodeId add(NodeId a_id, NodeId b_id) {
    const Tensor<T>& a = value_checked(a_id, "add lhs");
    const Tensor<T>& b = value_checked(b_id, "add rhs");
    if (!a.same_shape(b)) throw ShapeError("add: shapes differ");
    Tensor<T> out(a.shape());
    parallel_for_ranges(out.numel(), [&](std::size_t lo, std::size_t hi) {
      const T* pa = a.data();
      const T* pb = b.data();
      T* dst = out.data();
      for (std::size_t i = lo; i < hi; ++i) dst[i] = pa[i] + pb[i];
    });
    return push(std::move(out), [=, this](Tape& t) {
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      for (NodeId id : {a_id, b_id}) {
        if (!t.wants_grad(id)) continue;
        Tensor<T>& dst = t.grad_buffer(id);
        parallel_for_ranges(dst.numel(), [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) dst[i] += dy[i];
        });
      }
    });
  }

  NodeId concat_channels(NodeId a_id, NodeId b_id) {
    const Tensor<T>& a = value_checked(a_id, "concat lhs");
    const Tensor<T>& b = value_checked(b_id, "concat rhs");
    if (a.rank() != 4 || b.rank() != 4) throw ShapeError("concat_channels: inputs must be NCHW");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
      throw ShapeError("concat_channels: N/H/W must match");
    std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t s = 0; s < n; ++s) {
      std::copy(a.data() + s * ca * hw, a.data() + (s + 1) * ca * hw,
                out.data() + s * (ca + cb) * hw);
      std::copy(b.data() + s * cb * hw, b.data() + (s + 1) * cb * hw,
                out.data() + (s * (ca + cb) + ca) * hw);
    }
    return push(std::move(out), [=, this](Tape& t) {
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      if (t.wants_grad(a_id)) {
        Tensor<T>& da = t.grad_buffer(a_id);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < ca * hw; ++i)
            da[s * ca * hw + i] += dy[s * (ca + cb) * hw + i];
      }
      if (t.wants_grad(b_id)) {
        Tensor<T>& db = t.grad_buffer(b_id);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < cb * hw; ++i)
            db[s * cb * hw + i] += dy[(s * (ca + cb) + ca) * hw + i];
      }
    });
  }

  // Inner product with a fixed coefficient tensor, yielding a scalar node.
  // The gradient-check harness uses it to project op outputs to a loss.
  NodeId weighted_sum(NodeId x_id, Tensor<T> weights) {
    const Tensor<T>& x = value_checked(x_id, "weighted_sum input");
    if (weights.numel() != x.numel()) throw ShapeError("weighted_sum: weight count mismatch");
    Tensor<T> out({1});
    T acc = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) acc += weights[i] * x[i];
    out[0] = acc;
    auto w = std::make_shared<Tensor<T>>(std::move(weights));
    return push(std::move(out), [=, this](Tape& t) {
      if (!t.wants_grad(x_id)) return;
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      Tensor<T>& dx = t.grad_buffer(x_id);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dy[0] * (*w)[i];
    });
  }

  struct BceResult {
    NodeId loss;
    Tensor<T> prob;
  };

  // Fused sigmoid + binary cross-entropy in the overflow-stable form
  //   loss = mean(max(z,0) - z*t + log(1 + exp(-|z|))).
  BceResult sigmoid_bce(NodeId logits_id, const Tensor<T>& targets) {
    const Tensor<T>& z = value_checked(logits_id, "sigmoid_bce logits");
    std::size_t n = z.numel();
    if (targets.numel() != n) throw ShapeError("sigmoid_bce: logits/targets length mismatch");
    if (n == 0) throw ShapeError("sigmoid_bce: empty batch");
    for (std::size_t i = 0; i < n; ++i)
      if (targets[i] != T(0) && targets[i] != T(1))
        throw ArgumentError("sigmoid_bce: targets must be 0 or 1");
    Tensor<T> prob({n});
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      T zi = z[i];
      prob[i] = zi >= T(0) ? T(1) / (T(1) + std::exp(-zi))
                           : std::exp(zi) / (T(1) + std::exp(zi));
      acc += std::max(zi, T(0)) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi)));
    }
    Tensor<T> loss({1});
    loss[0] = acc / static_cast<T>(n);
    auto saved_prob = std::make_shared<Tensor<T>>(prob);
    auto saved_targets = std::make_shared<Tensor<T>>(targets);
    NodeId id = push(std::move(loss), [=, this](Tape& t) {
      if (!t.wants_grad(logits_id)) return;
      const Tensor<T>& dy = t.nodes_[t.current_].grad;
      Tensor<T>& dz = t.grad_buffer(logits_id);
      T scale = dy[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        dz[i] += scale * ((*saved_prob)[i] - (*saved_targets)[i]);
    });
    return {id, std::move(prob)};
  }

  // -------------------------------------------------------------------------
  // Backward
  // -------------------------------------------------------------------------

  void backward(NodeId loss_id) {
    if (backward_done_) throw StateError("backward: tape already consumed; rebuild the forward");
    if (loss_id >= nodes_.size()) throw ArgumentError("backward: unknown node");
    if (nodes_[loss_id].value.numel() != 1) throw ArgumentError("backward: loss must be scalar");
    backward_done_ = true;
    grad_buffer(loss_id)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.has_grad || !node.backprop) continue;
      current_ = i;
      node.backprop(*this);
    }
    for (NodeId id : bound_) {
      Parameter<T>& p = *nodes_[id].bound_param;
      if (nodes_[id].has_grad) {
        const Tensor<T>& g = nodes_[id].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) p.grad[i] += g[i];
      }
      p.grad_ready = true;
    }
  }

  bool consumed() const { return backward_done_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    Parameter<T>* bound_param = nullptr;
    std::function<void(Tape&)> backprop;
  };

  const Tensor<T>& value_checked(NodeId id, const char* what) const {
    if (id >= nodes_.size())
      throw ArgumentError(std::string("tape: unknown node for ") + what);
    return nodes_[id].value;
  }

  // Constant input leaves never need a gradient; everything else does.
  bool wants_grad(NodeId id) const {
    const Node& node = nodes_[id];
    return node.bound_param != nullptr || node.backprop != nullptr;
  }

  Tensor<T>& grad_buffer(NodeId id) {
    Node& node = nodes_[id];
    if (!node.has_grad) {
      node.grad = Tensor<T>::zeros_like(node.value);
      node.has_grad = true;
    }
    return node.grad;
  }

  NodeId push(Tensor<T> value, std::function<void(Tape&)> backprop = nullptr) {
    if (checked_ && !value.all_finite())
      throw NumericError("tape: non-finite value produced in checked mode");
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, std::move(backprop)});
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> bound_;
  bool checked_ = false;
  bool backward_done_ = false;
  std::size_t current_ = 0;
};

// Central finite differences of a scalar function, the oracle every
// gradient check is measured against.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T> x, T eps) {
  if (!(eps > T(0))) throw ArgumentError("finite_diff_grad: eps must be positive");
  Tensor<T> grad = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    T saved = x[i];
    x[i] = saved + eps;
    T up = f(static_cast<const Tensor<T>&>(x));
    x[i] = saved - eps;
    T down = f(static_cast<const Tensor<T>&>(x));
    x[i] = saved;
    grad[i] = (up - down) / (T(2) * eps);
  }
  return grad;
}

}  // namespace minisvrt

#include "anodet/nn_ops.hpp"

#include <algorithm>
#include <cmath>

#include "gemm.hpp"

namespace anodet {

int64_t conv_out_dim(int64_t dim, int64_t kernel, int64_t stride, int64_t pad) {
  return (dim + 2 * pad - kernel) / stride + 1;
}

int64_t deconv_out_dim(int64_t dim, int64_t kernel, int64_t stride, int64_t pad,
                       int64_t output_padding) {
  return (dim - 1) * stride - 2 * pad + kernel + output_padding;
}

namespace {

struct ConvGeom {
  int64_t batch = 1;
  int64_t ci = 0, co = 0;
  Dims3 in;        // spatial/temporal dims of the gather side
  Dims3 out;       // dims of the position side
  Dims3 k, s, p;
};

void check_dims3_positive(const char* op, Dims3 stride, Dims3 padding) {
  if (stride.t < 1 || stride.h < 1 || stride.w < 1)
    throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
  if (padding.t < 0 || padding.h < 0 || padding.w < 0)
    throw std::invalid_argument(std::string(op) + ": padding must be >= 0");
}

// cols[(c*kT+kt)*kH*kW + ky*kW + kx, (ot*oH+oy)*oW+ox] =
//   src[c, ot*sT-pT+kt, oy*sH-pH+ky, ox*sW-pW+kx]  (zero outside)
template <class T>
void im2col(const T* src, int64_t channels, Dims3 in, Dims3 k, Dims3 s, Dims3 p, Dims3 out,
            T* cols) {
  const int64_t kvol = k.t * k.h * k.w;
  const int64_t ncols = out.t * out.h * out.w;
  parallel_for(channels * kvol, [&](int64_t row) {
    const int64_t c = row / kvol;
    const int64_t kr = row % kvol;
    const int64_t kt = kr / (k.h * k.w);
    const int64_t ky = (kr / k.w) % k.h;
    const int64_t kx = kr % k.w;
    const T* plane = src + c * in.t * in.h * in.w;
    T* dst = cols + row * ncols;
    for (int64_t ot = 0; ot < out.t; ++ot) {
      const int64_t it = ot * s.t - p.t + kt;
      const bool t_ok = it >= 0 && it < in.t;
      for (int64_t oy = 0; oy < out.h; ++oy) {
        const int64_t iy = oy * s.h - p.h + ky;
        const bool y_ok = t_ok && iy >= 0 && iy < in.h;
        const T* line = plane + (it * in.h + iy) * in.w;
        for (int64_t ox = 0; ox < out.w; ++ox) {
          const int64_t ix = ox * s.w - p.w + kx;
          *dst++ = (y_ok && ix >= 0 && ix < in.w) ? line[ix] : T(0);
        }
      }
    }
  });
}

// adjoint of im2col: dst[c, ot*sT-pT+kt, ...] += cols[row, col]; rows are
// grouped by channel so the channel loop parallelizes without write overlap
template <class T>
void col2im_add(const T* cols, int64_t channels, Dims3 target, Dims3 k, Dims3 s, Dims3 p,
                Dims3 pos, T* dst) {
  const int64_t kvol = k.t * k.h * k.w;
  const int64_t ncols = pos.t * pos.h * pos.w;
  parallel_for(channels, [&](int64_t c) {
    T* plane = dst + c * target.t * target.h * target.w;
    for (int64_t kr = 0; kr < kvol; ++kr) {
      const int64_t kt = kr / (k.h * k.w);
      const int64_t ky = (kr / k.w) % k.h;
      const int64_t kx = kr % k.w;
      const T* src = cols + (c * kvol + kr) * ncols;
      for (int64_t ot = 0; ot < pos.t; ++ot) {
        const int64_t it = ot * s.t - p.t + kt;
        if (it < 0 || it >= target.t) {
          src += pos.h * pos.w;
          continue;
        }
        for (int64_t oy = 0; oy < pos.h; ++oy) {
          const int64_t iy = oy * s.h - p.h + ky;
          if (iy < 0 || iy >= target.h) {
            src += pos.w;
            continue;
          }
          T* line = plane + (it * target.h + iy) * target.w;
          for (int64_t ox = 0; ox < pos.w; ++ox) {
            const int64_t ix = ox * s.w - p.w + kx;
            if (ix >= 0 && ix < target.w) line[ix] += src[ox];
          }
          src += pos.w;
        }
      }
    }
  });
}

template <class T>
Tensor<T> maybe_squeeze_batch(Tensor<T> out, bool had_batch) {
  if (had_batch) return out;
  Shape s(out.shape().begin() + 1, out.shape().end());
  // same data, drop the leading singleton
  auto t = make_tensor<T>(s, out.vec());
  if (out.needs_grad()) {
    int64_t n = t.numel();
    return record_op<T>("squeeze0", s, t.vec(), {out},
                        [n](const T* go, const std::vector<T*>& pg) {
                          if (pg[0])
                            for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i];
                        });
  }
  return t;
}

template <class T>
Tensor<T> maybe_unsqueeze_batch(const Tensor<T>& x, bool* had_batch) {
  if (x.rank() == 5) {
    *had_batch = true;
    return x;
  }
  *had_batch = false;
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  if (!x.needs_grad()) return make_tensor<T>(s, x.vec());
  int64_t n = x.numel();
  return record_op<T>("unsqueeze0", s, x.vec(), {x},
                      [n](const T* go, const std::vector<T*>& pg) {
                        if (pg[0])
                          for (int64_t i = 0; i < n; ++i) pg[0][i] += go[i];
                      });
}

}  // namespace

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Dims3 stride, Dims3 padding) {
  check_dims3_positive("conv3d", stride, padding);
  if (input.rank() != 4 && input.rank() != 5)
    throw std::invalid_argument("conv3d: input must be [Ci,T,H,W] or [B,Ci,T,H,W], got " +
                                shape_str(input.shape()));
  if (weight.rank() != 5)
    throw std::invalid_argument("conv3d: weight must be [Co,Ci,kT,kH,kW], got " +
                                shape_str(weight.shape()));
  bool had_batch = false;
  Tensor<T> x = maybe_unsqueeze_batch(input, &had_batch);

  ConvGeom g;
  g.batch = x.dim(0);
  g.ci = x.dim(1);
  g.in = {x.dim(2), x.dim(3), x.dim(4)};
  g.co = weight.dim(0);
  g.k = {weight.dim(2), weight.dim(3), weight.dim(4)};
  g.s = stride;
  g.p = padding;
  if (weight.dim(1) != g.ci)
    throw std::invalid_argument("conv3d: input channels " + std::to_string(g.ci) +
                                " do not match weight input channels " +
                                std::to_string(weight.dim(1)) + " (input " +
                                shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                                ")");
  if (bias.numel() != g.co)
    throw std::invalid_argument("conv3d: bias length " + std::to_string(bias.numel()) +
                                " does not match output channels " + std::to_string(g.co));
  g.out = {conv_out_dim(g.in.t, g.k.t, g.s.t, g.p.t), conv_out_dim(g.in.h, g.k.h, g.s.h, g.p.h),
           conv_out_dim(g.in.w, g.k.w, g.s.w, g.p.w)};
  if (g.out.t < 1 || g.out.h < 1 || g.out.w < 1)
    throw std::invalid_argument("conv3d: kernel " + shape_str(weight.shape()) +
                                " does not fit padded input " + shape_str(x.shape()));

  const int64_t kdim = g.ci * g.k.t * g.k.h * g.k.w;
  const int64_t ncols = g.out.t * g.out.h * g.out.w;
  const int64_t in_slab = g.ci * g.in.t * g.in.h * g.in.w;
  const int64_t out_slab = g.co * ncols;

  std::vector<T> out(static_cast<size_t>(g.batch * out_slab));
  {
    std::vector<T> cols(static_cast<size_t>(kdim * ncols));
    for (int64_t b = 0; b < g.batch; ++b) {
      im2col(x.data() + b * in_slab, g.ci, g.in, g.k, g.s, g.p, g.out, cols.data());
      detail::gemm_nn(weight.data(), cols.data(), out.data() + b * out_slab, g.co, kdim, ncols,
                      false);
      T* slab = out.data() + b * out_slab;
      for (int64_t co = 0; co < g.co; ++co) {
        const T bv = bias.data()[co];
        T* row = slab + co * ncols;
        for (int64_t i = 0; i < ncols; ++i) row[i] += bv;
      }
    }
  }

  Shape out_shape = {g.batch, g.co, g.out.t, g.out.h, g.out.w};
  auto result = record_op<T>(
      "conv3d", out_shape, std::move(out), {x, weight, bias},
      [g, kdim, ncols, in_slab, out_slab, x, weight](const T* go, const std::vector<T*>& pg) {
        std::vector<T> cols(static_cast<size_t>(kdim * ncols));
        std::vector<T> dcols;
        for (int64_t b = 0; b < g.batch; ++b) {
          const T* go_slab = go + b * out_slab;
          if (pg[1] || pg[0])
            im2col(x.data() + b * in_slab, g.ci, g.in, g.k, g.s, g.p, g.out, cols.data());
          if (pg[1]) detail::gemm_nt_acc(go_slab, cols.data(), pg[1], g.co, ncols, kdim);
          if (pg[0]) {
            dcols.assign(static_cast<size_t>(kdim * ncols), T(0));
            detail::gemm_tn(weight.data(), go_slab, dcols.data(), g.co, kdim, ncols, false);
            col2im_add(dcols.data(), g.ci, g.in, g.k, g.s, g.p, g.out, pg[0] + b * in_slab);
          }
          if (pg[2]) {
            for (int64_t co = 0; co < g.co; ++co) {
              T s = T(0);
              const T* row = go_slab + co * ncols;
              for (int64_t i = 0; i < ncols; ++i) s += row[i];
              pg[2][co] += s;
            }
          }
        }
      });
  return maybe_squeeze_batch(result, had_batch);
}

template <class T>
Tensor<T> deconv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                   Dims3 stride, Dims3 padding, Dims3 output_padding) {
  check_dims3_positive("deconv3d", stride, padding);
  if (input.rank() != 4 && input.rank() != 5)
    throw std::invalid_argument("deconv3d: input must be [Ci,T,H,W] or [B,Ci,T,H,W], got " +
                                shape_str(input.shape()));
  if (weight.rank() != 5)
    throw std::invalid_argument("deconv3d: weight must be [Ci,Co,kT,kH,kW], got " +
                                shape_str(weight.shape()));
  const Dims3 op = output_padding;
  if (op.t < 0 || op.t >= stride.t || op.h < 0 || op.h >= stride.h || op.w < 0 ||
      op.w >= stride.w)
    throw std::invalid_argument("deconv3d: output_padding must satisfy 0 <= op < stride");
  bool had_batch = false;
  Tensor<T> x = maybe_unsqueeze_batch(input, &had_batch);

  ConvGeom g;
  g.batch = x.dim(0);
  g.ci = x.dim(1);
  // `in` holds the scatter-target (output) dims, `out` the input positions
  g.co = weight.dim(1);
  g.k = {weight.dim(2), weight.dim(3), weight.dim(4)};
  g.s = stride;
  g.p = padding;
  g.out = {x.dim(2), x.dim(3), x.dim(4)};
  if (weight.dim(0) != g.ci)
    throw std::invalid_argument("deconv3d: input channels " + std::to_string(g.ci) +
                                " do not match weight input channels " +
                                std::to_string(weight.dim(0)) + " (input " +
                                shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                                ")");
  if (bias.numel() != g.co)
    throw std::invalid_argument("deconv3d: bias length " + std::to_string(bias.numel()) +
                                " does not match output channels " + std::to_string(g.co));
  g.in = {deconv_out_dim(g.out.t, g.k.t, g.s.t, g.p.t, op.t),
          deconv_out_dim(g.out.h, g.k.h, g.s.h, g.p.h, op.h),
          deconv_out_dim(g.out.w, g.k.w, g.s.w, g.p.w, op.w)};
  if (g.in.t < 1 || g.in.h < 1 || g.in.w < 1)
    throw std::invalid_argument("deconv3d: computed output dims are empty for input " +
                                shape_str(x.shape()));

  const int64_t kdim = g.co * g.k.t * g.k.h * g.k.w;  // rows of the column buffer
  const int64_t npos = g.out.t * g.out.h * g.out.w;   // input positions
  const int64_t in_slab = g.ci * npos;
  const int64_t out_vol = g.in.t * g.in.h * g.in.w;
  const int64_t out_slab = g.co * out_vol;

  std::vector<T> out(static_cast<size_t>(g.batch * out_slab));
  {
    std::vector<T> cols(static_cast<size_t>(kdim * npos));
    for (int64_t b = 0; b < g.batch; ++b) {
      detail::gemm_tn(weight.data(), x.data() + b * in_slab, cols.data(), g.ci, kdim, npos,
                      false);
      T* slab = out.data() + b * out_slab;
      col2im_add(cols.data(), g.co, g.in, g.k, g.s, g.p, g.out, slab);
      for (int64_t co = 0; co < g.co; ++co) {
        const T bv = bias.data()[co];
        T* row = slab + co * out_vol;
        for (int64_t i = 0; i < out_vol; ++i) row[i] += bv;
      }
    }
  }

  Shape out_shape = {g.batch, g.co, g.in.t, g.in.h, g.in.w};
  auto result = record_op<T>(
      "deconv3d", out_shape, std::move(out), {x, weight, bias},
      [g, kdim, npos, in_slab, out_slab, out_vol, x, weight](const T* go,
                                                             const std::vector<T*>& pg) {
        std::vector<T> cols_g(static_cast<size_t>(kdim * npos));
        for (int64_t b = 0; b < g.batch; ++b) {
          const T* go_slab = go + b * out_slab;
          if (pg[0] || pg[1])
            im2col(go_slab, g.co, g.in, g.k, g.s, g.p, g.out, cols_g.data());
          if (pg[0])
            detail::gemm_nn(weight.data(), cols_g.data(), pg[0] + b * in_slab, g.ci, kdim, npos,
                            true);
          if (pg[1])
            detail::gemm_nt_acc(x.data() + b * in_slab, cols_g.data(), pg[1], g.ci, npos, kdim);
          if (pg[2]) {
            for (int64_t co = 0; co < g.co; ++co) {
              T s = T(0);
              const T* row = go_slab + co * out_vol;
              for (int64_t i = 0; i < out_vol; ++i) s += row[i];
              pg[2][co] += s;
            }
          }
        }
      });
  return maybe_squeeze_batch(result, had_batch);
}

template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training, T momentum, T eps) {
  if (input.rank() != 5)
    throw std::invalid_argument("batchnorm3d: input must be [B,C,T,H,W], got " +
                                shape_str(input.shape()));
  const int64_t batch = input.dim(0), ch = input.dim(1);
  const int64_t vol = input.dim(2) * input.dim(3) * input.dim(4);
  if (gamma.numel() != ch || beta.numel() != ch)
    throw std::invalid_argument("batchnorm3d: gamma/beta length must equal channel count " +
                                std::to_string(ch));
  if (static_cast<int64_t>(stats.running_mean.size()) != ch)
    throw std::invalid_argument("batchnorm3d: running stats sized for " +
                                std::to_string(stats.running_mean.size()) + " channels, input has " +
                                std::to_string(ch));

  const int64_t n_per_ch = batch * vol;
  std::vector<T> mu(ch), inv_std(ch);
  if (training) {
    std::vector<T> var(ch);
    parallel_for(ch, [&](int64_t c) {
      T s = T(0);
      for (int64_t b = 0; b < batch; ++b) {
        const T* p = input.data() + (b * ch + c) * vol;
        for (int64_t i = 0; i < vol; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(n_per_ch);
      T v = T(0);
      for (int64_t b = 0; b < batch; ++b) {
        const T* p = input.data() + (b * ch + c) * vol;
        for (int64_t i = 0; i < vol; ++i) {
          const T d = p[i] - m;
          v += d * d;
        }
      }
      mu[c] = m;
      var[c] = v / static_cast<T>(n_per_ch);
      inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    });
    for (int64_t c = 0; c < ch; ++c) {
      stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mu[c];
      stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * var[c];
    }
  } else {
    for (int64_t c = 0; c < ch; ++c) {
      mu[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  std::vector<T> out(input.vec().size());
  parallel_for(batch * ch, [&](int64_t bc) {
    const int64_t c = bc % ch;
    const T m = mu[c], is = inv_std[c];
    const T gm = gamma.data()[c], bt = beta.data()[c];
    const T* p = input.data() + bc * vol;
    T* q = out.data() + bc * vol;
    for (int64_t i = 0; i < vol; ++i) q[i] = gm * (p[i] - m) * is + bt;
  });

  return record_op<T>(
      "batchnorm3d", input.shape(), std::move(out), {input, gamma, beta},
      [batch, ch, vol, n_per_ch, training, mu = std::move(mu), inv_std = std::move(inv_std),
       input, gamma](const T* go, const std::vector<T*>& pg) {
        std::vector<T> sum_go(ch, T(0)), sum_go_xhat(ch, T(0));
        if (pg[0] || pg[1] || pg[2]) {
          parallel_for(ch, [&](int64_t c) {
            T sg = T(0), sgx = T(0);
            for (int64_t b = 0; b < batch; ++b) {
              const T* g = go + (b * ch + c) * vol;
              const T* p = input.data() + (b * ch + c) * vol;
              for (int64_t i = 0; i < vol; ++i) {
                sg += g[i];
                sgx += g[i] * (p[i] - mu[c]) * inv_std[c];
              }
            }
            sum_go[c] = sg;
            sum_go_xhat[c] = sgx;
          });
        }
        if (pg[1])
          for (int64_t c = 0; c < ch; ++c) pg[1][c] += sum_go_xhat[c];
        if (pg[2])
          for (int64_t c = 0; c < ch; ++c) pg[2][c] += sum_go[c];
        if (pg[0]) {
          const T n = static_cast<T>(n_per_ch);
          parallel_for(batch * ch, [&](int64_t bc) {
            const int64_t c = bc % ch;
            const T m = mu[c], is = inv_std[c], gm = gamma.data()[c];
            const T* g = go + bc * vol;
            const T* p = input.data() + bc * vol;
            T* d = pg[0] + bc * vol;
            if (training) {
              const T mean_g = sum_go[c] / n;
              const T mean_gx = sum_go_xhat[c] / n;
              for (int64_t i = 0; i < vol; ++i) {
                const T xhat = (p[i] - m) * is;
                d[i] += gm * is * (g[i] - mean_g - xhat * mean_gx);
              }
            } else {
              for (int64_t i = 0; i < vol; ++i) d[i] += gm * is * g[i];
            }
          });
        }
      });
}

#define ANODET_INSTANTIATE(T)                                                                 \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Dims3,   \
                               Dims3);                                                        \
  template Tensor<T> deconv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Dims3, \
                                 Dims3, Dims3);                                               \
  template Tensor<T> batchnorm3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    BatchNormStats<T>&, bool, T, T);

ANODET_INSTANTIATE(float)
ANODET_INSTANTIATE(double)

#undef ANODET_INSTANTIATE

}  // namespace anodet

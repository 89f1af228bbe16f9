#pragma once

#include "anodet/tensor.hpp"

namespace anodet {

struct Dims3 {
  int64_t t = 1, h = 1, w = 1;
};

// floor((dim + 2*pad - kernel) / stride) + 1
int64_t conv_out_dim(int64_t dim, int64_t kernel, int64_t stride, int64_t pad);
// (dim - 1)*stride - 2*pad + kernel + output_padding
int64_t deconv_out_dim(int64_t dim, int64_t kernel, int64_t stride, int64_t pad,
                       int64_t output_padding);

// 3-d cross-correlation.
//   input  [B,Ci,T,H,W] (rank-4 input is treated as B=1 and returned rank-4)
//   weight [Co,Ci,kT,kH,kW], bias [Co]
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Dims3 stride, Dims3 padding);

// Transposed 3-d convolution.
//   input  [B,Ci,T,H,W], weight [Ci,Co,kT,kH,kW], bias [Co]
template <class T>
Tensor<T> deconv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                   Dims3 stride, Dims3 padding, Dims3 output_padding = {0, 0, 0});

template <class T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  explicit BatchNormStats(int64_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Per-channel normalization over (B,T,H,W). Training mode uses batch moments
// and updates the running stats in place; eval mode reads them and leaves
// them untouched. Population (biased) variance throughout.
template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training, T momentum = T(0.1),
                      T eps = T(1e-5));

}  // namespace anodet

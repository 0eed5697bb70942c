#pragma once

#include <cstddef>

#include "focalerrornet/rng.hpp"
#include "focalerrornet/tensor.hpp"

// Differentiable ops. Every op records itself on the tape it is given and
// rejects non-finite results. Volumetric layout is [N, C, D, H, W].
namespace fen::ops {

struct Conv3dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation with explicit zero padding.
/// x: [N,Cin,D,H,W], w: [Cout,Cin/groups,k,k,k], b: [Cout] or undefined.
/// Output spatial size is (D + 2*padding - k) / stride + 1 per axis.
/// groups == Cin == Cout is the depth-wise case and takes a direct-loop path;
/// everything else goes through im2col and a GEMM.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b, Conv3dOptions opt = {});

/// y = x * w + b with x: [N,F], w: [F,G], b: [G].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b);

enum class Activation { gelu, relu };

/// Exact GELU, x * Phi(x) with Phi the standard normal CDF.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation kind);

/// Elementwise binary ops. Operands must have equal rank; along each axis the
/// extents must match or one of them must be 1 (size-1 broadcast only).
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// y = x * scale + shift with constant scalars.
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, T scale, T shift);

/// [N,C,D,H,W] -> [N,C,1,1,1], mean over the spatial axes.
template <typename T>
Tensor<T> global_avg_pool3d(Tape<T>& tape, const Tensor<T>& x);

/// Non-overlapping-by-default max pooling, no padding, floor rounding.
template <typename T>
Tensor<T> max_pool3d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel = 2,
                     std::size_t stride = 2);

/// Inverted dropout. When inactive, or p == 0, returns x itself.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Rng& rng, bool active);

/// Layer normalization across channels, independently at every position.
/// x: [N,C,...], gamma and beta: [C].
template <typename T>
Tensor<T> layer_norm_channels(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, double eps = 1e-6);

/// Channels [begin, begin + count) of a [N,C,...] tensor.
template <typename T>
Tensor<T> channel_slice(Tape<T>& tape, const Tensor<T>& x, std::size_t begin,
                        std::size_t count);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// Scalar sum of all elements.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// Mean squared difference; the target receives no gradient.
template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace fen::ops

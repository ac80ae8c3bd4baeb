#pragma once

#include <vector>

#include "tristream/tensor.hpp"

namespace tristream {

enum class Padding { Same, Valid };

struct Stride3 {
  int64_t t = 1, h = 1, w = 1;
};

// Elementwise arithmetic with numpy-style broadcasting: shapes are aligned on
// trailing axes and each pair of extents must be equal or 1.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x: [B,T,H,W,Cin], w: [kT,kH,kW,Cin,Cout]. Cross-correlation (no kernel
// flip). Same padding keeps ceil(extent/stride); pads are split with the
// smaller half first.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, Stride3 stride,
                 Padding pad);

// Spatial-only max pooling; a temporal kernel or stride other than 1 is a
// contract violation.
template <typename T>
Tensor<T> maxpool_spatial(const Tensor<T>& x, int64_t kt, int64_t kh,
                          int64_t kw, Stride3 stride, Padding pad);

// Mean over T,H,W: [B,T,H,W,C] -> [B,C].
template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// Mean over the batch of -log softmax(logits)[label]; max-subtraction
// stabilized. logits: [B,C].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<int>& labels);

// Mean of squared differences over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

// Per-channel normalization over (B,T,H,W). Training mode uses batch
// statistics and folds them into running_mean/running_var in place; eval mode
// reads the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5);

// Per-(sample, group) normalization over (T,H,W,C/groups) with per-channel
// affine. Batch-size independent alternative to batch_norm.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int64_t groups, double eps = 1e-5);

template <typename T>
bool has_nonfinite(const Tensor<T>& x);

// Output spatial/temporal extent for one axis.
int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, Padding pad);
int64_t pad_before(int64_t in, int64_t k, int64_t stride, Padding pad);

}  // namespace tristream

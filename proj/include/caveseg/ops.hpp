#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "caveseg/tensor.hpp"

namespace caveseg {

// Elementwise; shapes must match exactly (no broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

// x: [N, C], bias: [C]; adds bias to every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

// Full reduction to a scalar.
Tensor sum(const Tensor& x);

// a: [m, k], b: [k, n] -> [m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);

// out[i] = idx[i] < 0 ? 0 : src[idx[i]], flat row-major indexing. The
// reindexing primitive behind rolls, window tiling, padding, and layout
// permutes; backward scatter-adds into src.
Tensor gather(const Tensor& src, Shape out_shape,
              std::vector<std::int64_t> idx);

// Max-subtracted exponentials normalized along `axis`; slices sum to 1.
Tensor softmax(const Tensor& x, int axis);

// Normalizes over the last dimension (population variance), then affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

// x: [C, H, W]; normalizes each channel group over its C/groups x H x W
// block, per-channel affine. Batch-size independent.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps);

// Exact Gaussian-CDF form x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// x: [C_in, H, W], w: [C_out, C_in, kh, kw], bias: [C_out] (undefined Tensor
// for none). Cross-correlation, zero padding; H' = (H + 2p - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding);

// x: [C, H, W] -> [C, out_h, out_w]; cell (i, j) averages the bin
// [floor(i*H/out_h), ceil((i+1)*H/out_h)) x [floor(j*W/out_w), ...).
Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w);

// x: [C, H, W] -> [C, out_h, out_w]; half-pixel-center sampling, edge clamp.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// logits: [M, ...] flattened to M x N pixels; labels.size() == N with values
// in {0..M-1} or ignore_index. Mean negative log-softmax of the true class
// over scored pixels, computed in the log domain.
Tensor cross_entropy(const Tensor& logits,
                     const std::vector<std::int32_t>& labels,
                     int ignore_index);

// Central differences (f(x+h*e_i) - f(x-h*e_i)) / (2h) per element. Runs f
// forward-only; independent of the tape.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h);

}  // namespace caveseg

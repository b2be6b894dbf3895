#pragma once

#include <cstddef>
#include <vector>

#include "pabovw/tensor.hpp"

namespace pabovw {

// Differentiable tensor operations. Forward values are computed eagerly;
// each op wires a backward closure that accumulates exact analytic gradients
// into its inputs. Broadcasting is limited to leading batch extents: in
// add(a, b), b's shape may be a strict suffix of a's.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_const(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor abs_op(const Tensor& a);
Tensor log_op(const Tensor& a);

// Row-wise softmax of a [C] vector or [N,C] matrix.
Tensor softmax(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over the last two (spatial) axes: [..,K,H,W] -> [..,K].
Tensor mean_hw(const Tensor& a);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// [N,C,H,W] (or [C,H,W]) -> [N*H*W, C] pixel rows; row index = (n*H+h)*W+w.
Tensor nchw_to_rows(const Tensor& a);
// Inverse layout change: [N*H*W, K] -> [N,K,H,W].
Tensor rows_to_nchw(const Tensor& a, std::size_t n, std::size_t h, std::size_t w);

// y_r = x_r / max(||x_r||_2, eps) for each row of [R,D].
Tensor row_l2_normalize(const Tensor& a, double eps);

// u.v / (max(|u|,eps) * max(|v|,eps)) for two D-vectors; scalar output.
Tensor cosine_sim(const Tensor& u, const Tensor& v, double eps);

Tensor select_row(const Tensor& a, std::size_t row);
Tensor zero_diag(const Tensor& a);
// x - rowmean(x) per row of [R,D].
Tensor center_rows(const Tensor& a);

// Stacks same-shape tensors along a new leading axis.
Tensor stack0(const std::vector<Tensor>& parts);

// x [N,Ci,H,W], w [Co,Ci,k,k], optional bias [Co]; cross-correlation.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad);
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t pad);

// Batch normalization over [N,C] or [N,C,H,W]; per-channel statistics over
// the remaining axes. Train mode normalizes with batch statistics and folds
// them into the running buffers (in place); eval mode reads the buffers.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, bool training,
                 double momentum = 0.1, double eps = 1e-5);

// Half-pixel-center bilinear resampling over the last two axes.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Resamples the continuous box (x1,y1,x2,y2), given in edge coordinates of
// [0,W]x[0,H], to out_h x out_w. bilinear_resize is the box = full-image
// special case; RoI extraction and image crops both route through here.
Tensor crop_resize_bilinear(const Tensor& x, double x1, double y1, double x2,
                            double y2, std::size_t out_h, std::size_t out_w);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy_logits(const Tensor& logits,
                            const std::vector<std::size_t>& labels);
Tensor cross_entropy_logits(const Tensor& logits, std::size_t label);

// Mean elementwise Huber loss with threshold beta.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta = 1.0);

}  // namespace pabovw

#ifndef ASDM_KERNELS_HPP
#define ASDM_KERNELS_HPP

#include "asdm/tensor.hpp"

namespace asdm {

// All kernels are pure functions over immutable inputs and deterministic:
// every output element is produced by one fixed-order reduction, accumulated
// in double. Shape violations throw std::invalid_argument.

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

// Multi-head scaled dot-product attention over q[L,D], k[M,D], v[M,D].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

Tensor matmul(const Tensor& a, const Tensor& b);                    // [m,k]x[k,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);   // x[m,k] w[n,k] -> [m,n]
Tensor linear_nobias(const Tensor& x, const Tensor& w);
Tensor transpose2d(const Tensor& x);
Tensor softmax_rows(const Tensor& x);

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// x[N,C,H,W] + t[1,C] broadcast over batch and space.
Tensor add_channel_bias(const Tensor& x, const Tensor& t);

Tensor upsample_nearest2x(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int c0, int len);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& x, int c0, int len);
Tensor slice_row(const Tensor& x, int row);      // [R,K] -> [1,K]
Tensor slice_batch(const Tensor& x, int n);      // [N,...] -> [1,...]

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor tokens_from_map(const Tensor& x);           // [1,C,H,W] -> [H*W,C]
Tensor map_from_tokens(const Tensor& t, int h, int w);

double mse(const Tensor& a, const Tensor& b);

// Gradient helpers used by the autodiff layer.
void conv2d_grads(const Tensor& x, const Tensor& w, int stride, int pad, const Tensor& dy,
                  Tensor* dx, Tensor* dw, Tensor* db);
Tensor group_norm_grad_input(const Tensor& x, int groups, const Tensor& gamma, float eps,
                             const Tensor& dy);
void group_norm_grad_affine(const Tensor& x, int groups, float eps, const Tensor& dy,
                            Tensor* dgamma, Tensor* dbeta);

}  // namespace asdm

#endif

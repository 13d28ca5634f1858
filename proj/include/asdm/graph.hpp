#ifndef ASDM_GRAPH_HPP
#define ASDM_GRAPH_HPP

#include <functional>
#include <memory>
#include <vector>

#include "asdm/tensor.hpp"

namespace asdm::ag {

// Dynamic reverse-mode tape over the kernel set. Values computed under a
// NoGradGuard carry no parents or backward closure, so inference pays only
// for the kernel calls. Op values are computed by the same kernel code in
// both modes, which keeps graded and ungraded forwards bit-identical.

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Value> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad();
    void add_grad(const Tensor& g);
};

bool grad_enabled();

struct NoGradGuard {
    bool saved;
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

Value constant(Tensor v);
Value param(Tensor v);  // leaf with requires_grad

Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad);
Value group_norm(const Value& x, int groups, const Value& gamma, const Value& beta, float eps);
Value layer_norm(const Value& x, const Value& gamma, const Value& beta, float eps);
Value attention(const Value& q, const Value& k, const Value& v, int heads);
Value linear(const Value& x, const Value& w, const Value& b);
Value linear_nobias(const Value& x, const Value& w);
Value matmul(const Value& a, const Value& b);
Value transpose(const Value& x);
Value softmax_rows(const Value& x);
Value silu(const Value& x);
Value sigmoid(const Value& x);
Value add(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value add_channel_bias(const Value& x, const Value& t);
Value upsample_nearest2x(const Value& x);
Value global_avg_pool(const Value& x);
Value concat_channels(const Value& a, const Value& b);
Value concat_cols(const Value& a, const Value& b);
Value slice_cols(const Value& x, int c0, int len);
Value slice_row(const Value& x, int row);
Value slice_batch(const Value& x, int n);
Value concat_batch(const std::vector<Value>& parts);
Value reshape(const Value& x, std::vector<int> shape);
Value tokens_from_map(const Value& x);
Value map_from_tokens(const Value& t, int h, int w);
Value mse_vs(const Value& a, Tensor target);          // scalar [1]
Value scale_by_entry(const Value& t, const Value& r, int idx);

// Backpropagate from a scalar root, accumulating into leaf grads.
void backward(const Value& root);

}  // namespace asdm::ag

#endif

#ifndef ASDM_CONDCONV_HPP
#define ASDM_CONDCONV_HPP

#include <optional>
#include <vector>

#include "asdm/tensor.hpp"
#include "asdm/unet.hpp"

namespace asdm {

// Expert kernel bank for one convolution site. Routing produces one weight
// per expert from pooled input features; the mixed kernel runs a single
// convolution.
struct ExpertBank {
    int n_experts = 1;
    std::vector<Tensor> kernels;  // each [O,C,kh,kw]
    std::vector<Tensor> biases;   // each [O]
    Tensor router;                // [C, n_experts]
    bool sigmoid_routing = true;
    std::optional<std::vector<float>> force_routing;  // test hook

    void validate() const;
};

// r[n, e] = sigmoid(global_avg_pool(x)[n, :] . router[:, e])
Tensor route(const Tensor& x, const ExpertBank& bank);

// kernel = sum_e r_e W_e, bias = sum_e r_e b_e for one routing row.
void combine_kernels(const ExpertBank& bank, const std::vector<float>& r, Tensor* kernel,
                     Tensor* bias);

Tensor me_cond_conv(const Tensor& x, const ExpertBank& bank, int stride, int pad);

// Replace every 3x3 convolution in down/up/middle ResUnits with an expert
// bank. Expert 0 carries the original weights verbatim; the others start at
// a tenth of the usual initializer scale. Routers start at zero so initial
// routing weights sit at 0.5.
UNet upgrade_model(const UNet& unet, int n_experts, uint64_t seed);

}  // namespace asdm

#endif

#include "asdm/condconv.hpp"

#include <cmath>
#include <stdexcept>

#include "asdm/kernels.hpp"

namespace asdm {

void ExpertBank::validate() const {
    if (n_experts < 1) throw std::invalid_argument("bank: n_experts must be >= 1");
    if ((int)kernels.size() != n_experts || (int)biases.size() != n_experts) {
        throw std::invalid_argument("bank: expert count does not match kernels/biases");
    }
    for (const Tensor& k : kernels) {
        if (k.shape != kernels[0].shape) {
            throw std::invalid_argument("bank: expert kernels must share one shape");
        }
    }
    for (const Tensor& b : biases) {
        if (b.shape != biases[0].shape) {
            throw std::invalid_argument("bank: expert biases must share one shape");
        }
    }
    if (router.rank() != 2 || router.shape[0] != kernels[0].shape[1] ||
        router.shape[1] != n_experts) {
        throw std::invalid_argument("bank: router must be [in_channels, n_experts]");
    }
    if (force_routing && (int)force_routing->size() != n_experts) {
        throw std::invalid_argument("bank: forced routing length != n_experts");
    }
}

Tensor route(const Tensor& x, const ExpertBank& bank) {
    bank.validate();
    if (x.rank() != 4 || x.shape[1] != bank.router.shape[0]) {
        throw std::invalid_argument("route: input channels do not match the router");
    }
    if (bank.force_routing) {
        Tensor r({x.shape[0], bank.n_experts});
        for (int n = 0; n < x.shape[0]; n++) {
            for (int e = 0; e < bank.n_experts; e++) r.at2(n, e) = (*bank.force_routing)[(size_t)e];
        }
        return r;
    }
    Tensor pooled = global_avg_pool(x);
    Tensor logits = matmul(pooled, bank.router);
    return bank.sigmoid_routing ? sigmoid(logits) : softmax_rows(logits);
}

void combine_kernels(const ExpertBank& bank, const std::vector<float>& r, Tensor* kernel,
                     Tensor* bias) {
    bank.validate();
    if ((int)r.size() != bank.n_experts) {
        throw std::invalid_argument("combine_kernels: routing length != n_experts");
    }
    *kernel = Tensor::zeros(bank.kernels[0].shape);
    *bias = Tensor::zeros(bank.biases[0].shape);
    for (int e = 0; e < bank.n_experts; e++) {
        const float re = r[(size_t)e];
        for (size_t i = 0; i < kernel->data.size(); i++) {
            kernel->data[i] += re * bank.kernels[(size_t)e].data[i];
        }
        for (size_t i = 0; i < bias->data.size(); i++) {
            bias->data[i] += re * bank.biases[(size_t)e].data[i];
        }
    }
}

Tensor me_cond_conv(const Tensor& x, const ExpertBank& bank, int stride, int pad) {
    Tensor r = route(x, bank);
    const int N = x.shape[0];
    Tensor out;
    for (int n = 0; n < N; n++) {
        std::vector<float> rn((size_t)bank.n_experts);
        for (int e = 0; e < bank.n_experts; e++) rn[(size_t)e] = r.at2(n, e);
        Tensor k, b;
        combine_kernels(bank, rn, &k, &b);
        Tensor xn = (N == 1) ? x : slice_batch(x, n);
        Tensor yn = conv2d(xn, k, b, stride, pad);
        if (n == 0) {
            std::vector<int> shp = yn.shape;
            shp[0] = N;
            out = Tensor(shp);
        }
        std::copy(yn.data.begin(), yn.data.end(), out.data.begin() + (size_t)n * yn.data.size());
    }
    return out;
}

UNet upgrade_model(const UNet& unet, int n_experts, uint64_t seed) {
    if (n_experts < 2) throw std::invalid_argument("upgrade_model: n_experts must be >= 2");
    if (unet.config.n_experts > 0) {
        throw std::invalid_argument("upgrade_model: model already carries expert banks");
    }

    UNet up;
    up.config = unet.config;
    up.config.n_experts = n_experts;
    up.layout = elaborate(up.config);
    up.freeze_mask = unet.freeze_mask;
    Rng rng(seed);

    // Walk the upgraded shape census. Banked conv sites pull expert 0 from
    // the original weights; everything else is copied verbatim.
    for (const auto& [name, shape] : param_shapes(up.config)) {
        size_t bankpos = name.find(".expert");
        if (bankpos == std::string::npos && name.find(".router") == std::string::npos) {
            up.params.emplace(name, ag::param(unet.p(name)->val));
            continue;
        }
        Tensor t(shape);
        if (name.find(".router") != std::string::npos) {
            // zeros: sigmoid(0) = 0.5 per expert
        } else {
            std::string stem = name.substr(0, bankpos);        // e.g. dn0.l0.res.conv1
            bool is_weight = name.back() == 'w';
            bool preserved = name.find(".expert0.") != std::string::npos;
            if (preserved) {
                t = unet.p(stem + (is_weight ? ".w" : ".b"))->val;
            } else if (is_weight) {
                float sc = 0.1f * std::sqrt(2.0f / (float)((long long)shape[1] * shape[2] * shape[3]));
                for (float& v : t.data) v = rng.gaussian() * sc;
            }
            // random-expert biases stay zero
        }
        up.params.emplace(name, ag::param(std::move(t)));
    }
    return up;
}

}  // namespace asdm

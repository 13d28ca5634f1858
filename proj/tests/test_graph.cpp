#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "asdm/graph.hpp"
#include "asdm/kernels.hpp"

using namespace asdm;

namespace {

// Central finite differences with h = 1e-3 against the analytic tape. The FD
// loss is evaluated in double from the float32 activations; comparisons use
// a 1e-2 relative tolerance with a small absolute floor for near-zero grads.
void check_param_grads(std::vector<ag::Value> params, const std::function<ag::Value()>& build_loss,
                       const std::function<double()>& fd_loss, int probes, uint64_t seed) {
    for (auto& p : params) p->grad = Tensor();
    ag::Value loss = build_loss();
    ag::backward(loss);

    Rng rng(seed);
    for (int i = 0; i < probes; i++) {
        auto& P = params[(size_t)rng.uniform_int(0, (int)params.size() - 1)];
        size_t ei = (size_t)rng.uniform_int(0, (int)P->val.data.size() - 1);
        const float saved = P->val.data[ei];
        const float step = 1e-3f;
        const float xp = saved + step;
        const float xm = saved - step;
        P->val.data[ei] = xp;
        const double lp = fd_loss();
        P->val.data[ei] = xm;
        const double lm = fd_loss();
        P->val.data[ei] = saved;
        const double fd = (lp - lm) / ((double)xp - (double)xm);
        const double an = P->grad.empty() ? 0.0 : (double)P->grad.data[ei];
        const double tol = 1e-4 + 1e-2 * std::max(std::fabs(an), std::fabs(fd));
        INFO("probe ", i, " analytic=", an, " fd=", fd);
        CHECK(std::fabs(an - fd) <= tol);
    }
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(101);
    auto x = ag::param(rng.gaussian_tensor({1, 3, 6, 6}));
    auto w = ag::param(rng.gaussian_tensor({4, 3, 3, 3}, 0.5f));
    auto b = ag::param(rng.gaussian_tensor({4}));
    Tensor target = rng.gaussian_tensor({1, 4, 3, 3});

    auto build = [&] { return ag::mse_vs(ag::conv2d(x, w, b, 2, 1), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(ag::conv2d(x, w, b, 2, 1)->val, target);
    };
    check_param_grads({x, w, b}, build, fd, 40, 1);
}

TEST_CASE("group_norm gradients match finite differences") {
    Rng rng(102);
    auto x = ag::param(rng.gaussian_tensor({2, 4, 3, 3}, 1.5f));
    auto gamma = ag::param(rng.gaussian_tensor({4}, 0.5f));
    auto beta = ag::param(rng.gaussian_tensor({4}, 0.5f));
    Tensor target = rng.gaussian_tensor({2, 4, 3, 3});

    auto build = [&] { return ag::mse_vs(ag::group_norm(x, 2, gamma, beta, 1e-5f), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(ag::group_norm(x, 2, gamma, beta, 1e-5f)->val, target);
    };
    check_param_grads({x, gamma, beta}, build, fd, 30, 2);
}

TEST_CASE("layer_norm gradients match finite differences") {
    Rng rng(103);
    auto x = ag::param(rng.gaussian_tensor({5, 8}, 2.0f));
    auto gamma = ag::param(rng.gaussian_tensor({8}, 0.5f));
    auto beta = ag::param(rng.gaussian_tensor({8}, 0.5f));
    Tensor target = rng.gaussian_tensor({5, 8});

    auto build = [&] { return ag::mse_vs(ag::layer_norm(x, gamma, beta, 1e-5f), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(ag::layer_norm(x, gamma, beta, 1e-5f)->val, target);
    };
    check_param_grads({x, gamma, beta}, build, fd, 30, 3);
}

TEST_CASE("attention gradients match finite differences") {
    Rng rng(104);
    auto q = ag::param(rng.gaussian_tensor({3, 8}));
    auto k = ag::param(rng.gaussian_tensor({4, 8}));
    auto v = ag::param(rng.gaussian_tensor({4, 8}));
    Tensor target = rng.gaussian_tensor({3, 8});

    auto build = [&] { return ag::mse_vs(ag::attention(q, k, v, 2), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(ag::attention(q, k, v, 2)->val, target);
    };
    check_param_grads({q, k, v}, build, fd, 40, 4);
}

TEST_CASE("linear and matmul gradients match finite differences") {
    Rng rng(105);
    auto x = ag::param(rng.gaussian_tensor({4, 6}));
    auto w = ag::param(rng.gaussian_tensor({5, 6}, 0.7f));
    auto b = ag::param(rng.gaussian_tensor({5}));
    auto m = ag::param(rng.gaussian_tensor({5, 3}, 0.7f));
    Tensor target = rng.gaussian_tensor({4, 3});

    auto build = [&] { return ag::mse_vs(ag::matmul(ag::linear(x, w, b), m), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(ag::matmul(ag::linear(x, w, b), m)->val, target);
    };
    check_param_grads({x, w, b, m}, build, fd, 30, 5);
}

TEST_CASE("elementwise and broadcast op gradients match finite differences") {
    Rng rng(106);
    auto x = ag::param(rng.gaussian_tensor({1, 4, 4, 4}));
    auto t = ag::param(rng.gaussian_tensor({1, 4}));
    Tensor target = rng.gaussian_tensor({1, 4, 8, 8});

    auto net = [&] {
        auto h = ag::silu(ag::add_channel_bias(x, t));
        return ag::upsample_nearest2x(h);
    };
    auto build = [&] { return ag::mse_vs(net(), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(net()->val, target);
    };
    check_param_grads({x, t}, build, fd, 25, 6);
}

TEST_CASE("pooling routing and expert mixing gradients match finite differences") {
    Rng rng(107);
    auto x = ag::param(rng.gaussian_tensor({1, 3, 4, 4}));
    auto router = ag::param(rng.gaussian_tensor({3, 2}, 0.8f));
    auto w0 = ag::param(rng.gaussian_tensor({2, 3, 3, 3}, 0.5f));
    auto w1 = ag::param(rng.gaussian_tensor({2, 3, 3, 3}, 0.5f));
    auto b0 = ag::param(rng.gaussian_tensor({2}));
    Tensor target = rng.gaussian_tensor({1, 2, 4, 4});

    auto net = [&] {
        auto r = ag::sigmoid(ag::matmul(ag::global_avg_pool(x), router));
        auto kcomb = ag::add(ag::scale_by_entry(w0, r, 0), ag::scale_by_entry(w1, r, 1));
        auto bcomb = ag::scale_by_entry(b0, r, 0);
        return ag::conv2d(x, kcomb, bcomb, 1, 1);
    };
    auto build = [&] { return ag::mse_vs(net(), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(net()->val, target);
    };
    check_param_grads({x, router, w0, w1, b0}, build, fd, 40, 7);
}

TEST_CASE("concat slice and token reshape gradients match finite differences") {
    Rng rng(108);
    auto a = ag::param(rng.gaussian_tensor({1, 2, 3, 3}));
    auto b = ag::param(rng.gaussian_tensor({1, 3, 3, 3}));
    auto table = ag::param(rng.gaussian_tensor({4, 6}));
    Tensor target = rng.gaussian_tensor({9, 5});

    auto net = [&] {
        auto cat = ag::concat_channels(a, b);
        auto tok = ag::tokens_from_map(cat);               // [9, 5]
        auto row = ag::slice_row(table, 2);                // [1, 6]
        auto rowslice = ag::slice_cols(row, 1, 5);         // [1, 5]
        auto scaled = ag::mul(tok, ag::concat_batch(std::vector<ag::Value>(9, rowslice)));
        return scaled;
    };
    auto build = [&] { return ag::mse_vs(net(), target); };
    auto fd = [&] {
        ag::NoGradGuard ng;
        return mse(net()->val, target);
    };
    check_param_grads({a, b, table}, build, fd, 30, 8);
}

TEST_CASE("no-grad forwards are bit-identical to graded forwards") {
    Rng rng(109);
    auto x = ag::param(rng.gaussian_tensor({1, 3, 6, 6}));
    auto w = ag::param(rng.gaussian_tensor({4, 3, 3, 3}));
    auto b = ag::param(rng.gaussian_tensor({4}));
    Tensor graded = ag::silu(ag::conv2d(x, w, b, 1, 1))->val;
    Tensor ungraded;
    {
        ag::NoGradGuard ng;
        ungraded = ag::silu(ag::conv2d(x, w, b, 1, 1))->val;
    }
    CHECK(graded.bit_equal(ungraded));
}

TEST_CASE("fused attention is bit-identical to the graded composition") {
    Rng rng(112);
    for (int trial = 0; trial < 10; trial++) {
        int L = rng.uniform_int(1, 20);
        int M = rng.uniform_int(1, 20);
        int heads = rng.uniform_int(1, 2) * 2;
        int D = heads * rng.uniform_int(2, 8);
        auto q = ag::param(rng.gaussian_tensor({L, D}));
        auto k = ag::param(rng.gaussian_tensor({M, D}));
        auto v = ag::param(rng.gaussian_tensor({M, D}));
        Tensor composed = ag::attention(q, k, v, heads)->val;  // graded path
        Tensor fused = attention(q->val, k->val, v->val, heads);
        CHECK(composed.bit_equal(fused));
    }
}

TEST_CASE("gradients accumulate across multiple backward passes") {
    Rng rng(110);
    auto x = ag::param(rng.gaussian_tensor({2, 3}));
    Tensor target = rng.gaussian_tensor({2, 3});
    auto l1 = ag::mse_vs(x, target);
    ag::backward(l1);
    Tensor g1 = x->grad;
    auto l2 = ag::mse_vs(x, target);
    ag::backward(l2);
    for (size_t i = 0; i < g1.data.size(); i++) {
        CHECK(x->grad.data[i] == doctest::Approx(2.0f * g1.data[i]).epsilon(1e-6));
    }
}

TEST_CASE("backward requires a scalar root") {
    Rng rng(111);
    auto x = ag::param(rng.gaussian_tensor({2, 2}));
    auto y = ag::scale(x, 2.0);
    CHECK_THROWS_AS(ag::backward(y), std::invalid_argument);
}

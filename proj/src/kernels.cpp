#include "asdm/kernels.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace asdm {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require_rank(const Tensor& t, int r, const char* what) {
    require(t.rank() == r, std::string(what) + ": expected rank " + std::to_string(r) +
                               ", got " + t.shape_str());
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    require_rank(x, 4, "conv2d input");
    require_rank(w, 4, "conv2d kernel");
    require_rank(b, 1, "conv2d bias");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(pad >= 0, "conv2d: pad must be >= 0");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    require(w.shape[1] == C, "conv2d: kernel channels " + std::to_string(w.shape[1]) +
                                 " do not match input channels " + std::to_string(C));
    require(b.shape[0] == O, "conv2d: bias length does not match output channels");
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
    require(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;

    Tensor y({N, O, Ho, Wo});
    const int hw = Ho * Wo;
    const long long K = (long long)C * kh * kw;

    // Patch matrix form: one double accumulator per output element, reduced
    // over the patch index (c,ky,kx) in fixed ascending order, so results are
    // bit-identical across runs and thread counts. Out-of-range taps enter as
    // exact zeros.
    std::vector<float> patches((size_t)K * hw);
    for (int n = 0; n < N; n++) {
        float* pp = patches.data();
        for (int c = 0; c < C; c++) {
            const float* xrow = x.data.data() + ((size_t)n * C + c) * H * W;
            for (int ky = 0; ky < kh; ky++) {
                for (int kx = 0; kx < kw; kx++) {
                    for (int oy = 0; oy < Ho; oy++) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) {
                            for (int ox = 0; ox < Wo; ox++) *pp++ = 0.0f;
                            continue;
                        }
                        const float* xr = xrow + (size_t)iy * W + (kx - pad);
                        for (int ox = 0; ox < Wo; ox++) {
                            const int ix = ox * stride + kx - pad;
                            *pp++ = (ix < 0 || ix >= W) ? 0.0f : xr[ox * stride];
                        }
                    }
                }
            }
        }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (K * hw >= 16384)
#endif
        for (int o = 0; o < O; o++) {
            std::vector<double> acc((size_t)hw, (double)b.data[o]);
            const float* wrow = w.data.data() + (size_t)o * K;
            for (long long k = 0; k < K; k++) {
                const double wv = wrow[k];
                const float* pr = patches.data() + (size_t)k * hw;
                for (int j = 0; j < hw; j++) acc[j] += wv * (double)pr[j];
            }
            float* yrow = y.data.data() + ((size_t)n * O + o) * hw;
            for (int j = 0; j < hw; j++) yrow[j] = (float)acc[j];
        }
    }
    return y;
}

void conv2d_grads(const Tensor& x, const Tensor& w, int stride, int pad, const Tensor& dy,
                  Tensor* dx, Tensor* dw, Tensor* db) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int Ho = dy.shape[2], Wo = dy.shape[3];
    const int hw = Ho * Wo;
    const long long K = (long long)C * kh * kw;

    if (db) {
        *db = Tensor({O});
        for (int o = 0; o < O; o++) {
            double acc = 0.0;
            for (int n = 0; n < N; n++) {
                const float* dyp = dy.data.data() + ((size_t)n * O + o) * hw;
                for (int i = 0; i < hw; i++) acc += dyp[i];
            }
            db->data[o] = (float)acc;
        }
    }

    if (!dw && !dx) return;

    if (dw) *dw = Tensor({O, C, kh, kw});
    if (dx) *dx = Tensor({N, C, H, W});

    std::vector<float> patches(dw ? (size_t)K * hw : 0);
    std::vector<double> dcol(dx ? (size_t)K * hw : 0);
    std::vector<double> dwacc(dw ? (size_t)O * K : 0, 0.0);

    for (int n = 0; n < N; n++) {
        if (dw) {
            // same patch matrix as the forward pass
            float* pp = patches.data();
            for (int c = 0; c < C; c++) {
                const float* xrow = x.data.data() + ((size_t)n * C + c) * H * W;
                for (int ky = 0; ky < kh; ky++) {
                    for (int kx = 0; kx < kw; kx++) {
                        for (int oy = 0; oy < Ho; oy++) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) {
                                for (int ox = 0; ox < Wo; ox++) *pp++ = 0.0f;
                                continue;
                            }
                            const float* xr = xrow + (size_t)iy * W + (kx - pad);
                            for (int ox = 0; ox < Wo; ox++) {
                                const int ix = ox * stride + kx - pad;
                                *pp++ = (ix < 0 || ix >= W) ? 0.0f : xr[ox * stride];
                            }
                        }
                    }
                }
            }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if ((long long)O * K * hw >= 262144)
#endif
            for (int o = 0; o < O; o++) {
                const float* dyp = dy.data.data() + ((size_t)n * O + o) * hw;
                double* dwp = dwacc.data() + (size_t)o * K;
                for (long long k = 0; k < K; k++) {
                    const float* pr = patches.data() + (size_t)k * hw;
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                    int j = 0;
                    for (; j + 4 <= hw; j += 4) {
                        a0 += (double)dyp[j] * (double)pr[j];
                        a1 += (double)dyp[j + 1] * (double)pr[j + 1];
                        a2 += (double)dyp[j + 2] * (double)pr[j + 2];
                        a3 += (double)dyp[j + 3] * (double)pr[j + 3];
                    }
                    double acc = (a0 + a1) + (a2 + a3);
                    for (; j < hw; j++) acc += (double)dyp[j] * (double)pr[j];
                    dwp[k] += acc;
                }
            }
        }

        if (dx) {
            // dcol[k, j] = sum_o w[o, k] * dy[o, j], then a fixed-order col2im
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if ((long long)O * K * hw >= 262144)
#endif
            for (long long k = 0; k < K; k++) {
                double* dc = dcol.data() + (size_t)k * hw;
                for (int j = 0; j < hw; j++) dc[j] = 0.0;
                for (int o = 0; o < O; o++) {
                    const double wv = w.data.data()[(size_t)o * K + k];
                    const float* dyp = dy.data.data() + ((size_t)n * O + o) * hw;
                    for (int j = 0; j < hw; j++) dc[j] += wv * (double)dyp[j];
                }
            }
            const double* dc = dcol.data();
            for (int c = 0; c < C; c++) {
                float* dxp = dx->data.data() + ((size_t)n * C + c) * H * W;
                for (int ky = 0; ky < kh; ky++) {
                    for (int kx = 0; kx < kw; kx++) {
                        for (int oy = 0; oy < Ho; oy++) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) {
                                dc += Wo;
                                continue;
                            }
                            for (int ox = 0; ox < Wo; ox++) {
                                const int ix = ox * stride + kx - pad;
                                if (ix >= 0 && ix < W) {
                                    dxp[iy * W + ix] = (float)((double)dxp[iy * W + ix] + *dc);
                                }
                                dc++;
                            }
                        }
                    }
                }
            }
        }
    }

    if (dw) {
        for (size_t i = 0; i < dwacc.size(); i++) dw->data[i] = (float)dwacc[i];
    }
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
    require_rank(x, 4, "group_norm input");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    require(groups >= 1 && C % groups == 0,
            "group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                std::to_string(groups));
    require(gamma.rank() == 1 && gamma.shape[0] == C, "group_norm: gamma length != channels");
    require(beta.rank() == 1 && beta.shape[0] == C, "group_norm: beta length != channels");
    const int cg = C / groups;
    const long long m = (long long)cg * H * W;

    Tensor y({N, C, H, W});
    for (int n = 0; n < N; n++) {
        for (int g = 0; g < groups; g++) {
            double sum = 0.0, sq = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                for (int i = 0; i < H * W; i++) {
                    sum += xp[i];
                    sq += (double)xp[i] * (double)xp[i];
                }
            }
            const double mean = sum / (double)m;
            const double var = sq / (double)m - mean * mean;
            const double inv = 1.0 / std::sqrt(var + (double)eps);
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                float* yp = y.data.data() + ((size_t)n * C + c) * H * W;
                const double gm = gamma.data[c], bt = beta.data[c];
                for (int i = 0; i < H * W; i++) {
                    yp[i] = (float)((((double)xp[i] - mean) * inv) * gm + bt);
                }
            }
        }
    }
    return y;
}

Tensor group_norm_grad_input(const Tensor& x, int groups, const Tensor& gamma, float eps,
                             const Tensor& dy) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int cg = C / groups;
    const long long m = (long long)cg * H * W;

    Tensor dx({N, C, H, W});
    for (int n = 0; n < N; n++) {
        for (int g = 0; g < groups; g++) {
            double sum = 0.0, sq = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                for (int i = 0; i < H * W; i++) {
                    sum += xp[i];
                    sq += (double)xp[i] * (double)xp[i];
                }
            }
            const double mean = sum / (double)m;
            const double var = sq / (double)m - mean * mean;
            const double inv = 1.0 / std::sqrt(var + (double)eps);

            double s1 = 0.0, s2 = 0.0;  // sum(dxhat), sum(dxhat * xhat)
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                const float* dp = dy.data.data() + ((size_t)n * C + c) * H * W;
                const double gm = gamma.data[c];
                for (int i = 0; i < H * W; i++) {
                    const double dxh = (double)dp[i] * gm;
                    const double xh = ((double)xp[i] - mean) * inv;
                    s1 += dxh;
                    s2 += dxh * xh;
                }
            }
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                const float* dp = dy.data.data() + ((size_t)n * C + c) * H * W;
                float* dxp = dx.data.data() + ((size_t)n * C + c) * H * W;
                const double gm = gamma.data[c];
                for (int i = 0; i < H * W; i++) {
                    const double dxh = (double)dp[i] * gm;
                    const double xh = ((double)xp[i] - mean) * inv;
                    dxp[i] = (float)(inv * (dxh - (s1 + xh * s2) / (double)m));
                }
            }
        }
    }
    return dx;
}

void group_norm_grad_affine(const Tensor& x, int groups, float eps, const Tensor& dy,
                            Tensor* dgamma, Tensor* dbeta) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int cg = C / groups;
    const long long m = (long long)cg * H * W;
    *dgamma = Tensor({C});
    *dbeta = Tensor({C});
    std::vector<double> dg((size_t)C, 0.0), db((size_t)C, 0.0);
    for (int n = 0; n < N; n++) {
        for (int g = 0; g < groups; g++) {
            double sum = 0.0, sq = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                for (int i = 0; i < H * W; i++) {
                    sum += xp[i];
                    sq += (double)xp[i] * (double)xp[i];
                }
            }
            const double mean = sum / (double)m;
            const double var = sq / (double)m - mean * mean;
            const double inv = 1.0 / std::sqrt(var + (double)eps);
            for (int c = g * cg; c < (g + 1) * cg; c++) {
                const float* xp = x.data.data() + ((size_t)n * C + c) * H * W;
                const float* dp = dy.data.data() + ((size_t)n * C + c) * H * W;
                for (int i = 0; i < H * W; i++) {
                    dg[c] += (double)dp[i] * (((double)xp[i] - mean) * inv);
                    db[c] += dp[i];
                }
            }
        }
    }
    for (int c = 0; c < C; c++) {
        dgamma->data[c] = (float)dg[c];
        dbeta->data[c] = (float)db[c];
    }
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    require_rank(x, 2, "layer_norm input");
    const int R = x.shape[0], D = x.shape[1];
    require(gamma.rank() == 1 && gamma.shape[0] == D, "layer_norm: gamma length != width");
    require(beta.rank() == 1 && beta.shape[0] == D, "layer_norm: beta length != width");
    Tensor y({R, D});
    for (int r = 0; r < R; r++) {
        const float* xp = x.data.data() + (size_t)r * D;
        float* yp = y.data.data() + (size_t)r * D;
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < D; i++) {
            sum += xp[i];
            sq += (double)xp[i] * (double)xp[i];
        }
        const double mean = sum / D;
        const double var = sq / D - mean * mean;
        const double inv = 1.0 / std::sqrt(var + (double)eps);
        for (int i = 0; i < D; i++) {
            yp[i] = (float)((((double)xp[i] - mean) * inv) * gamma.data[i] + beta.data[i]);
        }
    }
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    require(b.shape[0] == k, "matmul: inner extents disagree (" + a.shape_str() + " x " +
                                 b.shape_str() + ")");
    Tensor y({m, n});
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if ((long long)m * n * k >= 262144)
#endif
    for (int i = 0; i < m; i++) {
        std::vector<double> acc((size_t)n, 0.0);
        const float* ap = a.data.data() + (size_t)i * k;
        for (int t = 0; t < k; t++) {
            const double av = ap[t];
            const float* bp = b.data.data() + (size_t)t * n;
            for (int j = 0; j < n; j++) acc[j] += av * (double)bp[j];
        }
        float* yp = y.data.data() + (size_t)i * n;
        for (int j = 0; j < n; j++) yp[j] = (float)acc[j];
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 2, "linear input");
    require_rank(w, 2, "linear weight");
    const int m = x.shape[0], k = x.shape[1], n = w.shape[0];
    require(w.shape[1] == k, "linear: weight width != input width");
    require(b.rank() == 1 && b.shape[0] == n, "linear: bias length != output width");
    Tensor y({m, n});
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if ((long long)m * n * k >= 262144)
#endif
    for (int i = 0; i < m; i++) {
        const float* xp = x.data.data() + (size_t)i * k;
        float* yp = y.data.data() + (size_t)i * n;
        for (int j = 0; j < n; j++) {
            const float* wp = w.data.data() + (size_t)j * k;
            // four fixed accumulator chains per output element
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            int t = 0;
            for (; t + 4 <= k; t += 4) {
                a0 += (double)xp[t] * (double)wp[t];
                a1 += (double)xp[t + 1] * (double)wp[t + 1];
                a2 += (double)xp[t + 2] * (double)wp[t + 2];
                a3 += (double)xp[t + 3] * (double)wp[t + 3];
            }
            double acc = ((a0 + a1) + (a2 + a3)) + (double)b.data[j];
            for (; t < k; t++) acc += (double)xp[t] * (double)wp[t];
            yp[j] = (float)acc;
        }
    }
    return y;
}

Tensor linear_nobias(const Tensor& x, const Tensor& w) {
    Tensor zero({w.shape[0]});
    return linear(x, w, zero);
}

Tensor transpose2d(const Tensor& x) {
    require_rank(x, 2, "transpose2d input");
    Tensor y({x.shape[1], x.shape[0]});
    for (int r = 0; r < x.shape[0]; r++) {
        for (int c = 0; c < x.shape[1]; c++) y.at2(c, r) = x.at2(r, c);
    }
    return y;
}

Tensor softmax_rows(const Tensor& x) {
    require_rank(x, 2, "softmax input");
    const int R = x.shape[0], D = x.shape[1];
    Tensor y({R, D});
    std::vector<double> e((size_t)D);
    for (int r = 0; r < R; r++) {
        const float* xp = x.data.data() + (size_t)r * D;
        float* yp = y.data.data() + (size_t)r * D;
        float mx = xp[0];
        for (int i = 1; i < D; i++) mx = std::max(mx, xp[i]);
        double denom = 0.0;
        for (int i = 0; i < D; i++) {
            e[i] = std::exp((double)xp[i] - (double)mx);
            denom += e[i];
        }
        for (int i = 0; i < D; i++) yp[i] = (float)(e[i] / denom);
    }
    return y;
}

// Fused attention. Arithmetic (reduction order and rounding points) matches
// the slice/matmul/softmax composition in the autodiff layer exactly, so both
// paths produce bit-identical values.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    require_rank(q, 2, "attention q");
    require_rank(k, 2, "attention k");
    require_rank(v, 2, "attention v");
    const int L = q.shape[0], D = q.shape[1], M = k.shape[0];
    require(k.shape[1] == D && v.shape[1] == D, "attention: q/k/v widths disagree");
    require(v.shape[0] == M, "attention: k/v lengths disagree");
    require(heads >= 1 && D % heads == 0,
            "attention: width " + std::to_string(D) + " not divisible by heads " +
                std::to_string(heads));
    const int dh = D / heads;
    const double sc = 1.0 / std::sqrt((double)dh);

    Tensor y({L, D});
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if ((long long)L * M * D >= 65536)
#endif
    for (int i = 0; i < L; i++) {
        // All heads in one sweep. Products of floats are exact in double, so
        // grouping them per head afterwards keeps the per-element reduction
        // order (t ascending within a head, j ascending across keys).
        std::vector<double> prod((size_t)D);
        std::vector<float> srow((size_t)heads * M);
        std::vector<double> e((size_t)M);
        std::vector<double> pd((size_t)D);
        std::vector<double> acc((size_t)D, 0.0);
        const float* qp = q.data.data() + (size_t)i * D;
        for (int j = 0; j < M; j++) {
            const float* kp = k.data.data() + (size_t)j * D;
            for (int t = 0; t < D; t++) prod[t] = (double)qp[t] * (double)kp[t];
            for (int h = 0; h < heads; h++) {
                double a = 0.0;
                const double* pr = prod.data() + (size_t)h * dh;
                for (int t = 0; t < dh; t++) a += pr[t];
                float s = (float)a;
                srow[(size_t)h * M + j] = (float)((double)s * sc);
            }
        }
        for (int h = 0; h < heads; h++) {
            const float* sr = srow.data() + (size_t)h * M;
            float mx = sr[0];
            for (int j = 1; j < M; j++) mx = std::max(mx, sr[j]);
            double denom = 0.0;
            for (int j = 0; j < M; j++) {
                e[j] = std::exp((double)sr[j] - (double)mx);
                denom += e[j];
            }
            float* pw = srow.data() + (size_t)h * M;  // reuse as probability row
            for (int j = 0; j < M; j++) pw[j] = (float)(e[j] / denom);
        }
        for (int j = 0; j < M; j++) {
            const float* vp = v.data.data() + (size_t)j * D;
            for (int h = 0; h < heads; h++) {
                const double p = (double)srow[(size_t)h * M + j];
                for (int t = 0; t < dh; t++) pd[(size_t)h * dh + t] = p;
            }
            for (int t = 0; t < D; t++) acc[t] += pd[t] * (double)vp[t];
        }
        float* yp = y.data.data() + (size_t)i * D;
        for (int t = 0; t < D; t++) yp[t] = (float)acc[t];
    }
    return y;
}

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) {
        const double s = 1.0 / (1.0 + std::exp(-(double)v));
        v = (float)((double)v * s);
    }
    return y;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) v = (float)(1.0 / (1.0 + std::exp(-(double)v)));
    return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape == b.shape, "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor y = a;
    for (size_t i = 0; i < y.data.size(); i++) y.data[i] += b.data[i];
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape == b.shape, "sub: shape mismatch");
    Tensor y = a;
    for (size_t i = 0; i < y.data.size(); i++) y.data[i] -= b.data[i];
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape == b.shape, "mul: shape mismatch");
    Tensor y = a;
    for (size_t i = 0; i < y.data.size(); i++) y.data[i] *= b.data[i];
    return y;
}

Tensor scale(const Tensor& a, double c) {
    Tensor y = a;
    for (float& v : y.data) v = (float)((double)v * c);
    return y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& t) {
    require_rank(x, 4, "add_channel_bias input");
    require(t.rank() == 2 && t.shape[0] == 1 && t.shape[1] == x.shape[1],
            "add_channel_bias: bias must be [1,C]");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor y = x;
    for (int n = 0; n < N; n++) {
        for (int c = 0; c < C; c++) {
            float* yp = y.data.data() + ((size_t)n * C + c) * HW;
            const float tv = t.data[c];
            for (int i = 0; i < HW; i++) yp[i] += tv;
        }
    }
    return y;
}

Tensor upsample_nearest2x(const Tensor& x) {
    require_rank(x, 4, "upsample input");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor y({N, C, H * 2, W * 2});
    for (int n = 0; n < N; n++) {
        for (int c = 0; c < C; c++) {
            for (int yy = 0; yy < H * 2; yy++) {
                for (int xx = 0; xx < W * 2; xx++) {
                    y.at4(n, c, yy, xx) = x.at4(n, c, yy / 2, xx / 2);
                }
            }
        }
    }
    return y;
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool input");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor y({N, C});
    for (int n = 0; n < N; n++) {
        for (int c = 0; c < C; c++) {
            const float* xp = x.data.data() + ((size_t)n * C + c) * HW;
            double acc = 0.0;
            for (int i = 0; i < HW; i++) acc += xp[i];
            y.at2(n, c) = (float)(acc / (double)HW);
        }
    }
    return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank(a, 4, "concat_channels lhs");
    require_rank(b, 4, "concat_channels rhs");
    require(a.shape[0] == b.shape[0] && a.shape[2] == b.shape[2] && a.shape[3] == b.shape[3],
            "concat_channels: spatial/batch mismatch " + a.shape_str() + " vs " + b.shape_str());
    const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1], HW = a.shape[2] * a.shape[3];
    Tensor y({N, Ca + Cb, a.shape[2], a.shape[3]});
    for (int n = 0; n < N; n++) {
        float* yp = y.data.data() + (size_t)n * (Ca + Cb) * HW;
        const float* ap = a.data.data() + (size_t)n * Ca * HW;
        const float* bp = b.data.data() + (size_t)n * Cb * HW;
        std::copy(ap, ap + (size_t)Ca * HW, yp);
        std::copy(bp, bp + (size_t)Cb * HW, yp + (size_t)Ca * HW);
    }
    return y;
}

Tensor slice_channels(const Tensor& x, int c0, int len) {
    require_rank(x, 4, "slice_channels input");
    require(c0 >= 0 && len >= 1 && c0 + len <= x.shape[1], "slice_channels: out of range");
    const int N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor y({N, len, x.shape[2], x.shape[3]});
    for (int n = 0; n < N; n++) {
        const float* xp = x.data.data() + ((size_t)n * C + c0) * HW;
        float* yp = y.data.data() + (size_t)n * len * HW;
        std::copy(xp, xp + (size_t)len * HW, yp);
    }
    return y;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "concat_cols lhs");
    require_rank(b, 2, "concat_cols rhs");
    require(a.shape[0] == b.shape[0], "concat_cols: row mismatch");
    Tensor y({a.shape[0], a.shape[1] + b.shape[1]});
    for (int r = 0; r < a.shape[0]; r++) {
        for (int c = 0; c < a.shape[1]; c++) y.at2(r, c) = a.at2(r, c);
        for (int c = 0; c < b.shape[1]; c++) y.at2(r, a.shape[1] + c) = b.at2(r, c);
    }
    return y;
}

Tensor slice_cols(const Tensor& x, int c0, int len) {
    require_rank(x, 2, "slice_cols input");
    require(c0 >= 0 && len >= 1 && c0 + len <= x.shape[1], "slice_cols: out of range");
    Tensor y({x.shape[0], len});
    for (int r = 0; r < x.shape[0]; r++) {
        for (int c = 0; c < len; c++) y.at2(r, c) = x.at2(r, c0 + c);
    }
    return y;
}

Tensor slice_row(const Tensor& x, int row) {
    require_rank(x, 2, "slice_row input");
    require(row >= 0 && row < x.shape[0], "slice_row: out of range");
    Tensor y({1, x.shape[1]});
    for (int c = 0; c < x.shape[1]; c++) y.at2(0, c) = x.at2(row, c);
    return y;
}

Tensor slice_batch(const Tensor& x, int n) {
    require(x.rank() >= 2, "slice_batch: rank must be >= 2");
    require(n >= 0 && n < x.shape[0], "slice_batch: out of range");
    std::vector<int> shp = x.shape;
    shp[0] = 1;
    Tensor y(shp);
    const size_t per = y.data.size();
    std::copy(x.data.begin() + (size_t)n * per, x.data.begin() + ((size_t)n + 1) * per,
              y.data.begin());
    return y;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    require(shape_numel(shape) == x.numel(),
            "reshape: element count mismatch " + x.shape_str());
    Tensor y = x;
    y.shape = std::move(shape);
    return y;
}

Tensor tokens_from_map(const Tensor& x) {
    require_rank(x, 4, "tokens_from_map input");
    require(x.shape[0] == 1, "tokens_from_map: batch must be 1");
    const int C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor y({H * W, C});
    for (int c = 0; c < C; c++) {
        const float* xp = x.data.data() + (size_t)c * H * W;
        for (int p = 0; p < H * W; p++) y.at2(p, c) = xp[p];
    }
    return y;
}

Tensor map_from_tokens(const Tensor& t, int h, int w) {
    require_rank(t, 2, "map_from_tokens input");
    require(t.shape[0] == h * w, "map_from_tokens: token count != h*w");
    const int C = t.shape[1];
    Tensor y({1, C, h, w});
    for (int c = 0; c < C; c++) {
        float* yp = y.data.data() + (size_t)c * h * w;
        for (int p = 0; p < h * w; p++) yp[p] = t.at2(p, c);
    }
    return y;
}

double mse(const Tensor& a, const Tensor& b) {
    require(a.shape == b.shape, "mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); i++) {
        const double d = (double)a.data[i] - (double)b.data[i];
        acc += d * d;
    }
    return acc / (double)a.data.size();
}

}  // namespace asdm

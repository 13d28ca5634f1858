#include "asdm/graph.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "asdm/kernels.hpp"

namespace asdm::ag {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved; }

Tensor& Node::ensure_grad() {
    if (grad.empty()) grad = Tensor::zeros(val.shape);
    return grad;
}

void Node::add_grad(const Tensor& g) {
    Tensor& acc = ensure_grad();
    for (size_t i = 0; i < acc.data.size(); i++) acc.data[i] += g.data[i];
}

Value constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

Value param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = true;
    return n;
}

namespace {

Value make_op(Tensor val, std::vector<Value> parents, std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (g_grad_enabled) {
        bool need = false;
        for (const Value& p : parents) need = need || p->requires_grad;
        if (need) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(bp);
        }
    }
    return n;
}

}  // namespace

Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad) {
    Tensor y = asdm::conv2d(x->val, w->val, b->val, stride, pad);
    return make_op(std::move(y), {x, w, b}, [x, w, b, stride, pad](Node& self) {
        Tensor dx, dw, db;
        conv2d_grads(x->val, w->val, stride, pad, self.grad,
                     x->requires_grad ? &dx : nullptr, w->requires_grad ? &dw : nullptr,
                     b->requires_grad ? &db : nullptr);
        if (x->requires_grad) x->add_grad(dx);
        if (w->requires_grad) w->add_grad(dw);
        if (b->requires_grad) b->add_grad(db);
    });
}

Value group_norm(const Value& x, int groups, const Value& gamma, const Value& beta, float eps) {
    Tensor y = asdm::group_norm(x->val, groups, gamma->val, beta->val, eps);
    return make_op(std::move(y), {x, gamma, beta}, [x, gamma, beta, groups, eps](Node& self) {
        if (x->requires_grad) {
            x->add_grad(group_norm_grad_input(x->val, groups, gamma->val, eps, self.grad));
        }
        if (gamma->requires_grad || beta->requires_grad) {
            Tensor dgamma, dbeta;
            group_norm_grad_affine(x->val, groups, eps, self.grad, &dgamma, &dbeta);
            if (gamma->requires_grad) gamma->add_grad(dgamma);
            if (beta->requires_grad) beta->add_grad(dbeta);
        }
    });
}

Value layer_norm(const Value& x, const Value& gamma, const Value& beta, float eps) {
    Tensor y = asdm::layer_norm(x->val, gamma->val, beta->val, eps);
    return make_op(std::move(y), {x, gamma, beta}, [x, gamma, beta, eps](Node& self) {
        // A row-normalization is a group norm with one group over [R,D,1,1].
        const int R = x->val.shape[0], D = x->val.shape[1];
        Tensor x4 = asdm::reshape(x->val, {R, D, 1, 1});
        Tensor dy4 = asdm::reshape(self.grad, {R, D, 1, 1});
        if (x->requires_grad) {
            Tensor dx4 = group_norm_grad_input(x4, 1, gamma->val, eps, dy4);
            x->add_grad(asdm::reshape(dx4, {R, D}));
        }
        if (gamma->requires_grad || beta->requires_grad) {
            Tensor dgamma, dbeta;
            group_norm_grad_affine(x4, 1, eps, dy4, &dgamma, &dbeta);
            if (gamma->requires_grad) gamma->add_grad(dgamma);
            if (beta->requires_grad) beta->add_grad(dbeta);
        }
    });
}

Value linear(const Value& x, const Value& w, const Value& b) {
    Tensor y = asdm::linear(x->val, w->val, b->val);
    return make_op(std::move(y), {x, w, b}, [x, w, b](Node& self) {
        if (x->requires_grad) x->add_grad(asdm::matmul(self.grad, w->val));
        if (w->requires_grad) w->add_grad(asdm::matmul(transpose2d(self.grad), x->val));
        if (b->requires_grad) {
            const int m = self.grad.shape[0], n = self.grad.shape[1];
            Tensor db({n});
            for (int j = 0; j < n; j++) {
                double acc = 0.0;
                for (int i = 0; i < m; i++) acc += self.grad.at2(i, j);
                db.data[j] = (float)acc;
            }
            b->add_grad(db);
        }
    });
}

Value linear_nobias(const Value& x, const Value& w) {
    Tensor y = asdm::linear_nobias(x->val, w->val);
    return make_op(std::move(y), {x, w}, [x, w](Node& self) {
        if (x->requires_grad) x->add_grad(asdm::matmul(self.grad, w->val));
        if (w->requires_grad) w->add_grad(asdm::matmul(transpose2d(self.grad), x->val));
    });
}

Value matmul(const Value& a, const Value& b) {
    Tensor y = asdm::matmul(a->val, b->val);
    return make_op(std::move(y), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) a->add_grad(asdm::matmul(self.grad, transpose2d(b->val)));
        if (b->requires_grad) b->add_grad(asdm::matmul(transpose2d(a->val), self.grad));
    });
}

Value transpose(const Value& x) {
    return make_op(transpose2d(x->val), {x}, [x](Node& self) {
        if (x->requires_grad) x->add_grad(transpose2d(self.grad));
    });
}

Value softmax_rows(const Value& x) {
    Tensor p = asdm::softmax_rows(x->val);
    return make_op(p, {x}, [x, p](Node& self) {
        if (!x->requires_grad) return;
        const int R = p.shape[0], D = p.shape[1];
        Tensor dx({R, D});
        for (int r = 0; r < R; r++) {
            double dot = 0.0;
            for (int c = 0; c < D; c++) dot += (double)self.grad.at2(r, c) * (double)p.at2(r, c);
            for (int c = 0; c < D; c++) {
                dx.at2(r, c) = (float)((double)p.at2(r, c) * ((double)self.grad.at2(r, c) - dot));
            }
        }
        x->add_grad(dx);
    });
}

Value attention(const Value& q, const Value& k, const Value& v, int heads) {
    const int D = q->val.shape[1];
    if (heads < 1 || D % heads != 0) {
        throw std::invalid_argument("attention: width not divisible by heads");
    }
    const bool need_grad = g_grad_enabled && (q->requires_grad || k->requires_grad ||
                                              v->requires_grad);
    if (!need_grad) {
        // fused kernel; bit-identical to the composition below
        return constant(asdm::attention(q->val, k->val, v->val, heads));
    }
    const int dh = D / heads;
    const double sc = 1.0 / std::sqrt((double)dh);
    Value out;
    for (int h = 0; h < heads; h++) {
        Value qh = slice_cols(q, h * dh, dh);
        Value kh = slice_cols(k, h * dh, dh);
        Value vh = slice_cols(v, h * dh, dh);
        Value s = scale(matmul(qh, transpose(kh)), sc);
        Value p = softmax_rows(s);
        Value oh = matmul(p, vh);
        out = out ? concat_cols(out, oh) : oh;
    }
    return out;
}

Value silu(const Value& x) {
    return make_op(asdm::silu(x->val), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx = self.grad;
        for (size_t i = 0; i < dx.data.size(); i++) {
            const double xv = x->val.data[i];
            const double s = 1.0 / (1.0 + std::exp(-xv));
            dx.data[i] = (float)((double)dx.data[i] * (s + xv * s * (1.0 - s)));
        }
        x->add_grad(dx);
    });
}

Value sigmoid(const Value& x) {
    Tensor y = asdm::sigmoid(x->val);
    return make_op(y, {x}, [x, y](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx = self.grad;
        for (size_t i = 0; i < dx.data.size(); i++) {
            const double s = y.data[i];
            dx.data[i] = (float)((double)dx.data[i] * s * (1.0 - s));
        }
        x->add_grad(dx);
    });
}

Value add(const Value& a, const Value& b) {
    return make_op(asdm::add(a->val, b->val), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) a->add_grad(self.grad);
        if (b->requires_grad) b->add_grad(self.grad);
    });
}

Value mul(const Value& a, const Value& b) {
    return make_op(asdm::mul(a->val, b->val), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) a->add_grad(asdm::mul(self.grad, b->val));
        if (b->requires_grad) b->add_grad(asdm::mul(self.grad, a->val));
    });
}

Value scale(const Value& a, double c) {
    return make_op(asdm::scale(a->val, c), {a}, [a, c](Node& self) {
        if (a->requires_grad) a->add_grad(asdm::scale(self.grad, c));
    });
}

Value add_channel_bias(const Value& x, const Value& t) {
    return make_op(asdm::add_channel_bias(x->val, t->val), {x, t}, [x, t](Node& self) {
        if (x->requires_grad) x->add_grad(self.grad);
        if (t->requires_grad) {
            const int N = self.grad.shape[0], C = self.grad.shape[1];
            const int HW = self.grad.shape[2] * self.grad.shape[3];
            Tensor dt({1, C});
            for (int c = 0; c < C; c++) {
                double acc = 0.0;
                for (int n = 0; n < N; n++) {
                    const float* gp = self.grad.data.data() + ((size_t)n * C + c) * HW;
                    for (int i = 0; i < HW; i++) acc += gp[i];
                }
                dt.at2(0, c) = (float)acc;
            }
            t->add_grad(dt);
        }
    });
}

Value upsample_nearest2x(const Value& x) {
    return make_op(asdm::upsample_nearest2x(x->val), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        const int N = x->val.shape[0], C = x->val.shape[1];
        const int H = x->val.shape[2], W = x->val.shape[3];
        Tensor dx({N, C, H, W});
        for (int n = 0; n < N; n++)
            for (int c = 0; c < C; c++)
                for (int yy = 0; yy < H; yy++)
                    for (int xx = 0; xx < W; xx++) {
                        double acc = 0.0;
                        for (int dy = 0; dy < 2; dy++)
                            for (int dxx = 0; dxx < 2; dxx++)
                                acc += self.grad.at4(n, c, yy * 2 + dy, xx * 2 + dxx);
                        dx.at4(n, c, yy, xx) = (float)acc;
                    }
        x->add_grad(dx);
    });
}

Value global_avg_pool(const Value& x) {
    return make_op(asdm::global_avg_pool(x->val), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        const int N = x->val.shape[0], C = x->val.shape[1];
        const int H = x->val.shape[2], W = x->val.shape[3];
        Tensor dx({N, C, H, W});
        for (int n = 0; n < N; n++)
            for (int c = 0; c < C; c++) {
                const float g = self.grad.at2(n, c) / (float)(H * W);
                float* dp = dx.data.data() + ((size_t)n * C + c) * H * W;
                for (int i = 0; i < H * W; i++) dp[i] = g;
            }
        x->add_grad(dx);
    });
}

Value concat_channels(const Value& a, const Value& b) {
    return make_op(asdm::concat_channels(a->val, b->val), {a, b}, [a, b](Node& self) {
        const int Ca = a->val.shape[1], Cb = b->val.shape[1];
        if (a->requires_grad) a->add_grad(slice_channels(self.grad, 0, Ca));
        if (b->requires_grad) b->add_grad(slice_channels(self.grad, Ca, Cb));
    });
}

Value concat_cols(const Value& a, const Value& b) {
    return make_op(asdm::concat_cols(a->val, b->val), {a, b}, [a, b](Node& self) {
        const int ca = a->val.shape[1], cb = b->val.shape[1];
        if (a->requires_grad) a->add_grad(asdm::slice_cols(self.grad, 0, ca));
        if (b->requires_grad) b->add_grad(asdm::slice_cols(self.grad, ca, cb));
    });
}

Value slice_cols(const Value& x, int c0, int len) {
    return make_op(asdm::slice_cols(x->val, c0, len), {x}, [x, c0, len](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx = Tensor::zeros(x->val.shape);
        for (int r = 0; r < dx.shape[0]; r++) {
            for (int c = 0; c < len; c++) dx.at2(r, c0 + c) = self.grad.at2(r, c);
        }
        x->add_grad(dx);
    });
}

Value slice_row(const Value& x, int row) {
    return make_op(asdm::slice_row(x->val, row), {x}, [x, row](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx = Tensor::zeros(x->val.shape);
        for (int c = 0; c < dx.shape[1]; c++) dx.at2(row, c) = self.grad.at2(0, c);
        x->add_grad(dx);
    });
}

Value slice_batch(const Value& x, int n) {
    return make_op(asdm::slice_batch(x->val, n), {x}, [x, n](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx = Tensor::zeros(x->val.shape);
        const size_t per = self.grad.data.size();
        std::copy(self.grad.data.begin(), self.grad.data.end(), dx.data.begin() + (size_t)n * per);
        x->add_grad(dx);
    });
}

Value concat_batch(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_batch: no parts");
    if (parts.size() == 1) return parts[0];
    std::vector<int> shp = parts[0]->val.shape;
    shp[0] = (int)parts.size();
    Tensor y(shp);
    const size_t per = parts[0]->val.data.size();
    for (size_t i = 0; i < parts.size(); i++) {
        if (parts[i]->val.shape != parts[0]->val.shape) {
            throw std::invalid_argument("concat_batch: shape mismatch");
        }
        std::copy(parts[i]->val.data.begin(), parts[i]->val.data.end(),
                  y.data.begin() + i * per);
    }
    std::vector<Value> parents = parts;
    return make_op(std::move(y), parents, [parents, per](Node& self) {
        for (size_t i = 0; i < parents.size(); i++) {
            if (!parents[i]->requires_grad) continue;
            Tensor g(parents[i]->val.shape);
            std::copy(self.grad.data.begin() + i * per, self.grad.data.begin() + (i + 1) * per,
                      g.data.begin());
            parents[i]->add_grad(g);
        }
    });
}

Value reshape(const Value& x, std::vector<int> shape) {
    Tensor y = asdm::reshape(x->val, shape);
    return make_op(std::move(y), {x}, [x](Node& self) {
        if (x->requires_grad) x->add_grad(asdm::reshape(self.grad, x->val.shape));
    });
}

Value tokens_from_map(const Value& x) {
    return make_op(asdm::tokens_from_map(x->val), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        x->add_grad(asdm::map_from_tokens(self.grad, x->val.shape[2], x->val.shape[3]));
    });
}

Value map_from_tokens(const Value& t, int h, int w) {
    return make_op(asdm::map_from_tokens(t->val, h, w), {t}, [t](Node& self) {
        if (t->requires_grad) t->add_grad(asdm::tokens_from_map(self.grad));
    });
}

Value mse_vs(const Value& a, Tensor target) {
    if (a->val.shape != target.shape) throw std::invalid_argument("mse_vs: shape mismatch");
    Tensor y = Tensor::scalar((float)mse(a->val, target));
    return make_op(std::move(y), {a}, [a, target](Node& self) {
        if (!a->requires_grad) return;
        const double g = self.grad.data[0];
        const double inv = 2.0 / (double)a->val.data.size();
        Tensor da(a->val.shape);
        for (size_t i = 0; i < da.data.size(); i++) {
            da.data[i] = (float)(g * inv * ((double)a->val.data[i] - (double)target.data[i]));
        }
        a->add_grad(da);
    });
}

Value scale_by_entry(const Value& t, const Value& r, int idx) {
    if (idx < 0 || idx >= (int)r->val.data.size()) {
        throw std::invalid_argument("scale_by_entry: index out of range");
    }
    Tensor y = asdm::scale(t->val, r->val.data[idx]);
    return make_op(std::move(y), {t, r}, [t, r, idx](Node& self) {
        if (t->requires_grad) t->add_grad(asdm::scale(self.grad, r->val.data[idx]));
        if (r->requires_grad) {
            double acc = 0.0;
            for (size_t i = 0; i < self.grad.data.size(); i++) {
                acc += (double)self.grad.data[i] * (double)t->val.data[i];
            }
            Tensor dr = Tensor::zeros(r->val.shape);
            dr.data[idx] = (float)acc;
            r->add_grad(dr);
        }
    });
}

void backward(const Value& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->val.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;

    // Iterative post-order topological sort over the grad-requiring subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            idx++;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad().data[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

}  // namespace asdm::ag

#include "asdm/sampler.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace asdm {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    require(T >= 1, "schedule: T must be >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.beta.resize((size_t)T);
    s.alpha.resize((size_t)T);
    s.alpha_bar.resize((size_t)T);
    s.timestep_values.resize((size_t)T);
    double prod = 1.0;
    for (int t = 0; t < T; t++) {
        double b = (T == 1) ? beta_start
                            : beta_start + (beta_end - beta_start) * (double)t / (double)(T - 1);
        s.beta[(size_t)t] = b;
        s.alpha[(size_t)t] = 1.0 - b;
        prod *= s.alpha[(size_t)t];
        s.alpha_bar[(size_t)t] = prod;
        s.timestep_values[(size_t)t] = t;
    }
    return s;
}

NoiseSchedule restride_schedule(const NoiseSchedule& train, int steps) {
    require(steps >= 1 && steps <= train.T(), "restride: steps must be in 1..T");
    NoiseSchedule s;
    s.beta.resize((size_t)steps);
    s.alpha.resize((size_t)steps);
    s.alpha_bar.resize((size_t)steps);
    s.timestep_values.resize((size_t)steps);
    double prev_bar = 1.0;
    for (int i = 0; i < steps; i++) {
        int tau = (int)((long long)i * train.T() / steps);
        double bar = train.alpha_bar[(size_t)tau];
        double a = bar / prev_bar;
        s.alpha[(size_t)i] = a;
        s.beta[(size_t)i] = 1.0 - a;
        s.alpha_bar[(size_t)i] = bar;
        s.timestep_values[(size_t)i] = train.timestep_values[(size_t)tau];
        prev_bar = bar;
    }
    return s;
}

Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require(t >= 0 && t < sched.T(), "add_noise: t out of schedule range");
    require(x0.shape == eps.shape, "add_noise: x0/eps shape mismatch");
    const double ab = sched.alpha_bar[(size_t)t];
    const double c0 = std::sqrt(ab);
    const double c1 = std::sqrt(1.0 - ab);
    Tensor y = x0;
    for (size_t i = 0; i < y.data.size(); i++) {
        y.data[i] = (float)(c0 * (double)x0.data[i] + c1 * (double)eps.data[i]);
    }
    return y;
}

Tensor denoise_step(const Tensor& eps_pred, const Tensor& x_t, int t, const NoiseSchedule& sched,
                    const Tensor& noise) {
    require(t >= 0 && t < sched.T(), "denoise_step: t out of schedule range");
    require(eps_pred.shape == x_t.shape, "denoise_step: eps/x shape mismatch");
    require(noise.shape == x_t.shape, "denoise_step: noise/x shape mismatch");
    const double beta = sched.beta[(size_t)t];
    const double alpha = sched.alpha[(size_t)t];
    const double ab = sched.alpha_bar[(size_t)t];
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const double eps_coef = beta / std::sqrt(1.0 - ab);
    const double noise_coef = (t == 0) ? 0.0 : std::sqrt(beta);
    Tensor y = x_t;
    for (size_t i = 0; i < y.data.size(); i++) {
        const double mean =
            inv_sqrt_alpha * ((double)x_t.data[i] - eps_coef * (double)eps_pred.data[i]);
        y.data[i] = (float)(mean + noise_coef * (double)noise.data[i]);
    }
    return y;
}

Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double scale) {
    require(uncond.shape == cond.shape, "cfg_combine: shape mismatch");
    Tensor y = uncond;
    for (size_t i = 0; i < y.data.size(); i++) {
        y.data[i] = (float)((double)uncond.data[i] +
                            scale * ((double)cond.data[i] - (double)uncond.data[i]));
    }
    return y;
}

SwitchPolicy SwitchPolicy::single(const std::string& model_id, int steps) {
    SwitchPolicy p;
    p.segments.push_back({steps, model_id});
    return p;
}

SwitchPolicy SwitchPolicy::parse(const std::string& text) {
    SwitchPolicy p;
    std::istringstream in(text);
    std::string seg;
    while (std::getline(in, seg, ',')) {
        size_t colon = seg.rfind(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 >= seg.size()) {
            throw std::invalid_argument("policy: expected 'model:steps', got '" + seg + "'");
        }
        Segment s;
        s.model_id = seg.substr(0, colon);
        try {
            s.steps = std::stoi(seg.substr(colon + 1));
        } catch (const std::exception&) {
            throw std::invalid_argument("policy: bad step count in '" + seg + "'");
        }
        if (s.steps <= 0) throw std::invalid_argument("policy: step counts must be positive");
        p.segments.push_back(std::move(s));
    }
    if (p.segments.empty()) throw std::invalid_argument("policy: empty");
    return p;
}

int SwitchPolicy::total_steps() const {
    int n = 0;
    for (const auto& s : segments) n += s.steps;
    return n;
}

const std::string& SwitchPolicy::model_for_step(int step) const {
    int k = step;
    for (const auto& s : segments) {
        if (k < s.steps) return s.model_id;
        k -= s.steps;
    }
    throw std::invalid_argument("policy: step " + std::to_string(step) + " beyond coverage");
}

std::string SwitchPolicy::descriptor() const {
    std::ostringstream os;
    for (size_t i = 0; i < segments.size(); i++) {
        if (i) os << ",";
        os << segments[i].model_id << ":" << segments[i].steps;
    }
    return os.str();
}

Tensor sample(const std::map<std::string, const UNet*>& models, const SwitchPolicy& policy,
              const NoiseSchedule& train_sched, const SampleParams& params,
              InheritContext* inherit_ctx, std::vector<StepTrace>* trace) {
    require(!models.empty(), "sample: no models");
    require(policy.total_steps() == params.steps,
            "sample: policy covers " + std::to_string(policy.total_steps()) + " steps, want " +
                std::to_string(params.steps));
    for (const auto& seg : policy.segments) {
        require(models.count(seg.model_id) != 0, "sample: unknown model id '" + seg.model_id + "'");
    }
    const UNet* first = models.begin()->second;
    const UNetConfig& cfg0 = first->config;
    for (const auto& [id, m] : models) {
        require(m->config.latent_channels == cfg0.latent_channels &&
                    m->config.latent_size == cfg0.latent_size,
                "sample: models disagree on latent shape");
    }
    if (inherit_ctx && !inherit_ctx->plan.sites.empty()) {
        require(inherit_ctx->mode.total_steps == params.steps,
                "sample: sampling mode covers " + std::to_string(inherit_ctx->mode.total_steps) +
                    " steps, want " + std::to_string(params.steps));
        for (const auto& [id, m] : models) {
            for (const SiteId& site : inherit_ctx->plan.sites) {
                require(m->layout.find_unit(site) != nullptr,
                        "sample: plan site " + site.str() + " not present in model '" + id + "'");
            }
        }
    }

    NoiseSchedule sched = restride_schedule(train_sched, params.steps);
    const int S = params.steps;

    Rng rng(params.seed);
    Tensor x = rng.gaussian_tensor({1, cfg0.latent_channels, cfg0.latent_size, cfg0.latent_size});

    // Per-model pre-resolved conditionings; flop costs for the trace.
    std::map<std::string, Tensor> cond_by_model, uncond_by_model;
    std::map<std::string, FlopReport> flops_by_model;
    for (const auto& [id, m] : models) {
        require(params.cond_class >= 0 && params.cond_class < m->config.cond_classes,
                "sample: cond class out of range for model '" + id + "'");
        cond_by_model[id] = m->cond_tokens(params.cond_class);
        uncond_by_model[id] = m->cond_tokens(m->null_class_id());
        if (trace) {
            SkipPlan none{"none", {}};
            const SkipPlan& plan = inherit_ctx ? inherit_ctx->plan : none;
            SamplingMode mode = inherit_ctx && !inherit_ctx->plan.sites.empty()
                                    ? inherit_ctx->mode
                                    : make_mode(1, 0, S);
            flops_by_model[id] = flop_estimate(m->config, plan, mode);
        }
    }

    const bool do_uncond = params.cfg_scale != 1.0;

    for (int step = 0; step < S; step++) {
        const int t = S - 1 - step;
        const std::string& model_id = policy.model_for_step(step);
        const UNet& model = *models.at(model_id);
        const int embed_t = sched.timestep_values[(size_t)t];
        StepRole role = inherit_ctx ? inherit_ctx->role_for_step(step) : StepRole::FULL;

        auto t0 = std::chrono::steady_clock::now();
        Tensor eps;
        if (inherit_ctx) {
            Tensor eps_c = inherited_forward(model, x, embed_t, cond_by_model[model_id],
                                             inherit_ctx->plan, role, inherit_ctx->store_cond,
                                             step, inherit_ctx->log);
            if (do_uncond) {
                Tensor eps_u = inherited_forward(model, x, embed_t, uncond_by_model[model_id],
                                                 inherit_ctx->plan, role,
                                                 inherit_ctx->store_uncond, step, nullptr);
                eps = cfg_combine(eps_u, eps_c, params.cfg_scale);
            } else {
                eps = eps_c;
            }
        } else {
            Tensor eps_c = model.forward(x, embed_t, cond_by_model[model_id]);
            if (do_uncond) {
                Tensor eps_u = model.forward(x, embed_t, uncond_by_model[model_id]);
                eps = cfg_combine(eps_u, eps_c, params.cfg_scale);
            } else {
                eps = eps_c;
            }
        }
        auto t1 = std::chrono::steady_clock::now();

        Tensor noise = (t > 0) ? rng.gaussian_tensor(x.shape) : Tensor::zeros(x.shape);
        x = denoise_step(eps, x, t, sched, noise);

        if (trace) {
            StepTrace st;
            st.step = step;
            st.model_id = model_id;
            st.role = role;
            st.wall_ns =
                std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
            st.est_macs = flops_by_model[model_id].per_step[(size_t)step];
            trace->push_back(std::move(st));
        }
    }
    return x;
}

}  // namespace asdm

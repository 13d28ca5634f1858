#ifndef ASDM_SAMPLER_HPP
#define ASDM_SAMPLER_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "asdm/inherit.hpp"
#include "asdm/tensor.hpp"
#include "asdm/unet.hpp"

namespace asdm {

struct NoiseSchedule {
    std::vector<double> beta, alpha, alpha_bar;
    std::vector<int> timestep_values;  // embedding timestep per index

    int T() const { return (int)beta.size(); }
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// Evenly strided inference sub-schedule; alpha_bar values are inherited from
// the training schedule so the cumulative-product invariant telescopes.
NoiseSchedule restride_schedule(const NoiseSchedule& train, int steps);

Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
Tensor denoise_step(const Tensor& eps_pred, const Tensor& x_t, int t, const NoiseSchedule& sched,
                    const Tensor& noise);
Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, double scale);

struct SwitchPolicy {
    struct Segment {
        int steps = 0;
        std::string model_id;
    };
    std::vector<Segment> segments;

    static SwitchPolicy single(const std::string& model_id, int steps);
    static SwitchPolicy parse(const std::string& text);  // "base:10,std:15"

    int total_steps() const;
    const std::string& model_for_step(int step) const;
    std::string descriptor() const;
};

struct StepTrace {
    int step = 0;
    std::string model_id;
    StepRole role = StepRole::FULL;
    int64_t wall_ns = 0;       // time inside the model forwards of this step
    long long est_macs = 0;    // analytic per-branch cost of this step
};

struct SampleParams {
    int steps = 50;
    double cfg_scale = 7.5;
    int cond_class = 0;
    uint64_t seed = 0;
};

// Reverse loop from seeded Gaussian noise. Models are selected per policy
// segment; every forward goes through the inheritance context when given.
Tensor sample(const std::map<std::string, const UNet*>& models, const SwitchPolicy& policy,
              const NoiseSchedule& train_sched, const SampleParams& params,
              InheritContext* inherit_ctx = nullptr, std::vector<StepTrace>* trace = nullptr);

}  // namespace asdm

#endif

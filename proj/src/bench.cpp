#include "asdm/bench.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "asdm/kernels.hpp"

namespace asdm {

namespace {

int64_t median(std::vector<int64_t> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

BenchResult run_bench(const BenchMatrix& matrix, const std::map<std::string, const UNet*>& models,
                      const NoiseSchedule& train_sched, const PlanCatalog& catalog) {
    BenchResult result;

    auto sample_once = [&](const UNet& model, const std::string& id, uint64_t seed,
                           InheritContext* ctx, int64_t* wall_ns) {
        SampleParams p;
        p.steps = matrix.steps;
        p.cfg_scale = matrix.cfg_scale;
        p.cond_class = matrix.cond_class;
        p.seed = seed;
        std::vector<StepTrace> trace;
        if (ctx) {
            ctx->store_uncond.clear();
            ctx->store_cond.clear();
        }
        Tensor latent =
            sample({{id, &model}}, SwitchPolicy::single(id, matrix.steps), train_sched, p, ctx,
                   &trace);
        if (wall_ns) {
            int64_t total = 0;
            for (const auto& s : trace) total += s.wall_ns;
            *wall_ns = total;
        }
        return latent;
    };

    for (const auto& mref : matrix.models) {
        const UNet* model = models.at(mref.id);

        // per-seed baselines, shared across the cells of this model
        std::map<uint64_t, Tensor> baselines;
        std::vector<int64_t> base_walls;
        for (int r = 0; r <= matrix.repeats; r++) {  // first pass is the warm-up
            int64_t ns = 0;
            Tensor latent = sample_once(*model, mref.id, matrix.seeds[0], nullptr, &ns);
            if (r > 0) base_walls.push_back(ns);
            if (r == matrix.repeats) baselines[matrix.seeds[0]] = latent;
        }
        for (size_t si = 1; si < matrix.seeds.size(); si++) {
            baselines[matrix.seeds[si]] =
                sample_once(*model, mref.id, matrix.seeds[si], nullptr, nullptr);
        }
        int64_t base_median = base_walls.empty() ? 0 : median(base_walls);

        for (const std::string& planName : matrix.plans) {
            SkipPlan plan = compile_plan(catalog, planName, model->config);
            for (const std::string& modeText : matrix.modes) {
                SamplingMode mode = parse_mode(modeText, matrix.steps);
                FlopReport flops = flop_estimate(model->config, plan, mode);

                BenchRow row;
                row.model_id = mref.id;
                row.plan = planName;
                row.mode = mode.descriptor();
                row.baseline_macs_per_step = flops.baseline_per_step;
                row.mac_saved_fraction = flops.total_saved_fraction;
                row.baseline_median_wall_ns = base_median;

                std::vector<int64_t> walls;
                double mse_sum = 0.0;
                for (size_t si = 0; si < matrix.seeds.size(); si++) {
                    const uint64_t seed = matrix.seeds[si];
                    const int reps = (si == 0) ? matrix.repeats + 1 : 1;  // warm-up on seed 0
                    Tensor latent;
                    for (int r = 0; r < reps; r++) {
                        InheritContext ctx;
                        ctx.plan = plan;
                        ctx.mode = mode;
                        int64_t ns = 0;
                        latent = sample_once(*model, mref.id, seed, &ctx, &ns);
                        if (si == 0 && r > 0) walls.push_back(ns);
                    }
                    mse_sum += mse(latent, baselines.at(seed));
                    if (si == 0) row.digest_first_seed = tensor_digest(latent);
                }
                row.median_wall_ns = walls.empty() ? 0 : median(walls);
                row.mse_vs_baseline = mse_sum / (double)matrix.seeds.size();
                row.measured_saved_fraction =
                    base_median > 0
                        ? 1.0 - (double)row.median_wall_ns / (double)base_median
                        : 0.0;
                result.rows.push_back(std::move(row));
            }
        }
    }
    return result;
}

std::string BenchResult::csv() const {
    std::ostringstream os;
    os << "model,plan,mode,baseline_macs_per_step,mac_saved_fraction,median_wall_ns,"
          "baseline_median_wall_ns,measured_saved_fraction,mse_vs_baseline,digest\n";
    for (const auto& r : rows) {
        os << r.model_id << "," << r.plan << "," << r.mode << "," << r.baseline_macs_per_step
           << "," << r.mac_saved_fraction << "," << r.median_wall_ns << ","
           << r.baseline_median_wall_ns << "," << r.measured_saved_fraction << ","
           << r.mse_vs_baseline << "," << std::hex << r.digest_first_seed << std::dec << "\n";
    }
    return os.str();
}

}  // namespace asdm

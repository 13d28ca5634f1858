#ifndef ASDM_BENCH_HPP
#define ASDM_BENCH_HPP

#include <map>
#include <string>
#include <vector>

#include "asdm/runcfg.hpp"
#include "asdm/sampler.hpp"

namespace asdm {

struct BenchRow {
    std::string model_id;
    std::string plan;
    std::string mode;
    long long baseline_macs_per_step = 0;
    double mac_saved_fraction = 0.0;
    int64_t median_wall_ns = 0;
    int64_t baseline_median_wall_ns = 0;
    double measured_saved_fraction = 0.0;
    double mse_vs_baseline = 0.0;  // mean over seeds
    uint64_t digest_first_seed = 0;
};

struct BenchResult {
    std::vector<BenchRow> rows;
    std::string csv() const;
};

// One row per (model, plan, mode) cell. Wall times are the median over
// `repeats` runs after one warm-up; deviations are final-latent MSE against
// the matching no-inheritance baseline, averaged over seeds.
BenchResult run_bench(const BenchMatrix& matrix,
                      const std::map<std::string, const UNet*>& models,
                      const NoiseSchedule& train_sched, const PlanCatalog& catalog);

}  // namespace asdm

#endif

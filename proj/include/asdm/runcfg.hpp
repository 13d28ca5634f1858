#ifndef ASDM_RUNCFG_HPP
#define ASDM_RUNCFG_HPP

#include <string>
#include <vector>

#include "asdm/sampler.hpp"
#include "asdm/unet.hpp"

namespace asdm {

// Operator-facing run configuration, parsed from strict JSON: unknown keys
// anywhere are errors, every field has a documented default.
struct RunConfig {
    std::string model_kind = "standard";  // standard | base | small | tiny
    UNetConfig model;                     // resolved, after kind derivation

    int schedule_T = 1000;
    double beta_start = 8.5e-4;
    double beta_end = 1.2e-2;

    struct Pretrain {
        int iters = 0;
        int batch = 4;
        double lr = 1e-3;
        uint64_t dataset_seed = 7;
        int dataset_size = 64;
        uint64_t seed = 1;
    } pretrain;

    NoiseSchedule schedule() const { return make_schedule(schedule_T, beta_start, beta_end); }

    static RunConfig defaults();
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
};

// Benchmark sweep description, also strict JSON.
struct BenchMatrix {
    struct ModelRef {
        std::string id;
        std::string path;
    };
    std::vector<ModelRef> models;
    std::vector<std::string> plans;
    std::vector<std::string> modes;
    int steps = 50;
    std::vector<uint64_t> seeds = {1};
    int repeats = 5;
    double cfg_scale = 7.5;
    int cond_class = 0;

    static BenchMatrix from_json_text(const std::string& text);
    static BenchMatrix from_file(const std::string& path);
};

}  // namespace asdm

#endif

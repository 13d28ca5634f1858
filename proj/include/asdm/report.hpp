#ifndef ASDM_REPORT_HPP
#define ASDM_REPORT_HPP

#include <string>
#include <vector>

#include "asdm/sampler.hpp"
#include "asdm/tensor.hpp"

namespace asdm {

// Per-run record emitted next to sampler outputs: one row per step plus
// run-level metadata in comment lines.
struct RunReport {
    std::string plan_name;
    std::string mode_descriptor;
    std::string policy_descriptor;
    uint64_t seed = 0;
    uint64_t final_digest = 0;
    double total_saved_fraction = 0.0;
    std::vector<StepTrace> steps;

    int64_t total_wall_ns() const;
    void write_csv(const std::string& path) const;
};

// Decode a latent to an RGB image through the fixed projection and write a
// binary P6 pixel map, nearest-upscaled by `scale`.
void write_ppm(const Tensor& latent, const std::string& path, int scale = 8);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace asdm

#endif

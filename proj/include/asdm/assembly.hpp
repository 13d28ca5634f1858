#ifndef ASDM_ASSEMBLY_HPP
#define ASDM_ASSEMBLY_HPP

#include <set>
#include <string>
#include <vector>

#include "asdm/sampler.hpp"
#include "asdm/tensor.hpp"
#include "asdm/unet.hpp"

namespace asdm {

enum class CompressKind { base, small, tiny };

CompressKind parse_compress_kind(const std::string& name);
const char* compress_kind_name(CompressKind k);

// Pruned derivatives of the standard architecture: base removes one layer per
// down/up block, small additionally drops the middle block, tiny additionally
// drops the deepest down/up pair and hands their resolution duties to the new
// deepest blocks.
UNetConfig compress_config(CompressKind kind, const UNetConfig& full);

// Student initialized from the teacher: retained layers copy weights
// verbatim, the layer pruned out of each block is index 1, shape-incompatible
// seams are freshly initialized.
UNet init_student_from_teacher(const UNetConfig& student_cfg, const UNet& teacher,
                               uint64_t seam_seed = 0);

// Names of student params that could not be copied (the seams).
std::vector<std::string> student_seam_census(const UNetConfig& student_cfg, const UNet& teacher);

struct AssemblyScheme {
    std::string name;
    std::set<std::string> student_blocks;  // the shallow part; the rest is teacher
    bool freeze_teacher_part = true;

    static AssemblyScheme m1(bool freeze = true);
    static AssemblyScheme m2(bool freeze = true);
    static AssemblyScheme m3(bool freeze = true);
    static AssemblyScheme by_name(const std::string& name, bool freeze = true);
};

// Reconstructed model: named blocks come from the student, everything else
// (including the middle block and the top-level stem/head) follows the
// partition; teacher-sourced params enter the freeze mask when requested.
UNet assemble(const UNet& student, const UNet& teacher, const AssemblyScheme& scheme);

struct DistillConfig {
    double w_task = 1.0, w_kd = 1.0, w_feat = 1.0;
    double lr = 1e-3;
    int batch = 4;
    int iters = 200;
    uint64_t seed = 0;
};

struct LossReport {
    double task = 0.0, kd = 0.0, feat = 0.0, total = 0.0;
    int excluded_blocks = 0;
};

struct DistillBatch {
    std::vector<Tensor> x0;
    std::vector<int> class_ids;
};

// One optimizer step on the student; teacher params are never touched and
// frozen student params are skipped.
LossReport distill_step(const UNet& teacher, UNet& student, const DistillBatch& batch,
                        const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng);

// Evaluate the combined loss without updating anything.
LossReport distill_eval(const UNet& teacher, const UNet& student, const DistillBatch& batch,
                        const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng);

struct ToyDataset {
    uint64_t seed = 0;
    int K = 0;
    int image_size = 0;
    std::vector<Tensor> latents;  // [C, S, S] per sample
    std::vector<int> classes;
};

ToyDataset make_toy_dataset(uint64_t seed, int K, int n_samples, int image_size = 16,
                            int latent_channels = 4);

DistillBatch draw_batch(const ToyDataset& data, int batch, Rng& rng);

// Full distillation run over a generated dataset; returns the loss history.
std::vector<LossReport> distill_run(const UNet& teacher, UNet& student, const ToyDataset& data,
                                    const NoiseSchedule& sched, const DistillConfig& cfg);

// Denoising-task-only training, used to give fresh toy models nonzero heads.
std::vector<LossReport> pretrain_run(UNet& model, const ToyDataset& data,
                                     const NoiseSchedule& sched, const DistillConfig& cfg);

}  // namespace asdm

#endif

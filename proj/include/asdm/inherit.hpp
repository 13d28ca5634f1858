#ifndef ASDM_INHERIT_HPP
#define ASDM_INHERIT_HPP

#include <map>
#include <set>
#include <string>
#include <vector>

#include "asdm/unet.hpp"

namespace asdm {

enum class StepRole { FULL, EXTRACT, INHERIT };

const char* role_name(StepRole r);

// Set of sites whose residual branches are inherited on INHERIT steps.
struct SkipPlan {
    std::string name;
    std::set<SiteId> sites;
};

// Per-step role sequence. The final tail_full_steps entries are FULL; the
// prefix repeats one EXTRACT followed by period-1 INHERIT steps.
struct SamplingMode {
    int period = 1;
    int tail_full_steps = 0;
    int total_steps = 0;
    std::vector<StepRole> roles;

    int count(StepRole r) const;
    std::string descriptor() const;  // "p5+10"
};

SamplingMode make_mode(int period, int tail_full_steps, int total_steps);
SamplingMode parse_mode(const std::string& text, int total_steps);  // "p5+10" or "p5"

// The storage center: one residual tensor per site, overwritten on extract.
struct FeatureStore {
    struct Entry {
        int step_recorded = -1;
        Tensor residual;
    };
    std::map<SiteId, Entry> entries;

    void clear() { entries.clear(); }
};

// Plan catalog: named site selectors parsed from structured text.
struct PlanCatalog {
    struct Selector {
        std::vector<std::string> block_patterns;  // names, or trailing-* globs
        std::vector<int> layers;                  // empty = all layers
        bool res = false;
        bool attn = false;
    };
    struct PlanDef {
        std::string name;
        bool canonical = false;
        std::string note;
        std::vector<Selector> selectors;
    };
    std::vector<PlanDef> plans;

    static const PlanCatalog& builtin();
    static PlanCatalog parse(const std::string& text);
    static PlanCatalog load_file(const std::string& path);

    const PlanDef* find(const std::string& name) const;
    std::vector<std::string> names() const;
};

// Resolve a named plan against a configuration. "none" yields an empty plan.
// Explicit block names or layer indices that do not exist in the target are
// errors; a unit kind a block lacks contributes nothing.
SkipPlan compile_plan(const std::string& name, const UNetConfig& config);
SkipPlan compile_plan(const PlanCatalog& catalog, const std::string& name,
                      const UNetConfig& config);

// Unresolved-selector report used by plan validation.
std::vector<std::string> plan_resolution_errors(const PlanCatalog& catalog,
                                                const std::string& name,
                                                const UNetConfig& config);

// Records of each substitution an inherit pass performed, for verification.
struct SubstitutionRecord {
    SiteId site;
    int step_recorded = -1;
    int step_used = -1;
    Tensor stored_residual;
    Tensor identity_input;
    Tensor unit_out;
};
using SubstitutionLog = std::vector<SubstitutionRecord>;

// The engine's tap. EXTRACT records plan-site residuals into the store;
// INHERIT replaces plan-site residual branches with the stored tensors.
struct InheritTap : UnitTap {
    const SkipPlan* plan;
    StepRole role;
    FeatureStore* store;
    int step_index;
    SubstitutionLog* log = nullptr;

    InheritTap(const SkipPlan& p, StepRole r, FeatureStore& s, int step, SubstitutionLog* lg = nullptr)
        : plan(&p), role(r), store(&s), step_index(step), log(lg) {}

    const Tensor* substitute(const SiteId& site, const Tensor& identity_input) override;
    void observe(const SiteId& site, const Tensor& residual, const Tensor& identity_input,
                 const Tensor& out) override;
};

Tensor inherited_forward(const UNet& unet, const Tensor& x_t, int t, const Tensor& cond,
                         const SkipPlan& plan, StepRole role, FeatureStore& store, int step_index,
                         SubstitutionLog* log = nullptr);

// Sampling-run context: plan, mode, and one store per guidance branch.
struct InheritContext {
    SkipPlan plan;
    SamplingMode mode;
    FeatureStore store_uncond, store_cond;
    SubstitutionLog* log = nullptr;

    StepRole role_for_step(int step) const;
};

// Analytic multiply-accumulate accounting for a plan under a mode.
struct FlopReport {
    long long baseline_per_step = 0;
    long long skipped_per_inherit_step = 0;
    std::vector<long long> per_step;
    double total_saved_fraction = 0.0;
};

FlopReport flop_estimate(const UNetConfig& config, const SkipPlan& plan, const SamplingMode& mode);

}  // namespace asdm

#endif

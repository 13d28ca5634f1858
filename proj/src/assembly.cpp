#include "asdm/assembly.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

#include "asdm/kernels.hpp"

namespace asdm {

CompressKind parse_compress_kind(const std::string& name) {
    if (name == "base") return CompressKind::base;
    if (name == "small") return CompressKind::small;
    if (name == "tiny") return CompressKind::tiny;
    throw std::invalid_argument("unknown compressed model kind '" + name +
                                "' (expected base, small, or tiny)");
}

const char* compress_kind_name(CompressKind k) {
    switch (k) {
        case CompressKind::base: return "base";
        case CompressKind::small: return "small";
        case CompressKind::tiny: return "tiny";
    }
    return "?";
}

namespace {

// The compression recipes assume the standard block arrangement.
void require_standard_structure(const UNetConfig& c) {
    UNetConfig ref = UNetConfig::standard_toy();
    auto same = [](const std::vector<BlockSpec>& a, const std::vector<BlockSpec>& b) {
        if (a.size() != b.size()) return false;
        for (size_t i = 0; i < a.size(); i++) {
            if (a[i].name != b[i].name || a[i].layers != b[i].layers ||
                a[i].with_attention != b[i].with_attention ||
                a[i].resolution_change != b[i].resolution_change) {
                return false;
            }
        }
        return true;
    };
    if (!same(c.down_blocks, ref.down_blocks) || !same(c.up_blocks, ref.up_blocks) ||
        !c.has_middle || c.middle_spec.layers != ref.middle_spec.layers ||
        !c.middle_spec.with_attention) {
        throw std::invalid_argument("compress_config: input is not the standard architecture");
    }
}

}  // namespace

UNetConfig compress_config(CompressKind kind, const UNetConfig& full) {
    require_standard_structure(full);
    UNetConfig c = full;
    for (auto& b : c.down_blocks) b.layers -= 1;
    for (auto& b : c.up_blocks) b.layers -= 1;
    if (kind == CompressKind::small || kind == CompressKind::tiny) {
        c.has_middle = false;
        c.middle_spec = BlockSpec{};
    }
    if (kind == CompressKind::tiny) {
        c.down_blocks.pop_back();                                   // dn3
        c.down_blocks.back().resolution_change = ResChange::none;   // dn2 is now deepest
        c.up_blocks.erase(c.up_blocks.begin());                     // up0
    }
    c.validate();
    return c;
}

namespace {

// Which teacher layer a retained student layer copies. Down blocks prune
// index 1 of 2 (keep 0); up blocks prune index 1 of 3 (keep 0 and 2).
int teacher_layer_for(const BlockSpec& student_block, const BlockSpec& teacher_block, int j) {
    if (student_block.layers == teacher_block.layers) return j;
    if (teacher_block.layers == student_block.layers + 1) return (j == 0) ? 0 : j + 1;
    throw std::invalid_argument("no layer retention mapping for block " + student_block.name);
}

const BlockSpec* find_spec(const UNetConfig& c, const std::string& name) {
    for (const auto& b : c.down_blocks) {
        if (b.name == name) return &b;
    }
    for (const auto& b : c.up_blocks) {
        if (b.name == name) return &b;
    }
    if (c.has_middle && c.middle_spec.name == name) return &c.middle_spec;
    return nullptr;
}

// Teacher param name corresponding to a student param name, or empty when the
// student structure has no counterpart.
std::string teacher_param_name(const std::string& student_name, const UNetConfig& student_cfg,
                               const UNetConfig& teacher_cfg) {
    size_t l = student_name.find(".l");
    if (l == std::string::npos) return student_name;  // stem/head/global params
    size_t dot = student_name.find('.', l + 2);
    if (dot == std::string::npos) return student_name;
    std::string block = student_name.substr(0, l);
    const BlockSpec* sb = find_spec(student_cfg, block);
    const BlockSpec* tb = find_spec(teacher_cfg, block);
    if (!sb || !tb) return "";
    int j = std::stoi(student_name.substr(l + 2, dot - l - 2));
    int tj = teacher_layer_for(*sb, *tb, j);
    return block + ".l" + std::to_string(tj) + student_name.substr(dot);
}

}  // namespace

UNet init_student_from_teacher(const UNetConfig& student_cfg, const UNet& teacher,
                               uint64_t seam_seed) {
    student_cfg.validate();
    UNet student = build_unet(student_cfg, seam_seed);
    for (auto& [name, v] : student.params) {
        std::string tname = teacher_param_name(name, student_cfg, teacher.config);
        if (tname.empty() || !teacher.has_param(tname)) continue;
        const Tensor& tv = teacher.p(tname)->val;
        if (tv.shape == v->val.shape) v->val = tv;
    }
    return student;
}

std::vector<std::string> student_seam_census(const UNetConfig& student_cfg, const UNet& teacher) {
    std::vector<std::string> seams;
    for (const auto& [name, shape] : param_shapes(student_cfg)) {
        std::string tname = teacher_param_name(name, student_cfg, teacher.config);
        if (tname.empty() || !teacher.has_param(tname) ||
            teacher.p(tname)->val.shape != shape) {
            seams.push_back(name);
        }
    }
    return seams;
}

AssemblyScheme AssemblyScheme::m1(bool freeze) { return {"M1", {"dn0", "up3"}, freeze}; }
AssemblyScheme AssemblyScheme::m2(bool freeze) {
    return {"M2", {"dn0", "dn1", "up2", "up3"}, freeze};
}
AssemblyScheme AssemblyScheme::m3(bool freeze) {
    return {"M3", {"dn0", "dn1", "dn2", "up1", "up2", "up3"}, freeze};
}

AssemblyScheme AssemblyScheme::by_name(const std::string& name, bool freeze) {
    if (name == "M1" || name == "m1") return m1(freeze);
    if (name == "M2" || name == "m2") return m2(freeze);
    if (name == "M3" || name == "m3") return m3(freeze);
    throw std::invalid_argument("unknown assembly scheme '" + name + "' (expected M1, M2, or M3)");
}

UNet assemble(const UNet& student, const UNet& teacher, const AssemblyScheme& scheme) {
    // the partition must name student blocks that exist on both sides
    for (const std::string& b : scheme.student_blocks) {
        if (!find_spec(student.config, b)) {
            throw std::invalid_argument("assemble: student has no block '" + b + "'");
        }
        if (!find_spec(teacher.config, b)) {
            throw std::invalid_argument("assemble: teacher has no block '" + b + "'");
        }
    }

    UNetConfig cfg = teacher.config;
    auto pick = [&](BlockSpec& spec) {
        if (scheme.student_blocks.count(spec.name)) {
            spec = *find_spec(student.config, spec.name);
        }
    };
    for (auto& b : cfg.down_blocks) pick(b);
    for (auto& b : cfg.up_blocks) pick(b);
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("assemble: partition does not elaborate: ") +
                                    e.what());
    }

    UNet out;
    out.config = cfg;
    out.layout = elaborate(cfg);
    for (const auto& [name, shape] : param_shapes(cfg)) {
        size_t l = name.find(".l");
        std::string block = (l != std::string::npos) ? name.substr(0, l) : "";
        size_t dsus = name.find(".downsample");
        if (dsus == std::string::npos) dsus = name.find(".upsample");
        if (block.empty() && dsus != std::string::npos) block = name.substr(0, dsus);

        bool from_student = block.empty() || scheme.student_blocks.count(block) != 0;
        const UNet& src = from_student ? student : teacher;
        if (!src.has_param(name)) {
            throw std::invalid_argument("assemble: source model lacks parameter " + name);
        }
        const Tensor& sv = src.p(name)->val;
        if (sv.shape != shape) {
            throw std::invalid_argument("assemble: boundary shape mismatch at " + name + " (" +
                                        sv.shape_str() + ")");
        }
        out.params.emplace(name, ag::param(sv));
        if (!from_student && scheme.freeze_teacher_part) out.freeze_mask.insert(name);
    }
    return out;
}

namespace {

struct SampleLosses {
    ag::Value total;
    double task = 0, kd = 0, feat = 0;
    int excluded = 0;
};

SampleLosses per_sample_losses(const UNet& teacher, const UNet& student, const Tensor& x0,
                               int class_id, const NoiseSchedule& sched, const DistillConfig& cfg,
                               Rng& rng) {
    const int t = rng.uniform_int(0, sched.T() - 1);
    Tensor eps({x0.shape});
    for (float& v : eps.data) v = rng.gaussian();
    Tensor x_t = add_noise(x0, t, eps, sched);
    const int embed_t = sched.timestep_values[(size_t)t];

    // teacher pass produces constants
    std::map<std::string, ag::Value> t_blocks;
    Tensor t_eps;
    {
        ag::NoGradGuard ng;
        ForwardOptions topts;
        topts.block_outputs = &t_blocks;
        t_eps = teacher.forward(x_t, embed_t, teacher.cond_tokens(class_id), topts);
    }

    std::map<std::string, ag::Value> s_blocks;
    ForwardOptions sopts;
    sopts.block_outputs = &s_blocks;
    ag::Value s_eps = student.forward_ag(ag::constant(x_t), embed_t,
                                         student.cond_tokens_ag(class_id), sopts);

    SampleLosses out;
    ag::Value l_task = ag::mse_vs(s_eps, eps);
    ag::Value l_kd = ag::mse_vs(s_eps, t_eps);
    ag::Value l_feat;
    for (const auto& [name, sv] : s_blocks) {
        auto it = t_blocks.find(name);
        if (it == t_blocks.end()) continue;  // block absent from the teacher
        if (it->second->val.shape != sv->val.shape) {
            std::cerr << "distill: block " << name << " shapes disagree ("
                      << sv->val.shape_str() << " vs " << it->second->val.shape_str()
                      << "), excluded from the feature loss\n";
            out.excluded++;
            continue;
        }
        ag::Value m = ag::mse_vs(sv, it->second->val);
        l_feat = l_feat ? ag::add(l_feat, m) : m;
    }
    if (!l_feat) l_feat = ag::constant(Tensor::scalar(0.0f));

    out.task = l_task->val.data[0];
    out.kd = l_kd->val.data[0];
    out.feat = l_feat->val.data[0];
    out.total = ag::add(ag::add(ag::scale(l_task, cfg.w_task), ag::scale(l_kd, cfg.w_kd)),
                        ag::scale(l_feat, cfg.w_feat));
    return out;
}

LossReport run_batch(const UNet& teacher, UNet& student, const DistillBatch& batch,
                     const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng, bool update) {
    if (batch.x0.empty() || batch.x0.size() != batch.class_ids.size()) {
        throw std::invalid_argument("distill: malformed batch");
    }
    LossReport rep;
    ag::Value loss;
    for (size_t i = 0; i < batch.x0.size(); i++) {
        SampleLosses s = per_sample_losses(teacher, student, batch.x0[i], batch.class_ids[i],
                                           sched, cfg, rng);
        rep.task += s.task;
        rep.kd += s.kd;
        rep.feat += s.feat;
        rep.excluded_blocks += s.excluded;
        loss = loss ? ag::add(loss, s.total) : s.total;
    }
    const double inv = 1.0 / (double)batch.x0.size();
    loss = ag::scale(loss, inv);
    rep.task *= inv;
    rep.kd *= inv;
    rep.feat *= inv;
    rep.total = cfg.w_task * rep.task + cfg.w_kd * rep.kd + cfg.w_feat * rep.feat;

    if (update) {
        ag::backward(loss);
        for (auto& [name, p] : student.params) {
            if (student.freeze_mask.count(name)) continue;
            if (p->grad.empty()) continue;
            for (size_t i = 0; i < p->val.data.size(); i++) {
                p->val.data[i] -= (float)(cfg.lr * (double)p->grad.data[i]);
            }
        }
    }
    for (auto& [name, p] : student.params) p->grad = Tensor();
    return rep;
}

}  // namespace

LossReport distill_step(const UNet& teacher, UNet& student, const DistillBatch& batch,
                        const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
    return run_batch(teacher, student, batch, sched, cfg, rng, true);
}

LossReport distill_eval(const UNet& teacher, const UNet& student, const DistillBatch& batch,
                        const NoiseSchedule& sched, const DistillConfig& cfg, Rng& rng) {
    return run_batch(teacher, const_cast<UNet&>(student), batch, sched, cfg, rng, false);
}

namespace {

// Fixed RGB -> latent projection for the procedural dataset.
constexpr float kRgbToLatent[4][3] = {
    {0.6f, -0.2f, 0.1f},
    {-0.3f, 0.5f, 0.2f},
    {0.1f, 0.3f, -0.6f},
    {0.4f, 0.4f, 0.4f},
};

void paint(Tensor& rgb, int y, int x, float r, float g, float b) {
    const int S = rgb.shape[2];
    rgb.data[((size_t)0 * S + y) * S + x] = r;
    rgb.data[((size_t)1 * S + y) * S + x] = g;
    rgb.data[((size_t)2 * S + y) * S + x] = b;
}

}  // namespace

ToyDataset make_toy_dataset(uint64_t seed, int K, int n_samples, int image_size,
                            int latent_channels) {
    if (K < 2) throw std::invalid_argument("toy dataset: need at least two classes");
    if (n_samples < 1) throw std::invalid_argument("toy dataset: need at least one sample");
    ToyDataset d;
    d.seed = seed;
    d.K = K;
    d.image_size = image_size;
    Rng rng(seed);
    const int S = image_size;

    for (int i = 0; i < n_samples; i++) {
        const int cls = i % K;  // round-robin keeps the class histogram flat
        const double hue = (double)cls / K * 6.28318530717958647692;
        const float cr = 0.5f + 0.5f * (float)std::cos(hue);
        const float cg = 0.5f + 0.5f * (float)std::cos(hue - 2.0944);
        const float cb = 0.5f + 0.5f * (float)std::cos(hue + 2.0944);

        Tensor rgb({3, S, S});
        const double cy = S / 2.0 + rng.gaussian() * S / 12.0;
        const double cx = S / 2.0 + rng.gaussian() * S / 12.0;
        const double rad = S / 4.0 + rng.gaussian() * S / 16.0;
        const int shape_kind = cls % 4;
        for (int y = 0; y < S; y++) {
            for (int x = 0; x < S; x++) {
                const double dy = y - cy, dx = x - cx;
                bool inside = false;
                switch (shape_kind) {
                    case 0: inside = dy * dy + dx * dx <= rad * rad; break;                 // disc
                    case 1: inside = std::max(std::fabs(dy), std::fabs(dx)) <= rad; break;  // square
                    case 2: inside = std::fabs(dy) + std::fabs(dx) <= rad; break;           // diamond
                    case 3:
                        inside = std::fabs(dy) <= rad / 3.0 || std::fabs(dx) <= rad / 3.0;  // cross
                        break;
                }
                if (inside) paint(rgb, y, x, cr, cg, cb);
            }
        }

        Tensor latent({latent_channels, S, S});
        for (int c = 0; c < latent_channels && c < 4; c++) {
            for (int p = 0; p < S * S; p++) {
                double acc = 0.0;
                for (int rc = 0; rc < 3; rc++) {
                    acc += (double)kRgbToLatent[c][rc] * (double)rgb.data[(size_t)rc * S * S + p];
                }
                latent.data[(size_t)c * S * S + p] = (float)acc;
            }
        }
        d.latents.push_back(std::move(latent));
        d.classes.push_back(cls);
    }
    return d;
}

DistillBatch draw_batch(const ToyDataset& data, int batch, Rng& rng) {
    DistillBatch b;
    for (int i = 0; i < batch; i++) {
        int idx = rng.uniform_int(0, (int)data.latents.size() - 1);
        const Tensor& lat = data.latents[(size_t)idx];
        Tensor x0({1, lat.shape[0], lat.shape[1], lat.shape[2]});
        x0.data = lat.data;
        b.x0.push_back(std::move(x0));
        b.class_ids.push_back(data.classes[(size_t)idx]);
    }
    return b;
}

std::vector<LossReport> distill_run(const UNet& teacher, UNet& student, const ToyDataset& data,
                                    const NoiseSchedule& sched, const DistillConfig& cfg) {
    Rng rng(cfg.seed);
    std::vector<LossReport> history;
    for (int it = 0; it < cfg.iters; it++) {
        DistillBatch batch = draw_batch(data, cfg.batch, rng);
        history.push_back(distill_step(teacher, student, batch, sched, cfg, rng));
    }
    return history;
}

std::vector<LossReport> pretrain_run(UNet& model, const ToyDataset& data,
                                     const NoiseSchedule& sched, const DistillConfig& cfg) {
    Rng rng(cfg.seed);
    std::vector<LossReport> history;
    for (int it = 0; it < cfg.iters; it++) {
        DistillBatch batch = draw_batch(data, cfg.batch, rng);
        LossReport rep;
        ag::Value loss;
        for (size_t i = 0; i < batch.x0.size(); i++) {
            const int t = rng.uniform_int(0, sched.T() - 1);
            Tensor eps(batch.x0[i].shape);
            for (float& v : eps.data) v = rng.gaussian();
            Tensor x_t = add_noise(batch.x0[i], t, eps, sched);
            ag::Value s_eps =
                model.forward_ag(ag::constant(x_t), sched.timestep_values[(size_t)t],
                                 model.cond_tokens_ag(batch.class_ids[i]));
            ag::Value l = ag::mse_vs(s_eps, eps);
            rep.task += l->val.data[0];
            loss = loss ? ag::add(loss, l) : l;
        }
        const double inv = 1.0 / (double)batch.x0.size();
        loss = ag::scale(loss, inv);
        rep.task *= inv;
        rep.total = rep.task;
        ag::backward(loss);
        for (auto& [name, p] : model.params) {
            if (model.freeze_mask.count(name) || p->grad.empty()) continue;
            for (size_t i = 0; i < p->val.data.size(); i++) {
                p->val.data[i] -= (float)(cfg.lr * (double)p->grad.data[i]);
            }
            p->grad = Tensor();
        }
        for (auto& [name, p] : model.params) p->grad = Tensor();
        history.push_back(rep);
    }
    return history;
}

}  // namespace asdm

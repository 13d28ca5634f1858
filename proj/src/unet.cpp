#include "asdm/unet.hpp"

#include <cmath>
#include <deque>
#include <sstream>
#include <stdexcept>

#include "asdm/kernels.hpp"

namespace asdm {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

constexpr float kNormEps = 1e-5f;

}  // namespace

std::string SiteId::str() const {
    std::ostringstream os;
    os << block << ".l" << layer << "." << (unit == UnitKind::RES ? "res" : "attn");
    return os.str();
}

SiteId SiteId::parse(const std::string& text) {
    SiteId s;
    size_t a = text.find(".l");
    size_t b = text.rfind('.');
    require(a != std::string::npos && b != std::string::npos && b > a + 1, "bad site id: " + text);
    s.block = text.substr(0, a);
    s.layer = std::stoi(text.substr(a + 2, b - a - 2));
    std::string kind = text.substr(b + 1);
    if (kind == "res") {
        s.unit = UnitKind::RES;
    } else if (kind == "attn") {
        s.unit = UnitKind::ATTN;
    } else {
        throw std::invalid_argument("bad unit kind in site id: " + text);
    }
    return s;
}

bool operator==(const BlockSpec& a, const BlockSpec& b) {
    return a.name == b.name && a.layers == b.layers && a.with_attention == b.with_attention &&
           a.resolution_change == b.resolution_change && a.depth == b.depth;
}

UNetConfig UNetConfig::standard_toy() {
    UNetConfig c;
    c.base_channels = {32, 64, 128, 128};
    c.down_blocks = {
        {"dn0", 2, true, ResChange::down, 0},
        {"dn1", 2, true, ResChange::down, 1},
        {"dn2", 2, true, ResChange::down, 2},
        {"dn3", 2, false, ResChange::none, 3},
    };
    c.has_middle = true;
    c.middle_spec = {"mid", 2, true, ResChange::none, 3};
    c.up_blocks = {
        {"up0", 3, false, ResChange::up, 3},
        {"up1", 3, true, ResChange::up, 2},
        {"up2", 3, true, ResChange::up, 1},
        {"up3", 3, true, ResChange::none, 0},
    };
    return c;
}

void UNetConfig::validate() const {
    require(!base_channels.empty(), "config: base_channels empty");
    require(!down_blocks.empty() && !up_blocks.empty(), "config: need down and up blocks");
    require(latent_channels >= 1 && latent_size >= 2, "config: bad latent geometry");
    require(cond_dim >= 1 && cond_tokens >= 1 && cond_classes >= 1, "config: bad conditioning");
    require(time_embed_dim >= 2 && time_embed_dim % 2 == 0, "config: time_embed_dim must be even");
    require(attn_heads >= 1, "config: attn_heads must be >= 1");
    require(norm_groups >= 1, "config: norm_groups must be >= 1");
    require(n_experts >= 0, "config: n_experts must be >= 0");

    auto check_block = [&](const BlockSpec& b, bool is_mid) {
        require(!b.name.empty(), "config: block without a name");
        require(b.layers >= 1 && b.layers <= 4, "config: block " + b.name + " layer count " +
                                                    std::to_string(b.layers) + " outside 1..4");
        require(b.depth >= 0 && b.depth < (int)base_channels.size(),
                "config: block " + b.name + " depth out of range");
        int ch = base_channels[b.depth];
        require(ch % norm_groups == 0,
                "config: channels of block " + b.name + " not divisible by norm_groups");
        if (b.with_attention) {
            require(ch % attn_heads == 0,
                    "config: channels of block " + b.name + " not divisible by attn_heads");
        }
        if (is_mid) {
            require(b.resolution_change == ResChange::none,
                    "config: middle block cannot change resolution");
        }
    };
    for (const auto& b : down_blocks) {
        check_block(b, false);
        require(b.resolution_change != ResChange::up, "config: down block cannot upsample");
    }
    for (const auto& b : up_blocks) {
        check_block(b, false);
        require(b.resolution_change != ResChange::down, "config: up block cannot downsample");
    }
    if (has_middle) check_block(middle_spec, true);

    std::set<std::string> names;
    auto add_name = [&](const std::string& n) {
        require(names.insert(n).second, "config: duplicate block name " + n);
    };
    for (const auto& b : down_blocks) add_name(b.name);
    for (const auto& b : up_blocks) add_name(b.name);
    if (has_middle) add_name(middle_spec.name);

    elaborate(*this);  // resolution chain and skip bookkeeping must balance
}

namespace {

long long res_unit_mac_count(int in_ch, int out_ch, int h, int w, int time_embed_dim,
                             int n_experts) {
    long long hw = (long long)h * w;
    long long macs = hw * out_ch * in_ch * 9          // conv1
                     + (long long)time_embed_dim * out_ch
                     + hw * out_ch * out_ch * 9;      // conv2
    if (n_experts > 0) {
        long long bank1 = (long long)in_ch * n_experts +
                          (long long)n_experts * ((long long)out_ch * in_ch * 9 + out_ch);
        long long bank2 = (long long)out_ch * n_experts +
                          (long long)n_experts * ((long long)out_ch * out_ch * 9 + out_ch);
        macs += bank1 + bank2;
    }
    return macs;
}

long long attn_unit_mac_count(int ch, int h, int w, int cond_tokens, int cond_dim) {
    long long hw = (long long)h * w;
    long long macs = 0;
    macs += hw * ch * ch;                       // proj_in
    macs += 3 * hw * ch * ch;                   // self-attention q,k,v
    macs += 2 * hw * hw * ch;                   // self-attention scores + context
    macs += hw * ch * ch;                       // self-attention out
    macs += hw * ch * ch;                       // cross-attention q
    macs += 2LL * cond_tokens * cond_dim * ch;  // cross-attention k,v
    macs += 2 * hw * cond_tokens * ch;          // cross-attention scores + context
    macs += hw * ch * ch;                       // cross-attention out
    macs += 2 * hw * ch * (4LL * ch);           // feed-forward
    macs += hw * ch * ch;                       // proj_out
    return macs;
}

struct SkipEntry {
    int ch, h, w;
};

}  // namespace

NetLayout elaborate(const UNetConfig& cfg) {
    NetLayout net;
    const int S = cfg.latent_size;
    int h = S, w = S;
    int ch = cfg.base_channels[cfg.down_blocks.front().depth];

    net.conv_in_macs = (long long)h * w * cfg.latent_channels * ch * 9;
    net.time_embed_macs = 2LL * cfg.time_embed_dim * cfg.time_embed_dim;

    std::deque<SkipEntry> stack;
    stack.push_back({ch, h, w});  // conv_in output

    for (const auto& b : cfg.down_blocks) {
        BlockLayout bl;
        bl.name = b.name;
        bl.kind = BlockLayout::Kind::down;
        int out_ch = cfg.base_channels[b.depth];
        for (int j = 0; j < b.layers; j++) {
            int in_ch = (j == 0) ? ch : out_ch;
            UnitLayout res;
            res.site = {b.name, j, UnitKind::RES};
            res.in_ch = in_ch;
            res.out_ch = out_ch;
            res.h = h;
            res.w = w;
            res.shortcut_conv = (in_ch != out_ch);
            res.residual_macs =
                res_unit_mac_count(in_ch, out_ch, h, w, cfg.time_embed_dim, cfg.n_experts);
            res.shortcut_macs = res.shortcut_conv ? (long long)h * w * out_ch * in_ch : 0;
            bl.units.push_back(res);
            if (b.with_attention) {
                UnitLayout at;
                at.site = {b.name, j, UnitKind::ATTN};
                at.in_ch = at.out_ch = out_ch;
                at.h = h;
                at.w = w;
                at.residual_macs = attn_unit_mac_count(out_ch, h, w, cfg.cond_tokens, cfg.cond_dim);
                bl.units.push_back(at);
            }
            stack.push_back({out_ch, h, w});
        }
        ch = out_ch;
        if (b.resolution_change == ResChange::down) {
            require(h % 2 == 0 && w % 2 == 0, "elaborate: odd resolution before downsample");
            h /= 2;
            w /= 2;
            bl.resize = {true, true, ch, h, w, (long long)h * w * ch * ch * 9};
            stack.push_back({ch, h, w});
        }
        bl.out_ch = ch;
        bl.out_h = h;
        bl.out_w = w;
        net.blocks.push_back(std::move(bl));
    }

    if (cfg.has_middle) {
        const auto& b = cfg.middle_spec;
        int out_ch = cfg.base_channels[b.depth];
        require(out_ch == ch, "elaborate: middle block channels must match the deepest down block");
        BlockLayout bl;
        bl.name = b.name;
        bl.kind = BlockLayout::Kind::mid;
        for (int j = 0; j < b.layers; j++) {
            UnitLayout res;
            res.site = {b.name, j, UnitKind::RES};
            res.in_ch = res.out_ch = out_ch;
            res.h = h;
            res.w = w;
            res.residual_macs =
                res_unit_mac_count(out_ch, out_ch, h, w, cfg.time_embed_dim, cfg.n_experts);
            bl.units.push_back(res);
            if (j == 0 && b.with_attention) {
                UnitLayout at;
                at.site = {b.name, j, UnitKind::ATTN};
                at.in_ch = at.out_ch = out_ch;
                at.h = h;
                at.w = w;
                at.residual_macs = attn_unit_mac_count(out_ch, h, w, cfg.cond_tokens, cfg.cond_dim);
                bl.units.push_back(at);
            }
        }
        bl.out_ch = ch;
        bl.out_h = h;
        bl.out_w = w;
        net.blocks.push_back(std::move(bl));
    }

    for (const auto& b : cfg.up_blocks) {
        BlockLayout bl;
        bl.name = b.name;
        bl.kind = BlockLayout::Kind::up;
        int out_ch = cfg.base_channels[b.depth];
        for (int j = 0; j < b.layers; j++) {
            require(!stack.empty(), "elaborate: up block " + b.name + " pops an empty skip stack");
            SkipEntry s = stack.back();
            stack.pop_back();
            require(s.h == h && s.w == w,
                    "elaborate: skip resolution mismatch at " + b.name + ".l" + std::to_string(j));
            int in_ch = ch + s.ch;
            UnitLayout res;
            res.site = {b.name, j, UnitKind::RES};
            res.in_ch = in_ch;
            res.out_ch = out_ch;
            res.h = h;
            res.w = w;
            res.skip_ch = s.ch;
            res.shortcut_conv = (in_ch != out_ch);
            res.residual_macs =
                res_unit_mac_count(in_ch, out_ch, h, w, cfg.time_embed_dim, cfg.n_experts);
            res.shortcut_macs = res.shortcut_conv ? (long long)h * w * out_ch * in_ch : 0;
            bl.units.push_back(res);
            if (b.with_attention) {
                UnitLayout at;
                at.site = {b.name, j, UnitKind::ATTN};
                at.in_ch = at.out_ch = out_ch;
                at.h = h;
                at.w = w;
                at.residual_macs = attn_unit_mac_count(out_ch, h, w, cfg.cond_tokens, cfg.cond_dim);
                bl.units.push_back(at);
            }
            ch = out_ch;
        }
        if (b.resolution_change == ResChange::up) {
            h *= 2;
            w *= 2;
            bl.resize = {true, false, ch, h, w, (long long)h * w * ch * ch * 9};
        }
        bl.out_ch = ch;
        bl.out_h = h;
        bl.out_w = w;
        net.blocks.push_back(std::move(bl));
    }

    require(stack.empty(),
            "elaborate: " + std::to_string(stack.size()) + " skip connections left unconsumed");
    require(h == S && w == S, "elaborate: output resolution does not return to the latent size");

    net.conv_out_macs = (long long)h * w * ch * cfg.latent_channels * 9;
    net.total_macs = net.conv_in_macs + net.conv_out_macs + net.time_embed_macs;
    for (const auto& bl : net.blocks) {
        for (const auto& u : bl.units) net.total_macs += u.residual_macs + u.shortcut_macs;
        if (bl.resize.present) net.total_macs += bl.resize.macs;
    }
    return net;
}

const UnitLayout* NetLayout::find_unit(const SiteId& site) const {
    for (const auto& bl : blocks) {
        if (bl.name != site.block) continue;
        for (const auto& u : bl.units) {
            if (u.site == site) return &u;
        }
    }
    return nullptr;
}

const BlockLayout* NetLayout::find_block(const std::string& name) const {
    for (const auto& bl : blocks) {
        if (bl.name == name) return &bl;
    }
    return nullptr;
}

std::map<std::string, UnitCensus> unit_census(const UNetConfig& cfg) {
    NetLayout net = elaborate(cfg);
    std::map<std::string, UnitCensus> census;
    for (const auto& bl : net.blocks) {
        UnitCensus& c = census[bl.name];
        for (const auto& u : bl.units) {
            if (u.site.unit == UnitKind::RES) {
                c.res_units++;
            } else {
                c.attn_units++;
            }
        }
    }
    return census;
}

namespace {

using Shapes = std::vector<std::pair<std::string, std::vector<int>>>;

void conv3x3_shapes(Shapes& out, const std::string& prefix, int in_ch, int out_ch, int n_experts) {
    if (n_experts > 0) {
        for (int e = 0; e < n_experts; e++) {
            std::string base = prefix + ".expert" + std::to_string(e);
            out.push_back({base + ".w", {out_ch, in_ch, 3, 3}});
            out.push_back({base + ".b", {out_ch}});
        }
        out.push_back({prefix + ".router", {in_ch, n_experts}});
    } else {
        out.push_back({prefix + ".w", {out_ch, in_ch, 3, 3}});
        out.push_back({prefix + ".b", {out_ch}});
    }
}

void res_unit_shapes(Shapes& out, const std::string& prefix, const UnitLayout& u,
                     const UNetConfig& cfg) {
    out.push_back({prefix + ".gn1.g", {u.in_ch}});
    out.push_back({prefix + ".gn1.b", {u.in_ch}});
    conv3x3_shapes(out, prefix + ".conv1", u.in_ch, u.out_ch, cfg.n_experts);
    out.push_back({prefix + ".temb.w", {u.out_ch, cfg.time_embed_dim}});
    out.push_back({prefix + ".temb.b", {u.out_ch}});
    out.push_back({prefix + ".gn2.g", {u.out_ch}});
    out.push_back({prefix + ".gn2.b", {u.out_ch}});
    conv3x3_shapes(out, prefix + ".conv2", u.out_ch, u.out_ch, cfg.n_experts);
    if (u.shortcut_conv) {
        out.push_back({prefix + ".skip.w", {u.out_ch, u.in_ch, 1, 1}});
        out.push_back({prefix + ".skip.b", {u.out_ch}});
    }
}

void attn_unit_shapes(Shapes& out, const std::string& prefix, const UnitLayout& u,
                      const UNetConfig& cfg) {
    const int ch = u.out_ch;
    out.push_back({prefix + ".gn.g", {ch}});
    out.push_back({prefix + ".gn.b", {ch}});
    out.push_back({prefix + ".proj_in.w", {ch, ch, 1, 1}});
    out.push_back({prefix + ".proj_in.b", {ch}});
    out.push_back({prefix + ".ln1.g", {ch}});
    out.push_back({prefix + ".ln1.b", {ch}});
    out.push_back({prefix + ".sa.q.w", {ch, ch}});
    out.push_back({prefix + ".sa.k.w", {ch, ch}});
    out.push_back({prefix + ".sa.v.w", {ch, ch}});
    out.push_back({prefix + ".sa.o.w", {ch, ch}});
    out.push_back({prefix + ".sa.o.b", {ch}});
    out.push_back({prefix + ".ln2.g", {ch}});
    out.push_back({prefix + ".ln2.b", {ch}});
    out.push_back({prefix + ".ca.q.w", {ch, ch}});
    out.push_back({prefix + ".ca.k.w", {ch, cfg.cond_dim}});
    out.push_back({prefix + ".ca.v.w", {ch, cfg.cond_dim}});
    out.push_back({prefix + ".ca.o.w", {ch, ch}});
    out.push_back({prefix + ".ca.o.b", {ch}});
    out.push_back({prefix + ".ln3.g", {ch}});
    out.push_back({prefix + ".ln3.b", {ch}});
    out.push_back({prefix + ".ff.fc1.w", {4 * ch, ch}});
    out.push_back({prefix + ".ff.fc1.b", {4 * ch}});
    out.push_back({prefix + ".ff.fc2.w", {ch, 4 * ch}});
    out.push_back({prefix + ".ff.fc2.b", {ch}});
    out.push_back({prefix + ".proj_out.w", {ch, ch, 1, 1}});
    out.push_back({prefix + ".proj_out.b", {ch}});
}

}  // namespace

std::vector<std::pair<std::string, std::vector<int>>> param_shapes(const UNetConfig& cfg) {
    NetLayout net = elaborate(cfg);
    Shapes out;
    const int ch0 = cfg.base_channels[cfg.down_blocks.front().depth];
    out.push_back({"conv_in.w", {ch0, cfg.latent_channels, 3, 3}});
    out.push_back({"conv_in.b", {ch0}});
    out.push_back({"time_embed.fc1.w", {cfg.time_embed_dim, cfg.time_embed_dim}});
    out.push_back({"time_embed.fc1.b", {cfg.time_embed_dim}});
    out.push_back({"time_embed.fc2.w", {cfg.time_embed_dim, cfg.time_embed_dim}});
    out.push_back({"time_embed.fc2.b", {cfg.time_embed_dim}});
    out.push_back({"cond_embed", {cfg.cond_classes + 1, cfg.cond_tokens * cfg.cond_dim}});

    for (const auto& bl : net.blocks) {
        for (const auto& u : bl.units) {
            std::string prefix = u.site.str();
            if (u.site.unit == UnitKind::RES) {
                res_unit_shapes(out, prefix, u, cfg);
            } else {
                attn_unit_shapes(out, prefix, u, cfg);
            }
        }
        if (bl.resize.present) {
            std::string nm = bl.name + (bl.resize.is_down ? ".downsample" : ".upsample");
            out.push_back({nm + ".w", {bl.resize.ch, bl.resize.ch, 3, 3}});
            out.push_back({nm + ".b", {bl.resize.ch}});
        }
    }

    const int chL = net.blocks.back().out_ch;
    out.push_back({"out_norm.g", {chL}});
    out.push_back({"out_norm.b", {chL}});
    out.push_back({"conv_out.w", {cfg.latent_channels, chL, 3, 3}});
    out.push_back({"conv_out.b", {cfg.latent_channels}});
    return out;
}

UNet build_unet(const UNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    UNet u;
    u.config = cfg;
    u.layout = elaborate(cfg);
    Rng rng(seed);

    auto ends_with = [](const std::string& s, const std::string& suf) {
        return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
    };

    for (const auto& [name, shape] : param_shapes(cfg)) {
        Tensor t(shape);
        const bool random_expert =
            name.find(".expert") != std::string::npos && name.find(".expert0.") == std::string::npos;
        if (name == "conv_out.w" || name == "conv_out.b") {
            // stays zero: a fresh model predicts zero noise
        } else if (ends_with(name, ".router")) {
            // stays zero: initial routing weights sit at sigmoid(0) = 0.5
        } else if (name == "cond_embed") {
            for (float& v : t.data) v = rng.gaussian() * 0.02f;
        } else if (ends_with(name, ".g")) {
            for (float& v : t.data) v = 1.0f;
        } else if (ends_with(name, ".w")) {
            float sc;
            if (shape.size() == 4) {
                long long fan_in = (long long)shape[1] * shape[2] * shape[3];
                // gain 2 only behind SiLU; identity-path convs keep unit gain
                bool after_silu = name.find(".conv1.") != std::string::npos ||
                                  name.find(".conv2.") != std::string::npos;
                sc = std::sqrt((after_silu ? 2.0f : 1.0f) / (float)fan_in);
            } else {
                sc = 1.0f / std::sqrt((float)shape[1]);
            }
            if (random_expert) sc *= 0.1f;
            for (float& v : t.data) v = rng.gaussian() * sc;
        }
        // .b entries stay zero
        u.params.emplace(name, ag::param(std::move(t)));
    }
    return u;
}

const ag::Value& UNet::p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("missing parameter: " + name);
    return it->second;
}

long long UNet::param_count() const {
    long long n = 0;
    for (const auto& [name, v] : params) n += v->val.numel();
    return n;
}

Tensor sinusoidal_embedding(int t, int dim) {
    Tensor e({1, dim});
    const int half = dim / 2;
    const double log_base = std::log(10000.0) / (double)half;
    for (int i = 0; i < half; i++) {
        const double freq = std::exp(-(double)i * log_base);
        const double angle = (double)t * freq;
        e.data[i] = (float)std::cos(angle);
        e.data[half + i] = (float)std::sin(angle);
    }
    return e;
}

namespace {

// 3x3 convolution that dispatches to an expert bank when the model carries one.
ag::Value conv3x3(const UNet& u, const std::string& prefix, const ag::Value& x) {
    if (u.config.n_experts > 0 && u.has_param(prefix + ".expert0.w")) {
        const int E = u.config.n_experts;
        const int N = x->val.shape[0];
        auto one_sample = [&](const ag::Value& xs) {
            ag::Value r;
            if (u.forced_routing) {
                Tensor rf({1, E});
                for (int e = 0; e < E; e++) rf.at2(0, e) = (*u.forced_routing)[(size_t)e];
                r = ag::constant(rf);
            } else {
                auto logits = ag::matmul(ag::global_avg_pool(xs), u.p(prefix + ".router"));
                r = u.config.sigmoid_routing ? ag::sigmoid(logits) : ag::softmax_rows(logits);
            }
            ag::Value k, b;
            for (int e = 0; e < E; e++) {
                std::string base = prefix + ".expert" + std::to_string(e);
                auto ke = ag::scale_by_entry(u.p(base + ".w"), r, e);
                auto be = ag::scale_by_entry(u.p(base + ".b"), r, e);
                k = k ? ag::add(k, ke) : ke;
                b = b ? ag::add(b, be) : be;
            }
            return ag::conv2d(xs, k, b, 1, 1);
        };
        if (N == 1) return one_sample(x);
        std::vector<ag::Value> outs;
        for (int n = 0; n < N; n++) outs.push_back(one_sample(ag::slice_batch(x, n)));
        return ag::concat_batch(outs);
    }
    return ag::conv2d(x, u.p(prefix + ".w"), u.p(prefix + ".b"), 1, 1);
}

struct UnitResult {
    ag::Value residual, out;
};

UnitResult run_res_unit(const UNet& u, const UnitLayout& lay, const ag::Value& x,
                        const ag::Value& temb, UnitTap* tap) {
    const std::string prefix = lay.site.str();

    ag::Value residual;
    const Tensor* sub = tap ? tap->substitute(lay.site, x->val) : nullptr;
    if (sub) {
        residual = ag::constant(*sub);
    } else {
        auto h =
            ag::group_norm(x, u.config.norm_groups, u.p(prefix + ".gn1.g"), u.p(prefix + ".gn1.b"),
                           kNormEps);
        h = ag::silu(h);
        h = conv3x3(u, prefix + ".conv1", h);
        auto tp = ag::linear(ag::silu(temb), u.p(prefix + ".temb.w"), u.p(prefix + ".temb.b"));
        h = ag::add_channel_bias(h, tp);
        h = ag::group_norm(h, u.config.norm_groups, u.p(prefix + ".gn2.g"),
                           u.p(prefix + ".gn2.b"), kNormEps);
        h = ag::silu(h);
        residual = conv3x3(u, prefix + ".conv2", h);
    }

    ag::Value shortcut =
        lay.shortcut_conv ? ag::conv2d(x, u.p(prefix + ".skip.w"), u.p(prefix + ".skip.b"), 1, 0)
                          : x;
    ag::Value out = ag::add(residual, shortcut);
    if (tap) tap->observe(lay.site, residual->val, x->val, out->val);
    return {residual, out};
}

UnitResult run_attn_unit(const UNet& u, const UnitLayout& lay, const ag::Value& x,
                         const ag::Value& cond, UnitTap* tap) {
    const std::string prefix = lay.site.str();
    const int heads = u.config.attn_heads;
    const int N = x->val.shape[0];

    ag::Value residual;
    const Tensor* sub = tap ? tap->substitute(lay.site, x->val) : nullptr;
    if (sub) {
        residual = ag::constant(*sub);
    } else {
        auto h = ag::group_norm(x, u.config.norm_groups, u.p(prefix + ".gn.g"),
                                u.p(prefix + ".gn.b"), kNormEps);
        h = ag::conv2d(h, u.p(prefix + ".proj_in.w"), u.p(prefix + ".proj_in.b"), 1, 0);

        auto transformer = [&](const ag::Value& xs) {
            auto tk = ag::tokens_from_map(xs);
            {
                auto n1 =
                    ag::layer_norm(tk, u.p(prefix + ".ln1.g"), u.p(prefix + ".ln1.b"), kNormEps);
                auto q = ag::linear_nobias(n1, u.p(prefix + ".sa.q.w"));
                auto k = ag::linear_nobias(n1, u.p(prefix + ".sa.k.w"));
                auto v = ag::linear_nobias(n1, u.p(prefix + ".sa.v.w"));
                auto a = ag::attention(q, k, v, heads);
                tk = ag::add(tk, ag::linear(a, u.p(prefix + ".sa.o.w"), u.p(prefix + ".sa.o.b")));
            }
            {
                auto n2 =
                    ag::layer_norm(tk, u.p(prefix + ".ln2.g"), u.p(prefix + ".ln2.b"), kNormEps);
                auto q = ag::linear_nobias(n2, u.p(prefix + ".ca.q.w"));
                auto k = ag::linear_nobias(cond, u.p(prefix + ".ca.k.w"));
                auto v = ag::linear_nobias(cond, u.p(prefix + ".ca.v.w"));
                auto a = ag::attention(q, k, v, heads);
                tk = ag::add(tk, ag::linear(a, u.p(prefix + ".ca.o.w"), u.p(prefix + ".ca.o.b")));
            }
            {
                auto n3 =
                    ag::layer_norm(tk, u.p(prefix + ".ln3.g"), u.p(prefix + ".ln3.b"), kNormEps);
                auto f = ag::linear(n3, u.p(prefix + ".ff.fc1.w"), u.p(prefix + ".ff.fc1.b"));
                f = ag::silu(f);
                f = ag::linear(f, u.p(prefix + ".ff.fc2.w"), u.p(prefix + ".ff.fc2.b"));
                tk = ag::add(tk, f);
            }
            return ag::map_from_tokens(tk, lay.h, lay.w);
        };

        ag::Value body;
        if (N == 1) {
            body = transformer(h);
        } else {
            std::vector<ag::Value> outs;
            for (int n = 0; n < N; n++) outs.push_back(transformer(ag::slice_batch(h, n)));
            body = ag::concat_batch(outs);
        }
        residual = ag::conv2d(body, u.p(prefix + ".proj_out.w"), u.p(prefix + ".proj_out.b"), 1, 0);
    }

    ag::Value out = ag::add(residual, x);
    if (tap) tap->observe(lay.site, residual->val, x->val, out->val);
    return {residual, out};
}

}  // namespace

Tensor UNet::time_embedding(int t) const {
    ag::NoGradGuard ng;
    auto sin = ag::constant(sinusoidal_embedding(t, config.time_embed_dim));
    auto h = ag::linear(sin, p("time_embed.fc1.w"), p("time_embed.fc1.b"));
    h = ag::silu(h);
    h = ag::linear(h, p("time_embed.fc2.w"), p("time_embed.fc2.b"));
    return h->val;
}

Tensor UNet::cond_tokens(int class_id) const {
    ag::NoGradGuard ng;
    return cond_tokens_ag(class_id)->val;
}

ag::Value UNet::cond_tokens_ag(int class_id) const {
    if (class_id < 0 || class_id > config.cond_classes) {
        throw std::invalid_argument("cond class id out of range: " + std::to_string(class_id));
    }
    auto row = ag::slice_row(p("cond_embed"), class_id);
    return ag::reshape(row, {config.cond_tokens, config.cond_dim});
}

ag::Value UNet::forward_ag(const ag::Value& x_t, int t, const ag::Value& cond,
                           const ForwardOptions& opts) const {
    const Tensor& x = x_t->val;
    if (x.rank() != 4 || x.shape[1] != config.latent_channels || x.shape[2] != config.latent_size ||
        x.shape[3] != config.latent_size) {
        throw std::invalid_argument(
            "forward: input must be [N," + std::to_string(config.latent_channels) + "," +
            std::to_string(config.latent_size) + "," + std::to_string(config.latent_size) +
            "], got " + x.shape_str());
    }
    if (t < 0) throw std::invalid_argument("forward: negative timestep");
    if (cond->val.rank() != 2 || cond->val.shape[0] != config.cond_tokens ||
        cond->val.shape[1] != config.cond_dim) {
        throw std::invalid_argument("forward: cond must be [" + std::to_string(config.cond_tokens) +
                                    "," + std::to_string(config.cond_dim) + "], got " +
                                    cond->val.shape_str());
    }

    auto sin = ag::constant(sinusoidal_embedding(t, config.time_embed_dim));
    auto temb = ag::linear(sin, p("time_embed.fc1.w"), p("time_embed.fc1.b"));
    temb = ag::silu(temb);
    temb = ag::linear(temb, p("time_embed.fc2.w"), p("time_embed.fc2.b"));

    ag::Value h = ag::conv2d(x_t, p("conv_in.w"), p("conv_in.b"), 1, 1);
    std::vector<ag::Value> skips;
    skips.push_back(h);

    for (const auto& bl : layout.blocks) {
        size_t i = 0;
        while (i < bl.units.size()) {
            const UnitLayout& res = bl.units[i++];
            if (bl.kind == BlockLayout::Kind::up) {
                if (skips.empty()) throw std::runtime_error("forward: skip stack underflow");
                ag::Value s = skips.back();
                skips.pop_back();
                h = run_res_unit(*this, res, ag::concat_channels(h, s), temb, opts.tap).out;
            } else {
                h = run_res_unit(*this, res, h, temb, opts.tap).out;
            }
            if (i < bl.units.size() && bl.units[i].site.unit == UnitKind::ATTN &&
                bl.units[i].site.layer == res.site.layer) {
                h = run_attn_unit(*this, bl.units[i], h, cond, opts.tap).out;
                i++;
            }
            if (bl.kind == BlockLayout::Kind::down) skips.push_back(h);
        }
        if (bl.resize.present) {
            if (bl.resize.is_down) {
                h = ag::conv2d(h, p(bl.name + ".downsample.w"), p(bl.name + ".downsample.b"), 2, 1);
                skips.push_back(h);
            } else {
                h = ag::upsample_nearest2x(h);
                h = ag::conv2d(h, p(bl.name + ".upsample.w"), p(bl.name + ".upsample.b"), 1, 1);
            }
        }
        if (opts.block_outputs) (*opts.block_outputs)[bl.name] = h;
    }

    h = ag::group_norm(h, config.norm_groups, p("out_norm.g"), p("out_norm.b"), kNormEps);
    h = ag::silu(h);
    h = ag::conv2d(h, p("conv_out.w"), p("conv_out.b"), 1, 1);
    return h;
}

Tensor UNet::forward(const Tensor& x_t, int t, const Tensor& cond,
                     const ForwardOptions& opts) const {
    ag::NoGradGuard ng;
    return forward_ag(ag::constant(x_t), t, ag::constant(cond), opts)->val;
}

std::pair<Tensor, Tensor> UNet::res_unit_forward(const SiteId& site, const Tensor& x,
                                                 const Tensor& t_emb) const {
    const UnitLayout* lay = layout.find_unit(site);
    if (!lay || site.unit != UnitKind::RES) {
        throw std::invalid_argument("no such ResUnit: " + site.str());
    }
    if (x.rank() != 4 || x.shape[1] != lay->in_ch) {
        throw std::invalid_argument("res_unit_forward: input channels must be " +
                                    std::to_string(lay->in_ch) + ", got " + x.shape_str());
    }
    if (t_emb.rank() != 2 || t_emb.shape[0] != 1 || t_emb.shape[1] != config.time_embed_dim) {
        throw std::invalid_argument("res_unit_forward: t_emb must be [1," +
                                    std::to_string(config.time_embed_dim) + "]");
    }
    ag::NoGradGuard ng;
    UnitResult r = run_res_unit(*this, *lay, ag::constant(x), ag::constant(t_emb), nullptr);
    return {r.residual->val, r.out->val};
}

std::pair<Tensor, Tensor> UNet::attn_unit_forward(const SiteId& site, const Tensor& x,
                                                  const Tensor& cond) const {
    const UnitLayout* lay = layout.find_unit(site);
    if (!lay || site.unit != UnitKind::ATTN) {
        throw std::invalid_argument("no such AttnUnit: " + site.str());
    }
    if (x.rank() != 4 || x.shape[1] != lay->in_ch) {
        throw std::invalid_argument("attn_unit_forward: input channels must be " +
                                    std::to_string(lay->in_ch));
    }
    if (cond.rank() != 2 || cond.shape[1] != config.cond_dim) {
        throw std::invalid_argument("attn_unit_forward: cond width must be " +
                                    std::to_string(config.cond_dim) + ", got " + cond.shape_str());
    }
    ag::NoGradGuard ng;
    UnitResult r = run_attn_unit(*this, *lay, ag::constant(x), ag::constant(cond), nullptr);
    return {r.residual->val, r.out->val};
}

UNet UNet::clone() const {
    UNet c;
    c.config = config;
    c.layout = layout;
    c.freeze_mask = freeze_mask;
    c.forced_routing = forced_routing;
    for (const auto& [name, v] : params) c.params.emplace(name, ag::param(v->val));
    return c;
}

}  // namespace asdm

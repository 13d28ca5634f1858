#ifndef ASDM_UNET_HPP
#define ASDM_UNET_HPP

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "asdm/graph.hpp"
#include "asdm/tensor.hpp"

namespace asdm {

enum class UnitKind { RES, ATTN };
enum class ResChange { none, down, up };

// Address of one unit inside the block/layer/unit hierarchy.
struct SiteId {
    std::string block;
    int layer = 0;
    UnitKind unit = UnitKind::RES;

    std::string str() const;
    static SiteId parse(const std::string& text);
    bool operator<(const SiteId& o) const {
        if (block != o.block) return block < o.block;
        if (layer != o.layer) return layer < o.layer;
        return (int)unit < (int)o.unit;
    }
    bool operator==(const SiteId& o) const {
        return block == o.block && layer == o.layer && unit == o.unit;
    }
};

struct BlockSpec {
    std::string name;
    int layers = 1;
    bool with_attention = false;
    ResChange resolution_change = ResChange::none;
    int depth = 0;  // index into UNetConfig::base_channels
};

struct UNetConfig {
    std::vector<BlockSpec> down_blocks;
    std::vector<BlockSpec> up_blocks;
    bool has_middle = true;
    BlockSpec middle_spec;  // layers = ResUnit count; with_attention adds one AttnUnit
    std::vector<int> base_channels;
    int latent_channels = 4;
    int latent_size = 16;
    int cond_dim = 64;
    int cond_classes = 10;
    int cond_tokens = 4;
    int time_embed_dim = 128;
    int attn_heads = 4;
    int norm_groups = 8;
    int n_experts = 0;  // 0 = plain convolutions, >0 = expert banks on 3x3 convs
    bool sigmoid_routing = true;

    // 4 down / 4 up / middle, channels [32,64,128,128], latent 4x16x16.
    static UNetConfig standard_toy();

    void validate() const;  // throws std::invalid_argument
    bool operator==(const UNetConfig&) const = default;
};

bool operator==(const BlockSpec& a, const BlockSpec& b);

// Elaborated architecture: every unit with its shapes and analytic MAC cost.
struct UnitLayout {
    SiteId site;
    int in_ch = 0, out_ch = 0, h = 0, w = 0;
    int skip_ch = 0;             // channels concatenated in via the U-skip (up blocks)
    bool shortcut_conv = false;  // ResUnits with channel change
    long long residual_macs = 0;
    long long shortcut_macs = 0;
};

struct ResizeLayout {
    bool present = false;
    bool is_down = false;
    int ch = 0, h_out = 0, w_out = 0;
    long long macs = 0;
};

struct BlockLayout {
    enum class Kind { down, mid, up };
    std::string name;
    Kind kind = Kind::down;
    std::vector<UnitLayout> units;
    ResizeLayout resize;
    int out_ch = 0, out_h = 0, out_w = 0;
};

struct NetLayout {
    long long conv_in_macs = 0, conv_out_macs = 0, time_embed_macs = 0;
    std::vector<BlockLayout> blocks;
    long long total_macs = 0;

    const UnitLayout* find_unit(const SiteId& site) const;
    const BlockLayout* find_block(const std::string& name) const;
};

NetLayout elaborate(const UNetConfig& config);

struct UnitCensus {
    int res_units = 0;
    int attn_units = 0;
};
std::map<std::string, UnitCensus> unit_census(const UNetConfig& config);

// Name and shape of every parameter tensor, in creation order.
std::vector<std::pair<std::string, std::vector<int>>> param_shapes(const UNetConfig& config);

// Forward interception hook. substitute() is consulted before a unit's
// residual branch runs; returning a tensor skips the branch and sums the
// returned residual with the live identity branch instead. observe() fires
// after every unit with the residual actually used.
struct UnitTap {
    virtual ~UnitTap() = default;
    virtual const Tensor* substitute(const SiteId& site, const Tensor& identity_input) {
        (void)site;
        (void)identity_input;
        return nullptr;
    }
    virtual void observe(const SiteId& site, const Tensor& residual, const Tensor& identity_input,
                         const Tensor& out) {
        (void)site;
        (void)residual;
        (void)identity_input;
        (void)out;
    }
};

struct ForwardOptions {
    UnitTap* tap = nullptr;
    std::map<std::string, ag::Value>* block_outputs = nullptr;
};

struct UNet {
    UNetConfig config;
    NetLayout layout;
    std::map<std::string, ag::Value> params;
    std::set<std::string> freeze_mask;
    std::optional<std::vector<float>> forced_routing;  // test hook for expert banks

    const ag::Value& p(const std::string& name) const;
    bool has_param(const std::string& name) const { return params.count(name) != 0; }
    long long param_count() const;

    int null_class_id() const { return config.cond_classes; }
    Tensor time_embedding(int t) const;          // [1, time_embed_dim], after the MLP
    Tensor cond_tokens(int class_id) const;      // [cond_tokens, cond_dim]
    ag::Value cond_tokens_ag(int class_id) const;

    Tensor forward(const Tensor& x_t, int t, const Tensor& cond,
                   const ForwardOptions& opts = {}) const;
    ag::Value forward_ag(const ag::Value& x_t, int t, const ag::Value& cond,
                         const ForwardOptions& opts = {}) const;

    // Single-unit entry points; residual and unit output are both returned.
    std::pair<Tensor, Tensor> res_unit_forward(const SiteId& site, const Tensor& x,
                                               const Tensor& t_emb) const;
    std::pair<Tensor, Tensor> attn_unit_forward(const SiteId& site, const Tensor& x,
                                                const Tensor& cond) const;

    UNet clone() const;
};

UNet build_unet(const UNetConfig& config, uint64_t seed);

Tensor sinusoidal_embedding(int t, int dim);

}  // namespace asdm

#endif

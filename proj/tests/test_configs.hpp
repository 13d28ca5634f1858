#ifndef ASDM_TEST_CONFIGS_HPP
#define ASDM_TEST_CONFIGS_HPP

// Small configurations used by the unit tests to keep runtimes low. The
// acceptance suite runs the full toy configuration.

#include "asdm/unet.hpp"

namespace testcfg {

// Same 4+mid+4 structure as the standard config, narrow and low resolution.
inline asdm::UNetConfig micro() {
    asdm::UNetConfig c = asdm::UNetConfig::standard_toy();
    c.base_channels = {8, 12, 16, 16};
    c.latent_channels = 2;
    c.latent_size = 8;
    c.cond_dim = 8;
    c.cond_classes = 3;
    c.cond_tokens = 2;
    c.time_embed_dim = 16;
    c.attn_heads = 2;
    c.norm_groups = 4;
    return c;
}

// Two-level UNet for gradient checks.
inline asdm::UNetConfig depth2() {
    asdm::UNetConfig c;
    c.base_channels = {8, 12};
    c.down_blocks = {
        {"dn0", 1, true, asdm::ResChange::down, 0},
        {"dn1", 1, false, asdm::ResChange::none, 1},
    };
    c.has_middle = true;
    c.middle_spec = {"mid", 1, true, asdm::ResChange::none, 1};
    c.up_blocks = {
        {"up0", 2, false, asdm::ResChange::up, 1},
        {"up1", 2, true, asdm::ResChange::none, 0},
    };
    c.latent_channels = 2;
    c.latent_size = 8;
    c.cond_dim = 8;
    c.cond_classes = 3;
    c.cond_tokens = 2;
    c.time_embed_dim = 16;
    c.attn_heads = 2;
    c.norm_groups = 4;
    return c;
}

}  // namespace testcfg

#endif

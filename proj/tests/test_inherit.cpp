#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "asdm/kernels.hpp"
#include "asdm/sampler.hpp"
#include "test_configs.hpp"

using namespace asdm;

namespace {

// Independent per-unit MAC counts from config shapes, with own skip
// bookkeeping. Mirrors the documented cost model, not the library code.
struct MacOracle {
    std::map<std::string, long long> residual_by_site;
    long long total = 0;

    explicit MacOracle(const UNetConfig& c) {
        auto res_macs = [&](long long in, long long out, long long hw) {
            return hw * out * in * 9 + (long long)c.time_embed_dim * out + hw * out * out * 9;
        };
        auto attn_macs = [&](long long ch, long long hw) {
            long long m = 0;
            m += hw * ch * ch;                        // proj in
            m += 3 * hw * ch * ch + 2 * hw * hw * ch + hw * ch * ch;
            m += hw * ch * ch + 2LL * c.cond_tokens * c.cond_dim * ch +
                 2 * hw * c.cond_tokens * ch + hw * ch * ch;
            m += 2 * hw * ch * 4 * ch;
            m += hw * ch * ch;                        // proj out
            return m;
        };
        int s = c.latent_size;
        long long hw = (long long)s * s;
        int ch = c.base_channels[c.down_blocks.front().depth];
        total += hw * c.latent_channels * ch * 9;  // conv_in
        total += 2LL * c.time_embed_dim * c.time_embed_dim;
        std::vector<int> stack{ch};
        for (const auto& b : c.down_blocks) {
            int out = c.base_channels[b.depth];
            for (int j = 0; j < b.layers; j++) {
                int in = (j == 0) ? ch : out;
                long long rm = res_macs(in, out, hw);
                residual_by_site[SiteId{b.name, j, UnitKind::RES}.str()] = rm;
                total += rm + (in != out ? hw * out * in : 0);
                if (b.with_attention) {
                    long long am = attn_macs(out, hw);
                    residual_by_site[SiteId{b.name, j, UnitKind::ATTN}.str()] = am;
                    total += am;
                }
                stack.push_back(out);
            }
            ch = out;
            if (b.resolution_change == ResChange::down) {
                hw /= 4;
                total += hw * ch * ch * 9;
                stack.push_back(ch);
            }
        }
        if (c.has_middle) {
            for (int j = 0; j < c.middle_spec.layers; j++) {
                long long rm = res_macs(ch, ch, hw);
                residual_by_site[SiteId{"mid", j, UnitKind::RES}.str()] = rm;
                total += rm;
                if (j == 0 && c.middle_spec.with_attention) {
                    long long am = attn_macs(ch, hw);
                    residual_by_site[SiteId{"mid", j, UnitKind::ATTN}.str()] = am;
                    total += am;
                }
            }
        }
        for (const auto& b : c.up_blocks) {
            int out = c.base_channels[b.depth];
            for (int j = 0; j < b.layers; j++) {
                int skip = stack.back();
                stack.pop_back();
                int in = ch + skip;
                long long rm = res_macs(in, out, hw);
                residual_by_site[SiteId{b.name, j, UnitKind::RES}.str()] = rm;
                total += rm + hw * out * in;  // up ResUnits always project
                if (b.with_attention) {
                    long long am = attn_macs(out, hw);
                    residual_by_site[SiteId{b.name, j, UnitKind::ATTN}.str()] = am;
                    total += am;
                }
                ch = out;
            }
            if (b.resolution_change == ResChange::up) {
                hw *= 4;
                total += hw * ch * ch * 9;
            }
        }
        total += hw * ch * c.latent_channels * 9;  // conv_out
    }
};

UNet warm_model(const UNetConfig& cfg, uint64_t seed) {
    UNet u = build_unet(cfg, seed);
    Rng r(seed + 1000);
    for (float& v : u.params.at("conv_out.w")->val.data) v = r.gaussian() * 0.02f;
    return u;
}

// Tiny-like surgery of the micro config: dn3/up0 removed, middle removed.
UNetConfig micro_tinylike() {
    UNetConfig c = testcfg::micro();
    c.down_blocks.pop_back();
    c.down_blocks.back().resolution_change = ResChange::none;
    c.up_blocks.erase(c.up_blocks.begin());
    c.has_middle = false;
    // rebalance: with 2-layer down and 3-layer up blocks the stack only
    // balances when layers shrink too
    for (auto& b : c.down_blocks) b.layers = 1;
    for (auto& b : c.up_blocks) b.layers = 2;
    return c;
}

}  // namespace

TEST_CASE("plan none compiles to the empty site set") {
    SkipPlan p = compile_plan("none", UNetConfig::standard_toy());
    CHECK(p.sites.empty());
}

TEST_CASE("LI1 census on the standard config") {
    SkipPlan p = compile_plan("LI1", UNetConfig::standard_toy());
    // independent enumeration: layer 1 of every down/up block, both unit
    // kinds, minus attention where the block has none
    std::set<SiteId> want;
    auto census = unit_census(UNetConfig::standard_toy());
    for (const std::string& b : {"dn0", "dn1", "dn2", "dn3"}) {
        want.insert({b, 1, UnitKind::RES});
        if (census.at(b).attn_units > 0) want.insert({b, 1, UnitKind::ATTN});
    }
    for (const std::string& b : {"up0", "up1", "up2", "up3"}) {
        want.insert({b, 1, UnitKind::RES});
        if (census.at(b).attn_units > 0) want.insert({b, 1, UnitKind::ATTN});
    }
    CHECK(p.sites == want);
    CHECK(p.sites.size() == 14);  // 16 minus missing attention in dn3/up0
}

TEST_CASE("CO6 census leaves only up3 attention computed") {
    UNetConfig cfg = UNetConfig::standard_toy();
    SkipPlan p = compile_plan("CO6", cfg);
    NetLayout lay = elaborate(cfg);
    int computed_attn = 0;
    for (const auto& bl : lay.blocks) {
        if (bl.kind == BlockLayout::Kind::mid) continue;
        for (const auto& u : bl.units) {
            if (u.site.unit == UnitKind::RES) {
                CHECK(p.sites.count(u.site) == 1);  // every down/up ResUnit skipped
            } else if (!p.sites.count(u.site)) {
                computed_attn++;
                CHECK(u.site.block == "up3");
            }
        }
    }
    CHECK(computed_attn == 3);
    for (const SiteId& s : p.sites) CHECK(s.block != "mid");
}

TEST_CASE("AI and RI cover exactly the attention and resnet units") {
    UNetConfig cfg = UNetConfig::standard_toy();
    SkipPlan ai = compile_plan("AI", cfg);
    SkipPlan ri = compile_plan("RI", cfg);
    CHECK(ai.sites.size() == 15);  // 2+2+2+0 down, 0+3+3+3 up
    CHECK(ri.sites.size() == 20);  // 8 down, 12 up
    for (const SiteId& s : ai.sites) CHECK(s.unit == UnitKind::ATTN);
    for (const SiteId& s : ri.sites) CHECK(s.unit == UnitKind::RES);
}

TEST_CASE("catalog plans never touch the middle block except the explicit variant") {
    UNetConfig cfg = UNetConfig::standard_toy();
    for (const std::string& name : PlanCatalog::builtin().names()) {
        SkipPlan p = compile_plan(name, cfg);
        bool has_mid = false;
        for (const SiteId& s : p.sites) has_mid = has_mid || s.block == "mid";
        CHECK(has_mid == (name == "EX1M"));
    }
}

TEST_CASE("unknown plan names are rejected with the list of valid names") {
    try {
        compile_plan("LI9", UNetConfig::standard_toy());
        FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("LI9") != std::string::npos);
        CHECK(msg.find("CO6") != std::string::npos);
        CHECK(msg.find("none") != std::string::npos);
    }
}

TEST_CASE("plans referencing removed blocks fail against a pruned config") {
    UNetConfig tiny = micro_tinylike();
    tiny.validate();
    CHECK_THROWS_AS(compile_plan("EX1", tiny), std::invalid_argument);  // names dn3/up0
    auto errs = plan_resolution_errors(PlanCatalog::builtin(), "EX1", tiny);
    REQUIRE(errs.size() >= 2);
    bool mentions_dn3 = false, mentions_up0 = false;
    for (const auto& e : errs) {
        mentions_dn3 = mentions_dn3 || e.find("dn3") != std::string::npos;
        mentions_up0 = mentions_up0 || e.find("up0") != std::string::npos;
    }
    CHECK(mentions_dn3);
    CHECK(mentions_up0);
    // glob-only plans still resolve against the surviving blocks
    SkipPlan ri = compile_plan("RI", tiny);
    CHECK(!ri.sites.empty());
}

TEST_CASE("mode p1 has no inherit steps") {
    SamplingMode m = make_mode(1, 0, 50);
    CHECK(m.count(StepRole::INHERIT) == 0);
    CHECK(m.count(StepRole::EXTRACT) == 50);
}

TEST_CASE("mode p5+10 over 50 steps counts (8,32,10)") {
    SamplingMode m = make_mode(5, 10, 50);
    CHECK(m.count(StepRole::EXTRACT) == 8);
    CHECK(m.count(StepRole::INHERIT) == 32);
    CHECK(m.count(StepRole::FULL) == 10);
    for (int i = 40; i < 50; i++) CHECK(m.roles[(size_t)i] == StepRole::FULL);
}

TEST_CASE("mode p2+10 over 50 steps counts (20,20,10)") {
    SamplingMode m = make_mode(2, 10, 50);
    CHECK(m.count(StepRole::EXTRACT) == 20);
    CHECK(m.count(StepRole::INHERIT) == 20);
    CHECK(m.count(StepRole::FULL) == 10);
}

TEST_CASE("mode invariants hold across parameters") {
    Rng rng(9);
    for (int trial = 0; trial < 50; trial++) {
        int total = rng.uniform_int(1, 60);
        int tail = rng.uniform_int(0, total);
        int period = rng.uniform_int(1, 12);
        SamplingMode m = make_mode(period, tail, total);
        REQUIRE((int)m.roles.size() == total);
        CHECK(m.roles[0] != StepRole::INHERIT);
        for (int i = total - tail; i < total; i++) CHECK(m.roles[(size_t)i] == StepRole::FULL);
        // prefix periodicity: an extract every `period` steps, inherit between
        for (int i = 0; i < total - tail; i++) {
            StepRole want = (i % period == 0) ? StepRole::EXTRACT : StepRole::INHERIT;
            CHECK(m.roles[(size_t)i] == want);
        }
    }
    CHECK_THROWS_AS(make_mode(0, 0, 10), std::invalid_argument);
    CHECK_THROWS_AS(make_mode(2, 12, 10), std::invalid_argument);
    CHECK_THROWS_AS(make_mode(2, -1, 10), std::invalid_argument);
}

TEST_CASE("mode text forms parse") {
    SamplingMode m = parse_mode("p5+10", 50);
    CHECK(m.period == 5);
    CHECK(m.tail_full_steps == 10);
    CHECK(parse_mode("p2", 50).tail_full_steps == 0);
    CHECK(parse_mode("P3+4", 20).period == 3);
    CHECK(m.descriptor() == "p5+10");
    CHECK_THROWS_AS(parse_mode("5", 50), std::invalid_argument);
    CHECK_THROWS_AS(parse_mode("px", 50), std::invalid_argument);
}

TEST_CASE("empty plan passes are bit-identical to plain forwards") {
    UNet m = warm_model(testcfg::micro(), 31);
    Rng rng(310);
    SkipPlan none{"none", {}};
    FeatureStore store;
    for (int i = 0; i < 5; i++) {
        Tensor x = rng.gaussian_tensor({1, 2, 8, 8});
        Tensor cond = m.cond_tokens(0);
        Tensor base = m.forward(x, i, cond);
        for (StepRole role : {StepRole::FULL, StepRole::EXTRACT, StepRole::INHERIT}) {
            Tensor got = inherited_forward(m, x, i, cond, none, role, store, i);
            CHECK(base.bit_equal(got));
        }
    }
    CHECK(store.entries.empty());
}

TEST_CASE("extract then inherit on the same input reproduces unit outputs exactly") {
    UNet m = warm_model(testcfg::micro(), 32);
    UNetConfig cfg = testcfg::micro();
    SkipPlan plan = compile_plan("LI1", cfg);
    Rng rng(320);
    Tensor x = rng.gaussian_tensor({1, 2, 8, 8});
    Tensor cond = m.cond_tokens(1);

    FeatureStore store;
    // capture unit outputs on the extract pass
    struct SpyTap : InheritTap {
        std::map<std::string, Tensor> outs;
        using InheritTap::InheritTap;
        void observe(const SiteId& site, const Tensor& residual, const Tensor& identity_input,
                     const Tensor& out) override {
            InheritTap::observe(site, residual, identity_input, out);
            outs[site.str()] = out;
        }
    };
    SpyTap extract_tap(plan, StepRole::EXTRACT, store, 0);
    ForwardOptions opts;
    opts.tap = &extract_tap;
    Tensor out_extract = m.forward(x, 5, cond, opts);

    SubstitutionLog log;
    Tensor out_inherit = inherited_forward(m, x, 5, cond, plan, StepRole::INHERIT, store, 1, &log);
    CHECK(out_inherit.bit_equal(out_extract));
    REQUIRE(log.size() == plan.sites.size());
    for (const auto& rec : log) {
        CHECK(rec.unit_out.bit_equal(extract_tap.outs.at(rec.site.str())));
    }
}

TEST_CASE("inherited outputs recombine stored residuals with live shortcuts") {
    UNet m = warm_model(testcfg::micro(), 33);
    UNetConfig cfg = testcfg::micro();
    Rng rng(330);
    Tensor cond = m.cond_tokens(2);
    for (const std::string& planName : {"LI1", "RI", "AI", "CO6", "EX1"}) {
        SkipPlan plan = compile_plan(planName, cfg);
        Tensor a = rng.gaussian_tensor({1, 2, 8, 8});
        Tensor b = rng.gaussian_tensor({1, 2, 8, 8});
        FeatureStore store;
        inherited_forward(m, a, 7, cond, plan, StepRole::EXTRACT, store, 0);
        SubstitutionLog log;
        inherited_forward(m, b, 6, cond, plan, StepRole::INHERIT, store, 1, &log);
        REQUIRE(log.size() == plan.sites.size());
        for (const auto& rec : log) {
            const UnitLayout* lay = m.layout.find_unit(rec.site);
            REQUIRE(lay != nullptr);
            Tensor shortcut = rec.identity_input;
            if (rec.site.unit == UnitKind::RES && lay->shortcut_conv) {
                shortcut = conv2d(rec.identity_input,
                                  m.params.at(rec.site.str() + ".skip.w")->val,
                                  m.params.at(rec.site.str() + ".skip.b")->val, 1, 0);
            }
            Tensor want = add(rec.stored_residual, shortcut);
            CHECK(rec.unit_out.bit_equal(want));
            CHECK(max_abs_diff(rec.unit_out, want) <= 1e-6f);
        }
    }
}

TEST_CASE("inherit without a populated store is a protocol violation") {
    UNet m = warm_model(testcfg::micro(), 34);
    SkipPlan plan = compile_plan("LI1", testcfg::micro());
    FeatureStore store;
    Rng rng(340);
    Tensor x = rng.gaussian_tensor({1, 2, 8, 8});
    CHECK_THROWS_AS(
        inherited_forward(m, x, 0, m.cond_tokens(0), plan, StepRole::INHERIT, store, 0),
        std::runtime_error);
}

TEST_CASE("store entries carry the most recent extract step") {
    UNet m = warm_model(testcfg::micro(), 35);
    UNetConfig cfg = testcfg::micro();
    InheritContext ctx;
    ctx.plan = compile_plan("CO6", cfg);
    ctx.mode = make_mode(3, 2, 11);
    SubstitutionLog log;
    ctx.log = &log;
    NoiseSchedule train = make_schedule(100, 8.5e-4, 1.2e-2);
    SampleParams p;
    p.steps = 11;
    p.seed = 5;
    sample({{"m", &m}}, SwitchPolicy::single("m", 11), train, p, &ctx);
    CHECK(!log.empty());
    // roles: E I I E I I E I I F F; every inherit must read the latest extract
    for (const auto& rec : log) {
        CHECK(rec.step_used % 3 != 0);
        CHECK(rec.step_recorded == (rec.step_used / 3) * 3);
    }
}

TEST_CASE("no-op equivalence: empty plan sampling matches the baseline trajectory") {
    UNet m = warm_model(testcfg::micro(), 36);
    NoiseSchedule train = make_schedule(100, 8.5e-4, 1.2e-2);
    for (uint64_t seed : {11ull, 12ull}) {
        SampleParams p;
        p.steps = 8;
        p.seed = seed;
        Tensor base = sample({{"m", &m}}, SwitchPolicy::single("m", 8), train, p);

        InheritContext none_ctx;
        none_ctx.plan = SkipPlan{"none", {}};
        none_ctx.mode = make_mode(5, 2, 8);
        Tensor with_none = sample({{"m", &m}}, SwitchPolicy::single("m", 8), train, p, &none_ctx);
        CHECK(base.bit_equal(with_none));

        InheritContext p1_ctx;
        p1_ctx.plan = compile_plan("CO6", m.config);
        p1_ctx.mode = make_mode(1, 0, 8);
        Tensor with_p1 = sample({{"m", &m}}, SwitchPolicy::single("m", 8), train, p, &p1_ctx);
        CHECK(base.bit_equal(with_p1));
    }
}

TEST_CASE("flop estimate: empty plan saves nothing") {
    FlopReport r = flop_estimate(UNetConfig::standard_toy(), SkipPlan{"none", {}},
                                 make_mode(5, 10, 50));
    CHECK(r.total_saved_fraction == 0.0);
    CHECK(r.skipped_per_inherit_step == 0);
    REQUIRE(r.per_step.size() == 50);
    for (long long c : r.per_step) CHECK(c == r.baseline_per_step);
}

TEST_CASE("flop estimate matches the independent MAC oracle") {
    UNetConfig cfg = UNetConfig::standard_toy();
    MacOracle oracle(cfg);
    NetLayout lay = elaborate(cfg);
    CHECK(lay.total_macs == oracle.total);

    SkipPlan li1 = compile_plan("LI1", cfg);
    SamplingMode mode = make_mode(5, 10, 50);
    FlopReport r = flop_estimate(cfg, li1, mode);
    long long skipped = 0;
    for (const SiteId& s : li1.sites) skipped += oracle.residual_by_site.at(s.str());
    CHECK(r.skipped_per_inherit_step == skipped);
    double want = (double)(32LL * skipped) / (double)(50LL * oracle.total);
    CHECK(r.total_saved_fraction == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("full-cover plan saves the down/up share on an all-inherit mode") {
    UNetConfig cfg = UNetConfig::standard_toy();
    // all down/up units: union of DE1 (down) and EN1 (up)
    SkipPlan plan = compile_plan("DE1", cfg);
    SkipPlan en = compile_plan("EN1", cfg);
    plan.sites.insert(en.sites.begin(), en.sites.end());
    // hypothetical all-inherit mode: huge period, no tail, one extract leads
    SamplingMode mode = make_mode(1000000, 0, 50);
    FlopReport r = flop_estimate(cfg, plan, mode);
    long long downup = 0;
    NetLayout lay = elaborate(cfg);
    for (const auto& bl : lay.blocks) {
        if (bl.kind == BlockLayout::Kind::mid) continue;
        for (const auto& u : bl.units) downup += u.residual_macs;
    }
    double want = (49.0 / 50.0) * (double)downup / (double)lay.total_macs;
    CHECK(r.total_saved_fraction == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("saved fraction is monotone in period and tail") {
    UNetConfig cfg = UNetConfig::standard_toy();
    SkipPlan plan = compile_plan("CO6", cfg);
    double prev = -1.0;
    for (int period : {1, 2, 3, 5, 8, 10}) {
        double f = flop_estimate(cfg, plan, make_mode(period, 10, 50)).total_saved_fraction;
        CHECK(f >= prev);
        prev = f;
    }
    prev = 2.0;
    for (int tail : {0, 10, 20, 40, 50}) {
        double f = flop_estimate(cfg, plan, make_mode(5, tail, 50)).total_saved_fraction;
        CHECK(f <= prev);
        prev = f;
    }
}

TEST_CASE("catalog ships the full strategy set") {
    auto names = PlanCatalog::builtin().names();
    std::vector<std::string> want = {"LI1", "LI2", "LI3", "AI",  "RI",  "IN1", "IN2", "IN3",
                                     "EX1", "EX2", "EX3", "EN1", "EN2", "EN3", "DE1", "DE2",
                                     "DE3", "CO1", "CO2", "CO3", "CO4", "CO5", "CO6", "EX1M"};
    CHECK(names == want);
    // interpreted plans document their reading
    for (const auto& p : PlanCatalog::builtin().plans) {
        if (!p.canonical) CHECK(!p.note.empty());
    }
}

TEST_CASE("store keeps one tensor per site and overwrites on extract") {
    UNet m = warm_model(testcfg::micro(), 37);
    SkipPlan plan = compile_plan("LI1", testcfg::micro());
    FeatureStore store;
    Rng rng(370);
    Tensor a = rng.gaussian_tensor({1, 2, 8, 8});
    Tensor b = rng.gaussian_tensor({1, 2, 8, 8});
    Tensor cond = m.cond_tokens(0);
    inherited_forward(m, a, 3, cond, plan, StepRole::EXTRACT, store, 0);
    CHECK(store.entries.size() == plan.sites.size());
    Tensor first = store.entries.begin()->second.residual;
    inherited_forward(m, b, 2, cond, plan, StepRole::EXTRACT, store, 1);
    CHECK(store.entries.size() == plan.sites.size());
    CHECK(store.entries.begin()->second.step_recorded == 1);
    CHECK_FALSE(store.entries.begin()->second.residual.bit_equal(first));
}

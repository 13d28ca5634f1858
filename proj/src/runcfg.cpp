#include "asdm/runcfg.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "asdm/assembly.hpp"

namespace asdm {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) {
            throw std::runtime_error("config: unknown key '" + key + "' in " + where);
        }
    }
}

json parse_object(const std::string& text, const std::string& what) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(what + ": " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(what + ": top level must be an object");
    return j;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.model = UNetConfig::standard_toy();
    return c;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j = parse_object(text, "run config");
    reject_unknown(j, {"model", "schedule", "pretrain"}, "the top level");

    RunConfig c = defaults();
    UNetConfig full = UNetConfig::standard_toy();

    if (j.contains("model")) {
        const json& m = j["model"];
        reject_unknown(m,
                       {"kind", "channels", "latent_channels", "latent_size", "cond_dim",
                        "cond_classes", "cond_tokens", "time_embed_dim", "attn_heads",
                        "norm_groups"},
                       "model");
        if (m.contains("channels")) full.base_channels = m["channels"].get<std::vector<int>>();
        if (m.contains("latent_channels")) full.latent_channels = m["latent_channels"].get<int>();
        if (m.contains("latent_size")) full.latent_size = m["latent_size"].get<int>();
        if (m.contains("cond_dim")) full.cond_dim = m["cond_dim"].get<int>();
        if (m.contains("cond_classes")) full.cond_classes = m["cond_classes"].get<int>();
        if (m.contains("cond_tokens")) full.cond_tokens = m["cond_tokens"].get<int>();
        if (m.contains("time_embed_dim")) full.time_embed_dim = m["time_embed_dim"].get<int>();
        if (m.contains("attn_heads")) full.attn_heads = m["attn_heads"].get<int>();
        if (m.contains("norm_groups")) full.norm_groups = m["norm_groups"].get<int>();
        if (m.contains("kind")) c.model_kind = m["kind"].get<std::string>();
    }
    if (c.model_kind == "standard") {
        c.model = full;
    } else {
        c.model = compress_config(parse_compress_kind(c.model_kind), full);
    }
    c.model.validate();

    if (j.contains("schedule")) {
        const json& s = j["schedule"];
        reject_unknown(s, {"T", "beta_start", "beta_end"}, "schedule");
        if (s.contains("T")) c.schedule_T = s["T"].get<int>();
        if (s.contains("beta_start")) c.beta_start = s["beta_start"].get<double>();
        if (s.contains("beta_end")) c.beta_end = s["beta_end"].get<double>();
        c.schedule();  // range check
    }

    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        reject_unknown(p, {"iters", "batch", "lr", "dataset_seed", "dataset_size", "seed"},
                       "pretrain");
        if (p.contains("iters")) c.pretrain.iters = p["iters"].get<int>();
        if (p.contains("batch")) c.pretrain.batch = p["batch"].get<int>();
        if (p.contains("lr")) c.pretrain.lr = p["lr"].get<double>();
        if (p.contains("dataset_seed")) c.pretrain.dataset_seed = p["dataset_seed"].get<uint64_t>();
        if (p.contains("dataset_size")) c.pretrain.dataset_size = p["dataset_size"].get<int>();
        if (p.contains("seed")) c.pretrain.seed = p["seed"].get<uint64_t>();
    }
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    return from_json_text(slurp(path));
}

BenchMatrix BenchMatrix::from_json_text(const std::string& text) {
    json j = parse_object(text, "bench matrix");
    reject_unknown(j, {"models", "plans", "modes", "steps", "seeds", "repeats", "cfg_scale",
                       "cond_class"},
                   "the top level");
    BenchMatrix m;
    if (j.contains("models")) {
        for (const auto& e : j["models"]) {
            reject_unknown(e, {"id", "path"}, "models[]");
            m.models.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>()});
        }
    }
    if (j.contains("plans")) m.plans = j["plans"].get<std::vector<std::string>>();
    if (j.contains("modes")) m.modes = j["modes"].get<std::vector<std::string>>();
    if (j.contains("steps")) m.steps = j["steps"].get<int>();
    if (j.contains("seeds")) m.seeds = j["seeds"].get<std::vector<uint64_t>>();
    if (j.contains("repeats")) m.repeats = j["repeats"].get<int>();
    if (j.contains("cfg_scale")) m.cfg_scale = j["cfg_scale"].get<double>();
    if (j.contains("cond_class")) m.cond_class = j["cond_class"].get<int>();
    if (m.steps < 1) throw std::runtime_error("bench matrix: steps must be >= 1");
    if (m.repeats < 1) throw std::runtime_error("bench matrix: repeats must be >= 1");
    if (m.seeds.empty()) throw std::runtime_error("bench matrix: need at least one seed");
    return m;
}

BenchMatrix BenchMatrix::from_file(const std::string& path) {
    return from_json_text(slurp(path));
}

}  // namespace asdm

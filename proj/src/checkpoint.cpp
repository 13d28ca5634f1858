#include "asdm/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <map>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace asdm {

using nlohmann::json;

namespace {

const char kMagic[4] = {'A', 'S', 'D', 'M'};

std::string res_change_name(ResChange r) {
    switch (r) {
        case ResChange::none: return "none";
        case ResChange::down: return "down";
        case ResChange::up: return "up";
    }
    return "none";
}

ResChange res_change_from(const std::string& s) {
    if (s == "none") return ResChange::none;
    if (s == "down") return ResChange::down;
    if (s == "up") return ResChange::up;
    throw std::runtime_error("checkpoint: bad resolution_change '" + s + "'");
}

json block_to_json(const BlockSpec& b) {
    return json{{"name", b.name},
                {"layers", b.layers},
                {"attention", b.with_attention},
                {"resolution_change", res_change_name(b.resolution_change)},
                {"depth", b.depth}};
}

BlockSpec block_from_json(const json& j) {
    BlockSpec b;
    b.name = j.at("name").get<std::string>();
    b.layers = j.at("layers").get<int>();
    b.with_attention = j.at("attention").get<bool>();
    b.resolution_change = res_change_from(j.at("resolution_change").get<std::string>());
    b.depth = j.at("depth").get<int>();
    return b;
}

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    out.write((const char*)b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; i++) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    out.write((const char*)b, 8);
}

uint32_t read_u32(const unsigned char* p) {
    return (uint32_t)p[0] | ((uint32_t)p[1] << 8) | ((uint32_t)p[2] << 16) | ((uint32_t)p[3] << 24);
}

uint64_t read_u64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; i++) v |= (uint64_t)p[i] << (8 * i);
    return v;
}

void write_container(const std::string& path, const std::string& header,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    write_u32(out, kCheckpointVersion);
    write_u64(out, header.size());
    out.write(header.data(), (std::streamsize)header.size());
    for (const auto& [name, t] : tensors) {
        out.write((const char*)t->data.data(), (std::streamsize)(t->data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

struct RawContainer {
    json header;
    std::vector<unsigned char> payload;
};

RawContainer read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 16) throw std::runtime_error("checkpoint too short: " + path);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw std::runtime_error("bad magic in checkpoint: " + path);
    }
    uint32_t version = read_u32(bytes.data() + 4);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    uint64_t hlen = read_u64(bytes.data() + 8);
    if (16 + hlen > bytes.size()) throw std::runtime_error("truncated checkpoint header: " + path);
    std::string header((const char*)bytes.data() + 16, (size_t)hlen);
    RawContainer rc;
    try {
        rc.header = json::parse(header);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("bad checkpoint header: ") + e.what());
    }
    rc.payload.assign(bytes.begin() + 16 + (long)hlen, bytes.end());
    return rc;
}

// Validate the tensor index against the payload: in bounds, non-overlapping.
struct IndexEntry {
    std::string name;
    std::vector<int> shape;
    uint64_t offset;
    uint64_t bytes;
};

std::vector<IndexEntry> validated_index(const json& header, size_t payload_size) {
    if (!header.contains("tensors") || !header["tensors"].is_array()) {
        throw std::runtime_error("checkpoint header lacks a tensor index");
    }
    std::vector<IndexEntry> idx;
    for (const auto& e : header["tensors"]) {
        IndexEntry ie;
        ie.name = e.at("name").get<std::string>();
        ie.shape = e.at("shape").get<std::vector<int>>();
        ie.offset = e.at("offset").get<uint64_t>();
        long long n = 1;
        for (int d : ie.shape) {
            if (d <= 0) throw std::runtime_error("checkpoint: bad shape for " + ie.name);
            n *= d;
        }
        ie.bytes = (uint64_t)n * sizeof(float);
        if (ie.offset + ie.bytes > payload_size || ie.offset + ie.bytes < ie.offset) {
            throw std::runtime_error("checkpoint: tensor " + ie.name + " exceeds the payload");
        }
        idx.push_back(std::move(ie));
    }
    std::vector<IndexEntry> sorted = idx;
    std::sort(sorted.begin(), sorted.end(),
              [](const IndexEntry& a, const IndexEntry& b) { return a.offset < b.offset; });
    for (size_t i = 1; i < sorted.size(); i++) {
        if (sorted[i - 1].offset + sorted[i - 1].bytes > sorted[i].offset) {
            throw std::runtime_error("checkpoint: overlapping tensors " + sorted[i - 1].name +
                                     " and " + sorted[i].name);
        }
    }
    return idx;
}

Tensor read_tensor(const IndexEntry& ie, const std::vector<unsigned char>& payload) {
    Tensor t(ie.shape);
    std::memcpy(t.data.data(), payload.data() + ie.offset, ie.bytes);
    return t;
}

}  // namespace

std::string config_to_json(const UNetConfig& c) {
    json j;
    j["base_channels"] = c.base_channels;
    j["down_blocks"] = json::array();
    for (const auto& b : c.down_blocks) j["down_blocks"].push_back(block_to_json(b));
    j["up_blocks"] = json::array();
    for (const auto& b : c.up_blocks) j["up_blocks"].push_back(block_to_json(b));
    j["has_middle"] = c.has_middle;
    if (c.has_middle) j["middle"] = block_to_json(c.middle_spec);
    j["latent_channels"] = c.latent_channels;
    j["latent_size"] = c.latent_size;
    j["cond_dim"] = c.cond_dim;
    j["cond_classes"] = c.cond_classes;
    j["cond_tokens"] = c.cond_tokens;
    j["time_embed_dim"] = c.time_embed_dim;
    j["attn_heads"] = c.attn_heads;
    j["norm_groups"] = c.norm_groups;
    j["n_experts"] = c.n_experts;
    j["sigmoid_routing"] = c.sigmoid_routing;
    return j.dump();
}

UNetConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("bad model config: ") + e.what());
    }
    UNetConfig c;
    c.base_channels = j.at("base_channels").get<std::vector<int>>();
    for (const auto& b : j.at("down_blocks")) c.down_blocks.push_back(block_from_json(b));
    for (const auto& b : j.at("up_blocks")) c.up_blocks.push_back(block_from_json(b));
    c.has_middle = j.at("has_middle").get<bool>();
    if (c.has_middle) c.middle_spec = block_from_json(j.at("middle"));
    c.latent_channels = j.at("latent_channels").get<int>();
    c.latent_size = j.at("latent_size").get<int>();
    c.cond_dim = j.at("cond_dim").get<int>();
    c.cond_classes = j.at("cond_classes").get<int>();
    c.cond_tokens = j.at("cond_tokens").get<int>();
    c.time_embed_dim = j.at("time_embed_dim").get<int>();
    c.attn_heads = j.at("attn_heads").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    c.n_experts = j.at("n_experts").get<int>();
    c.sigmoid_routing = j.at("sigmoid_routing").get<bool>();
    return c;
}

void save_checkpoint(const UNet& model, const std::string& path) {
    json header;
    header["kind"] = "unet";
    header["config"] = json::parse(config_to_json(model.config));
    header["freeze"] = json::array();
    for (const auto& n : model.freeze_mask) header["freeze"].push_back(n);

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    json index = json::array();
    uint64_t offset = 0;
    for (const auto& [name, shape] : param_shapes(model.config)) {
        const Tensor& t = model.p(name)->val;
        if (t.shape != shape) {
            throw std::runtime_error("checkpoint: parameter " + name + " has drifted shape");
        }
        index.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
        tensors.push_back({name, &t});
        offset += t.data.size() * sizeof(float);
    }
    header["tensors"] = index;
    write_container(path, header.dump(), tensors);
}

UNet load_checkpoint(const std::string& path) {
    RawContainer rc = read_container(path);
    if (!rc.header.contains("kind") || rc.header["kind"] != "unet") {
        throw std::runtime_error("checkpoint is not a model: " + path);
    }
    UNetConfig cfg = config_from_json(rc.header.at("config").dump());
    cfg.validate();
    auto idx = validated_index(rc.header, rc.payload.size());

    std::map<std::string, const IndexEntry*> by_name;
    for (const auto& ie : idx) {
        if (!by_name.emplace(ie.name, &ie).second) {
            throw std::runtime_error("checkpoint: duplicate tensor " + ie.name);
        }
    }

    UNet u;
    u.config = cfg;
    u.layout = elaborate(cfg);
    for (const auto& [name, shape] : param_shapes(cfg)) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint: missing parameter " + name);
        }
        if (it->second->shape != shape) {
            throw std::runtime_error("checkpoint: parameter " + name + " has the wrong shape");
        }
        u.params.emplace(name, ag::param(read_tensor(*it->second, rc.payload)));
    }
    if (by_name.size() != u.params.size()) {
        throw std::runtime_error("checkpoint: extra tensors beyond the model parameters");
    }
    if (rc.header.contains("freeze")) {
        for (const auto& n : rc.header["freeze"]) {
            std::string name = n.get<std::string>();
            if (!u.has_param(name)) {
                throw std::runtime_error("checkpoint: freeze entry for unknown parameter " + name);
            }
            u.freeze_mask.insert(name);
        }
    }
    return u;
}

void save_archive(const TensorArchive& a, const std::string& path) {
    json header;
    header["kind"] = a.kind;
    if (!a.meta_json.empty()) header["meta"] = json::parse(a.meta_json);
    json index = json::array();
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    uint64_t offset = 0;
    for (const auto& [name, t] : a.tensors) {
        index.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        tensors.push_back({name, &t});
        offset += t.data.size() * sizeof(float);
    }
    header["tensors"] = index;
    write_container(path, header.dump(), tensors);
}

TensorArchive load_archive(const std::string& path) {
    RawContainer rc = read_container(path);
    TensorArchive a;
    a.kind = rc.header.value("kind", "");
    if (rc.header.contains("meta")) a.meta_json = rc.header["meta"].dump();
    for (const auto& ie : validated_index(rc.header, rc.payload.size())) {
        a.tensors.push_back({ie.name, read_tensor(ie, rc.payload)});
    }
    return a;
}

}  // namespace asdm

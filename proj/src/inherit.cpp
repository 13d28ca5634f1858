#include "asdm/inherit.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "plan_catalog_text.hpp"

namespace asdm {

const char* role_name(StepRole r) {
    switch (r) {
        case StepRole::FULL: return "full";
        case StepRole::EXTRACT: return "extract";
        case StepRole::INHERIT: return "inherit";
    }
    return "?";
}

int SamplingMode::count(StepRole r) const {
    int n = 0;
    for (StepRole x : roles) n += (x == r) ? 1 : 0;
    return n;
}

std::string SamplingMode::descriptor() const {
    std::ostringstream os;
    os << "p" << period;
    if (tail_full_steps > 0) os << "+" << tail_full_steps;
    return os.str();
}

SamplingMode make_mode(int period, int tail_full_steps, int total_steps) {
    if (period < 1) throw std::invalid_argument("mode: period must be >= 1");
    if (tail_full_steps < 0) throw std::invalid_argument("mode: tail must be >= 0");
    if (total_steps < tail_full_steps || total_steps < 1) {
        throw std::invalid_argument("mode: total steps must cover the tail");
    }
    SamplingMode m;
    m.period = period;
    m.tail_full_steps = tail_full_steps;
    m.total_steps = total_steps;
    m.roles.resize((size_t)total_steps, StepRole::FULL);
    const int prefix = total_steps - tail_full_steps;
    for (int i = 0; i < prefix; i++) {
        m.roles[(size_t)i] = (i % period == 0) ? StepRole::EXTRACT : StepRole::INHERIT;
    }
    return m;
}

SamplingMode parse_mode(const std::string& text, int total_steps) {
    if (text.empty() || (text[0] != 'p' && text[0] != 'P')) {
        throw std::invalid_argument("mode: expected pN or pN+tail, got '" + text + "'");
    }
    std::string body = text.substr(1);
    int period = 0, tail = 0;
    size_t plus = body.find('+');
    try {
        if (plus == std::string::npos) {
            period = std::stoi(body);
        } else {
            period = std::stoi(body.substr(0, plus));
            tail = std::stoi(body.substr(plus + 1));
        }
    } catch (const std::exception&) {
        throw std::invalid_argument("mode: expected pN or pN+tail, got '" + text + "'");
    }
    return make_mode(period, tail, total_steps);
}

namespace {

bool block_pattern_matches(const std::string& pattern, const std::string& name) {
    if (!pattern.empty() && pattern.back() == '*') {
        return name.compare(0, pattern.size() - 1, pattern, 0, pattern.size() - 1) == 0;
    }
    return pattern == name;
}

bool pattern_is_glob(const std::string& pattern) {
    return !pattern.empty() && pattern.back() == '*';
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

PlanCatalog PlanCatalog::parse(const std::string& text) {
    PlanCatalog cat;
    std::istringstream in(text);
    std::string line;
    PlanDef* cur = nullptr;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string word;
        if (!(ls >> word)) continue;
        if (word == "plan") {
            std::string name, kind;
            if (!(ls >> name)) {
                throw std::runtime_error("catalog line " + std::to_string(lineno) +
                                         ": plan without a name");
            }
            ls >> kind;
            if (cur) {
                throw std::runtime_error("catalog: nested plan at line " + std::to_string(lineno));
            }
            cat.plans.push_back({name, kind == "canonical", "", {}});
            cur = &cat.plans.back();
        } else if (word == "end") {
            if (!cur) {
                throw std::runtime_error("catalog: stray end at line " + std::to_string(lineno));
            }
            cur = nullptr;
        } else if (word == "note") {
            if (!cur) {
                throw std::runtime_error("catalog: note outside plan at line " +
                                         std::to_string(lineno));
            }
            std::string rest;
            std::getline(ls, rest);
            size_t b = rest.find_first_not_of(' ');
            cur->note = (b == std::string::npos) ? "" : rest.substr(b);
        } else if (word == "sites") {
            if (!cur) {
                throw std::runtime_error("catalog: sites outside plan at line " +
                                         std::to_string(lineno));
            }
            std::string blocks, layers, units;
            if (!(ls >> blocks >> layers >> units)) {
                throw std::runtime_error("catalog line " + std::to_string(lineno) +
                                         ": sites needs <blocks> <layers> <units>");
            }
            Selector sel;
            sel.block_patterns = split_commas(blocks);
            if (layers != "*") {
                for (const std::string& l : split_commas(layers)) sel.layers.push_back(std::stoi(l));
            }
            for (const std::string& u : split_commas(units)) {
                if (u == "res") {
                    sel.res = true;
                } else if (u == "attn") {
                    sel.attn = true;
                } else {
                    throw std::runtime_error("catalog line " + std::to_string(lineno) +
                                             ": unknown unit kind '" + u + "'");
                }
            }
            cur->selectors.push_back(std::move(sel));
        } else {
            throw std::runtime_error("catalog line " + std::to_string(lineno) +
                                     ": unknown directive '" + word + "'");
        }
    }
    if (cur) throw std::runtime_error("catalog: unterminated plan '" + cur->name + "'");
    return cat;
}

const PlanCatalog& PlanCatalog::builtin() {
    static const PlanCatalog cat = parse(builtin_plan_catalog_text());
    return cat;
}

PlanCatalog PlanCatalog::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open plan catalog: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

const PlanCatalog::PlanDef* PlanCatalog::find(const std::string& name) const {
    for (const auto& p : plans) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

std::vector<std::string> PlanCatalog::names() const {
    std::vector<std::string> out;
    for (const auto& p : plans) out.push_back(p.name);
    return out;
}

namespace {

// Expand one selector; unresolved explicit names go into errors.
void expand_selector(const PlanCatalog::Selector& sel, const NetLayout& layout,
                     std::set<SiteId>* sites, std::vector<std::string>* errors) {
    for (const std::string& pat : sel.block_patterns) {
        std::vector<const BlockLayout*> matched;
        for (const auto& bl : layout.blocks) {
            if (block_pattern_matches(pat, bl.name)) matched.push_back(&bl);
        }
        if (matched.empty() && !pattern_is_glob(pat)) {
            if (errors) errors->push_back("block '" + pat + "' does not exist in this model");
            continue;
        }
        for (const BlockLayout* bl : matched) {
            int max_layer = -1;
            for (const auto& u : bl->units) max_layer = std::max(max_layer, u.site.layer);
            std::vector<int> layers = sel.layers;
            if (layers.empty()) {
                for (int l = 0; l <= max_layer; l++) layers.push_back(l);
            }
            for (int l : layers) {
                if (l < 0 || l > max_layer) {
                    if (errors) {
                        errors->push_back("layer " + std::to_string(l) +
                                          " does not exist in block '" + bl->name + "'");
                    }
                    continue;
                }
                for (const auto& u : bl->units) {
                    if (u.site.layer != l) continue;
                    if (u.site.unit == UnitKind::RES && sel.res) sites->insert(u.site);
                    if (u.site.unit == UnitKind::ATTN && sel.attn) sites->insert(u.site);
                }
            }
        }
    }
}

}  // namespace

SkipPlan compile_plan(const PlanCatalog& catalog, const std::string& name,
                      const UNetConfig& config) {
    if (name == "none") return SkipPlan{"none", {}};
    const PlanCatalog::PlanDef* def = catalog.find(name);
    if (!def) {
        std::string known = "none";
        for (const auto& n : catalog.names()) known += " " + n;
        throw std::invalid_argument("unknown plan '" + name + "'; valid names: " + known);
    }
    NetLayout layout = elaborate(config);
    SkipPlan plan;
    plan.name = name;
    std::vector<std::string> errors;
    for (const auto& sel : def->selectors) {
        expand_selector(sel, layout, &plan.sites, &errors);
    }
    if (!errors.empty()) {
        std::string msg = "plan '" + name + "' does not resolve:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw std::invalid_argument(msg);
    }
    return plan;
}

SkipPlan compile_plan(const std::string& name, const UNetConfig& config) {
    return compile_plan(PlanCatalog::builtin(), name, config);
}

std::vector<std::string> plan_resolution_errors(const PlanCatalog& catalog,
                                                const std::string& name,
                                                const UNetConfig& config) {
    if (name == "none") return {};
    const PlanCatalog::PlanDef* def = catalog.find(name);
    if (!def) return {"unknown plan '" + name + "'"};
    NetLayout layout = elaborate(config);
    std::set<SiteId> sites;
    std::vector<std::string> errors;
    for (const auto& sel : def->selectors) expand_selector(sel, layout, &sites, &errors);
    return errors;
}

const Tensor* InheritTap::substitute(const SiteId& site, const Tensor& identity_input) {
    (void)identity_input;
    if (role != StepRole::INHERIT || !plan->sites.count(site)) return nullptr;
    auto it = store->entries.find(site);
    if (it == store->entries.end()) {
        throw std::runtime_error("inherit step " + std::to_string(step_index) +
                                 ": no stored residual for site " + site.str() +
                                 " (malformed sampling mode)");
    }
    return &it->second.residual;
}

void InheritTap::observe(const SiteId& site, const Tensor& residual,
                         const Tensor& identity_input, const Tensor& out) {
    if (role == StepRole::EXTRACT && plan->sites.count(site)) {
        FeatureStore::Entry& e = store->entries[site];
        e.step_recorded = step_index;
        e.residual = residual;
    }
    if (role == StepRole::INHERIT && log && plan->sites.count(site)) {
        const auto& e = store->entries.at(site);
        log->push_back({site, e.step_recorded, step_index, e.residual, identity_input, out});
    }
}

Tensor inherited_forward(const UNet& unet, const Tensor& x_t, int t, const Tensor& cond,
                         const SkipPlan& plan, StepRole role, FeatureStore& store, int step_index,
                         SubstitutionLog* log) {
    if (role == StepRole::INHERIT) {
        for (const SiteId& site : plan.sites) {
            if (!store.entries.count(site)) {
                throw std::runtime_error("inherit step " + std::to_string(step_index) +
                                         ": store has no entry for site " + site.str());
            }
        }
    }
    InheritTap tap(plan, role, store, step_index, log);
    ForwardOptions opts;
    opts.tap = &tap;
    return unet.forward(x_t, t, cond, opts);
}

StepRole InheritContext::role_for_step(int step) const {
    if (plan.sites.empty()) return StepRole::FULL;
    if (step < 0 || step >= (int)mode.roles.size()) {
        throw std::invalid_argument("step outside the sampling mode");
    }
    return mode.roles[(size_t)step];
}

FlopReport flop_estimate(const UNetConfig& config, const SkipPlan& plan, const SamplingMode& mode) {
    NetLayout layout = elaborate(config);
    FlopReport r;
    r.baseline_per_step = layout.total_macs;

    long long skipped = 0;
    for (const SiteId& site : plan.sites) {
        const UnitLayout* u = layout.find_unit(site);
        if (!u) throw std::invalid_argument("flop_estimate: site " + site.str() + " not in config");
        skipped += u->residual_macs;  // the shortcut still runs on inherit steps
    }
    r.skipped_per_inherit_step = skipped;

    long long total = 0, saved = 0;
    r.per_step.reserve(mode.roles.size());
    for (StepRole role : mode.roles) {
        long long cost = layout.total_macs;
        if (role == StepRole::INHERIT) {
            cost -= skipped;
            saved += skipped;
        }
        r.per_step.push_back(cost);
        total += layout.total_macs;
    }
    r.total_saved_fraction = total > 0 ? (double)saved / (double)total : 0.0;
    return r;
}

}  // namespace asdm

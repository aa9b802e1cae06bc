#include "moss/params.h"

#include <cmath>
#include <stdexcept>

#include "moss/rng.h"

namespace moss {

namespace {

enum class Init { linear_weight, bias, table, one, zero };

struct ParamSpec {
    std::string group;
    std::string name;
    std::vector<int> shape;
    Init init;
};

void add_linear(std::vector<ParamSpec>& out, const std::string& group,
                const std::string& base, int in, int outdim,
                Init winit = Init::linear_weight) {
    out.push_back({group, base + ".w", {in, outdim}, winit});
    out.push_back({group, base + ".b", {outdim}, Init::bias});
}

void add_blocks(std::vector<ParamSpec>& out, const std::string& group,
                const std::string& prefix, int depth, int w) {
    for (int l = 0; l < depth; ++l) {
        const std::string base = prefix + ".blk" + std::to_string(l);
        out.push_back({group, base + ".ln1.g", {w}, Init::one});
        out.push_back({group, base + ".ln1.b", {w}, Init::bias});
        add_linear(out, group, base + ".q", w, w);
        add_linear(out, group, base + ".k", w, w);
        add_linear(out, group, base + ".v", w, w);
        // Residual-branch outputs and the modulation projection start at
        // zero, so every block is the identity at init and conditioning
        // fades in as training demands it.
        add_linear(out, group, base + ".proj", w, w, Init::zero);
        out.push_back({group, base + ".ln2.g", {w}, Init::one});
        out.push_back({group, base + ".ln2.b", {w}, Init::bias});
        add_linear(out, group, base + ".mlp1", w, 4 * w);
        add_linear(out, group, base + ".mlp2", 4 * w, w, Init::zero);
        add_linear(out, group, base + ".ada", w, 4 * w, Init::zero);
    }
}

std::vector<ParamSpec> layout(const ModelConfig& cfg) {
    const int w = effective_width(cfg);
    std::vector<ParamSpec> out;
    add_linear(out, "encoder", "enc.vis", cfg.obs_feat_dim, w);
    out.push_back({"encoder", "enc.task", {cfg.num_tasks, w}, Init::table});

    add_linear(out, "action", "act.embed.state", cfg.state_dim, w);
    add_linear(out, "action", "act.embed.act", cfg.action_dim, w);
    out.push_back({"action", "act.pos", {cfg.action_tokens(), w}, Init::table});
    add_linear(out, "action", "act.tau", w, w);
    add_blocks(out, "action", "act", cfg.depth, w);
    // Zero head: the predicted velocity field starts at exactly zero, which
    // keeps the first optimizer steps well-scaled instead of fighting a
    // random readout of the token stack.
    add_linear(out, "action", "act.head", w, cfg.action_dim, Init::zero);

    for (const ModalitySpec& m : cfg.modalities) {
        const std::string group = "stream:" + m.name;
        const std::string prefix = "str." + m.name;
        add_linear(out, group, prefix + ".embed.past", m.dim, w);
        add_linear(out, group, prefix + ".embed.fut", m.dim, w);
        out.push_back(
            {group, prefix + ".pos", {cfg.modality_tokens(), w}, Init::table});
        if (!cfg.fused) {
            // Decoupled streams mirror the expert's block stack privately;
            // the fused control routes everything through the shared blocks.
            add_linear(out, group, prefix + ".tau", w, w);
            add_blocks(out, group, prefix, cfg.depth, w);
        }
        add_linear(out, group, prefix + ".head", w, m.dim, Init::zero);
    }
    return out;
}

void fill_param(Tensor& t, const ParamSpec& spec, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "init:" + spec.name));
    double* d = t.data();
    const std::size_t n = t.size();
    switch (spec.init) {
    case Init::linear_weight: {
        const double std = 1.0 / std::sqrt(static_cast<double>(spec.shape[0]));
        for (std::size_t i = 0; i < n; ++i)
            d[i] = std * rng.normal();
        break;
    }
    case Init::table: {
        const double std =
            1.0 / std::sqrt(static_cast<double>(spec.shape.back()));
        for (std::size_t i = 0; i < n; ++i)
            d[i] = std * rng.normal();
        break;
    }
    case Init::bias:
        for (std::size_t i = 0; i < n; ++i)
            d[i] = 0.0;
        break;
    case Init::one:
        for (std::size_t i = 0; i < n; ++i)
            d[i] = 1.0;
        break;
    case Init::zero:
        for (std::size_t i = 0; i < n; ++i)
            d[i] = 0.0;
        break;
    }
}

} // namespace

void ParamStore::add(const std::string& group, const std::string& name,
                     Tensor t) {
    if (index_.count(name))
        throw std::runtime_error("params: duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    groups_[group].push_back(entries_.size());
    entries_.push_back({name, std::move(t)});
    entry_group_.push_back(group);
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::runtime_error("params: unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::runtime_error("params: unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

const std::string& ParamStore::group_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::runtime_error("params: unknown parameter '" + name + "'");
    return entry_group_[it->second];
}

std::vector<std::string> ParamStore::group_names() const {
    std::vector<std::string> out;
    for (const auto& [group, members] : groups_)
        out.push_back(group);
    return out;
}

std::vector<NamedParam> ParamStore::group_entries(const std::string& group) const {
    auto it = groups_.find(group);
    if (it == groups_.end())
        throw std::runtime_error("params: unknown group '" + group + "'");
    std::vector<NamedParam> out;
    for (std::size_t i : it->second)
        out.push_back(entries_[i]);
    return out;
}

std::vector<NamedParam> ParamStore::trainable() const {
    std::vector<NamedParam> out;
    for (const NamedParam& p : entries_)
        if (p.value.requires_grad())
            out.push_back(p);
    return out;
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const NamedParam& p : entries_)
        n += p.value.size();
    return n;
}

void set_trainable(ParamStore& params, const TrainabilityMask& mask) {
    const std::vector<std::string> groups = params.group_names();
    for (const auto& [name, flag] : mask) {
        (void)flag;
        bool known = false;
        for (const std::string& g : groups)
            known = known || g == name;
        if (!known)
            throw std::runtime_error("set_trainable: unknown group '" + name +
                                     "'");
    }
    for (const std::string& g : groups) {
        auto it = mask.find(g);
        if (it == mask.end())
            throw std::runtime_error("set_trainable: mask missing group '" + g +
                                     "'");
        for (const NamedParam& p : params.group_entries(g))
            params.at(p.name).set_requires_grad(it->second);
    }
}

ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore store;
    for (const ParamSpec& spec : layout(cfg)) {
        Tensor t = Tensor::zeros(spec.shape, true);
        fill_param(t, spec, seed);
        store.add(spec.group, spec.name, t);
    }
    return store;
}

void reinit_group(ParamStore& params, const ModelConfig& cfg,
                  const std::string& group, std::uint64_t seed) {
    bool found = false;
    for (const ParamSpec& spec : layout(cfg)) {
        if (spec.group != group)
            continue;
        found = true;
        Tensor& t = params.at(spec.name);
        fill_param(t, spec, seed);
        if (t.requires_grad())
            t.zero_grad();
    }
    if (!found)
        throw std::runtime_error("reinit_group: unknown group '" + group + "'");
}

std::size_t count_params(const ModelConfig& cfg) {
    std::size_t n = 0;
    for (const ParamSpec& spec : layout(cfg))
        n += shape_numel(spec.shape);
    return n;
}

int resolve_fused_width(const ModelConfig& cfg) {
    ModelConfig full = cfg;
    full.fused = false;
    full.fused_width = 0;
    const double target = static_cast<double>(count_params(full));
    int best_w = 0;
    double best_err = -1.0;
    for (int w = cfg.heads; w <= 6 * cfg.width; w += cfg.heads) {
        ModelConfig trial = cfg;
        trial.fused = true;
        trial.fused_width = w;
        const double err =
            std::abs(static_cast<double>(count_params(trial)) - target);
        if (best_err < 0.0 || err < best_err) {
            best_err = err;
            best_w = w;
        }
    }
    if (best_err > 0.10 * target)
        throw std::runtime_error(
            "resolve_fused_width: no width matches the parameter budget "
            "within 10%");
    return best_w;
}

int effective_width(const ModelConfig& cfg) {
    if (!cfg.fused)
        return cfg.width;
    if (cfg.fused_width > 0)
        return cfg.fused_width;
    return resolve_fused_width(cfg);
}

} // namespace moss

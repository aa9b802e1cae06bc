#include "moss/config.h"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace moss {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::runtime_error("config: unknown key '" + it.key() +
                                     "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key))
        out = obj.at(key).get<T>();
}

} // namespace

void ModelConfig::validate() const {
    if (action_dim < 1 || state_dim < 1 || horizon < 1 || width < 1 ||
        depth < 1 || heads < 1 || obs_feat_dim < 1 || num_tasks < 1)
        throw std::runtime_error("config: model dimensions must be positive");
    if (width % heads != 0)
        throw std::runtime_error("config: width must be divisible by heads");
    if (fused_width < 0 || (fused_width > 0 && fused_width % heads != 0))
        throw std::runtime_error(
            "config: fused_width must be 0 (auto) or divisible by heads");
    std::set<std::string> names;
    for (const ModalitySpec& m : modalities) {
        if (m.dim < 1)
            throw std::runtime_error("config: modality '" + m.name +
                                     "' dim must be >= 1");
        if (!names.insert(m.name).second)
            throw std::runtime_error("config: duplicate modality name '" +
                                     m.name + "'");
    }
}

void TrainingConfig::validate() const {
    if (batch_size < 1 || warmup < 1 || iters_base < 1 || iters_stage1 < 1 ||
        iters_stage2 < 1 || k_sample < 1)
        throw std::runtime_error("config: training counts must be positive");
    if (peak_lr <= 0.0 || beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 ||
        beta2 >= 1.0 || weight_decay < 0.0)
        throw std::runtime_error("config: bad optimizer hyperparameters");
    if (lambda_phy < 0.0)
        throw std::runtime_error("config: lambda_phy must be >= 0");
}

void EnvConfig::validate() const {
    if (obs_noise < 0.0)
        throw std::runtime_error("config: obs_noise must be >= 0");
    if (demos_per_task < 1)
        throw std::runtime_error("config: demos_per_task must be >= 1");
}

void EvalConfig::validate() const {
    if (episodes < 1)
        throw std::runtime_error("config: eval episodes must be >= 1");
}

void RunConfig::validate() const {
    model.validate();
    training.validate();
    env.validate();
    eval.validate();
}

RunConfig parse_run_config(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig cfg;
    reject_unknown(doc, {"model", "training", "env", "eval"}, "document root");
    if (doc.contains("model")) {
        const json& m = doc["model"];
        reject_unknown(m,
                       {"action_dim", "state_dim", "horizon", "modalities",
                        "width", "depth", "heads", "obs_feat_dim", "num_tasks",
                        "fused", "fused_width"},
                       "model");
        read(m, "action_dim", cfg.model.action_dim);
        read(m, "state_dim", cfg.model.state_dim);
        read(m, "horizon", cfg.model.horizon);
        read(m, "width", cfg.model.width);
        read(m, "depth", cfg.model.depth);
        read(m, "heads", cfg.model.heads);
        read(m, "obs_feat_dim", cfg.model.obs_feat_dim);
        read(m, "num_tasks", cfg.model.num_tasks);
        read(m, "fused", cfg.model.fused);
        read(m, "fused_width", cfg.model.fused_width);
        if (m.contains("modalities")) {
            cfg.model.modalities.clear();
            for (const json& e : m["modalities"]) {
                reject_unknown(e, {"name", "dim"}, "modalities entry");
                ModalitySpec spec;
                spec.name = e.at("name").get<std::string>();
                spec.dim = e.at("dim").get<int>();
                cfg.model.modalities.push_back(spec);
            }
        }
    }
    if (doc.contains("training")) {
        const json& t = doc["training"];
        reject_unknown(t,
                       {"batch_size", "peak_lr", "beta1", "beta2",
                        "weight_decay", "warmup", "iters_base", "iters_stage1",
                        "iters_stage2", "lambda_phy", "k_sample",
                        "freeze_encoder", "seed"},
                       "training");
        read(t, "batch_size", cfg.training.batch_size);
        read(t, "peak_lr", cfg.training.peak_lr);
        read(t, "beta1", cfg.training.beta1);
        read(t, "beta2", cfg.training.beta2);
        read(t, "weight_decay", cfg.training.weight_decay);
        read(t, "warmup", cfg.training.warmup);
        read(t, "iters_base", cfg.training.iters_base);
        read(t, "iters_stage1", cfg.training.iters_stage1);
        read(t, "iters_stage2", cfg.training.iters_stage2);
        read(t, "lambda_phy", cfg.training.lambda_phy);
        read(t, "k_sample", cfg.training.k_sample);
        read(t, "freeze_encoder", cfg.training.freeze_encoder);
        read(t, "seed", cfg.training.seed);
    }
    if (doc.contains("env")) {
        const json& e = doc["env"];
        reject_unknown(e, {"obs_noise", "demos_per_task"}, "env");
        read(e, "obs_noise", cfg.env.obs_noise);
        read(e, "demos_per_task", cfg.env.demos_per_task);
    }
    if (doc.contains("eval")) {
        const json& e = doc["eval"];
        reject_unknown(e, {"episodes"}, "eval");
        read(e, "episodes", cfg.eval.episodes);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
    json m;
    m["action_dim"] = cfg.model.action_dim;
    m["state_dim"] = cfg.model.state_dim;
    m["horizon"] = cfg.model.horizon;
    json mods = json::array();
    for (const ModalitySpec& s : cfg.model.modalities)
        mods.push_back({{"name", s.name}, {"dim", s.dim}});
    m["modalities"] = mods;
    m["width"] = cfg.model.width;
    m["depth"] = cfg.model.depth;
    m["heads"] = cfg.model.heads;
    m["obs_feat_dim"] = cfg.model.obs_feat_dim;
    m["num_tasks"] = cfg.model.num_tasks;
    m["fused"] = cfg.model.fused;
    m["fused_width"] = cfg.model.fused_width;
    json t;
    t["batch_size"] = cfg.training.batch_size;
    t["peak_lr"] = cfg.training.peak_lr;
    t["beta1"] = cfg.training.beta1;
    t["beta2"] = cfg.training.beta2;
    t["weight_decay"] = cfg.training.weight_decay;
    t["warmup"] = cfg.training.warmup;
    t["iters_base"] = cfg.training.iters_base;
    t["iters_stage1"] = cfg.training.iters_stage1;
    t["iters_stage2"] = cfg.training.iters_stage2;
    t["lambda_phy"] = cfg.training.lambda_phy;
    t["k_sample"] = cfg.training.k_sample;
    t["freeze_encoder"] = cfg.training.freeze_encoder;
    t["seed"] = cfg.training.seed;
    json e;
    e["obs_noise"] = cfg.env.obs_noise;
    e["demos_per_task"] = cfg.env.demos_per_task;
    json v;
    v["episodes"] = cfg.eval.episodes;
    json doc;
    doc["model"] = m;
    doc["training"] = t;
    doc["env"] = e;
    doc["eval"] = v;
    return doc.dump(2);
}

} // namespace moss

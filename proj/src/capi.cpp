#include "moss/moss_c.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "moss/bench.h"
#include "moss/checkpoint.h"
#include "moss/config.h"
#include "moss/env.h"
#include "moss/eval.h"
#include "moss/trainer.h"

namespace fs = std::filesystem;

struct moss_ctx {
    moss::RunConfig cfg;
    std::string control = "none";
};

struct moss_model {
    moss::Checkpoint ck;
    std::string path;
};

namespace {

thread_local std::string t_error;

char* dup_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

moss_status fail(moss_status code, const std::string& msg) {
    t_error = msg;
    return code;
}

// Runs the body, translating exceptions into the given failure code.
template <typename F>
moss_status guarded(moss_status on_throw, F&& body) {
    try {
        return body();
    } catch (const std::exception& e) {
        return fail(on_throw, e.what());
    } catch (...) {
        return fail(on_throw, "unknown error");
    }
}

moss_status require(bool ok, const char* what) {
    if (ok) return MOSS_OK;
    return fail(MOSS_ERR_VALIDATION, std::string("invalid argument: ") + what);
}

// The control variant folded into the effective run configuration.
moss::RunConfig effective_config(const moss_ctx* ctx) {
    moss::RunConfig cfg = ctx->cfg;
    if (ctx->control == "fused") {
        cfg.model.fused = true;
        cfg.model.fused_width = 0;
    } else if (ctx->control == "no-pred") {
        cfg.training.lambda_phy = 0.0;
    }
    return cfg;
}

} // namespace

extern "C" {

const char* moss_last_error(void) { return t_error.c_str(); }

void moss_string_free(char* s) { delete[] s; }

moss_status moss_ctx_create(const char* config_json, moss_ctx** out) {
    if (require(out != nullptr, "out") != MOSS_OK) return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_VALIDATION, [&] {
        auto ctx = new moss_ctx;
        ctx->cfg = (config_json == nullptr || config_json[0] == '\0')
                       ? moss::RunConfig{}
                       : moss::parse_run_config(config_json);
        ctx->cfg.validate();
        *out = ctx;
        return MOSS_OK;
    });
}

moss_status moss_ctx_create_from_file(const char* path, moss_ctx** out) {
    if (require(out != nullptr, "out") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(path != nullptr, "path") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_VALIDATION, [&] {
        auto ctx = new moss_ctx;
        ctx->cfg = moss::load_run_config(path);
        ctx->cfg.validate();
        *out = ctx;
        return MOSS_OK;
    });
}

void moss_ctx_destroy(moss_ctx* ctx) { delete ctx; }

moss_status moss_ctx_config_json(const moss_ctx* ctx, char** out_json) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_json != nullptr, "out_json") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        *out_json = dup_string(moss::run_config_to_json(ctx->cfg));
        return MOSS_OK;
    });
}

moss_status moss_ctx_set_seed(moss_ctx* ctx, uint64_t seed) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    ctx->cfg.training.seed = seed;
    return MOSS_OK;
}

moss_status moss_ctx_set_modalities(moss_ctx* ctx, const char* csv) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(csv != nullptr, "csv") != MOSS_OK) return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_VALIDATION, [&] {
        std::vector<moss::ModalitySpec> mods;
        std::string text = csv;
        std::size_t pos = 0;
        while (pos <= text.size() && !text.empty()) {
            std::size_t comma = text.find(',', pos);
            std::string name = text.substr(
                pos, comma == std::string::npos ? std::string::npos
                                                : comma - pos);
            if (name == "tactile")
                mods.push_back({"tactile", 4});
            else if (name == "torque")
                mods.push_back({"torque", 2});
            else if (name == "none" && text == "none")
                ; // explicit empty set
            else
                throw std::runtime_error(
                    "unknown modality '" + name +
                    "' (expected tactile, torque, or none)");
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        ctx->cfg.model.modalities = std::move(mods);
        ctx->cfg.validate();
        return MOSS_OK;
    });
}

moss_status moss_ctx_set_control(moss_ctx* ctx, const char* control) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(control != nullptr, "control") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    std::string c = control;
    if (c != "none" && c != "fused" && c != "single-stage" && c != "no-pred")
        return fail(MOSS_ERR_VALIDATION,
                    "unknown control '" + c +
                        "' (expected none|fused|single-stage|no-pred)");
    ctx->control = c;
    return MOSS_OK;
}

moss_status moss_gen_demos(moss_ctx* ctx, const char* out_dir,
                           char** out_report_json) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_dir != nullptr, "out_dir") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::RunConfig cfg = effective_config(ctx);
        moss::DemoSet set = moss::ensure_demos(cfg, out_dir);
        moss::write_run_manifest(std::string(out_dir) +
                                     "/demos_manifest.json",
                                 "gen-demos", cfg, set, set.paths, 0.0);
        nlohmann::json j;
        j["files"] = set.paths;
        j["episodes"] = set.episodes.size();
        j["episodes_per_task"] = cfg.env.demos_per_task;
        j["content_hash"] = set.content_hash;
        if (out_report_json) *out_report_json = dup_string(j.dump());
        return MOSS_OK;
    });
}

moss_status moss_train_base(moss_ctx* ctx, const char* out_dir,
                            char** out_ckpt_path) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_dir != nullptr, "out_dir") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::RunConfig cfg = effective_config(ctx);
        moss::DemoSet demos = moss::ensure_demos(cfg, out_dir);
        moss::TrainReport report = moss::train_base(
            cfg, demos.episodes, std::string(out_dir) + "/train-base.jsonl");
        std::string path = std::string(out_dir) + "/base.ckpt";
        moss::save_checkpoint(path, report.checkpoint);
        moss::write_run_manifest(std::string(out_dir) +
                                     "/train_base_manifest.json",
                                 "train-base", cfg, demos, {path},
                                 report.seconds);
        if (out_ckpt_path) *out_ckpt_path = dup_string(path);
        return MOSS_OK;
    });
}

moss_status moss_train_streams(moss_ctx* ctx, int stage, const char* out_dir,
                               char** out_ckpt_path) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_dir != nullptr, "out_dir") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    if (stage < 0 || stage > 2)
        return fail(MOSS_ERR_VALIDATION,
                    "stage must be 1, 2, or 0 for the full pipeline");
    if (ctx->control == "single-stage" && stage != 0)
        return fail(MOSS_ERR_VALIDATION,
                    "the single-stage control trains in one phase; use "
                    "stage 0 (\"all\")");
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::RunConfig cfg = effective_config(ctx);
        moss::DemoSet demos = moss::ensure_demos(cfg, out_dir);
        const std::string dir = out_dir;
        const std::string base_path = dir + "/base.ckpt";
        const std::string s1_path = dir + "/stage1.ckpt";
        const std::string final_path = dir + "/final.ckpt";
        double seconds = 0.0;
        std::vector<std::string> outputs;
        std::string result_path;

        if (ctx->control == "single-stage") {
            if (!fs::exists(base_path))
                throw std::runtime_error("missing base checkpoint " +
                                         base_path +
                                         " (run train-base first)");
            moss::Checkpoint base = moss::load_checkpoint(base_path);
            moss::TrainReport rep = moss::train_single_stage(
                cfg, base, demos.episodes, dir + "/train-final.jsonl");
            moss::save_checkpoint(final_path, rep.checkpoint);
            seconds += rep.seconds;
            outputs.push_back(final_path);
            result_path = final_path;
        } else {
            if (stage == 0 || stage == 1) {
                if (!fs::exists(base_path))
                    throw std::runtime_error("missing base checkpoint " +
                                             base_path +
                                             " (run train-base first)");
                moss::Checkpoint base = moss::load_checkpoint(base_path);
                moss::TrainReport rep = moss::train_stage1(
                    cfg, base, demos.episodes, dir + "/train-stage1.jsonl");
                moss::save_checkpoint(s1_path, rep.checkpoint);
                seconds += rep.seconds;
                outputs.push_back(s1_path);
                result_path = s1_path;
            }
            if (stage == 0 || stage == 2) {
                if (!fs::exists(s1_path))
                    throw std::runtime_error(
                        "missing stage-1 checkpoint " + s1_path);
                moss::Checkpoint s1 = moss::load_checkpoint(s1_path);
                moss::TrainReport rep = moss::train_stage2(
                    cfg, s1, demos.episodes, dir + "/train-final.jsonl");
                moss::save_checkpoint(final_path, rep.checkpoint);
                seconds += rep.seconds;
                outputs.push_back(final_path);
                result_path = final_path;
            }
        }
        moss::write_run_manifest(dir + "/train_streams_manifest.json",
                                 "train-moss", cfg, demos, outputs, seconds);
        if (out_ckpt_path) *out_ckpt_path = dup_string(result_path);
        return MOSS_OK;
    });
}

moss_status moss_model_load(const char* ckpt_path, moss_model** out) {
    if (require(out != nullptr, "out") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(ckpt_path != nullptr, "ckpt_path") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        auto m = new moss_model;
        m->ck = moss::load_checkpoint(ckpt_path);
        m->path = ckpt_path;
        *out = m;
        return MOSS_OK;
    });
}

void moss_model_destroy(moss_model* m) { delete m; }

moss_status moss_model_stage(const moss_model* m, char** out_stage) {
    if (require(m != nullptr, "model") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_stage != nullptr, "out_stage") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    *out_stage = dup_string(m->ck.stage);
    return MOSS_OK;
}

moss_status moss_evaluate(const moss_model* m, const char* task,
                          int episodes, uint64_t seed0,
                          char** out_report_json) {
    if (require(m != nullptr, "model") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(task != nullptr, "task") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    int task_id = 0;
    moss_status pre = guarded(MOSS_ERR_VALIDATION, [&] {
        task_id = moss::env::task_id_from_name(task);
        return MOSS_OK;
    });
    if (pre != MOSS_OK) return pre;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        int n = episodes > 0 ? episodes : m->ck.config.eval.episodes;
        moss::SuccessReport r =
            moss::evaluate_policy(m->ck, task_id, n, seed0, m->path);
        if (out_report_json)
            *out_report_json = dup_string(moss::success_report_to_json(r));
        return MOSS_OK;
    });
}

moss_status moss_dump_attention(const moss_model* m, const char* task,
                                uint64_t seed, const char* csv_path,
                                char** out_summary_json) {
    if (require(m != nullptr, "model") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(task != nullptr, "task") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    if (require(csv_path != nullptr, "csv_path") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    int task_id = 0;
    moss_status pre = guarded(MOSS_ERR_VALIDATION, [&] {
        task_id = moss::env::task_id_from_name(task);
        return MOSS_OK;
    });
    if (pre != MOSS_OK) return pre;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::AttentionDumpSummary s =
            moss::dump_attention(m->ck, task_id, seed, csv_path);
        nlohmann::json j;
        j["csv"] = s.csv_path;
        j["first_contact_step"] = s.first_contact_step;
        j["streams"] = s.streams;
        j["pre_mean_z"] = s.pre_mean_z;
        j["contact_mean_z"] = s.contact_mean_z;
        if (out_summary_json) *out_summary_json = dup_string(j.dump());
        return MOSS_OK;
    });
}

moss_status moss_dump_predictions(const moss_model* m, const char* task,
                                  uint64_t seed, const char* csv_path,
                                  char** out_summary_json) {
    if (require(m != nullptr, "model") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(task != nullptr, "task") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    if (require(csv_path != nullptr, "csv_path") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    int task_id = 0;
    moss_status pre = guarded(MOSS_ERR_VALIDATION, [&] {
        task_id = moss::env::task_id_from_name(task);
        return MOSS_OK;
    });
    if (pre != MOSS_OK) return pre;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::PredictionDumpSummary s =
            moss::dump_predictions(m->ck, task_id, seed, csv_path);
        nlohmann::json j;
        j["csv"] = s.csv_path;
        j["modalities"] = s.modalities;
        j["rmse_model"] = s.rmse_model;
        j["rmse_persistence"] = s.rmse_persistence;
        j["rmse_model_transitions"] = s.rmse_model_transitions;
        j["rmse_persistence_transitions"] = s.rmse_persistence_transitions;
        j["n_transitions"] = s.n_transitions;
        if (out_summary_json) *out_summary_json = dup_string(j.dump());
        return MOSS_OK;
    });
}

moss_status moss_run_ablations(moss_ctx* ctx, const char* out_dir,
                               char** out_csv_path) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_dir != nullptr, "out_dir") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::AblationTable table =
            moss::run_ablations(ctx->cfg, out_dir);
        if (out_csv_path) *out_csv_path = dup_string(table.csv_path);
        return MOSS_OK;
    });
}

moss_status moss_sweep_lambda(moss_ctx* ctx, const char* out_dir,
                              char** out_csv_path) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(out_dir != nullptr, "out_dir") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        moss::LambdaTable table = moss::sweep_lambda(ctx->cfg, out_dir);
        if (out_csv_path) *out_csv_path = dup_string(table.csv_path);
        return MOSS_OK;
    });
}

moss_status moss_measure_latency(moss_ctx* ctx, const char* csv_path,
                                 char** out_table_json) {
    if (require(ctx != nullptr, "ctx") != MOSS_OK) return MOSS_ERR_VALIDATION;
    if (require(csv_path != nullptr, "csv_path") != MOSS_OK)
        return MOSS_ERR_VALIDATION;
    return guarded(MOSS_ERR_RUNTIME, [&] {
        auto rows = moss::measure_latency(ctx->cfg);
        std::string cfg_hash =
            moss::fnv1a64_hex(moss::run_config_to_json(ctx->cfg));
        moss::write_latency_csv(csv_path, rows, cfg_hash);
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json j;
            j["streams"] = r.streams;
            j["tokens"] = r.tokens;
            j["median_ms"] = r.median_ms;
            j["ratio"] = r.ratio;
            arr.push_back(j);
        }
        if (out_table_json) *out_table_json = dup_string(arr.dump());
        return MOSS_OK;
    });
}

} // extern "C"

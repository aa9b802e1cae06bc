// Command-line front end. Links only the C API; every operation goes
// through the shared library so the CLI exercises the same surface an
// external embedder would use.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <moss/moss_c.h>

namespace {

struct CtxGuard {
    moss_ctx* p = nullptr;
    ~CtxGuard() { moss_ctx_destroy(p); }
};

struct ModelGuard {
    moss_model* p = nullptr;
    ~ModelGuard() { moss_model_destroy(p); }
};

// Takes ownership of a C-API string and converts it.
std::string take(char* s) {
    std::string out = s ? s : "";
    moss_string_free(s);
    return out;
}

int fail_op(const std::string& op, moss_status s) {
    std::fprintf(stderr, "moss %s: %s\n", op.c_str(), moss_last_error());
    return static_cast<int>(s);
}

struct Opts {
    std::string config;
    std::string out = "runs";
    std::string stage = "all";
    std::string modalities;
    std::string control;
    std::string ckpt;
    std::string task;
    int episodes = 0;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::uint64_t eval_seed = 1000000; // disjoint from demo seeds
};

int make_ctx(const std::string& op, const Opts& o, moss_ctx** out) {
    moss_status s = o.config.empty()
                        ? moss_ctx_create(nullptr, out)
                        : moss_ctx_create_from_file(o.config.c_str(), out);
    if (s != MOSS_OK) return fail_op(op, s);
    if (o.seed_set && (s = moss_ctx_set_seed(*out, o.seed)) != MOSS_OK)
        return fail_op(op, s);
    if (!o.modalities.empty() &&
        (s = moss_ctx_set_modalities(*out, o.modalities.c_str())) != MOSS_OK)
        return fail_op(op, s);
    if (!o.control.empty() &&
        (s = moss_ctx_set_control(*out, o.control.c_str())) != MOSS_OK)
        return fail_op(op, s);
    return 0;
}

int load_model(const std::string& op, const Opts& o, moss_model** out) {
    moss_status s = moss_model_load(o.ckpt.c_str(), out);
    if (s != MOSS_OK) return fail_op(op, s);
    return 0;
}

bool write_text(const std::string& path, const std::string& text,
                const std::string& op) {
    std::ofstream f(path, std::ios::trunc);
    f << text;
    if (!text.empty() && text.back() != '\n') f << '\n';
    if (!f) {
        std::fprintf(stderr, "moss %s: cannot write %s\n", op.c_str(),
                     path.c_str());
        return false;
    }
    return true;
}

// Small provenance record for subcommands whose outputs the CLI itself
// assembles (training/ablation ops write richer manifests internally).
bool write_cli_manifest(const std::string& path, const std::string& op,
                        const nlohmann::json& inputs,
                        const std::vector<std::string>& outputs) {
    nlohmann::json j;
    j["op"] = op;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    return write_text(path, j.dump(2), op);
}

int run_gen_demos(const Opts& o) {
    CtxGuard ctx;
    if (int rc = make_ctx("gen-demos", o, &ctx.p)) return rc;
    char* report = nullptr;
    moss_status s = moss_gen_demos(ctx.p, o.out.c_str(), &report);
    if (s != MOSS_OK) return fail_op("gen-demos", s);
    std::printf("%s\n", take(report).c_str());
    return 0;
}

int run_train_base(const Opts& o) {
    CtxGuard ctx;
    if (int rc = make_ctx("train-base", o, &ctx.p)) return rc;
    char* path = nullptr;
    moss_status s = moss_train_base(ctx.p, o.out.c_str(), &path);
    if (s != MOSS_OK) return fail_op("train-base", s);
    std::printf("%s\n", take(path).c_str());
    return 0;
}

int run_train_moss(const Opts& o) {
    CtxGuard ctx;
    if (int rc = make_ctx("train-moss", o, &ctx.p)) return rc;
    int stage = o.stage == "all" ? 0 : (o.stage == "1" ? 1 : 2);
    char* path = nullptr;
    moss_status s = moss_train_streams(ctx.p, stage, o.out.c_str(), &path);
    if (s != MOSS_OK) return fail_op("train-moss", s);
    std::printf("%s\n", take(path).c_str());
    return 0;
}

int run_eval(const Opts& o) {
    ModelGuard m;
    if (int rc = load_model("eval", o, &m.p)) return rc;
    char* report = nullptr;
    moss_status s = moss_evaluate(m.p, o.task.c_str(), o.episodes,
                                  o.eval_seed, &report);
    if (s != MOSS_OK) return fail_op("eval", s);
    std::string text = take(report);
    std::printf("%s\n", text.c_str());
    std::filesystem::create_directories(o.out);
    std::string report_path = o.out + "/eval-" + o.task + ".json";
    if (!write_text(report_path, text, "eval")) return 2;
    nlohmann::json inputs{{"ckpt", o.ckpt},
                          {"task", o.task},
                          {"episodes", o.episodes},
                          {"seed", o.eval_seed}};
    if (!write_cli_manifest(o.out + "/eval-" + o.task + "-manifest.json",
                            "eval", inputs, {report_path}))
        return 2;
    return 0;
}

int run_dump(const Opts& o, bool attention) {
    const std::string op = attention ? "dump-attn" : "dump-pred";
    ModelGuard m;
    if (int rc = load_model(op, o, &m.p)) return rc;
    std::filesystem::create_directories(o.out);
    const std::string tag = attention ? "attention" : "predictions";
    std::string csv_path = o.out + "/" + tag + "-" + o.task + ".csv";
    char* summary = nullptr;
    moss_status s =
        attention ? moss_dump_attention(m.p, o.task.c_str(), o.eval_seed,
                                        csv_path.c_str(), &summary)
                  : moss_dump_predictions(m.p, o.task.c_str(), o.eval_seed,
                                          csv_path.c_str(), &summary);
    if (s != MOSS_OK) return fail_op(op, s);
    std::string text = take(summary);
    std::printf("%s\n", text.c_str());
    std::string summary_path =
        o.out + "/" + tag + "-" + o.task + "-summary.json";
    if (!write_text(summary_path, text, op)) return 2;
    nlohmann::json inputs{
        {"ckpt", o.ckpt}, {"task", o.task}, {"seed", o.eval_seed}};
    if (!write_cli_manifest(o.out + "/" + tag + "-" + o.task +
                                "-manifest.json",
                            op, inputs, {csv_path, summary_path}))
        return 2;
    return 0;
}

int run_ablate(const Opts& o) {
    CtxGuard ctx;
    if (int rc = make_ctx("ablate", o, &ctx.p)) return rc;
    char* csv = nullptr;
    moss_status s = moss_run_ablations(ctx.p, o.out.c_str(), &csv);
    if (s != MOSS_OK) return fail_op("ablate", s);
    std::printf("%s\n", take(csv).c_str());
    return 0;
}

int run_sweep_lambda(const Opts& o) {
    CtxGuard ctx;
    if (int rc = make_ctx("sweep-lambda", o, &ctx.p)) return rc;
    char* csv = nullptr;
    moss_status s = moss_sweep_lambda(ctx.p, o.out.c_str(), &csv);
    if (s != MOSS_OK) return fail_op("sweep-lambda", s);
    std::printf("%s\n", take(csv).c_str());
    return 0;
}

int run_latency(const Opts& o) {
    CtxGuard ctx;
    if (int rc = make_ctx("latency", o, &ctx.p)) return rc;
    std::filesystem::create_directories(o.out);
    std::string csv_path = o.out + "/latency.csv";
    char* table = nullptr;
    moss_status s =
        moss_measure_latency(ctx.p, csv_path.c_str(), &table);
    if (s != MOSS_OK) return fail_op("latency", s);
    std::string text = take(table);
    std::printf("%s\n", text.c_str());
    std::string json_path = o.out + "/latency.json";
    if (!write_text(json_path, text, "latency")) return 2;
    nlohmann::json inputs{{"config", o.config}};
    if (!write_cli_manifest(o.out + "/latency-manifest.json", "latency",
                            inputs, {csv_path, json_path}))
        return 2;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Flow-matching action-chunk policy with decoupled physical "
        "sensory streams: demos, training, evaluation, and analysis."};
    app.require_subcommand(1);
    Opts o;

    auto add_common = [&](CLI::App* sub, bool training) {
        sub->add_option("--config", o.config, "JSON run configuration");
        sub->add_option("--out", o.out, "output directory")
            ->capture_default_str();
        if (training) {
            sub->add_option("--seed", o.seed, "training seed")
                ->each([&](const std::string&) { o.seed_set = true; });
            sub->add_option("--modalities", o.modalities,
                            "comma-separated sensor streams "
                            "(tactile,torque) or 'none'");
            sub->add_option("--control", o.control,
                            "ablation control variant")
                ->check(CLI::IsMember(
                    {"none", "fused", "single-stage", "no-pred"}));
        }
    };
    auto add_model = [&](CLI::App* sub) {
        sub->add_option("--ckpt", o.ckpt, "checkpoint file")->required();
        sub->add_option("--task", o.task, "task name")
            ->required()
            ->check(CLI::IsMember({"fragile-grasp", "blind-insert"}));
        sub->add_option("--seed", o.eval_seed,
                        "first environment seed")
            ->capture_default_str();
    };

    CLI::App* gen = app.add_subcommand(
        "gen-demos", "generate scripted-expert demonstrations");
    add_common(gen, true);

    CLI::App* base = app.add_subcommand(
        "train-base", "train the vision-only base policy");
    add_common(base, true);

    CLI::App* moss = app.add_subcommand(
        "train-moss", "attach sensory streams and train them");
    add_common(moss, true);
    moss->add_option("--stage", o.stage,
                     "training phase: 1 (streams only), 2 (joint), or all")
        ->capture_default_str()
        ->check(CLI::IsMember({"1", "2", "all"}));

    CLI::App* ev =
        app.add_subcommand("eval", "closed-loop success-rate evaluation");
    add_model(ev);
    ev->add_option("--episodes", o.episodes,
                   "episode count (0 = config default)");
    ev->add_option("--out", o.out, "output directory")
        ->capture_default_str();

    CLI::App* abl = app.add_subcommand(
        "ablate", "run the modality x variant x seed grid");
    add_common(abl, true);

    CLI::App* sweep = app.add_subcommand(
        "sweep-lambda", "sweep the physical-prediction loss weight");
    add_common(sweep, true);

    CLI::App* dattn = app.add_subcommand(
        "dump-attn", "per-step cross-stream attention trace");
    add_model(dattn);
    dattn->add_option("--out", o.out, "output directory")
        ->capture_default_str();

    CLI::App* dpred = app.add_subcommand(
        "dump-pred", "per-step physical-signal forecasts vs. realized");
    add_model(dpred);
    dpred->add_option("--out", o.out, "output directory")
        ->capture_default_str();

    CLI::App* lat = app.add_subcommand(
        "latency", "per-chunk sampling latency by stream count");
    add_common(lat, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n\n%s", e.what(), app.help().c_str());
        return 1;
    }

    if (app.got_subcommand(gen)) return run_gen_demos(o);
    if (app.got_subcommand(base)) return run_train_base(o);
    if (app.got_subcommand(moss)) return run_train_moss(o);
    if (app.got_subcommand(ev)) return run_eval(o);
    if (app.got_subcommand(abl)) return run_ablate(o);
    if (app.got_subcommand(sweep)) return run_sweep_lambda(o);
    if (app.got_subcommand(dattn)) return run_dump(o, true);
    if (app.got_subcommand(dpred)) return run_dump(o, false);
    if (app.got_subcommand(lat)) return run_latency(o);
    return 1;
}

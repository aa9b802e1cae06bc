#include "moss/bench.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;

namespace moss {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << content;
    if (!f) throw std::runtime_error("write failed: " + path);
}

// Minimal RFC-4180 quoting; our fields are plain, but be safe.
std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n-1); zero for fewer than two values.
double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::vector<ModalitySpec> modalities_for(const std::string& name) {
    if (name == "none") return {};
    if (name == "tactile") return {{"tactile", 4}};
    if (name == "torque") return {{"torque", 2}};
    if (name == "both") return {{"tactile", 4}, {"torque", 2}};
    throw std::runtime_error("unknown modality set '" + name +
                             "' (expected none|tactile|torque|both)");
}

void check_variant(const std::string& v) {
    if (v != "full" && v != "fused" && v != "single-stage" && v != "no-pred")
        throw std::runtime_error(
            "unknown variant '" + v +
            "' (expected full|fused|single-stage|no-pred)");
}

// The base checkpoint a cell starts from is canonical per (seed,
// architecture): control flags like the loss weight never affect it, so
// every variant of a seed shares one pretrained policy.
RunConfig base_train_config(const RunConfig& top, const CellSpec& spec) {
    RunConfig cfg = top;
    cfg.training.seed = spec.seed;
    cfg.model.modalities = modalities_for(spec.modality);
    cfg.model.fused = (spec.variant == "fused");
    cfg.model.fused_width = 0;
    return cfg;
}

std::string base_name(const CellSpec& spec) {
    if (spec.variant == "fused") return "fused-" + spec.modality;
    return "decoupled";
}

// Artifacts are resumed by path, so a configuration edit between runs could
// silently mix recipes inside one root. Refuse to reuse a checkpoint unless
// it embeds exactly the configuration this run would train with. The
// trainer stores the model section as actually built (streams stripped from
// the base, fused width resolved), so project the expectation the same way
// before comparing.
Checkpoint load_cached_checkpoint(const std::string& path,
                                  RunConfig expected) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.stage == "base") expected.model.modalities.clear();
    if (expected.model.fused && expected.model.fused_width == 0)
        expected.model.fused_width = ck.config.model.fused_width;
    if (run_config_to_json(ck.config) != run_config_to_json(expected))
        throw std::runtime_error(
            "bench: cached checkpoint '" + path +
            "' was trained under a different configuration than this run "
            "requests; remove the stale artifact directory and re-run");
    return ck;
}

Checkpoint ensure_base(const RunConfig& top, const CellSpec& spec,
                       const std::string& root, const DemoSet& demos,
                       double* out_seconds) {
    fs::create_directories(root + "/bases");
    const std::string name =
        base_name(spec) + "-s" + std::to_string(spec.seed);
    const std::string path = root + "/bases/" + name + ".ckpt";
    const std::string timing_path = root + "/bases/" + name + ".timing.json";
    RunConfig cfg = base_train_config(top, spec);
    if (fs::exists(path)) {
        if (out_seconds && fs::exists(timing_path))
            *out_seconds =
                nlohmann::json::parse(read_file(timing_path))["seconds"]
                    .get<double>();
        return load_cached_checkpoint(path, cfg);
    }
    TrainReport report = train_base(cfg, demos.episodes,
                                    root + "/bases/train-" + name + ".jsonl");
    save_checkpoint(path, report.checkpoint);
    nlohmann::json t;
    t["seconds"] = report.seconds;
    write_file(timing_path, t.dump());
    if (out_seconds) *out_seconds = report.seconds;
    return report.checkpoint;
}

SuccessReport eval_cached(const Checkpoint& ck, int task_id, int episodes,
                          const std::string& id, const std::string& path) {
    if (fs::exists(path)) {
        SuccessReport cached = success_report_from_json(read_file(path));
        if (cached.task != env::task_name(task_id) ||
            cached.n_episodes != episodes || cached.checkpoint_id != id)
            throw std::runtime_error(
                "bench: cached evaluation '" + path +
                "' does not match the requested task/episodes/checkpoint; "
                "remove the stale artifact and re-run");
        return cached;
    }
    SuccessReport report =
        evaluate_policy(ck, task_id, episodes, kEvalSeedBase, id);
    write_file(path, success_report_to_json(report));
    return report;
}

void write_timing(const std::string& path, double base_s, double stage1_s,
                  double final_s) {
    nlohmann::json t;
    t["base_seconds"] = base_s;
    t["stage1_seconds"] = stage1_s;
    t["final_seconds"] = final_s;
    t["total_seconds"] = base_s + stage1_s + final_s;
    write_file(path, t.dump());
}

} // namespace

void write_run_manifest(const std::string& path, const std::string& op,
                        const RunConfig& cfg, const DemoSet& demos,
                        const std::vector<std::string>& outputs,
                        double seconds) {
    nlohmann::json m;
    m["op"] = op;
    m["config"] = nlohmann::json::parse(run_config_to_json(cfg));
    m["config_hash"] = fnv1a64_hex(run_config_to_json(cfg));
    nlohmann::json d = nlohmann::json::array();
    for (const auto& p : demos.paths) {
        nlohmann::json e;
        e["path"] = p;
        e["hash"] = fnv1a64_hex_file(p);
        d.push_back(e);
    }
    m["demos"] = d;
    m["demos_hash"] = demos.content_hash;
    m["outputs"] = outputs;
    m["seconds"] = seconds;
    write_file(path, m.dump(2) + "\n");
}

std::string fnv1a64_hex(const std::string& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

std::string fnv1a64_hex_file(const std::string& path) {
    return fnv1a64_hex(read_file(path));
}

DemoSet ensure_demos(const RunConfig& cfg, const std::string& root) {
    fs::create_directories(root + "/demos");
    DemoSet set;
    std::vector<std::string> hashes;
    for (int task : {env::kFragileGrasp, env::kBlindInsert}) {
        std::string path =
            root + "/demos/" + env::task_name(task) + ".jsonl";
        if (!fs::exists(path))
            env::generate_demos(task, cfg.env.demos_per_task, /*seed=*/0,
                                cfg.env.obs_noise, path);
        auto eps = env::load_demos(path);
        set.episodes.insert(set.episodes.end(), eps.begin(), eps.end());
        set.paths.push_back(path);
        hashes.push_back(fnv1a64_hex_file(path));
    }
    set.content_hash = fnv1a64_hex(hashes[0] + ":" + hashes[1]);
    return set;
}

std::vector<CellSpec> full_grid(const std::vector<std::uint64_t>& seeds) {
    std::vector<CellSpec> cells;
    for (std::uint64_t s : seeds)
        for (const char* m : {"none", "tactile", "torque", "both"})
            for (const char* v : {"full", "fused", "single-stage", "no-pred"})
                cells.push_back({m, v, s});
    return cells;
}

RunConfig cell_config(const RunConfig& base_cfg, const CellSpec& spec) {
    check_variant(spec.variant);
    RunConfig cfg = base_cfg;
    cfg.training.seed = spec.seed;
    cfg.model.modalities = modalities_for(spec.modality);
    cfg.model.fused = (spec.variant == "fused");
    cfg.model.fused_width = 0;
    if (spec.variant == "no-pred") cfg.training.lambda_phy = 0.0;
    return cfg;
}

CellResult run_cell(const RunConfig& base_cfg, const CellSpec& spec,
                    const std::string& root, const DemoSet& demos) {
    RunConfig cfg = cell_config(base_cfg, spec);
    const std::string dir = root + "/cells/" + spec.id();
    fs::create_directories(dir);

    CellResult result;
    result.spec = spec;

    Checkpoint final_ck;
    std::string eval_id = spec.id();
    std::string eval_prefix = dir + "/eval-";
    if (spec.modality == "none") {
        // The stream-free row: every variant reduces to the shared base
        // policy (the fused flag changes nothing when there is no second
        // stream to fuse, and the physical objective is empty). Evals are
        // cached once per seed next to the shared checkpoint.
        CellSpec base_spec = spec;
        base_spec.variant = "full";
        double base_s = 0.0;
        final_ck = ensure_base(base_cfg, base_spec, root, demos, &base_s);
        const std::string base_id =
            "decoupled-s" + std::to_string(spec.seed);
        result.final_ckpt_path = root + "/bases/" + base_id + ".ckpt";
        eval_id = base_id;
        eval_prefix = root + "/bases/" + base_id + "-eval-";
        if (!fs::exists(dir + "/timing.json"))
            write_timing(dir + "/timing.json", base_s, 0.0, 0.0);
    } else {
        const std::string final_path = dir + "/final.ckpt";
        result.final_ckpt_path = final_path;
        if (fs::exists(final_path)) {
            final_ck = load_cached_checkpoint(final_path, cfg);
        } else {
            result.trained_now = true;
            double base_s = 0.0;
            Checkpoint base =
                ensure_base(base_cfg, spec, root, demos, &base_s);
            double stage1_s = 0.0, final_s = 0.0;
            if (spec.variant == "single-stage") {
                TrainReport rep = train_single_stage(
                    cfg, base, demos.episodes, dir + "/train-final.jsonl");
                final_s = rep.seconds;
                final_ck = std::move(rep.checkpoint);
            } else {
                const std::string s1_path = dir + "/stage1.ckpt";
                Checkpoint s1;
                if (fs::exists(s1_path)) {
                    s1 = load_cached_checkpoint(s1_path, cfg);
                } else {
                    TrainReport rep =
                        train_stage1(cfg, base, demos.episodes,
                                     dir + "/train-stage1.jsonl");
                    stage1_s = rep.seconds;
                    s1 = std::move(rep.checkpoint);
                    save_checkpoint(s1_path, s1);
                }
                TrainReport rep = train_stage2(cfg, s1, demos.episodes,
                                               dir + "/train-final.jsonl");
                final_s = rep.seconds;
                final_ck = std::move(rep.checkpoint);
            }
            save_checkpoint(final_path, final_ck);
            write_timing(dir + "/timing.json", base_s, stage1_s, final_s);
        }
    }

    result.fragile = eval_cached(final_ck, env::kFragileGrasp,
                                 cfg.eval.episodes, eval_id,
                                 eval_prefix + "fragile-grasp.json");
    result.insert = eval_cached(final_ck, env::kBlindInsert,
                                cfg.eval.episodes, eval_id,
                                eval_prefix + "blind-insert.json");
    return result;
}

std::vector<CellResult> run_cells(const RunConfig& base_cfg,
                                  const std::vector<CellSpec>& cells,
                                  const std::string& root,
                                  const DemoSet& demos) {
    std::vector<CellResult> out;
    out.reserve(cells.size());
    for (const CellSpec& spec : cells)
        out.push_back(run_cell(base_cfg, spec, root, demos));
    return out;
}

AblationTable run_ablations(const RunConfig& cfg, const std::string& root) {
    auto t0 = Clock::now();
    fs::create_directories(root);
    DemoSet demos = ensure_demos(cfg, root);
    std::vector<std::uint64_t> seeds = {cfg.training.seed,
                                        cfg.training.seed + 1,
                                        cfg.training.seed + 2};
    AblationTable table;
    table.rows = run_cells(cfg, full_grid(seeds), root, demos);

    const std::string config_hash = fnv1a64_hex(run_config_to_json(cfg));
    std::ostringstream csv;
    csv << "modality,variant,seed,n_episodes,fragile_successes,fragile_rate,"
           "insert_successes,insert_rate,pooled_rate,config_hash,demos_hash\n";
    for (const CellResult& r : table.rows) {
        double pooled =
            static_cast<double>(r.fragile.successes + r.insert.successes) /
            static_cast<double>(r.fragile.n_episodes + r.insert.n_episodes);
        csv << csv_field(r.spec.modality) << ',' << csv_field(r.spec.variant)
            << ',' << r.spec.seed << ',' << r.fragile.n_episodes << ','
            << r.fragile.successes << ',' << fmt(r.fragile.success_rate)
            << ',' << r.insert.successes << ',' << fmt(r.insert.success_rate)
            << ',' << fmt(pooled) << ',' << config_hash << ','
            << demos.content_hash << '\n';
    }
    table.csv_path = root + "/ablations.csv";
    write_file(table.csv_path, csv.str());

    std::ostringstream sum;
    sum << "modality,variant,fragile_mean,fragile_sd,insert_mean,insert_sd,"
           "pooled_mean,pooled_sd,config_hash,demos_hash\n";
    for (const char* m : {"none", "tactile", "torque", "both"}) {
        for (const char* v : {"full", "fused", "single-stage", "no-pred"}) {
            std::vector<double> fg, bi, pooled;
            for (const CellResult& r : table.rows) {
                if (r.spec.modality != m || r.spec.variant != v) continue;
                fg.push_back(r.fragile.success_rate);
                bi.push_back(r.insert.success_rate);
                pooled.push_back(
                    static_cast<double>(r.fragile.successes +
                                        r.insert.successes) /
                    static_cast<double>(r.fragile.n_episodes +
                                        r.insert.n_episodes));
            }
            sum << m << ',' << v << ',' << fmt(mean_of(fg)) << ','
                << fmt(sd_of(fg)) << ',' << fmt(mean_of(bi)) << ','
                << fmt(sd_of(bi)) << ',' << fmt(mean_of(pooled)) << ','
                << fmt(sd_of(pooled)) << ',' << config_hash << ','
                << demos.content_hash << '\n';
        }
    }
    table.summary_path = root + "/ablations_summary.csv";
    write_file(table.summary_path, sum.str());

    table.manifest_path = root + "/manifest.json";
    write_run_manifest(table.manifest_path, "ablate", cfg, demos,
                   {table.csv_path, table.summary_path}, seconds_since(t0));
    return table;
}

LambdaTable sweep_lambda(const RunConfig& cfg, const std::string& root) {
    auto t0 = Clock::now();
    fs::create_directories(root);
    DemoSet demos = ensure_demos(cfg, root);
    const std::vector<double> lambdas = {0.1, 0.5, 1.0};
    std::vector<std::uint64_t> seeds = {cfg.training.seed,
                                        cfg.training.seed + 1,
                                        cfg.training.seed + 2};

    LambdaTable table;
    for (double lambda : lambdas) {
        for (std::uint64_t seed : seeds) {
            LambdaResult row;
            row.lambda = lambda;
            row.seed = seed;
            if (lambda == 0.1) {
                // The 0.1 setting is exactly the grid's both/full cell.
                CellSpec spec{"both", "full", seed};
                row.fragile =
                    run_cell(cfg, spec, root, demos).fragile;
            } else {
                RunConfig lcfg = cfg;
                lcfg.training.lambda_phy = lambda;
                CellSpec spec{"both", "full", seed};
                RunConfig cellcfg = cell_config(lcfg, spec);
                std::string dir = root + "/cells/lambda-" + fmt(lambda) +
                                  "-s" + std::to_string(seed);
                fs::create_directories(dir);
                std::string final_path = dir + "/final.ckpt";
                Checkpoint final_ck;
                if (fs::exists(final_path)) {
                    final_ck = load_cached_checkpoint(final_path, cellcfg);
                } else {
                    double base_s = 0.0;
                    Checkpoint base =
                        ensure_base(cfg, spec, root, demos, &base_s);
                    TrainReport s1 =
                        train_stage1(cellcfg, base, demos.episodes,
                                     dir + "/train-stage1.jsonl");
                    TrainReport s2 =
                        train_stage2(cellcfg, s1.checkpoint, demos.episodes,
                                     dir + "/train-final.jsonl");
                    final_ck = std::move(s2.checkpoint);
                    save_checkpoint(final_path, final_ck);
                    write_timing(dir + "/timing.json", base_s, s1.seconds,
                                 s2.seconds);
                }
                row.fragile = eval_cached(
                    final_ck, env::kFragileGrasp, cfg.eval.episodes,
                    "lambda-" + fmt(lambda) + "-s" + std::to_string(seed),
                    dir + "/eval-fragile-grasp.json");
            }
            table.rows.push_back(std::move(row));
        }
    }

    const std::string config_hash = fnv1a64_hex(run_config_to_json(cfg));
    std::ostringstream csv;
    csv << "lambda,seed,n_episodes,successes,success_rate,config_hash,"
           "demos_hash\n";
    for (const LambdaResult& r : table.rows)
        csv << fmt(r.lambda) << ',' << r.seed << ',' << r.fragile.n_episodes
            << ',' << r.fragile.successes << ','
            << fmt(r.fragile.success_rate) << ',' << config_hash << ','
            << demos.content_hash << '\n';
    table.csv_path = root + "/sweep_lambda.csv";
    write_file(table.csv_path, csv.str());
    table.manifest_path = root + "/sweep_lambda_manifest.json";
    write_run_manifest(table.manifest_path, "sweep-lambda", cfg, demos,
                   {table.csv_path}, seconds_since(t0));
    return table;
}

namespace {

// Task-level contact flag: the grasp task signals through the fingers,
// the insertion task through the joints. Observation noise only touches
// entries that are already nonzero, so exact zero means "no contact".
bool contact_flag(int task_id, const env::Observation& obs) {
    const auto& chan =
        task_id == env::kFragileGrasp ? obs.tactile : obs.torque;
    for (double v : chan)
        if (v != 0.0) return true;
    return false;
}

} // namespace

AttentionDumpSummary dump_attention(const Checkpoint& ck, int task_id,
                                    std::uint64_t seed,
                                    const std::string& csv_path) {
    const ModelConfig& mc = ck.config.model;
    if (mc.modalities.empty())
        throw std::runtime_error(
            "dump_attention: checkpoint has no physical streams");
    if (mc.fused)
        throw std::runtime_error(
            "dump_attention: per-stream attention requires decoupled "
            "streams");

    StreamModel model(mc, ck.config.training.seed);
    apply_checkpoint(model, ck);
    const int h = mc.horizon;
    const int stride = std::max(1, h / 2);
    const int n_mod = static_cast<int>(mc.modalities.size());

    env::ArmEnv arm(task_id, seed, ck.config.env.obs_noise);
    std::vector<env::Observation> history{arm.observation()};
    Rng chunk_rng(derive_seed(seed, "eval-chunk-noise"));

    // Per env step: the governing chunk's per-layer mass on each stream
    // (stream 0 is the action stream itself), plus the contact flag.
    std::vector<AttentionSummary> step_attn;
    std::vector<bool> step_contact;

    while (!arm.done()) {
        SampleInput in =
            make_policy_input(mc, ck.stats, history, task_id);
        AttentionSummary attn;
        ChunkState noise = draw_chunk_noise(mc, 1, chunk_rng);
        Tensor chunk =
            model.sample_chunks(in, ck.config.training.k_sample, noise, &attn)
                .action;
        for (int s = 0; s < stride && !arm.done(); ++s) {
            env::Action a = chunk_action(chunk, s, ck.stats);
            step_contact.push_back(contact_flag(task_id, arm.observation()));
            step_attn.push_back(attn);
            arm.step(a);
            history.push_back(arm.observation());
        }
    }
    const int steps = static_cast<int>(step_attn.size());

    // z-score each (layer, stream) series over the episode.
    auto zscore = [steps](std::vector<double> series) {
        double m = mean_of(series), s2 = 0.0;
        for (double x : series) s2 += (x - m) * (x - m);
        double sd = std::sqrt(s2 / static_cast<double>(steps));
        std::vector<double> z(series.size(), 0.0);
        if (sd >= 1e-8)
            for (std::size_t i = 0; i < series.size(); ++i)
                z[i] = (series[i] - m) / sd;
        return z;
    };

    std::ostringstream csv;
    csv << "step,layer,stream,raw,z,contact\n";
    // stream index 1..n_mod are the physical streams; also dump the
    // action stream's self mass (stream index 0).
    std::vector<std::vector<double>> layer_avg_z(
        static_cast<std::size_t>(n_mod));
    for (int s = 0; s < 1 + n_mod; ++s) {
        std::string sname = s == 0 ? "action" : mc.modalities[s - 1].name;
        std::vector<double> layer_avg(static_cast<std::size_t>(steps), 0.0);
        for (int l = 0; l < mc.depth; ++l) {
            std::vector<double> series(static_cast<std::size_t>(steps));
            for (int t = 0; t < steps; ++t)
                series[static_cast<std::size_t>(t)] =
                    step_attn[static_cast<std::size_t>(t)]
                             [static_cast<std::size_t>(l)]
                             [static_cast<std::size_t>(s)];
            auto z = zscore(series);
            for (int t = 0; t < steps; ++t) {
                layer_avg[static_cast<std::size_t>(t)] +=
                    series[static_cast<std::size_t>(t)] /
                    static_cast<double>(mc.depth);
                csv << t << ',' << l << ',' << csv_field(sname) << ','
                    << fmt(series[static_cast<std::size_t>(t)]) << ','
                    << fmt(z[static_cast<std::size_t>(t)]) << ','
                    << (step_contact[static_cast<std::size_t>(t)] ? 1 : 0)
                    << '\n';
            }
        }
        if (s > 0) layer_avg_z[static_cast<std::size_t>(s - 1)] =
            zscore(layer_avg);
    }
    write_file(csv_path, csv.str());

    AttentionDumpSummary out;
    out.csv_path = csv_path;
    for (int t = 0; t < steps; ++t)
        if (step_contact[static_cast<std::size_t>(t)]) {
            out.first_contact_step = t;
            break;
        }
    for (int i = 0; i < n_mod; ++i) {
        out.streams.push_back(mc.modalities[static_cast<std::size_t>(i)].name);
        double pre = 0.0, win = 0.0;
        if (out.first_contact_step > 0) {
            int tc = out.first_contact_step;
            int wend = std::min(steps, tc + stride);
            for (int t = 0; t < tc; ++t)
                pre += layer_avg_z[static_cast<std::size_t>(i)]
                                  [static_cast<std::size_t>(t)];
            pre /= static_cast<double>(tc);
            for (int t = tc; t < wend; ++t)
                win += layer_avg_z[static_cast<std::size_t>(i)]
                                  [static_cast<std::size_t>(t)];
            win /= static_cast<double>(wend - tc);
        }
        out.pre_mean_z.push_back(pre);
        out.contact_mean_z.push_back(win);
    }
    return out;
}

PredictionDumpSummary dump_predictions(const Checkpoint& ck, int task_id,
                                       std::uint64_t seed,
                                       const std::string& csv_path) {
    const ModelConfig& mc = ck.config.model;
    if (mc.modalities.empty())
        throw std::runtime_error(
            "dump_predictions: checkpoint has no physical streams");
    StreamModel model(mc, ck.config.training.seed);
    apply_checkpoint(model, ck);
    const int n_mod = static_cast<int>(mc.modalities.size());

    env::ArmEnv arm(task_id, seed, ck.config.env.obs_noise);
    std::vector<env::Observation> history{arm.observation()};
    Rng chunk_rng(derive_seed(seed, "eval-chunk-noise"));

    struct Row {
        int step;
        int modality;
        int dim;
        double predicted, realized, persistence;
        bool transition;
    };
    std::vector<Row> rows;

    int t = 0;
    while (!arm.done()) {
        SampleInput in = make_policy_input(mc, ck.stats, history, task_id);
        ChunkState noise = draw_chunk_noise(mc, 1, chunk_rng);
        ChunkState final_state =
            model.sample_chunks(in, ck.config.training.k_sample, noise);

        bool contact_before = contact_flag(task_id, arm.observation());
        std::vector<std::vector<double>> last_signal, predicted;
        for (int i = 0; i < n_mod; ++i) {
            last_signal.push_back(
                modality_signal(arm.observation(), mc.modalities
                                [static_cast<std::size_t>(i)].name));
            // First future row of the integrated chunk = the model's
            // next-step forecast, denormalized back to signal units.
            const std::size_t si = norm_stats_index(
                ck.stats, mc.modalities[static_cast<std::size_t>(i)]);
            std::vector<double> pred(
                static_cast<std::size_t>(mc.modalities
                                         [static_cast<std::size_t>(i)].dim));
            for (int c = 0; c < mc.modalities[static_cast<std::size_t>(i)].dim;
                 ++c)
                pred[static_cast<std::size_t>(c)] =
                    final_state.futures[static_cast<std::size_t>(i)].at(0, c);
            denormalize_rows(pred, ck.stats.modality_mean[si],
                             ck.stats.modality_std[si]);
            predicted.push_back(std::move(pred));
        }

        env::Action a = chunk_action(final_state.action, 0, ck.stats);
        env::StepResult res = arm.step(a);
        history.push_back(res.obs);
        bool transition =
            contact_before != contact_flag(task_id, res.obs);

        for (int i = 0; i < n_mod; ++i) {
            auto realized = modality_signal(
                res.obs, mc.modalities[static_cast<std::size_t>(i)].name);
            for (int c = 0;
                 c < mc.modalities[static_cast<std::size_t>(i)].dim; ++c)
                rows.push_back(
                    {t, i, c,
                     predicted[static_cast<std::size_t>(i)]
                              [static_cast<std::size_t>(c)],
                     realized[static_cast<std::size_t>(c)],
                     last_signal[static_cast<std::size_t>(i)]
                                [static_cast<std::size_t>(c)],
                     transition});
        }
        ++t;
    }

    std::ostringstream csv;
    csv << "step,modality,dim,predicted,realized,persistence,transition\n";
    for (const Row& r : rows)
        csv << r.step << ','
            << csv_field(mc.modalities[static_cast<std::size_t>(r.modality)]
                             .name)
            << ',' << r.dim << ',' << fmt(r.predicted) << ','
            << fmt(r.realized) << ',' << fmt(r.persistence) << ','
            << (r.transition ? 1 : 0) << '\n';
    write_file(csv_path, csv.str());

    PredictionDumpSummary out;
    out.csv_path = csv_path;
    std::vector<int> trans_steps;
    for (const Row& r : rows)
        if (r.transition && r.dim == 0 && r.modality == 0)
            trans_steps.push_back(r.step);
    out.n_transitions = static_cast<int>(trans_steps.size());
    for (int i = 0; i < n_mod; ++i) {
        out.modalities.push_back(
            mc.modalities[static_cast<std::size_t>(i)].name);
        double se_m = 0.0, se_p = 0.0, sect_m = 0.0, sect_p = 0.0;
        int n_all = 0, n_tr = 0;
        for (const Row& r : rows) {
            if (r.modality != i) continue;
            double dm = r.predicted - r.realized;
            double dp = r.persistence - r.realized;
            se_m += dm * dm;
            se_p += dp * dp;
            ++n_all;
            if (r.transition) {
                sect_m += dm * dm;
                sect_p += dp * dp;
                ++n_tr;
            }
        }
        out.rmse_model.push_back(n_all ? std::sqrt(se_m / n_all) : 0.0);
        out.rmse_persistence.push_back(n_all ? std::sqrt(se_p / n_all) : 0.0);
        out.rmse_model_transitions.push_back(
            n_tr ? std::sqrt(sect_m / n_tr) : 0.0);
        out.rmse_persistence_transitions.push_back(
            n_tr ? std::sqrt(sect_p / n_tr) : 0.0);
    }
    return out;
}

std::vector<LatencyRow> measure_latency(const RunConfig& cfg, int calls) {
    if (calls < 1)
        throw std::runtime_error("measure_latency: calls must be >= 1");
    std::vector<LatencyRow> rows;
    for (const char* streams : {"none", "tactile", "torque", "both"}) {
        ModelConfig mc = cfg.model;
        mc.modalities = modalities_for(streams);
        mc.fused = false;
        mc.fused_width = 0;
        StreamModel model(mc, cfg.training.seed);

        // Unit statistics: latency does not depend on the values flowing
        // through, only on shapes.
        NormStats stats;
        stats.action_mean.assign(static_cast<std::size_t>(mc.action_dim),
                                 0.0);
        stats.action_std.assign(static_cast<std::size_t>(mc.action_dim), 1.0);
        stats.state_mean.assign(static_cast<std::size_t>(mc.state_dim), 0.0);
        stats.state_std.assign(static_cast<std::size_t>(mc.state_dim), 1.0);
        for (const auto& m : mc.modalities) {
            stats.modality_names.push_back(m.name);
            stats.modality_mean.emplace_back(static_cast<std::size_t>(m.dim),
                                             0.0);
            stats.modality_std.emplace_back(static_cast<std::size_t>(m.dim),
                                            1.0);
        }

        env::ArmEnv arm(env::kFragileGrasp, 1, 0.0);
        std::vector<env::Observation> history{arm.observation()};
        SampleInput in = make_policy_input(mc, stats, history, 0);
        Rng rng(derive_seed(cfg.training.seed, "latency"));

        for (int i = 0; i < 20; ++i) // warm the caches
            model.sample_action_chunk(in, cfg.training.k_sample, rng);
        std::vector<double> ms(static_cast<std::size_t>(calls));
        for (int i = 0; i < calls; ++i) {
            auto t0 = Clock::now();
            model.sample_action_chunk(in, cfg.training.k_sample, rng);
            ms[static_cast<std::size_t>(i)] = seconds_since(t0) * 1e3;
        }
        auto mid = ms.begin() + calls / 2;
        std::nth_element(ms.begin(), mid, ms.end());

        LatencyRow row;
        row.streams = streams;
        row.tokens = mc.action_tokens();
        for (const auto& m : mc.modalities) {
            (void)m;
            row.tokens += mc.modality_tokens();
        }
        row.median_ms = *mid;
        rows.push_back(row);
    }
    for (auto& r : rows) r.ratio = r.median_ms / rows[0].median_ms;
    return rows;
}

void write_latency_csv(const std::string& path,
                       const std::vector<LatencyRow>& rows,
                       const std::string& config_hash) {
    std::ostringstream csv;
    csv << "streams,tokens,median_ms,ratio,config_hash\n";
    for (const auto& r : rows)
        csv << csv_field(r.streams) << ',' << r.tokens << ','
            << fmt(r.median_ms) << ',' << fmt(r.ratio) << ',' << config_hash
            << '\n';
    write_file(path, csv.str());
}

} // namespace moss

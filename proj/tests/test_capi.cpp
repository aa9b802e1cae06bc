#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>

#include <json.hpp>

#include <moss/moss_c.h>

namespace {

namespace fs = std::filesystem;

// Everything the round-trip cases need finishes in seconds at this size.
const char* kTinyConfig = R"({
  "model": {"width": 16, "depth": 2, "heads": 2, "horizon": 4,
            "modalities": [{"name": "tactile", "dim": 4},
                           {"name": "torque", "dim": 2}]},
  "training": {"iters_base": 20, "iters_stage1": 12, "iters_stage2": 12,
               "batch_size": 6, "warmup": 4, "k_sample": 2, "seed": 3},
  "env": {"demos_per_task": 2, "obs_noise": 0.01},
  "eval": {"episodes": 2}
})";

// Takes ownership of a C string result.
std::string take(char* s) {
    std::string out = s ? s : "";
    moss_string_free(s);
    return out;
}

struct Ctx {
    moss_ctx* p = nullptr;
    ~Ctx() { moss_ctx_destroy(p); }
};

struct Model {
    moss_model* p = nullptr;
    ~Model() { moss_model_destroy(p); }
};

std::string fresh_dir(const std::string& name) {
    std::string dir = "capi-" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("context lifecycle and configuration surface") {
    Ctx ctx;
    REQUIRE(moss_ctx_create(nullptr, &ctx.p) == MOSS_OK);
    REQUIRE(ctx.p != nullptr);

    // The context reports its full configuration as JSON.
    char* raw = nullptr;
    REQUIRE(moss_ctx_config_json(ctx.p, &raw) == MOSS_OK);
    nlohmann::json j = nlohmann::json::parse(take(raw));
    CHECK(j.contains("model"));
    CHECK(j.contains("training"));

    // Setters are reflected in the reported configuration.
    CHECK(moss_ctx_set_seed(ctx.p, 41) == MOSS_OK);
    CHECK(moss_ctx_set_modalities(ctx.p, "torque") == MOSS_OK);
    REQUIRE(moss_ctx_config_json(ctx.p, &raw) == MOSS_OK);
    j = nlohmann::json::parse(take(raw));
    CHECK(j["training"]["seed"] == 41);
    REQUIRE(j["model"]["modalities"].size() == 1);
    CHECK(j["model"]["modalities"][0]["name"] == "torque");
    CHECK(j["model"]["modalities"][0]["dim"] == 2);

    CHECK(moss_ctx_set_modalities(ctx.p, "none") == MOSS_OK);
    REQUIRE(moss_ctx_config_json(ctx.p, &raw) == MOSS_OK);
    j = nlohmann::json::parse(take(raw));
    CHECK(j["model"]["modalities"].empty());

    CHECK(moss_ctx_set_control(ctx.p, "fused") == MOSS_OK);
    CHECK(moss_ctx_set_control(ctx.p, "none") == MOSS_OK);

    // The error string is never a null pointer, even right after success.
    CHECK(moss_last_error() != nullptr);
}

TEST_CASE("errors are classified and carry the offending detail") {
    // Unknown config key: validation, message names the key.
    moss_ctx* p = nullptr;
    CHECK(moss_ctx_create(R"({"model": {"wdith": 3}})", &p) ==
          MOSS_ERR_VALIDATION);
    CHECK(std::string(moss_last_error()).find("wdith") != std::string::npos);

    // Malformed JSON: validation.
    CHECK(moss_ctx_create("{not json", &p) == MOSS_ERR_VALIDATION);

    // Unreadable config file: validation.
    CHECK(moss_ctx_create_from_file("no-such-config.json", &p) ==
          MOSS_ERR_VALIDATION);

    Ctx ctx;
    REQUIRE(moss_ctx_create(nullptr, &ctx.p) == MOSS_OK);

    // Unknown modality and unknown control name the bad value.
    CHECK(moss_ctx_set_modalities(ctx.p, "audio") == MOSS_ERR_VALIDATION);
    CHECK(std::string(moss_last_error()).find("audio") != std::string::npos);
    CHECK(moss_ctx_set_control(ctx.p, "bogus") == MOSS_ERR_VALIDATION);
    CHECK(std::string(moss_last_error()).find("bogus") != std::string::npos);

    // Stage outside {0,1,2}: validation.
    CHECK(moss_train_streams(ctx.p, 3, "capi-x", nullptr) ==
          MOSS_ERR_VALIDATION);

    // The single-stage control cannot run a phase in isolation.
    REQUIRE(moss_ctx_set_control(ctx.p, "single-stage") == MOSS_OK);
    CHECK(moss_train_streams(ctx.p, 1, "capi-x", nullptr) ==
          MOSS_ERR_VALIDATION);
    REQUIRE(moss_ctx_set_control(ctx.p, "none") == MOSS_OK);

    // Missing checkpoint file: runtime.
    moss_model* m = nullptr;
    CHECK(moss_model_load("no-such.ckpt", &m) == MOSS_ERR_RUNTIME);

    // Null argument: validation.
    CHECK(moss_ctx_set_modalities(ctx.p, nullptr) == MOSS_ERR_VALIDATION);
}

TEST_CASE("demo generation, training, and evaluation round trip") {
    const std::string dir = fresh_dir("roundtrip");
    Ctx ctx;
    REQUIRE(moss_ctx_create(kTinyConfig, &ctx.p) == MOSS_OK);

    // Demos: one JSONL per task plus a manifest.
    char* raw = nullptr;
    REQUIRE(moss_gen_demos(ctx.p, dir.c_str(), &raw) == MOSS_OK);
    nlohmann::json report = nlohmann::json::parse(take(raw));
    CHECK(report["episodes"] == 4);
    CHECK(report["episodes_per_task"] == 2);
    REQUIRE(report["files"].size() == 2);
    for (const auto& f : report["files"])
        CHECK(fs::exists(f.get<std::string>()));
    CHECK(fs::exists(dir + "/demos_manifest.json"));

    // Training a model with streams requires the base snapshot first.
    CHECK(moss_train_streams(ctx.p, 0, dir.c_str(), nullptr) ==
          MOSS_ERR_RUNTIME);
    CHECK(std::string(moss_last_error()).find("base checkpoint") !=
          std::string::npos);

    REQUIRE(moss_train_base(ctx.p, dir.c_str(), &raw) == MOSS_OK);
    std::string base_path = take(raw);
    CHECK(base_path == dir + "/base.ckpt");
    CHECK(fs::exists(base_path));

    REQUIRE(moss_train_streams(ctx.p, 0, dir.c_str(), &raw) == MOSS_OK);
    std::string final_path = take(raw);
    CHECK(final_path == dir + "/final.ckpt");
    CHECK(fs::exists(dir + "/stage1.ckpt"));
    CHECK(fs::exists(dir + "/train_streams_manifest.json"));

    // The loaded model reports its training stage.
    Model model;
    REQUIRE(moss_model_load(final_path.c_str(), &model.p) == MOSS_OK);
    REQUIRE(moss_model_stage(model.p, &raw) == MOSS_OK);
    CHECK(take(raw) == "stage2");

    // Evaluation: episode bookkeeping adds up.
    REQUIRE(moss_evaluate(model.p, "fragile-grasp", 2, 5000, &raw) ==
            MOSS_OK);
    nlohmann::json ev = nlohmann::json::parse(take(raw));
    CHECK(ev["task"] == "fragile-grasp");
    CHECK(ev["n_episodes"] == 2);
    CHECK(ev["seed_first"] == 5000);
    CHECK(ev["seed_last"] == 5001);
    int latent_total = 0;
    for (const auto& v : ev["latent_episodes"]) latent_total += v.get<int>();
    CHECK(latent_total == 2);

    // Unknown task: validation.
    CHECK(moss_evaluate(model.p, "juggling", 1, 0, nullptr) ==
          MOSS_ERR_VALIDATION);

    // Analysis dumps produce their CSVs and summaries.
    std::string attn_csv = dir + "/attn.csv";
    REQUIRE(moss_dump_attention(model.p, "fragile-grasp", 0,
                                attn_csv.c_str(), &raw) == MOSS_OK);
    nlohmann::json attn = nlohmann::json::parse(take(raw));
    CHECK(fs::exists(attn_csv));
    CHECK(attn["streams"].size() == 2);

    std::string pred_csv = dir + "/pred.csv";
    REQUIRE(moss_dump_predictions(model.p, "blind-insert", 0,
                                  pred_csv.c_str(), &raw) == MOSS_OK);
    nlohmann::json pred = nlohmann::json::parse(take(raw));
    CHECK(fs::exists(pred_csv));
    CHECK(pred["modalities"].size() == 2);

    // Latency table: one row per stream set, base ratio pinned to 1.
    std::string lat_csv = dir + "/latency.csv";
    REQUIRE(moss_measure_latency(ctx.p, lat_csv.c_str(), &raw) == MOSS_OK);
    nlohmann::json lat = nlohmann::json::parse(take(raw));
    CHECK(fs::exists(lat_csv));
    REQUIRE(lat.size() == 4);
    CHECK(lat[0]["streams"] == "none");
    CHECK(lat[0]["ratio"] == 1.0);
    for (const auto& row : lat) CHECK(row["median_ms"].get<double>() > 0.0);

    fs::remove_all(dir);
    fs::remove_all("capi-x");
}

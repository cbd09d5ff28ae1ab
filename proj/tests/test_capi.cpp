#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>

#include <json.hpp>

#include "circuitedit/circuitedit.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kWorldCfg = R"({"seed": 11, "n_entities": 36, "n_relations": 5, "n_facts": 124})";
const char* kPretrainCfg = R"({
    "model": {"n_layers": 2, "d_model": 48, "n_heads": 4, "d_ff": 128, "max_seq": 48, "seed": 11},
    "pretrain": {"min_steps": 400, "max_steps": 2500, "eval_every": 100, "seed": 11}
})";

std::string take(char* s) {
    REQUIRE(s != nullptr);
    std::string out(s);
    ce_string_free(s);
    return out;
}

// One pretrained micro base per process, built through the C API alone.
const std::string& fixture_root() {
    static std::string root = [] {
        std::string dir = (fs::temp_directory_path() / "cedit_capi_fixture").string();
        if (!fs::exists(dir + "/base/gate.json")) {
            fs::remove_all(dir);
            fs::create_directories(dir);
            ce_world* world = nullptr;
            REQUIRE(ce_world_generate(kWorldCfg, &world) == CE_OK);
            REQUIRE(ce_world_save(world, (dir + "/world.jsonl").c_str()) == CE_OK);
            ce_world_free(world);
            char* summary = nullptr;
            ce_status st = ce_pretrain((dir + "/world.jsonl").c_str(), (dir + "/base").c_str(),
                                       kPretrainCfg, &summary);
            INFO(ce_last_error());
            REQUIRE(st == CE_OK);
            ce_string_free(summary);
        }
        return dir;
    }();
    return root;
}

}  // namespace

TEST_CASE("version and error strings") {
    CHECK(std::string(ce_version()).find("circuitedit") == 0);
    CHECK(ce_world_generate("{\"n_entities\": -3}", nullptr) == CE_ERR_INVALID_ARGUMENT);
    ce_world* w = nullptr;
    CHECK(ce_world_generate("{\"n_entities\": 2, \"n_facts\": 5}", &w) == CE_ERR_CAPACITY);
    CHECK(std::string(ce_last_error()).size() > 0);
    CHECK(ce_world_open("/nonexistent/world.jsonl", &w) == CE_ERR_IO);
    CHECK(ce_world_generate("not json", &w) == CE_ERR_FORMAT);
}

TEST_CASE("world round trip and info") {
    const std::string dir = fixture_root();
    ce_world* world = nullptr;
    REQUIRE(ce_world_open((dir + "/world.jsonl").c_str(), &world) == CE_OK);
    char* info = nullptr;
    REQUIRE(ce_world_info(world, &info) == CE_OK);
    json j = json::parse(take(info));
    CHECK(j.at("n_control") == 100);
    CHECK(j.at("edit").at("paraphrases") == 20);
    CHECK(j.at("edit").at("f1") != j.at("edit").at("f2"));
    ce_world_free(world);

    // Generation is deterministic through the API as well.
    ce_world* again = nullptr;
    REQUIRE(ce_world_generate(kWorldCfg, &again) == CE_OK);
    const std::string copy = dir + "/world_again.jsonl";
    REQUIRE(ce_world_save(again, copy.c_str()) == CE_OK);
    ce_world_free(again);
    std::ifstream a(dir + "/world.jsonl"), b(copy);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("model handle answers the trained fact") {
    const std::string dir = fixture_root();
    ce_model* model = nullptr;
    REQUIRE(ce_model_open((dir + "/base").c_str(), &model) == CE_OK);

    char* info = nullptr;
    REQUIRE(ce_model_info(model, &info) == CE_OK);
    json j = json::parse(take(info));
    CHECK(j.at("format") == "circuitedit-checkpoint");
    CHECK(j.at("adapters") == 0);

    ce_world* world = nullptr;
    REQUIRE(ce_world_open((dir + "/world.jsonl").c_str(), &world) == CE_OK);
    char* winfo = nullptr;
    REQUIRE(ce_world_info(world, &winfo) == CE_OK);
    json wj = json::parse(take(winfo));
    const std::string subject = wj.at("edit").at("subject");
    const std::string f1 = wj.at("edit").at("f1");

    char* answer = nullptr;
    const std::string query = "who created " + subject + " ?";
    REQUIRE(ce_model_answer(model, world, query.c_str(), 4, &answer) == CE_OK);
    CHECK(take(answer).find(f1) != std::string::npos);

    CHECK(ce_model_answer(model, world, "words outside the vocabulary", 4, &answer) ==
          CE_ERR_FORMAT);
    ce_world_free(world);
    ce_model_free(model);

    CHECK(ce_model_open("/nonexistent", &model) == CE_ERR_PREREQUISITE);
}

TEST_CASE("full edit pipeline through the C API") {
    const std::string dir = fixture_root();
    const std::string world = dir + "/world.jsonl";
    const std::string base = dir + "/base";

    char* summary = nullptr;
    REQUIRE(ce_localize(base.c_str(), world.c_str(), (dir + "/localization.json").c_str(),
                        nullptr, &summary) == CE_OK);
    json loc = json::parse(take(summary));
    CHECK(loc.at("localization_failed") == false);
    CHECK(loc.at("converged").size() >= 1);

    ce_status st = ce_edit(base.c_str(), world.c_str(), "unlearn-then-learn",
                           (dir + "/localization.json").c_str(), (dir + "/utl").c_str(), nullptr,
                           &summary);
    INFO(ce_last_error());
    REQUIRE(st == CE_OK);
    json run = json::parse(take(summary));
    CHECK(run.at("strategy") == "unlearn-then-learn");

    REQUIRE(ce_eval((dir + "/utl/model").c_str(), world.c_str(), (dir + "/utl/eval").c_str(),
                    nullptr, &summary) == CE_OK);
    json metrics = json::parse(take(summary));
    CHECK(metrics.at("f2_accuracy").get<double>() >= 0.9);
    CHECK(metrics.at("f1_forget_rate").get<double>() >= 0.9);
    CHECK(fs::exists(dir + "/utl/eval/metrics.json"));

    // Unknown strategy and missing prerequisites surface as typed errors.
    CHECK(ce_edit(base.c_str(), world.c_str(), "bogus", "all", (dir + "/x").c_str(), nullptr,
                  nullptr) == CE_ERR_INVALID_ARGUMENT);
    CHECK(ce_eval((dir + "/nope").c_str(), world.c_str(), (dir + "/x").c_str(), nullptr,
                  nullptr) == CE_ERR_PREREQUISITE);
    CHECK(ce_report(dir.c_str(), &summary) == CE_ERR_PREREQUISITE);
}

TEST_CASE("report renders after direct strategies exist") {
    const std::string dir = fixture_root();
    const std::string world = dir + "/world.jsonl";
    const std::string base = dir + "/base";
    char* summary = nullptr;

    // A run root with base + strategy eval dirs; reuse the UTL run and add the
    // direct runs.
    const std::string root = dir + "/run_root";
    if (!fs::exists(root + "/direct-lora/eval/metrics.json")) {
        fs::remove_all(root);
        fs::create_directories(root);
        fs::copy(base, root + "/base", fs::copy_options::recursive);
        for (const char* strategy : {"direct-lora", "direct-ia3"}) {
            REQUIRE(ce_edit(base.c_str(), world.c_str(), strategy, "all",
                            (root + "/" + strategy).c_str(), R"({"steps": 300})",
                            &summary) == CE_OK);
            ce_string_free(summary);
            REQUIRE(ce_eval((root + "/" + strategy + "/model").c_str(), world.c_str(),
                            (root + "/" + strategy + "/eval").c_str(), nullptr, nullptr) == CE_OK);
        }
        fs::create_directories(root + "/unlearn-then-learn");
        fs::copy(dir + "/utl/eval", root + "/unlearn-then-learn/eval",
                 fs::copy_options::recursive);
    }

    char* table = nullptr;
    REQUIRE(ce_report(root.c_str(), &table) == CE_OK);
    std::string text = take(table);
    CHECK(text.find("direct-lora") != std::string::npos);
    CHECK(text.find("direct-lora") < text.find("direct-ia3"));
    CHECK(text.find("direct-ia3") < text.find("unlearn-then-learn"));
    CHECK(fs::exists(root + "/comparison.csv"));
    CHECK(fs::exists(root + "/comparison.txt"));
}

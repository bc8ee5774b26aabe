#include "oracles.hpp"
#include "test_util.hpp"

#include "soft/cli.hpp"

#include <doctest.h>

#include <sstream>

using namespace soft;
using namespace soft::test;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "soft");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliResult r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

json base_config(const std::filesystem::path& prompts) {
    return {{"T", 3},
            {"k", 4},
            {"sampling", {{"temperature", 0.7}, {"top_p", 0.95}, {"max_new_tokens", 24}, {"seed", 5}}},
            {"segmentation_mode", "random"},
            {"data",
             {{"prompts", prompts.string()},
              {"pool", (kDataDir / "icl_pool.jsonl").string()},
              {"principles", (kDataDir / "principles.json").string()},
              {"validation_choice", (kDataDir / "validation_choice.jsonl").string()},
              {"validation_gen", (kDataDir / "validation_gen.jsonl").string()},
              {"refusal_patterns", (kDataDir / "refusal_patterns.json").string()}}},
            {"backend", {{"default", "ngram"}, {"ngram", {{"corpus", (kDataDir / "ngram_corpus.txt").string()}}}}}};
}

std::string write_config(const TempDir& dir, const json& cfg, const std::string& name = "config.json") {
    const auto path = dir.path() / name;
    write_json(path, cfg);
    return path.string();
}

std::string write_prompts(const TempDir& dir, std::size_t n, const std::string& name = "prompts.jsonl") {
    const auto path = dir.path() / name;
    write_text_file_atomic(path, serialize_prompts(numbered_prompts(n)));
    return path.string();
}

json mock_config(const TempDir& dir, const std::vector<MockEntry>& script, std::size_t rounds, std::size_t n) {
    const auto script_path = dir.path() / "script.jsonl";
    write_text_file_atomic(script_path, script_jsonl(script));
    auto cfg = base_config(write_prompts(dir, n));
    cfg["T"] = rounds;
    cfg["probe_thresholds"] = {{"tail_K", {2}}};
    cfg["backend"] = {{"default", "mock"}, {"mock", {{"script", script_path.string()}, {"initial_model", "m0"}}}};
    return cfg;
}

/// Minimal structural check of the report document.
bool valid_report_json(const json& doc) {
    if (!doc.is_object() || doc.size() != 3) return false;
    if (!doc.contains("schema_version") || !doc["schema_version"].is_string()) return false;
    if (!doc.contains("stop_reason") || !doc["stop_reason"].is_string()) return false;
    if (!doc.contains("rounds") || !doc["rounds"].is_array()) return false;
    for (const auto& r : doc["rounds"]) {
        if (!r.is_object() || r.size() != 8) return false;
        if (!r["round"].is_number_unsigned() || !r["prompts_consumed"].is_number_unsigned()) return false;
        for (const char* key : {"refusal_rate", "avg_output_length", "eos_choice_prob", "eos_gen_avg"}) {
            if (!(r[key].is_number() || r[key].is_null())) return false;
        }
        if (!r["tail_mass"].is_object()) return false;
        for (const auto& [k, v] : r["tail_mass"].items()) {
            if (k.empty() || k.find_first_not_of("0123456789") != std::string::npos || !v.is_number()) return false;
        }
        if (!r["verdict"].is_boolean()) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("run completes with the ngram backend") {
    TempDir dir;
    auto cfg = base_config(kDataDir / "prompts_demo.jsonl");
    const auto path = write_config(dir, cfg);
    const auto r = cli({"run", path, "--run-dir", (dir.path() / "run").string()});
    INFO(r.err);
    CHECK(r.code == kExitCompleted);
    CHECK(r.out.find("stop_reason: completed_all_rounds") != std::string::npos);
    std::size_t round_dirs = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path() / "run/rounds")) round_dirs += e.is_directory();
    CHECK(round_dirs == 3);
    CHECK(std::filesystem::exists(dir.path() / "run/models"));
}

TEST_CASE("config problems exit with code 2") {
    TempDir dir;
    SUBCASE("missing config file") { CHECK(cli({"run", (dir.path() / "nope.json").string()}).code == kExitConfig); }
    SUBCASE("no prompts entry") {
        auto cfg = base_config("x");
        cfg["data"].erase("prompts");
        CHECK(cli({"run", write_config(dir, cfg), "--run-dir", (dir / "run").string()}).code == kExitConfig);
    }
    SUBCASE("invalid value") {
        auto cfg = base_config(kDataDir / "prompts_demo.jsonl");
        cfg["T"] = 0;
        CHECK(cli({"run", write_config(dir, cfg), "--run-dir", (dir / "run").string()}).code == kExitConfig);
    }
    SUBCASE("unknown flag") { CHECK(cli({"run", "x.json", "--bogus"}).code == kExitConfig); }
    SUBCASE("bad seed override") {
        const auto path = write_config(dir, base_config(kDataDir / "prompts_demo.jsonl"));
        CHECK(cli({"run", path, "--seed", "colour=3"}).code == kExitConfig);
    }
    SUBCASE("score on an empty dataset") {
        write_text_file_atomic(dir / "empty.jsonl", "");
        const auto path = write_config(dir, base_config(kDataDir / "prompts_demo.jsonl"));
        const auto r = cli({"score", path, "--dataset", (dir / "empty.jsonl").string(), "--out", (dir / "s").string()});
        CHECK(r.code == kExitConfig);
        CHECK(r.err.find("dataset is empty") != std::string::npos);
    }
    SUBCASE("existing run without --resume") {
        const auto path = write_config(dir, base_config(kDataDir / "prompts_demo.jsonl"));
        REQUIRE(cli({"run", path, "--run-dir", (dir / "run").string()}).code == kExitCompleted);
        CHECK(cli({"run", path, "--run-dir", (dir / "run").string()}).code == kExitConfig);
    }
}

TEST_CASE("early stop exits with code 3 and records the round") {
    TempDir dir;
    const auto path = write_config(dir, mock_config(dir, trajectory_script(kReferenceChoiceEos, kReferenceGenEos), 7, 14));
    const auto r = cli({"run", path, "--run-dir", (dir / "run").string()});
    INFO(r.err);
    CHECK(r.code == kExitEarlyStop);
    CHECK(r.out.find("final_model: m5") != std::string::npos);
    const auto history = read_json(dir.path() / "run/history.json");
    CHECK(history.at("stop_reason") == "validation_failed_at(5)");
    CHECK(history.at("final_model") == "m5");
}

TEST_CASE("backend failures exit with code 4") {
    TempDir dir;
    SUBCASE("unscripted mock request; run.json precedes the first backend call") {
        const auto path = write_config(dir, mock_config(dir, {}, 2, 4));
        const auto r = cli({"run", path, "--run-dir", (dir / "run").string()});
        CHECK(r.code == kExitBackend);
        CHECK(std::filesystem::exists(dir.path() / "run/run.json"));
        CHECK(r.err.find("backend error") != std::string::npos);
    }
    SUBCASE("unreachable remote") {
        auto cfg = base_config(write_prompts(dir, 4));
        cfg["T"] = 2;
        cfg["backend"] = {{"default", "remote"},
                          {"remote", {{"base_url", "http://127.0.0.1:1"}, {"initial_model", "base"}, {"max_attempts", 1}}}};
        const auto r = cli({"run", write_config(dir, cfg), "--run-dir", (dir / "run").string()});
        CHECK(r.code == kExitBackend);
    }
}

TEST_CASE("resume after a crash only runs the unfinished round") {
    TempDir dir;
    const std::vector<double> healthy_choice(3, 0.01), healthy_gen(3, 0.001);
    auto broken = trajectory_script(healthy_choice, healthy_gen);
    std::erase_if(broken, [](const MockEntry& e) { return e.model == "m2" && e.kind == RequestKind::finetune; });
    const auto run_dir = (dir / "run").string();
    const auto path = write_config(dir, mock_config(dir, broken, 3, 9));
    REQUIRE(cli({"run", path, "--run-dir", run_dir}).code == kExitBackend);
    const auto before = snapshot_dir(dir / "run/rounds/0");

    // Same config file, repaired script.
    write_text_file_atomic(dir / "script.jsonl", script_jsonl(trajectory_script(healthy_choice, healthy_gen)));
    const auto r = cli({"run", path, "--run-dir", run_dir, "--resume"});
    INFO(r.err);
    CHECK(r.code == kExitCompleted);
    CHECK(r.err.find("round 0: reusing") != std::string::npos);
    CHECK(r.err.find("round 1: reusing") != std::string::npos);
    CHECK(r.err.find("round 2: reusing") == std::string::npos);
    CHECK(snapshot_dir(dir / "run/rounds/0") == before);
    CHECK(read_json(dir.path() / "run/history.json").at("stop_reason") == "completed_all_rounds");
}

TEST_CASE("score writes perplexities matching the oracle") {
    TempDir dir;
    const std::vector<std::vector<double>> probs{{0.5, 0.5}, {0.1, 0.9, 0.3}, {0.25}, {0.8, 0.6, 0.4, 0.2}, {0.05, 0.5}};
    std::vector<MockEntry> script;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        std::vector<std::string> tokens(probs[i].size() - 1, "w");
        tokens.push_back("</s>");
        script.push_back({"m0", RequestKind::generate, "number " + std::to_string(i) + " ?", true,
                          record_doc(tokens, probs[i])});
    }
    auto cfg = mock_config(dir, script, 2, 5);
    const auto path = write_config(dir, cfg);
    const auto a = cli({"score", path, "--out", (dir / "a").string()});
    const auto b = cli({"score", path, "--out", (dir / "b").string()});
    INFO(a.err);
    REQUIRE(a.code == kExitCompleted);
    REQUIRE(b.code == kExitCompleted);
    const auto rows = read_jsonl(dir / "a/scores.jsonl");
    REQUIRE(rows.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(rows[i].at("prompt_id") == "p" + std::to_string(i));
        CHECK(rows[i].at("perplexity").get<double>() == doctest::Approx(oracle::direct_perplexity(probs[i])).epsilon(1e-9));
    }
    CHECK(snapshot_dir(dir / "a") == snapshot_dir(dir / "b"));
    const auto plan = read_json(dir / "a/plan.json");
    // Ascending perplexity: p3 ... p4 last.
    CHECK(plan.at("segments")[1].back() == "p4");
}

TEST_CASE("report renders every format and names missing artifacts") {
    TempDir dir;
    auto cfg = base_config(kDataDir / "prompts_demo.jsonl");
    cfg["T"] = 5;
    const auto path = write_config(dir, cfg);
    const auto run_dir = (dir / "run").string();
    const auto run = cli({"run", path, "--run-dir", run_dir});
    INFO(run.err);
    REQUIRE(run.code == kExitCompleted);

    const auto csv = cli({"report", run_dir, "--format", "csv"});
    CHECK(csv.code == kExitCompleted);
    const auto header = csv.out.substr(0, csv.out.find('\n'));
    CHECK(header.find("tail_mass_k10") != std::string::npos);
    CHECK(header.find("tail_mass_k100") != std::string::npos);

    const auto js = cli({"report", run_dir, "--format", "json"});
    REQUIRE(js.code == kExitCompleted);
    const auto doc = json::parse(js.out);
    CHECK(valid_report_json(doc));
    CHECK(doc.at("rounds").size() == 5);

    const auto table = cli({"report", run_dir});
    CHECK(table.code == kExitCompleted);
    CHECK(table.out.find("stop_reason:") != std::string::npos);
    CHECK(cli({"report", run_dir, "--format", "json"}).out == js.out);
    CHECK(cli({"report", run_dir, "--format", "xml"}).code == kExitConfig);

    std::filesystem::remove(dir / "run/rounds/2/probes.json");
    const auto broken = cli({"report", run_dir});
    CHECK(broken.code == kExitOther);
    CHECK(broken.err.find("rounds/2/probes.json") != std::string::npos);
}

TEST_CASE("probe prints a report for one model") {
    TempDir dir;
    const auto path = write_config(dir, base_config(kDataDir / "prompts_demo.jsonl"));
    const auto r = cli({"probe", path});
    INFO(r.err);
    REQUIRE(r.code == kExitCompleted);
    const auto doc = json::parse(r.out);
    CHECK(doc.contains("verdict"));
    CHECK(doc.at("eos_choice").is_object());
}

TEST_CASE("an interrupt exits with code 130 after flushing") {
    TempDir dir;
    const auto path = write_config(dir, base_config(kDataDir / "prompts_demo.jsonl"));
    const std::string run_dir = (dir / "run").string();
    std::vector<const char*> argv{"soft", "run", path.c_str(), "--run-dir", run_dir.c_str()};
    std::atomic<bool> stop{true};
    std::ostringstream out, err;
    CHECK(run_cli(static_cast<int>(argv.size()), argv.data(), out, err, &stop) == kExitInterrupted);
    CHECK(std::filesystem::exists(dir.path() / "run/run.json"));
}

#include "soft/cli.hpp"

#include "soft/app_config.hpp"
#include "soft/curriculum.hpp"
#include "soft/error.hpp"
#include "soft/report.hpp"

#include <CLI11.hpp>

#include <ostream>

namespace soft {

namespace {

struct CommonArgs {
    std::string config;
    std::string backend;
    std::vector<std::string> seeds;
};

struct Loaded {
    AppConfig config;
    LoadedData data;
    std::string backend_kind;
};

Loaded load_everything(const CommonArgs& args, std::ostream& err) {
    Loaded l{AppConfig::load(args.config), {}, {}};
    for (const auto& s : args.seeds) l.config.apply_seed_override(s);
    l.config.soft.validate();
    l.data = load_data(l.config);
    for (const auto& w : l.data.pool_warnings) err << "warning: " << w << '\n';
    l.backend_kind = args.backend.empty() ? l.config.default_backend : args.backend;
    return l;
}

// Saves a remote transcript however the command ends.
struct TranscriptGuard {
    const BackendSetup& setup;
    ~TranscriptGuard() {
        if (setup.recorder && setup.record_path) {
            try {
                setup.recorder->save(*setup.record_path);
            } catch (...) {
            }
        }
    }
};

int cmd_run(const CommonArgs& args, bool resume, const std::string& run_dir_flag, std::ostream& out,
            std::ostream& err, const std::atomic<bool>* interrupt) {
    auto l = load_everything(args, err);
    std::optional<std::filesystem::path> run_dir = l.config.run_dir;
    if (!run_dir_flag.empty()) run_dir = std::filesystem::path(run_dir_flag);
    if (!run_dir) throw ConfigError("no run directory: set run_dir in the config or pass --run-dir");

    auto setup = make_backend(l.config, l.backend_kind, l.data, run_dir);
    TranscriptGuard guard{setup};

    RunOptions options;
    options.run_dir = run_dir;
    options.resume = resume;
    options.interrupt = interrupt;
    options.log = [&err](const std::string& msg) { err << "[soft] " << msg << '\n'; };
    options.provenance = {{"config_file", std::filesystem::absolute(args.config).lexically_normal().string()},
                          {"backend", setup.provenance}};

    const auto history = run_soft(*setup.backend, setup.initial_model, l.data.prompts, l.data.pool,
                                  l.data.principles, l.data.validation, l.config.soft, options);
    out << "stop_reason: " << history.stop_reason.to_string() << '\n';
    out << "final_model: " << history.final_model << '\n';
    return history.stop_reason.kind == StopReason::Kind::completed_all_rounds ? kExitCompleted : kExitEarlyStop;
}

int cmd_score(const CommonArgs& args, const std::string& dataset_flag, const std::string& out_dir, std::ostream& out,
              std::ostream& err) {
    auto l = load_everything(args, err);
    if (!dataset_flag.empty()) l.data.prompts = load_prompts(dataset_flag);
    if (l.data.prompts.empty()) throw ConfigError("dataset is empty");
    if (l.config.soft.rounds > l.data.prompts.size()) {
        throw ConfigError("dataset has fewer prompts than T=" + std::to_string(l.config.soft.rounds));
    }

    auto setup = make_backend(l.config, l.backend_kind, l.data, std::nullopt);
    TranscriptGuard guard{setup};
    const auto& soft = l.config.soft;
    ScoringOptions scoring{soft.scoring_mode, soft.k, soft.seeds.scoring, soft.parallelism};
    const auto scores = score_dataset(*setup.backend, setup.initial_model, l.data.prompts, l.data.pool,
                                      l.data.principles, soft.sampling, scoring);
    const auto plan = plan_segments(l.data.prompts, std::span<const PerplexityScore>(scores), soft.rounds,
                                    SegmentationMode::easy_to_hard, soft.seeds.segmentation);
    const std::filesystem::path dir(out_dir);
    write_scores(dir / "scores.jsonl", scores);
    write_json(dir / "plan.json", plan.to_json());
    out << "scored " << scores.size() << " prompts into " << (dir / "scores.jsonl").string() << '\n';
    return kExitCompleted;
}

int cmd_report(const std::string& run_dir, const std::string& format, std::ostream& out) {
    const auto fmt = report_format_from_string(format);
    out << render_report(RunSummary::load(run_dir), fmt);
    return kExitCompleted;
}

int cmd_probe(const CommonArgs& args, const std::string& model_flag, std::ostream& out, std::ostream& err) {
    auto l = load_everything(args, err);
    auto setup = make_backend(l.config, l.backend_kind, l.data, std::nullopt);
    TranscriptGuard guard{setup};
    const ModelRef model = model_flag.empty() ? setup.initial_model : model_flag;
    auto sets = l.data.validation;
    const auto& soft = l.config.soft;
    if (soft.probes.eos_gen_enabled) {
        sets.gen = prepare_gen_references(*setup.backend, setup.initial_model, std::move(sets.gen), soft.sampling,
                                          derive_seed(soft.sampling.seed, 0x9e11));
    }
    ProbeState state;
    const auto report = validate(*setup.backend, model, sets, state, soft.probes);
    out << report.to_json().dump(2) << '\n';
    return kExitCompleted;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const std::atomic<bool>* interrupt) {
    CLI::App app{"Bootstrapped self-alignment runs"};
    app.require_subcommand(1);

    CommonArgs common;
    bool resume = false;
    std::string run_dir;
    auto* run = app.add_subcommand("run", "Run (or resume) a bootstrapping pipeline");
    run->add_option("config", common.config, "Config file")->required();
    run->add_option("--backend", common.backend, "ngram, remote or mock (default: backend.default)");
    run->add_flag("--resume", resume, "Continue the run in the run directory");
    run->add_option("--seed", common.seeds, "Seed override name=value (repeatable)");
    run->add_option("--run-dir", run_dir, "Run directory (overrides run_dir)");

    std::string dataset;
    std::string score_out = ".";
    auto* score = app.add_subcommand("score", "Score prompts by perplexity and write the easy-to-hard plan");
    score->add_option("config", common.config, "Config file")->required();
    score->add_option("--dataset", dataset, "Prompt JSONL (default: data.prompts)");
    score->add_option("--out", score_out, "Output directory for scores.jsonl and plan.json");
    score->add_option("--backend", common.backend, "ngram, remote or mock");
    score->add_option("--seed", common.seeds, "Seed override name=value (repeatable)");

    std::string report_dir;
    std::string format = "table";
    auto* report = app.add_subcommand("report", "Summarize a run directory");
    report->add_option("run_dir", report_dir, "Run directory")->required();
    report->add_option("--format", format, "table, json or csv")->check(CLI::IsMember({"table", "json", "csv"}));

    std::string model;
    auto* probe = app.add_subcommand("probe", "Probe one model against the validation sets");
    probe->add_option("config", common.config, "Config file")->required();
    probe->add_option("--model", model, "Model reference (default: the backend's initial model)");
    probe->add_option("--backend", common.backend, "ngram, remote or mock");
    probe->add_option("--seed", common.seeds, "Seed override name=value (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitCompleted : kExitConfig;
    }

    try {
        if (*run) return cmd_run(common, resume, run_dir, out, err, interrupt);
        if (*score) return cmd_score(common, dataset, score_out, out, err);
        if (*report) return cmd_report(report_dir, format, out);
        if (*probe) return cmd_probe(common, model, out, err);
    } catch (const Interrupted&) {
        err << "interrupted; partial round state was flushed\n";
        return kExitInterrupted;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const BackendError& e) {
        err << "backend error: " << e.what() << '\n';
        return kExitBackend;
    } catch (const ArtifactError& e) {
        err << "artifact error: " << e.what() << '\n';
        return kExitOther;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitOther;
    }
    return kExitOther;
}

}  // namespace soft

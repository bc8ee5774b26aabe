#include "soft/pipeline.hpp"

#include "soft/error.hpp"
#include "soft/parallel.hpp"

#include <algorithm>
#include <stdexcept>

namespace soft {

// ---------------------------------------------------------------------------
// SoftConfig

void SoftConfig::validate() const {
    if (rounds < 1) throw ConfigError("T must be >= 1");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (parallelism < 1) throw ConfigError("parallelism must be >= 1");
    if (!finetune.is_object()) throw ConfigError("finetune must be an object");
    sampling.validate();
    probes.validate();
}

json SoftConfig::to_json() const {
    return {{"T", rounds},
            {"k", k},
            {"batch_size", batch_size},
            {"parallelism", parallelism},
            {"sampling", sampling.to_json()},
            {"finetune", finetune},
            {"segmentation_mode", to_string(segmentation_mode)},
            {"scoring_mode", to_string(scoring_mode)},
            {"seeds",
             {{"pool_sampling", seeds.pool_sampling}, {"segmentation", seeds.segmentation}, {"scoring", seeds.scoring}}},
            {"probe_thresholds", probes.to_json()}};
}

SoftConfig SoftConfig::from_json(const json& doc) {
    SoftConfig c;
    try {
        c.rounds = doc.value("T", c.rounds);
        c.k = doc.value("k", c.k);
        c.batch_size = doc.value("batch_size", c.batch_size);
        c.parallelism = doc.value("parallelism", c.parallelism);
        if (auto it = doc.find("sampling"); it != doc.end()) c.sampling = SamplingConfig::from_json(*it);
        if (auto it = doc.find("finetune"); it != doc.end()) {
            auto merged = default_finetune_config();
            if (!it->is_object()) throw ConfigError("finetune must be an object");
            for (const auto& [key, value] : it->items()) merged[key] = value;
            c.finetune = merged;
        }
        if (auto it = doc.find("segmentation_mode"); it != doc.end()) {
            c.segmentation_mode = segmentation_mode_from_string(it->get<std::string>());
        }
        if (auto it = doc.find("scoring_mode"); it != doc.end()) {
            c.scoring_mode = scoring_mode_from_string(it->get<std::string>());
        }
        if (auto it = doc.find("seeds"); it != doc.end()) {
            c.seeds.pool_sampling = it->value("pool_sampling", c.seeds.pool_sampling);
            c.seeds.segmentation = it->value("segmentation", c.seeds.segmentation);
            c.seeds.scoring = it->value("scoring", c.seeds.scoring);
        }
        if (auto it = doc.find("probe_thresholds"); it != doc.end()) c.probes = ProbeConfig::from_json(*it);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string StopReason::to_string() const {
    if (kind == Kind::completed_all_rounds) return "completed_all_rounds";
    return "validation_failed_at(" + std::to_string(round) + ")";
}

StopReason StopReason::parse(std::string_view text) {
    if (text == "completed_all_rounds") return {};
    constexpr std::string_view prefix = "validation_failed_at(";
    if (text.substr(0, prefix.size()) == prefix && text.back() == ')') {
        const auto digits = std::string(text.substr(prefix.size(), text.size() - prefix.size() - 1));
        try {
            return {Kind::validation_failed, static_cast<std::size_t>(std::stoul(digits))};
        } catch (const std::exception&) {
        }
    }
    throw ConfigError("unrecognized stop reason '" + std::string(text) + "'");
}

json RunHistory::summary_json() const {
    json round_rows = json::array();
    for (const auto& r : rounds) {
        round_rows.push_back({{"round_index", r.round_index},
                              {"input_model", r.input_model},
                              {"output_model", r.output_model},
                              {"prompts_consumed", r.segment_prompt_ids.size()},
                              {"verdict", r.probe_report.verdict},
                              {"stopped_after", r.stopped_after}});
    }
    return {{"schema_version", kSchemaVersion},
            {"T", config.rounds},
            {"initial_model", initial_model},
            {"final_model", final_model},
            {"stop_reason", stop_reason.to_string()},
            {"rounds", round_rows}};
}

// ---------------------------------------------------------------------------
// RunStore

RunStore::RunStore(std::filesystem::path root) : root_(std::move(root)) {}

std::filesystem::path RunStore::round_dir(std::size_t t) const { return root_ / "rounds" / std::to_string(t); }

bool RunStore::has_generation(std::size_t t) const {
    return std::filesystem::exists(round_dir(t) / "records.jsonl") &&
           std::filesystem::exists(round_dir(t) / "pairs.jsonl");
}

bool RunStore::round_complete(std::size_t t) const {
    return std::filesystem::exists(round_dir(t) / "probes.json") &&
           std::filesystem::exists(round_dir(t) / "model_ref.json") && has_generation(t);
}

namespace {

json record_row(const RoundArtifact& a, std::size_t i) {
    auto row = a.records[i].to_json();
    row["icl_example_ids"] = a.icl_example_ids.at(i);
    return row;
}

}  // namespace

void RunStore::write_generation(const RoundArtifact& artifact) const {
    const auto dir = round_dir(artifact.round_index);
    std::vector<json> records;
    for (std::size_t i = 0; i < artifact.records.size(); ++i) records.push_back(record_row(artifact, i));
    std::vector<json> pairs;
    for (const auto& p : artifact.training_pairs) pairs.push_back(p.to_json());
    write_jsonl(dir / "records.jsonl", records);
    // pairs.jsonl last: its presence marks generation as finished.
    write_jsonl(dir / "pairs.jsonl", pairs);
    std::filesystem::remove(dir / "records.partial.jsonl");
}

void RunStore::write_partial_records(const RoundArtifact& artifact) const {
    std::vector<json> records;
    for (std::size_t i = 0; i < artifact.records.size(); ++i) {
        if (artifact.records[i].prompt_id.empty()) continue;
        records.push_back(record_row(artifact, i));
    }
    write_jsonl(round_dir(artifact.round_index) / "records.partial.jsonl", records);
}

void RunStore::read_generation(std::size_t t, RoundArtifact& artifact) const {
    const auto dir = round_dir(t);
    const auto records_path = dir / "records.jsonl";
    const auto pairs_path = dir / "pairs.jsonl";
    artifact.round_index = t;
    artifact.records.clear();
    artifact.icl_example_ids.clear();
    artifact.training_pairs.clear();
    artifact.segment_prompt_ids.clear();
    try {
        for (const auto& row : read_jsonl(records_path)) {
            artifact.records.push_back(GenerationRecord::from_json(row));
            artifact.icl_example_ids.push_back(row.value("icl_example_ids", std::vector<std::size_t>{}));
            artifact.segment_prompt_ids.push_back(artifact.records.back().prompt_id);
        }
    } catch (const std::exception& e) {
        throw ArtifactError(records_path.string(), e.what());
    }
    try {
        for (const auto& row : read_jsonl(pairs_path)) artifact.training_pairs.push_back(TrainingPair::from_json(row));
    } catch (const std::exception& e) {
        throw ArtifactError(pairs_path.string(), e.what());
    }
}

std::optional<json> RunStore::read_finetune_job(std::size_t t) const {
    const auto path = round_dir(t) / "finetune_job.json";
    if (!std::filesystem::exists(path)) return std::nullopt;
    return read_json(path);
}

void RunStore::write_finetune_job(std::size_t t, const std::string& key, const std::optional<std::string>& job_id) const {
    write_json(round_dir(t) / "finetune_job.json",
               {{"schema_version", kSchemaVersion},
                {"idempotency_key", key},
                {"job_id", job_id ? json(*job_id) : json(nullptr)}});
}

void RunStore::write_model_ref(const RoundArtifact& artifact) const {
    write_json(round_dir(artifact.round_index) / "model_ref.json",
               {{"schema_version", kSchemaVersion},
                {"round_index", artifact.round_index},
                {"input_model", artifact.input_model},
                {"output_model", artifact.output_model}});
}

void RunStore::write_probes(const RoundArtifact& artifact) const {
    write_json(round_dir(artifact.round_index) / "probes.json", artifact.probe_report.to_json());
}

RoundArtifact RunStore::load_round(std::size_t t) const {
    RoundArtifact a;
    read_generation(t, a);
    const auto ref_path = round_dir(t) / "model_ref.json";
    try {
        const auto doc = read_json(ref_path);
        a.input_model = doc.at("input_model").get<std::string>();
        a.output_model = doc.at("output_model").get<std::string>();
    } catch (const std::exception& e) {
        throw ArtifactError(ref_path.string(), e.what());
    }
    const auto probes_path = round_dir(t) / "probes.json";
    try {
        a.probe_report = ProbeReport::from_json(read_json(probes_path));
    } catch (const std::exception& e) {
        throw ArtifactError(probes_path.string(), e.what());
    }
    a.stopped_after = !a.probe_report.verdict;
    return a;
}

// ---------------------------------------------------------------------------
// Rounds

std::string finetune_idempotency_key(std::size_t round_index, std::span<const TrainingPair> pairs) {
    std::vector<std::string> hashes;
    hashes.reserve(pairs.size());
    for (const auto& p : pairs) hashes.push_back(sha256_hex(json::array({p.prompt_text, p.response_text}).dump()));
    std::sort(hashes.begin(), hashes.end());
    std::string material = "round=" + std::to_string(round_index) + "\n";
    for (const auto& h : hashes) {
        material += h;
        material += '\n';
    }
    return sha256_hex(material);
}

namespace {

bool interrupted(const std::atomic<bool>* flag) { return flag && flag->load(); }

void generate_segment(ModelBackend& backend, const ModelRef& model, std::span<const Prompt> segment,
                      RoundArtifact& artifact, const IclPool& pool, const PrincipleSet& principles,
                      const SoftConfig& config, const RoundContext& context) {
    const auto n = segment.size();
    const auto t = artifact.round_index;

    // One ICL draw per batch, drawn up front so the draw sequence does not
    // depend on generation concurrency.
    std::vector<std::vector<IclExample>> draws;
    for (std::size_t b = 0; b * config.batch_size < n; ++b) {
        Rng rng(derive_seed(config.seeds.pool_sampling, t, b));
        draws.push_back(sample_icl(pool, config.k, rng));
    }

    artifact.records.assign(n, {});
    artifact.icl_example_ids.assign(n, {});
    std::exception_ptr failure;
    try {
        parallel_for(n, config.parallelism, [&](std::size_t i) {
            if (interrupted(context.interrupt)) return;
            const auto& prompt = segment[i];
            const auto& examples = draws[i / config.batch_size];
            const auto assembled = assemble_prompt(principles, examples, prompt);
            Rng rng(derive_seed(config.sampling.seed, t, i));
            GenerationRecord record;
            try {
                record = backend.generate(model, assembled.text, config.sampling, rng);
                record.validate();
            } catch (const BackendError& e) {
                throw GenerationError(prompt.id, e.what());
            }
            record.prompt_id = prompt.id;
            artifact.records[i] = std::move(record);
            artifact.icl_example_ids[i] = assembled.example_ids;
        });
    } catch (...) {
        failure = std::current_exception();
    }
    if (failure || interrupted(context.interrupt)) {
        if (context.store) context.store->write_partial_records(artifact);
        if (failure) std::rethrow_exception(failure);
        throw Interrupted();
    }
}

}  // namespace

RoundArtifact bootstrap_round(ModelBackend& backend, const ModelRef& model, std::span<const Prompt> segment,
                              std::size_t round_index, const IclPool& pool, const PrincipleSet& principles,
                              const SoftConfig& config, const RoundContext& context) {
    if (segment.empty()) throw std::invalid_argument("bootstrap_round: empty segment");

    RoundArtifact artifact;
    artifact.round_index = round_index;
    artifact.input_model = model;

    if (context.store && context.store->has_generation(round_index)) {
        context.store->read_generation(round_index, artifact);
    } else {
        for (const auto& p : segment) artifact.segment_prompt_ids.push_back(p.id);
        generate_segment(backend, model, segment, artifact, pool, principles, config, context);
        artifact.training_pairs.reserve(segment.size());
        for (std::size_t i = 0; i < segment.size(); ++i) {
            artifact.training_pairs.push_back(make_training_pair(segment[i], artifact.records[i]));
        }
        if (context.store) context.store->write_generation(artifact);
    }

    if (interrupted(context.interrupt)) throw Interrupted();

    FinetuneRequest request;
    request.idempotency_key = finetune_idempotency_key(round_index, artifact.training_pairs);
    if (context.store) {
        if (auto job = context.store->read_finetune_job(round_index);
            job && job->value("idempotency_key", std::string{}) == request.idempotency_key &&
            job->contains("job_id") && !job->at("job_id").is_null()) {
            request.resume_job_id = job->at("job_id").get<std::string>();
        } else {
            context.store->write_finetune_job(round_index, request.idempotency_key, std::nullopt);
        }
        const auto* store = context.store;
        const auto key = request.idempotency_key;
        request.on_job_submitted = [store, round_index, key](const std::string& job_id) {
            store->write_finetune_job(round_index, key, job_id);
        };
    }
    artifact.output_model = backend.finetune(model, artifact.training_pairs, config.finetune, request);
    if (context.store) context.store->write_model_ref(artifact);
    return artifact;
}

// ---------------------------------------------------------------------------
// run_soft

namespace {

void persist_history(const RunStore* store, const RunHistory& history) {
    if (store) write_json(store->history_json(), history.summary_json());
}

json run_document(const SoftConfig& config, const ModelRef& initial_model, std::size_t dataset_size,
                  const std::optional<SegmentPlan>& plan, const json& provenance) {
    return {{"schema_version", kSchemaVersion},
            {"config", config.to_json()},
            {"initial_model", initial_model},
            {"dataset_size", dataset_size},
            {"provenance", provenance},
            {"plan", plan ? plan->to_json() : json(nullptr)}};
}

}  // namespace

RunHistory run_soft(ModelBackend& backend, const ModelRef& initial_model, const PromptDataset& dataset,
                    const IclPool& pool, const PrincipleSet& principles, ValidationSets validation,
                    const SoftConfig& config, const RunOptions& options) {
    config.validate();
    if (dataset.size() < config.rounds) {
        throw ConfigError("dataset has " + std::to_string(dataset.size()) + " prompts but T=" +
                          std::to_string(config.rounds));
    }
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    std::optional<RunStore> store;
    std::optional<SegmentPlan> plan;
    if (options.run_dir) {
        store.emplace(*options.run_dir);
        if (std::filesystem::exists(store->run_json())) {
            if (!options.resume) {
                throw ConfigError(options.run_dir->string() + " already holds a run; pass --resume to continue it");
            }
            const auto existing = read_json(store->run_json());
            if (existing.at("config") != config.to_json() || existing.at("initial_model") != initial_model ||
                existing.value("dataset_size", std::size_t{0}) != dataset.size()) {
                throw ConfigError(store->run_json().string() + " was written with a different configuration");
            }
            if (!existing.at("plan").is_null()) plan = SegmentPlan::from_json(existing.at("plan"));
        } else {
            write_json(store->run_json(), run_document(config, initial_model, dataset.size(), plan, options.provenance));
        }
    }

    if (!plan) {
        if (config.segmentation_mode == SegmentationMode::easy_to_hard) {
            log("scoring " + std::to_string(dataset.size()) + " prompts with " + initial_model);
            ScoringOptions scoring{config.scoring_mode, config.k, config.seeds.scoring, config.parallelism};
            const auto scores = score_dataset(backend, initial_model, dataset, pool, principles, config.sampling, scoring);
            if (store) write_scores(store->scores_jsonl(), scores);
            plan = plan_segments(dataset, std::span<const PerplexityScore>(scores), config.rounds,
                                 SegmentationMode::easy_to_hard, config.seeds.segmentation);
        } else {
            plan = plan_segments(dataset, std::nullopt, config.rounds, SegmentationMode::random,
                                 config.seeds.segmentation);
        }
        if (store) {
            write_json(store->run_json(), run_document(config, initial_model, dataset.size(), plan, options.provenance));
        }
    }

    if (config.probes.eos_gen_enabled) {
        const bool missing = std::any_of(validation.gen.begin(), validation.gen.end(),
                                         [](const GenValidationItem& i) { return !i.has_reference(); });
        if (missing) {
            if (store && std::filesystem::exists(store->validation_gen_jsonl())) {
                validation.gen = load_gen_items(store->validation_gen_jsonl());
            } else {
                log("generating reference responses with " + initial_model);
                validation.gen = prepare_gen_references(backend, initial_model, std::move(validation.gen),
                                                        config.sampling, derive_seed(config.sampling.seed, 0x9e11));
                if (store) write_gen_items(store->validation_gen_jsonl(), validation.gen);
            }
        }
    }

    RunHistory history;
    history.config = config;
    history.plan = *plan;
    history.initial_model = initial_model;
    history.final_model = initial_model;

    ProbeState state;
    ModelRef current = initial_model;
    const RunStore* store_ptr = store ? &*store : nullptr;

    for (std::size_t t = 0; t < config.rounds; ++t) {
        try {
            RoundArtifact artifact;
            if (store && store->round_complete(t)) {
                artifact = store->load_round(t);
                if (artifact.input_model != current) {
                    throw ArtifactError((store->round_dir(t) / "model_ref.json").string(),
                                        "input model does not continue the lineage");
                }
                log("round " + std::to_string(t) + ": reusing persisted artifacts");
            } else {
                std::vector<Prompt> segment;
                for (const auto& id : plan->segments[t]) {
                    const auto* p = dataset.find(id);
                    if (!p) throw ConfigError("segment plan references unknown prompt '" + id + "'");
                    segment.push_back(*p);
                }
                log("round " + std::to_string(t) + ": " + std::to_string(segment.size()) + " prompts from " + current);
                artifact = bootstrap_round(backend, current, segment, t, pool, principles, config,
                                           {store_ptr, options.interrupt});
                artifact.probe_report =
                    validate(backend, artifact.output_model, validation, state, config.probes, artifact.records);
                artifact.stopped_after = !artifact.probe_report.verdict;
                if (store) store->write_probes(artifact);
            }
            if (artifact.probe_report.eos_gen) state.previous_gen_avg = artifact.probe_report.eos_gen->avg_eos_prob;

            const bool stop = artifact.stopped_after;
            const auto next = artifact.output_model;
            history.rounds.push_back(std::move(artifact));
            if (stop) {
                history.stop_reason = {StopReason::Kind::validation_failed, t};
                history.final_model = current;
                log("round " + std::to_string(t) + ": validation failed, returning " + current);
                persist_history(store_ptr, history);
                return history;
            }
            current = next;
            history.final_model = current;
        } catch (const Interrupted&) {
            throw;
        } catch (const std::exception& e) {
            if (store) {
                auto doc = history.summary_json();
                doc["stop_reason"] = "aborted_at(" + std::to_string(t) + ")";
                doc["error"] = e.what();
                write_json(store->history_json(), doc);
            }
            throw;
        }
    }

    history.stop_reason = {};
    persist_history(store_ptr, history);
    return history;
}

}  // namespace soft

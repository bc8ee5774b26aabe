#pragma once

// The bootstrapping loop: each round answers a fresh prompt segment few-shot
// with the current model, fine-tunes that model on (bare question, answer)
// pairs, and gates the result with the collapse probes. A failed gate ends
// the run and returns the model the round started from.

#include "soft/backend.hpp"
#include "soft/curriculum.hpp"
#include "soft/domain.hpp"
#include "soft/probes.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace soft {

struct SeedConfig {
    std::uint64_t pool_sampling = 1;
    std::uint64_t segmentation = 2;
    std::uint64_t scoring = 3;
};

struct SoftConfig {
    std::size_t rounds = 3;  // T
    std::size_t k = 4;
    /// Prompts sharing one ICL draw.
    std::size_t batch_size = 1;
    /// Concurrent generation calls within a round.
    std::size_t parallelism = 1;
    SamplingConfig sampling;
    FinetuneConfig finetune = default_finetune_config();
    SegmentationMode segmentation_mode = SegmentationMode::random;
    ScoringMode scoring_mode = ScoringMode::few_shot;
    SeedConfig seeds;
    ProbeConfig probes;

    void validate() const;
    /// Keys mirror the field names ("T", "k", "sampling", "finetune",
    /// "segmentation_mode", "seeds", "probe_thresholds", ...).
    json to_json() const;
    static SoftConfig from_json(const json& doc);
};

struct StopReason {
    enum class Kind { completed_all_rounds, validation_failed };
    Kind kind = Kind::completed_all_rounds;
    std::size_t round = 0;

    /// "completed_all_rounds" or "validation_failed_at(<t>)".
    std::string to_string() const;
    static StopReason parse(std::string_view text);
    bool operator==(const StopReason&) const = default;
};

struct RoundArtifact {
    std::size_t round_index = 0;
    ModelRef input_model;
    ModelRef output_model;
    std::vector<std::string> segment_prompt_ids;
    std::vector<GenerationRecord> records;
    std::vector<std::vector<std::size_t>> icl_example_ids;
    std::vector<TrainingPair> training_pairs;
    ProbeReport probe_report;
    bool stopped_after = false;
};

struct RunHistory {
    SoftConfig config;
    SegmentPlan plan;
    ModelRef initial_model;
    std::vector<RoundArtifact> rounds;
    ModelRef final_model;
    StopReason stop_reason;

    /// The history.json document.
    json summary_json() const;
};

/// Layout of a run directory:
///   run.json, history.json, scores.jsonl, validation_gen.jsonl,
///   rounds/<t>/{records.jsonl, pairs.jsonl, finetune_job.json,
///               model_ref.json, probes.json}
/// A round is complete once probes.json exists.
class RunStore {
public:
    explicit RunStore(std::filesystem::path root);

    const std::filesystem::path& root() const noexcept { return root_; }
    std::filesystem::path run_json() const { return root_ / "run.json"; }
    std::filesystem::path history_json() const { return root_ / "history.json"; }
    std::filesystem::path scores_jsonl() const { return root_ / "scores.jsonl"; }
    std::filesystem::path validation_gen_jsonl() const { return root_ / "validation_gen.jsonl"; }
    std::filesystem::path models_dir() const { return root_ / "models"; }
    std::filesystem::path round_dir(std::size_t t) const;

    bool has_generation(std::size_t t) const;
    bool round_complete(std::size_t t) const;

    void write_generation(const RoundArtifact& artifact) const;
    void write_partial_records(const RoundArtifact& artifact) const;
    /// Fills records, icl ids, pairs and segment ids from disk.
    void read_generation(std::size_t t, RoundArtifact& artifact) const;

    std::optional<json> read_finetune_job(std::size_t t) const;
    void write_finetune_job(std::size_t t, const std::string& key, const std::optional<std::string>& job_id) const;

    void write_model_ref(const RoundArtifact& artifact) const;
    void write_probes(const RoundArtifact& artifact) const;
    RoundArtifact load_round(std::size_t t) const;

private:
    std::filesystem::path root_;
};

/// Content hash of (round index, sorted pair hashes). Stable under pair order.
std::string finetune_idempotency_key(std::size_t round_index, std::span<const TrainingPair> pairs);

struct RoundContext {
    const RunStore* store = nullptr;
    const std::atomic<bool>* interrupt = nullptr;
};

/// Generates one record per prompt (fresh ICL draw per batch), builds the
/// training pairs from the bare questions, and fine-tunes from `model`.
/// The returned artifact has no probe report yet.
RoundArtifact bootstrap_round(ModelBackend& backend, const ModelRef& model, std::span<const Prompt> segment,
                              std::size_t round_index, const IclPool& pool, const PrincipleSet& principles,
                              const SoftConfig& config, const RoundContext& context = {});

struct RunOptions {
    std::optional<std::filesystem::path> run_dir;
    bool resume = false;
    const std::atomic<bool>* interrupt = nullptr;
    std::function<void(const std::string&)> log;
    /// Extra provenance stored in run.json (data paths, backend section).
    json provenance = json::object();
};

/// Runs up to T rounds. Completed rounds found in `run_dir` are reused when
/// resuming. The returned history always satisfies: early stop at round t
/// means rounds.size() == t+1 and final_model == rounds[t].input_model.
RunHistory run_soft(ModelBackend& backend, const ModelRef& initial_model, const PromptDataset& dataset,
                    const IclPool& pool, const PrincipleSet& principles, ValidationSets validation,
                    const SoftConfig& config, const RunOptions& options = {});

}  // namespace soft

#pragma once

// Easy-to-hard ordering: score every prompt by the perplexity of the model's
// own answer, then cut the (sorted or shuffled) corpus into T round segments.

#include "soft/backend.hpp"
#include "soft/domain.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace soft {

/// (prod 1/p_i)^(1/N), evaluated as exp(-mean(log p_i)).
/// Throws std::invalid_argument for an empty sequence or any p outside (0,1].
double sentence_perplexity(std::span<const double> token_probs);

struct PerplexityScore {
    std::string prompt_id;
    double value = 1.0;
    std::size_t token_count = 0;
    std::uint64_t seed = 0;

    json to_json() const;
    static PerplexityScore from_json(const json& doc);
};

enum class ScoringMode { few_shot, zero_shot };

std::string_view to_string(ScoringMode mode);
ScoringMode scoring_mode_from_string(std::string_view text);

struct ScoringOptions {
    ScoringMode mode = ScoringMode::few_shot;
    std::size_t k = 4;
    std::uint64_t seed = 0;
    std::size_t parallelism = 1;
};

/// One self-generated response per prompt, scored by sentence perplexity.
/// Prompt i uses its own random stream seeded from (options.seed, i), so the
/// result does not depend on parallelism. Output order = dataset order.
std::vector<PerplexityScore> score_dataset(ModelBackend& backend, const ModelRef& model, const PromptDataset& dataset,
                                           const IclPool& pool, const PrincipleSet& principles,
                                           const SamplingConfig& sampling, const ScoringOptions& options);

void write_scores(const std::filesystem::path& path, std::span<const PerplexityScore> scores);
std::vector<PerplexityScore> read_scores(const std::filesystem::path& path);

enum class SegmentationMode { random, easy_to_hard };

std::string_view to_string(SegmentationMode mode);
SegmentationMode segmentation_mode_from_string(std::string_view text);

struct SegmentPlan {
    SegmentationMode mode = SegmentationMode::random;
    std::size_t rounds = 1;
    std::optional<std::uint64_t> seed;
    std::vector<std::vector<std::string>> segments;

    json to_json() const;
    static SegmentPlan from_json(const json& doc);
    bool operator==(const SegmentPlan&) const = default;
};

/// Sizes of an even split of n items into T parts, remainder on the earliest.
std::vector<std::size_t> segment_sizes(std::size_t n, std::size_t rounds);

/// Exact partition of the dataset into `rounds` contiguous slices.
/// easy_to_hard: stable ascending sort by score (requires one score per
/// prompt). random: seeded Fisher-Yates shuffle.
SegmentPlan plan_segments(const PromptDataset& dataset, std::optional<std::span<const PerplexityScore>> scores,
                          std::size_t rounds, SegmentationMode mode, std::uint64_t seed);

}  // namespace soft

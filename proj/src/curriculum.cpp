#include "soft/curriculum.hpp"

#include "soft/error.hpp"
#include "soft/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace soft {

double sentence_perplexity(std::span<const double> token_probs) {
    if (token_probs.empty()) throw std::invalid_argument("sentence_perplexity: empty sequence");
    double log_sum = 0.0;
    for (double p : token_probs) {
        if (!(p > 0.0 && p <= 1.0)) {
            throw std::invalid_argument("sentence_perplexity: probability " + std::to_string(p) + " outside (0,1]");
        }
        log_sum += std::log(p);
    }
    return std::exp(-log_sum / static_cast<double>(token_probs.size()));
}

json PerplexityScore::to_json() const {
    return {{"schema_version", kSchemaVersion},
            {"prompt_id", prompt_id},
            {"perplexity", value},
            {"token_count", token_count},
            {"seed", seed}};
}

PerplexityScore PerplexityScore::from_json(const json& doc) {
    return {doc.at("prompt_id").get<std::string>(), doc.at("perplexity").get<double>(),
            doc.at("token_count").get<std::size_t>(), doc.value("seed", std::uint64_t{0})};
}

std::string_view to_string(ScoringMode mode) { return mode == ScoringMode::few_shot ? "few_shot" : "zero_shot"; }

ScoringMode scoring_mode_from_string(std::string_view text) {
    if (text == "few_shot") return ScoringMode::few_shot;
    if (text == "zero_shot") return ScoringMode::zero_shot;
    throw ConfigError("unknown scoring mode '" + std::string(text) + "'");
}

std::vector<PerplexityScore> score_dataset(ModelBackend& backend, const ModelRef& model, const PromptDataset& dataset,
                                           const IclPool& pool, const PrincipleSet& principles,
                                           const SamplingConfig& sampling, const ScoringOptions& options) {
    if (dataset.empty()) throw std::invalid_argument("score_dataset: empty dataset");
    std::vector<PerplexityScore> scores(dataset.size());
    parallel_for(dataset.size(), options.parallelism, [&](std::size_t i) {
        const auto& prompt = dataset[i];
        const auto seed = derive_seed(options.seed, i);
        Rng rng(seed);
        std::string input = prompt.text;
        if (options.mode == ScoringMode::few_shot) {
            const auto examples = sample_icl(pool, options.k, rng);
            input = assemble_prompt(principles, examples, prompt).text;
        }
        GenerationRecord record;
        try {
            record = backend.generate(model, input, sampling, rng);
        } catch (const BackendError& e) {
            throw GenerationError(prompt.id, e.what());
        }
        if (record.tokens.empty()) throw GenerationError(prompt.id, "backend returned an empty response");
        const auto probs = record.token_probabilities();
        double value = 0.0;
        try {
            value = sentence_perplexity(probs);
        } catch (const std::invalid_argument& e) {
            throw GenerationError(prompt.id, e.what());
        }
        scores[i] = {prompt.id, value, probs.size(), seed};
    });
    return scores;
}

void write_scores(const std::filesystem::path& path, std::span<const PerplexityScore> scores) {
    std::vector<json> rows;
    rows.reserve(scores.size());
    for (const auto& s : scores) rows.push_back(s.to_json());
    write_jsonl(path, rows);
}

std::vector<PerplexityScore> read_scores(const std::filesystem::path& path) {
    std::vector<PerplexityScore> out;
    for (const auto& row : read_jsonl(path)) {
        try {
            out.push_back(PerplexityScore::from_json(row));
        } catch (const json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }
    return out;
}

std::string_view to_string(SegmentationMode mode) {
    return mode == SegmentationMode::random ? "random" : "easy_to_hard";
}

SegmentationMode segmentation_mode_from_string(std::string_view text) {
    if (text == "random") return SegmentationMode::random;
    if (text == "easy_to_hard") return SegmentationMode::easy_to_hard;
    throw ConfigError("unknown segmentation mode '" + std::string(text) + "'");
}

json SegmentPlan::to_json() const {
    return {{"schema_version", kSchemaVersion},
            {"mode", to_string(mode)},
            {"T", rounds},
            {"seed", seed ? json(*seed) : json(nullptr)},
            {"segments", segments}};
}

SegmentPlan SegmentPlan::from_json(const json& doc) {
    SegmentPlan p;
    p.mode = segmentation_mode_from_string(doc.at("mode").get<std::string>());
    p.rounds = doc.at("T").get<std::size_t>();
    if (auto it = doc.find("seed"); it != doc.end() && !it->is_null()) p.seed = it->get<std::uint64_t>();
    p.segments = doc.at("segments").get<std::vector<std::vector<std::string>>>();
    if (p.segments.size() != p.rounds) throw ConfigError("segment plan has " + std::to_string(p.segments.size()) +
                                                         " segments but T=" + std::to_string(p.rounds));
    return p;
}

std::vector<std::size_t> segment_sizes(std::size_t n, std::size_t rounds) {
    std::vector<std::size_t> sizes(rounds, n / rounds);
    for (std::size_t i = 0; i < n % rounds; ++i) ++sizes[i];
    return sizes;
}

SegmentPlan plan_segments(const PromptDataset& dataset, std::optional<std::span<const PerplexityScore>> scores,
                          std::size_t rounds, SegmentationMode mode, std::uint64_t seed) {
    const auto n = dataset.size();
    if (rounds < 1 || rounds > n) {
        throw std::out_of_range("plan_segments: T=" + std::to_string(rounds) + " outside 1.." + std::to_string(n));
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    SegmentPlan plan;
    plan.mode = mode;
    plan.rounds = rounds;

    if (mode == SegmentationMode::easy_to_hard) {
        if (!scores) throw std::invalid_argument("plan_segments: easy_to_hard requires scores");
        std::vector<double> by_index(n);
        std::vector<bool> seen(n, false);
        for (const auto& s : *scores) {
            const auto idx = dataset.index_of(s.prompt_id);
            if (!idx) throw std::invalid_argument("plan_segments: score for unknown prompt '" + s.prompt_id + "'");
            if (seen[*idx]) throw std::invalid_argument("plan_segments: duplicate score for '" + s.prompt_id + "'");
            seen[*idx] = true;
            by_index[*idx] = s.value;
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!seen[i]) throw std::invalid_argument("plan_segments: missing score for '" + dataset[i].id + "'");
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return by_index[a] < by_index[b]; });
    } else {
        if (scores) throw std::invalid_argument("plan_segments: random mode takes no scores");
        plan.seed = seed;
        Rng rng(seed);
        for (std::size_t i = n; i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_index(i));
            std::swap(order[i - 1], order[j]);
        }
    }

    std::size_t pos = 0;
    for (auto size : segment_sizes(n, rounds)) {
        auto& seg = plan.segments.emplace_back();
        seg.reserve(size);
        for (std::size_t i = 0; i < size; ++i) seg.push_back(dataset[order[pos++]].id);
    }
    return plan;
}

}  // namespace soft

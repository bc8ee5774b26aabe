#pragma once

// Collapse probes. Two gates decide whether a freshly fine-tuned model may
// continue: EOS mass at a four-way choice answer position, and the average
// EOS probability along reference responses relative to the previous round.
// Tail mass, output length and refusal rate are reported but never gate.

#include "soft/backend.hpp"
#include "soft/domain.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace soft {

struct ChoiceValidationItem {
    std::string question;
    std::array<std::string, 4> options;

    static ChoiceValidationItem from_json(const json& doc);
    json to_json() const;
};

struct GenValidationItem {
    std::string question;
    std::string reference_response;
    std::vector<std::string> reference_tokens;

    bool has_reference() const noexcept { return !reference_response.empty() && !reference_tokens.empty(); }
    static GenValidationItem from_json(const json& doc);
    json to_json() const;
};

std::vector<ChoiceValidationItem> load_choice_items(const std::filesystem::path& path);
std::vector<GenValidationItem> load_gen_items(const std::filesystem::path& path);
void write_gen_items(const std::filesystem::path& path, std::span<const GenValidationItem> items);

struct ValidationSets {
    std::vector<ChoiceValidationItem> choice;
    std::vector<GenValidationItem> gen;
};

enum class ChoiceAggregation { majority, any };

struct ProbeConfig {
    double eos_gen_ratio = 2.0;
    std::vector<std::size_t> tail_k{10, 100};
    RefusalMatcher refusal = RefusalMatcher::defaults();
    bool eos_choice_enabled = true;
    bool eos_gen_enabled = true;
    ChoiceAggregation aggregation = ChoiceAggregation::majority;
    /// Appended to the rendered question and options; the answer position is
    /// right after it.
    std::string answer_suffix = "Answer:";
    /// Token spellings counted for an option label; "{}" is the label letter.
    std::vector<std::string> label_variants{"{}", " {}"};
    /// Contexts for the tail-mass diagnostic. Empty: the choice answer positions.
    std::vector<std::string> tail_contexts;

    void validate() const;
    json to_json() const;
    static ProbeConfig from_json(const json& doc);
};

struct ChoiceItemResult {
    double eos_prob = 0.0;
    double min_option_prob = 0.0;
    bool triggered = false;
};

struct ChoiceProbeResult {
    std::vector<ChoiceItemResult> items;
    std::size_t triggered_count = 0;
    bool aggregate_triggered = false;

    double mean_eos_prob() const;
};

struct GenProbeResult {
    double avg_eos_prob = 0.0;
    std::optional<double> previous;
    bool triggered = false;
};

struct ProbeReport {
    std::optional<ChoiceProbeResult> eos_choice;
    std::optional<GenProbeResult> eos_gen;
    std::map<std::size_t, double> tail_mass;
    std::optional<double> avg_output_length;
    std::optional<double> refusal_rate;
    bool verdict = true;  // true = healthy
    std::vector<std::string> warnings;

    json to_json() const;
    static ProbeReport from_json(const json& doc);
};

/// State carried from round to round by the caller.
struct ProbeState {
    std::optional<double> previous_gen_avg;
};

/// Per-item rule: EOS outweighs the least likely of the four labels.
constexpr bool choice_item_triggered(double eos_prob, double min_option_prob) noexcept {
    return eos_prob > min_option_prob;
}

/// Ratio rule; never fires without a previous measurement.
constexpr bool gen_gate_triggered(double current, std::optional<double> previous, double ratio) noexcept {
    return previous.has_value() && current >= ratio * *previous;
}

bool choice_aggregate_triggered(std::size_t triggered, std::size_t total, ChoiceAggregation aggregation) noexcept;

std::string render_choice_context(const ChoiceValidationItem& item, std::string_view answer_suffix);

/// EOS and minimum option-label probability at one answer-position
/// distribution. Truncated distributions must contain EOS and at least one
/// variant of every label, or a CapabilityError is raised.
ChoiceItemResult score_choice_distribution(const NextTokenDistribution& dist, const ProbeConfig& config);

ChoiceProbeResult eos_choice_probe(ModelBackend& backend, const ModelRef& model,
                                   std::span<const ChoiceValidationItem> items, const ProbeConfig& config);

GenProbeResult eos_gen_probe(ModelBackend& backend, const ModelRef& model, std::span<const GenValidationItem> items,
                             std::optional<double> previous_avg, double ratio);

/// Sum of the K smallest probabilities. Requires a normalized distribution
/// (within 1e-6) and 1 <= K <= size.
double tail_mass(std::span<const double> distribution, std::size_t k);
/// Refuses truncated distributions.
double tail_mass(const NextTokenDistribution& distribution, std::size_t k);

double avg_output_length(std::span<const GenerationRecord> records);

/// Runs the enabled gates and the diagnostics. Updates `state` with this
/// round's generation-gate average. `round_records` feed the length and
/// refusal diagnostics; diagnostic failures become warnings.
ProbeReport validate(ModelBackend& backend, const ModelRef& model, const ValidationSets& sets, ProbeState& state,
                     const ProbeConfig& config, std::span<const GenerationRecord> round_records = {});

/// Fills missing reference responses by generating with `model` (normally
/// the pretrained one). Item i uses a stream seeded from (seed, i); empty
/// generations are retried with the next derived seed up to 16 times.
std::vector<GenValidationItem> prepare_gen_references(ModelBackend& backend, const ModelRef& model,
                                                      std::vector<GenValidationItem> items,
                                                      const SamplingConfig& sampling, std::uint64_t seed);

}  // namespace soft

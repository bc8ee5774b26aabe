#pragma once

// Core vocabulary: prompts, the ICL demonstration pool, the principle set,
// rendered few-shot inputs, and the generation records that flow from
// inference into fine-tuning and probing.

#include "soft/io.hpp"
#include "soft/rng.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace soft {

struct Prompt {
    std::string id;
    std::string text;
    std::string origin;
};

/// Ordered prompt corpus with unique ids. Order is meaningful: it is the
/// tie-break order for curriculum sorting.
class PromptDataset {
public:
    PromptDataset() = default;
    /// Throws std::invalid_argument on empty ids/texts or duplicate ids.
    explicit PromptDataset(std::vector<Prompt> prompts);

    std::size_t size() const noexcept { return prompts_.size(); }
    bool empty() const noexcept { return prompts_.empty(); }
    const Prompt& operator[](std::size_t i) const { return prompts_[i]; }
    std::span<const Prompt> prompts() const noexcept { return prompts_; }
    auto begin() const noexcept { return prompts_.begin(); }
    auto end() const noexcept { return prompts_.end(); }

    const Prompt* find(std::string_view id) const;
    std::optional<std::size_t> index_of(std::string_view id) const;

private:
    std::vector<Prompt> prompts_;
    std::unordered_map<std::string, std::size_t> index_;
};

PromptDataset parse_prompts(std::string_view jsonl, std::string_view source_name = "<prompts>");
PromptDataset load_prompts(const std::filesystem::path& path);
std::string serialize_prompts(const PromptDataset& dataset);

/// Case-insensitive refusal classifier. A plain pattern matches as a prefix
/// of the (left-trimmed) response; a pattern written "re:<expr>" is an
/// ECMAScript regex searched anywhere in the response.
class RefusalMatcher {
public:
    RefusalMatcher() = default;
    explicit RefusalMatcher(std::vector<std::string> patterns);

    /// The literal prefixes seen in over-fitted refusal outputs, plus the
    /// openers used by the shipped negative demonstrations.
    static RefusalMatcher defaults();
    /// Accepts {"patterns": [...]} or a bare array.
    static RefusalMatcher from_json(const json& doc);

    bool matches(std::string_view text) const;
    const std::vector<std::string>& patterns() const noexcept { return patterns_; }

private:
    std::vector<std::string> patterns_;
    std::vector<std::string> lowered_prefixes_;
    std::vector<std::regex> regexes_;
};

enum class Polarity { positive, negative };

struct IclExample {
    std::string user_text;
    std::string internal_thoughts;
    std::string assistant_text;
    Polarity polarity = Polarity::positive;
    bool refusal = false;
    /// Position in the pool this example was loaded from.
    std::size_t pool_index = 0;
};

struct IclPool {
    std::vector<IclExample> examples;
    std::size_t expected_size = 48;
    std::size_t expected_refusal_count = 5;

    std::size_t size() const noexcept { return examples.size(); }
    std::size_t refusal_count() const;
};

struct PoolLoadOptions {
    bool strict = true;
    std::size_t expected_size = 48;
    std::size_t expected_refusal_count = 5;
    RefusalMatcher matcher = RefusalMatcher::defaults();
};

struct PoolLoadResult {
    IclPool pool;
    std::vector<std::string> warnings;
};

/// Parses one JSON object per line with fields user, internal_thoughts,
/// assistant, polarity, refusal. Malformed entries are always errors; size,
/// refusal-count and refusal-flag mismatches are errors in strict mode and
/// warnings otherwise.
PoolLoadResult load_pool(std::string_view jsonl, const PoolLoadOptions& options = {});
PoolLoadResult load_pool_file(const std::filesystem::path& path, const PoolLoadOptions& options = {});
std::string serialize_pool(const IclPool& pool);

/// k distinct examples drawn without replacement, in draw order.
std::vector<IclExample> sample_icl(const IclPool& pool, std::size_t k, Rng& rng);

struct Rule {
    int index = 0;
    std::string title;
    std::string body;
};

/// The general-rules block and fixed template text of the few-shot input.
struct PrincipleSet {
    std::string title = "# SOFT";
    std::string rules_header = "## General Rules";
    std::string preamble;
    std::vector<Rule> rules;
    std::string examples_header = "## Examples";
    std::string examples_intro;
    std::string user_label = "User";
    std::string thoughts_label = "Assistant (internal thoughts)";
    std::string assistant_label = "Assistant";
    std::string separator_user;
    std::string separator_reply_label;
    std::string separator_reply;
    /// Final user turn; "{question}" is replaced by the prompt text.
    std::string question_slot = "User: {question}";

    /// Throws ConfigError unless there are exactly 16 rules indexed 1..16
    /// with non-empty titles and bodies.
    void validate() const;

    static PrincipleSet from_json(const json& doc);
    static PrincipleSet load(const std::filesystem::path& path);
    json to_json() const;
};

struct AssembledPrompt {
    std::string text;
    std::vector<std::size_t> example_ids;
    std::string prompt_id;
};

/// Renders principles, demonstrations and the question into one input.
/// Each demonstration is followed by the "clear context" separator block.
AssembledPrompt assemble_prompt(const PrincipleSet& principles, std::span<const IclExample> examples,
                                const Prompt& prompt);

enum class FinishReason { eos, length_limit };

std::string_view to_string(FinishReason finish);
FinishReason finish_from_string(std::string_view text);

struct TokenProb {
    std::string token;
    double probability = 0.0;

    bool operator==(const TokenProb&) const = default;
};

/// One sampled response. When finish == eos the final entry of `tokens` is
/// the end-of-sequence token itself.
struct GenerationRecord {
    std::string prompt_id;
    std::string response_text;
    std::vector<TokenProb> tokens;
    std::optional<std::vector<double>> eos_probability_trace;
    FinishReason finish = FinishReason::eos;

    /// Tokens emitted before EOS or truncation.
    std::size_t output_length() const noexcept;
    std::vector<double> token_probabilities() const;

    /// Throws ProtocolError when an invariant does not hold.
    void validate() const;

    json to_json() const;
    static GenerationRecord from_json(const json& doc);

    bool operator==(const GenerationRecord&) const = default;
};

/// The fine-tuning unit: the bare question, never the assembled few-shot text.
struct TrainingPair {
    std::string prompt_id;
    std::string prompt_text;
    std::string response_text;

    json to_json() const;
    static TrainingPair from_json(const json& doc);

    bool operator==(const TrainingPair&) const = default;
};

TrainingPair make_training_pair(const Prompt& prompt, const GenerationRecord& record);

/// Fraction of records whose response matches at least one refusal pattern.
double refusal_rate(std::span<const GenerationRecord> records, const RefusalMatcher& matcher);

}  // namespace soft

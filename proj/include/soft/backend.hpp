#pragma once

#include "soft/domain.hpp"
#include "soft/rng.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace soft {

/// Opaque handle to one model snapshot. Backends own the weights.
using ModelRef = std::string;

struct SamplingConfig {
    double temperature = 0.7;
    double top_p = 0.95;
    std::size_t max_new_tokens = 512;
    std::uint64_t seed = 0;

    void validate() const;
    json to_json() const;
    static SamplingConfig from_json(const json& doc);
};

/// Fine-tune hyperparameters forwarded to the backend uninterpreted.
using FinetuneConfig = json;

/// QLoRA settings used for the reference runs: r=64, alpha=16, 512-token
/// sequences, peak learning rate 1e-4.
FinetuneConfig default_finetune_config();

/// Next-token probabilities at one context. A truncated distribution (top-k
/// mode) lists only some tokens and carries the rest as `remainder`.
struct NextTokenDistribution {
    std::vector<std::string> tokens;
    std::vector<double> probs;
    std::optional<std::size_t> eos_index;
    double remainder = 0.0;
    bool truncated = false;

    std::optional<double> probability_of(std::string_view token) const;
    /// Throws CapabilityError when the EOS token is not among `tokens`.
    double eos_probability() const;
    /// Throws ProtocolError unless probabilities lie in [0,1], sizes agree and
    /// the listed mass plus remainder is 1 within `tolerance`.
    void validate(double tolerance = 1e-6) const;
};

/// Per-call context for fine-tuning. Remote backends use the key to make
/// job submission idempotent and report the job id as soon as it is known.
struct FinetuneRequest {
    std::string idempotency_key;
    std::optional<std::string> resume_job_id;
    std::function<void(const std::string& job_id)> on_job_submitted;
};

/// What the pipeline needs from a model host.
///
/// generate() reports, for every emitted token, the post-temperature and
/// pre-nucleus-truncation probability the model assigned to it. finetune()
/// must leave the source snapshot queryable and unchanged.
class ModelBackend {
public:
    virtual ~ModelBackend() = default;

    virtual std::string name() const = 0;

    virtual GenerationRecord generate(const ModelRef& model, const std::string& prompt_text,
                                      const SamplingConfig& sampling, Rng& rng) = 0;

    virtual NextTokenDistribution next_token_distribution(const ModelRef& model, const std::string& context) = 0;

    virtual ModelRef finetune(const ModelRef& model, std::span<const TrainingPair> pairs,
                              const FinetuneConfig& config, const FinetuneRequest& request) = 0;

    /// EOS probability before each of `tokens` when they follow `prompt`.
    /// The default issues one next_token_distribution query per position,
    /// joining tokens with single spaces.
    virtual std::vector<double> eos_trace(const ModelRef& model, const std::string& prompt,
                                          std::span<const std::string> tokens);
};

}  // namespace soft

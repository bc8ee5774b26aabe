#include "soft/backend.hpp"

#include "soft/error.hpp"

#include <cmath>
#include <stdexcept>

namespace soft {

void SamplingConfig::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("sampling.temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampling.top_p must be in (0,1]");
    if (max_new_tokens < 1) throw ConfigError("sampling.max_new_tokens must be >= 1");
}

json SamplingConfig::to_json() const {
    return {{"temperature", temperature}, {"top_p", top_p}, {"max_new_tokens", max_new_tokens}, {"seed", seed}};
}

SamplingConfig SamplingConfig::from_json(const json& doc) {
    SamplingConfig c;
    c.temperature = doc.value("temperature", c.temperature);
    c.top_p = doc.value("top_p", c.top_p);
    c.max_new_tokens = doc.value("max_new_tokens", c.max_new_tokens);
    c.seed = doc.value("seed", c.seed);
    c.validate();
    return c;
}

FinetuneConfig default_finetune_config() {
    return {{"r", 64}, {"alpha", 16}, {"max_seq_len", 512}, {"max_lr", 1e-4}};
}

std::optional<double> NextTokenDistribution::probability_of(std::string_view token) const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == token) return probs[i];
    }
    return std::nullopt;
}

double NextTokenDistribution::eos_probability() const {
    if (!eos_index || *eos_index >= probs.size()) {
        throw CapabilityError("next-token distribution does not include the EOS token");
    }
    return probs[*eos_index];
}

void NextTokenDistribution::validate(double tolerance) const {
    if (tokens.size() != probs.size()) throw ProtocolError("distribution token/probability count mismatch");
    if (eos_index && *eos_index >= probs.size()) throw ProtocolError("distribution eos_index out of range");
    double total = remainder;
    if (!(remainder >= 0.0 && remainder <= 1.0)) throw ProtocolError("distribution remainder outside [0,1]");
    for (double p : probs) {
        if (!(p >= 0.0 && p <= 1.0)) throw ProtocolError("distribution probability outside [0,1]");
        total += p;
    }
    if (std::abs(total - 1.0) > tolerance) {
        throw ProtocolError("distribution mass " + std::to_string(total) + " is not 1");
    }
}

std::vector<double> ModelBackend::eos_trace(const ModelRef& model, const std::string& prompt,
                                            std::span<const std::string> tokens) {
    std::vector<double> trace;
    trace.reserve(tokens.size());
    std::string context = prompt;
    for (const auto& tok : tokens) {
        trace.push_back(next_token_distribution(model, context).eos_probability());
        context += ' ';
        context += tok;
    }
    return trace;
}

}  // namespace soft

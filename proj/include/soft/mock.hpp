#pragma once

#include "soft/backend.hpp"

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace soft {

enum class RequestKind { generate, next_token, finetune };

std::string_view to_string(RequestKind kind);
RequestKind request_kind_from_string(std::string_view text);

/// One canned reply. An entry answers requests for (model, kind) whose
/// prompt/context contains `match` (when set). Non-repeating entries are
/// consumed on use; repeating entries answer indefinitely.
struct MockEntry {
    ModelRef model;
    RequestKind kind = RequestKind::generate;
    std::optional<std::string> match;
    bool repeat = false;
    /// generate: a GenerationRecord document (prompt_id optional).
    /// next_token: {tokens, probs, eos_index, remainder?, truncated?}.
    /// finetune: {model}.
    json response;

    static MockEntry from_json(const json& doc);
    json to_json() const;
};

/// Scripted backend for replay tests. Entries for the same (model, kind) are
/// tried in script order; a request nothing answers is a BackendError that
/// names the request.
class MockBackend : public ModelBackend {
public:
    explicit MockBackend(std::vector<MockEntry> script);
    MockBackend(MockBackend&& other) noexcept;

    static MockBackend from_jsonl(std::string_view text);
    static MockBackend load(const std::filesystem::path& path);

    std::string name() const override { return "mock"; }
    GenerationRecord generate(const ModelRef& model, const std::string& prompt_text, const SamplingConfig& sampling,
                              Rng& rng) override;
    NextTokenDistribution next_token_distribution(const ModelRef& model, const std::string& context) override;
    ModelRef finetune(const ModelRef& model, std::span<const TrainingPair> pairs, const FinetuneConfig& config,
                      const FinetuneRequest& request) override;

    std::size_t call_count(RequestKind kind) const;
    /// Pair counts seen by each finetune call, in call order.
    std::vector<std::size_t> finetune_sizes() const;

private:
    json take(const ModelRef& model, RequestKind kind, const std::string& text);

    mutable std::mutex mutex_;
    std::vector<MockEntry> script_;
    std::vector<bool> consumed_;
    std::map<RequestKind, std::size_t> calls_;
    std::vector<std::size_t> finetune_sizes_;
};

NextTokenDistribution distribution_from_json(const json& doc);
json distribution_to_json(const NextTokenDistribution& dist);

}  // namespace soft

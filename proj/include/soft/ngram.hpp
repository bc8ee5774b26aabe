#pragma once

// Additively smoothed word-level n-gram model: a desk-scale stand-in for a
// trainable LLM. Snapshots are immutable; fine-tuning returns a new snapshot
// that shares unchanged count rows with its parent.

#include "soft/backend.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace soft {

inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<s>";

/// Whitespace tokenization.
std::vector<std::string> tokenize(std::string_view text);

class NGramModel {
public:
    using TokenId = std::uint32_t;
    static constexpr TokenId kBos = UINT32_MAX;

    struct Row {
        std::map<TokenId, double> counts;
        double total = 0.0;
    };
    using Context = std::vector<TokenId>;

    /// Empty model over `vocab` (EOS and UNK are added first if absent; the
    /// BOS marker is never a vocabulary entry).
    NGramModel(std::vector<std::string> vocab, std::size_t order = 2, double alpha = 0.1);

    /// Vocabulary = every token of `corpus_lines` and `extra_vocab_texts`;
    /// counts = one EOS-terminated stream per corpus line.
    static NGramModel train(std::span<const std::string> corpus_lines,
                            std::span<const std::string> extra_vocab_texts = {}, std::size_t order = 2,
                            double alpha = 0.1);

    std::size_t order() const noexcept { return order_; }
    double alpha() const noexcept { return alpha_; }
    std::size_t vocab_size() const noexcept { return vocab_.size(); }
    const std::vector<std::string>& vocab() const noexcept { return vocab_; }
    TokenId eos_id() const noexcept { return eos_id_; }
    TokenId unk_id() const noexcept { return unk_id_; }

    /// UNK for out-of-vocabulary tokens.
    TokenId id_of(std::string_view token) const;
    std::vector<TokenId> encode(std::string_view text) const;

    /// The last order-1 ids of `history`, left-padded with BOS.
    Context context_of(std::span<const TokenId> history) const;

    /// p(w | ctx) = (count(ctx,w) + alpha) / (count(ctx,.) + alpha * |V|), for all w.
    std::vector<double> conditional(const Context& ctx) const;
    double probability(const Context& ctx, TokenId token) const;

    /// Counts += weight * n-gram counts of the stream [BOS.. , tokens...].
    void accumulate(std::span<const TokenId> stream, double weight);

    /// New snapshot: this model plus weight x counts of every pair's
    /// "prompt + response + EOS" stream. `this` is untouched.
    NGramModel finetuned(std::span<const TrainingPair> pairs, double weight) const;

    std::size_t context_count() const noexcept { return rows_.size(); }
    const std::map<Context, std::shared_ptr<const Row>>& rows() const noexcept { return rows_; }

    json to_json() const;
    static NGramModel from_json(const json& doc);

private:
    std::size_t order_;
    double alpha_;
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> ids_;
    TokenId eos_id_ = 0;
    TokenId unk_id_ = 0;
    std::map<Context, std::shared_ptr<const Row>> rows_;
};

/// Autoregressive sampling from `context_text`: temperature on log-probs,
/// nucleus truncation at top_p, stop at EOS or max_new_tokens.
GenerationRecord ngram_generate(const NGramModel& model, const std::string& context_text,
                                const SamplingConfig& sampling, Rng& rng);

/// Reads the "weight" key (default 1.0, must be > 0) from `config`.
NGramModel ngram_finetune(const NGramModel& model, std::span<const TrainingPair> pairs,
                          const FinetuneConfig& config);

/// Temperature-adjusted distribution, computed in log space so tiny
/// temperatures approach argmax without overflow.
std::vector<double> apply_temperature(std::span<const double> probs, double temperature);

/// In-process backend serving a lineage of NGramModel snapshots. With a
/// store directory, snapshots are written as <ref>.json and lazily reloaded.
class NGramBackend : public ModelBackend {
public:
    NGramBackend() = default;
    explicit NGramBackend(std::filesystem::path store_dir);

    /// Registers a snapshot under a content-derived ref.
    ModelRef add_model(NGramModel model);
    std::shared_ptr<const NGramModel> model(const ModelRef& ref) const;

    std::string name() const override { return "ngram"; }
    GenerationRecord generate(const ModelRef& model, const std::string& prompt_text, const SamplingConfig& sampling,
                              Rng& rng) override;
    NextTokenDistribution next_token_distribution(const ModelRef& model, const std::string& context) override;
    ModelRef finetune(const ModelRef& model, std::span<const TrainingPair> pairs, const FinetuneConfig& config,
                      const FinetuneRequest& request) override;
    std::vector<double> eos_trace(const ModelRef& model, const std::string& prompt,
                                  std::span<const std::string> tokens) override;

private:
    ModelRef insert(ModelRef ref, NGramModel model);

    std::optional<std::filesystem::path> store_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<ModelRef, std::shared_ptr<const NGramModel>> models_;
};

}  // namespace soft

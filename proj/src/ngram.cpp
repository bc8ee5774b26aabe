#include "soft/ngram.hpp"

#include "soft/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace soft {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        const auto start = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        if (i > start) out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

NGramModel::NGramModel(std::vector<std::string> vocab, std::size_t order, double alpha)
    : order_(order), alpha_(alpha) {
    if (order_ < 1) throw std::invalid_argument("n-gram order must be >= 1");
    if (!(alpha_ > 0.0)) throw std::invalid_argument("n-gram alpha must be > 0");
    auto add = [this](const std::string& tok) {
        if (tok == kBosToken || ids_.count(tok)) return;
        ids_.emplace(tok, static_cast<TokenId>(vocab_.size()));
        vocab_.push_back(tok);
    };
    add(std::string(kEosToken));
    add(std::string(kUnkToken));
    for (const auto& tok : vocab) add(tok);
    eos_id_ = ids_.at(std::string(kEosToken));
    unk_id_ = ids_.at(std::string(kUnkToken));
}

NGramModel NGramModel::train(std::span<const std::string> corpus_lines, std::span<const std::string> extra_vocab_texts,
                             std::size_t order, double alpha) {
    std::vector<std::string> vocab;
    for (const auto& line : corpus_lines) {
        for (auto& tok : tokenize(line)) vocab.push_back(std::move(tok));
    }
    for (const auto& text : extra_vocab_texts) {
        for (auto& tok : tokenize(text)) vocab.push_back(std::move(tok));
    }
    NGramModel model(std::move(vocab), order, alpha);
    for (const auto& line : corpus_lines) {
        auto stream = model.encode(line);
        stream.push_back(model.eos_id_);
        model.accumulate(stream, 1.0);
    }
    return model;
}

NGramModel::TokenId NGramModel::id_of(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? unk_id_ : it->second;
}

std::vector<NGramModel::TokenId> NGramModel::encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& tok : tokenize(text)) out.push_back(id_of(tok));
    return out;
}

NGramModel::Context NGramModel::context_of(std::span<const TokenId> history) const {
    const std::size_t width = order_ - 1;
    Context ctx(width, kBos);
    const std::size_t take = std::min(width, history.size());
    std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(),
              ctx.end() - static_cast<std::ptrdiff_t>(take));
    return ctx;
}

std::vector<double> NGramModel::conditional(const Context& ctx) const {
    const double v = static_cast<double>(vocab_.size());
    std::vector<double> probs(vocab_.size(), alpha_);
    double total = 0.0;
    if (auto it = rows_.find(ctx); it != rows_.end()) {
        for (const auto& [tok, count] : it->second->counts) probs[tok] += count;
        total = it->second->total;
    }
    const double denom = total + alpha_ * v;
    for (auto& p : probs) p /= denom;
    return probs;
}

double NGramModel::probability(const Context& ctx, TokenId token) const {
    double count = 0.0;
    double total = 0.0;
    if (auto it = rows_.find(ctx); it != rows_.end()) {
        total = it->second->total;
        if (auto c = it->second->counts.find(token); c != it->second->counts.end()) count = c->second;
    }
    return (count + alpha_) / (total + alpha_ * static_cast<double>(vocab_.size()));
}

namespace {

using Delta = std::map<NGramModel::Context, std::map<NGramModel::TokenId, double>>;

void collect(const NGramModel& model, std::span<const NGramModel::TokenId> stream, double weight, Delta& delta) {
    for (std::size_t i = 0; i < stream.size(); ++i) {
        auto ctx = model.context_of(stream.first(i));
        delta[ctx][stream[i]] += weight;
    }
}

}  // namespace

void NGramModel::accumulate(std::span<const TokenId> stream, double weight) {
    Delta delta;
    collect(*this, stream, weight, delta);
    for (auto& [ctx, incs] : delta) {
        auto& slot = rows_[ctx];
        auto row = slot ? std::make_shared<Row>(*slot) : std::make_shared<Row>();
        for (const auto& [tok, w] : incs) {
            row->counts[tok] += w;
            row->total += w;
        }
        slot = std::move(row);
    }
}

NGramModel NGramModel::finetuned(std::span<const TrainingPair> pairs, double weight) const {
    NGramModel next = *this;  // shares every row until touched
    Delta delta;
    for (const auto& pair : pairs) {
        auto stream = encode(pair.prompt_text);
        auto response = encode(pair.response_text);
        stream.insert(stream.end(), response.begin(), response.end());
        stream.push_back(eos_id_);
        collect(*this, stream, weight, delta);
    }
    for (auto& [ctx, incs] : delta) {
        auto& slot = next.rows_[ctx];
        auto row = slot ? std::make_shared<Row>(*slot) : std::make_shared<Row>();
        for (const auto& [tok, w] : incs) {
            row->counts[tok] += w;
            row->total += w;
        }
        slot = std::move(row);
    }
    return next;
}

json NGramModel::to_json() const {
    json rows = json::array();
    for (const auto& [ctx, row] : rows_) {
        json ctx_tokens = json::array();
        for (auto id : ctx) ctx_tokens.push_back(id == kBos ? std::string(kBosToken) : vocab_[id]);
        json next = json::object();
        for (const auto& [tok, count] : row->counts) next[vocab_[tok]] = count;
        rows.push_back({{"context", ctx_tokens}, {"next", next}});
    }
    return {{"order", order_}, {"alpha", alpha_}, {"vocab", vocab_}, {"counts", rows}};
}

NGramModel NGramModel::from_json(const json& doc) {
    try {
        NGramModel model(doc.at("vocab").get<std::vector<std::string>>(), doc.at("order").get<std::size_t>(),
                         doc.at("alpha").get<double>());
        const auto lookup = [&model](const std::string& tok) -> TokenId {
            if (tok == kBosToken) return kBos;
            auto it = model.ids_.find(tok);
            if (it == model.ids_.end()) throw ConfigError("n-gram snapshot references unknown token '" + tok + "'");
            return it->second;
        };
        for (const auto& row_doc : doc.at("counts")) {
            Context ctx;
            for (const auto& t : row_doc.at("context")) ctx.push_back(lookup(t.get<std::string>()));
            if (ctx.size() != model.order_ - 1) throw ConfigError("n-gram snapshot context has the wrong width");
            auto row = std::make_shared<Row>();
            for (const auto& [tok, count] : row_doc.at("next").items()) {
                const double c = count.get<double>();
                if (!(c >= 0.0)) throw ConfigError("n-gram snapshot has a negative count");
                row->counts[lookup(tok)] += c;
                row->total += c;
            }
            model.rows_[ctx] = std::move(row);
        }
        return model;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed n-gram snapshot: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("malformed n-gram snapshot: ") + e.what());
    }
}

std::vector<double> apply_temperature(std::span<const double> probs, double temperature) {
    std::vector<double> out(probs.begin(), probs.end());
    if (temperature == 1.0) return out;
    double max_logit = -INFINITY;
    for (auto& p : out) {
        p = std::log(p) / temperature;
        max_logit = std::max(max_logit, p);
    }
    double total = 0.0;
    for (auto& p : out) {
        p = std::exp(p - max_logit);
        total += p;
    }
    for (auto& p : out) p /= total;
    return out;
}

GenerationRecord ngram_generate(const NGramModel& model, const std::string& context_text,
                                const SamplingConfig& sampling, Rng& rng) {
    if (model.vocab_size() == 0) throw std::invalid_argument("ngram_generate: empty vocabulary");
    sampling.validate();

    auto history = model.encode(context_text);
    GenerationRecord record;
    record.finish = FinishReason::length_limit;
    std::vector<double> eos_trace;
    std::vector<std::string> words;
    std::vector<std::size_t> order(model.vocab_size());

    for (std::size_t step = 0; step < sampling.max_new_tokens; ++step) {
        const auto probs = apply_temperature(model.conditional(model.context_of(history)), sampling.temperature);

        // Nucleus: smallest prefix (by descending probability, ties by id)
        // whose mass reaches top_p.
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
        std::size_t kept = order.size();
        double cumulative = 0.0;
        for (std::size_t i = 0; i < order.size(); ++i) {
            cumulative += probs[order[i]];
            if (cumulative >= sampling.top_p) {
                kept = i + 1;
                break;
            }
        }
        double kept_mass = 0.0;
        for (std::size_t i = 0; i < kept; ++i) kept_mass += probs[order[i]];

        const double target = rng.uniform01() * kept_mass;
        std::size_t choice = order[0];
        double acc = 0.0;
        for (std::size_t i = 0; i < kept; ++i) {
            const double p = probs[order[i]];
            if (p <= 0.0) continue;
            choice = order[i];
            acc += p;
            if (target < acc) break;
        }

        const auto token = static_cast<NGramModel::TokenId>(choice);
        record.tokens.push_back({model.vocab()[token], probs[token]});
        eos_trace.push_back(probs[model.eos_id()]);
        if (token == model.eos_id()) {
            record.finish = FinishReason::eos;
            break;
        }
        words.push_back(model.vocab()[token]);
        history.push_back(token);
    }

    std::ostringstream text;
    for (std::size_t i = 0; i < words.size(); ++i) text << (i ? " " : "") << words[i];
    record.response_text = text.str();
    record.eos_probability_trace = std::move(eos_trace);
    return record;
}

NGramModel ngram_finetune(const NGramModel& model, std::span<const TrainingPair> pairs, const FinetuneConfig& config) {
    if (pairs.empty()) throw std::invalid_argument("ngram_finetune: no training pairs");
    double weight = 1.0;
    if (config.is_object()) weight = config.value("weight", 1.0);
    if (!(weight > 0.0)) throw ConfigError("finetune weight must be > 0");
    return model.finetuned(pairs, weight);
}

// ---------------------------------------------------------------------------
// NGramBackend

NGramBackend::NGramBackend(std::filesystem::path store_dir) : store_(std::move(store_dir)) {
    std::filesystem::create_directories(*store_);
}

ModelRef NGramBackend::insert(ModelRef ref, NGramModel model) {
    auto ptr = std::make_shared<const NGramModel>(std::move(model));
    if (store_) {
        const auto path = *store_ / (ref + ".json");
        if (!std::filesystem::exists(path)) write_text_file_atomic(path, ptr->to_json().dump() + "\n");
    }
    std::lock_guard lock(mutex_);
    models_.emplace(ref, std::move(ptr));
    return ref;
}

ModelRef NGramBackend::add_model(NGramModel model) {
    auto ref = "ngram-" + sha256_hex(model.to_json().dump()).substr(0, 16);
    return insert(std::move(ref), std::move(model));
}

std::shared_ptr<const NGramModel> NGramBackend::model(const ModelRef& ref) const {
    {
        std::lock_guard lock(mutex_);
        if (auto it = models_.find(ref); it != models_.end()) return it->second;
    }
    if (store_) {
        const auto path = *store_ / (ref + ".json");
        if (std::filesystem::exists(path)) {
            auto ptr = std::make_shared<const NGramModel>(NGramModel::from_json(read_json(path)));
            std::lock_guard lock(mutex_);
            return models_.emplace(ref, std::move(ptr)).first->second;
        }
    }
    throw BackendError("ngram backend: unknown model '" + ref + "'");
}

GenerationRecord NGramBackend::generate(const ModelRef& ref, const std::string& prompt_text,
                                        const SamplingConfig& sampling, Rng& rng) {
    return ngram_generate(*model(ref), prompt_text, sampling, rng);
}

NextTokenDistribution NGramBackend::next_token_distribution(const ModelRef& ref, const std::string& context) {
    const auto m = model(ref);
    NextTokenDistribution dist;
    dist.tokens = m->vocab();
    dist.probs = m->conditional(m->context_of(m->encode(context)));
    dist.eos_index = m->eos_id();
    return dist;
}

ModelRef NGramBackend::finetune(const ModelRef& ref, std::span<const TrainingPair> pairs, const FinetuneConfig& config,
                                const FinetuneRequest& /*request*/) {
    const auto parent = model(ref);
    auto child = ngram_finetune(*parent, pairs, config);
    json lineage = {{"parent", ref}, {"config", config}, {"pairs", json::array()}};
    for (const auto& p : pairs) lineage["pairs"].push_back({p.prompt_text, p.response_text});
    return insert("ngram-" + sha256_hex(lineage.dump()).substr(0, 16), std::move(child));
}

std::vector<double> NGramBackend::eos_trace(const ModelRef& ref, const std::string& prompt,
                                            std::span<const std::string> tokens) {
    const auto m = model(ref);
    auto history = m->encode(prompt);
    std::vector<double> trace;
    trace.reserve(tokens.size());
    for (const auto& tok : tokens) {
        trace.push_back(m->probability(m->context_of(history), m->eos_id()));
        history.push_back(m->id_of(tok));
    }
    return trace;
}

}  // namespace soft

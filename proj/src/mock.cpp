#include "soft/mock.hpp"

#include "soft/error.hpp"

namespace soft {

std::string_view to_string(RequestKind kind) {
    switch (kind) {
        case RequestKind::generate: return "generate";
        case RequestKind::next_token: return "next_token";
        case RequestKind::finetune: return "finetune";
    }
    return "?";
}

RequestKind request_kind_from_string(std::string_view text) {
    if (text == "generate") return RequestKind::generate;
    if (text == "next_token") return RequestKind::next_token;
    if (text == "finetune") return RequestKind::finetune;
    throw ConfigError("unknown mock request kind '" + std::string(text) + "'");
}

MockEntry MockEntry::from_json(const json& doc) {
    MockEntry e;
    try {
        e.model = doc.at("model").get<std::string>();
        e.kind = request_kind_from_string(doc.at("kind").get<std::string>());
        if (auto it = doc.find("match"); it != doc.end() && !it->is_null()) e.match = it->get<std::string>();
        e.repeat = doc.value("repeat", false);
        e.response = doc.at("response");
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed mock entry: ") + ex.what());
    }
    return e;
}

json MockEntry::to_json() const {
    json doc = {{"model", model}, {"kind", to_string(kind)}, {"repeat", repeat}, {"response", response}};
    if (match) doc["match"] = *match;
    return doc;
}

NextTokenDistribution distribution_from_json(const json& doc) {
    NextTokenDistribution d;
    try {
        d.tokens = doc.at("tokens").get<std::vector<std::string>>();
        d.probs = doc.at("probs").get<std::vector<double>>();
        if (auto it = doc.find("eos_index"); it != doc.end() && !it->is_null()) d.eos_index = it->get<std::size_t>();
        d.remainder = doc.value("remainder", 0.0);
        d.truncated = doc.value("truncated", d.remainder > 0.0);
    } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed distribution: ") + e.what());
    }
    return d;
}

json distribution_to_json(const NextTokenDistribution& d) {
    json doc = {{"tokens", d.tokens}, {"probs", d.probs}, {"eos_index", nullptr}, {"remainder", d.remainder},
                {"truncated", d.truncated}};
    if (d.eos_index) doc["eos_index"] = *d.eos_index;
    return doc;
}

MockBackend::MockBackend(std::vector<MockEntry> script)
    : script_(std::move(script)), consumed_(script_.size(), false) {}

MockBackend::MockBackend(MockBackend&& other) noexcept {
    std::lock_guard lock(other.mutex_);
    script_ = std::move(other.script_);
    consumed_ = std::move(other.consumed_);
    calls_ = std::move(other.calls_);
    finetune_sizes_ = std::move(other.finetune_sizes_);
}

MockBackend MockBackend::from_jsonl(std::string_view text) {
    std::vector<MockEntry> entries;
    for (const auto& row : parse_jsonl(text, "<mock script>")) entries.push_back(MockEntry::from_json(row));
    return MockBackend(std::move(entries));
}

MockBackend MockBackend::load(const std::filesystem::path& path) {
    std::vector<MockEntry> entries;
    for (const auto& row : read_jsonl(path)) entries.push_back(MockEntry::from_json(row));
    return MockBackend(std::move(entries));
}

json MockBackend::take(const ModelRef& model, RequestKind kind, const std::string& text) {
    std::lock_guard lock(mutex_);
    ++calls_[kind];
    for (std::size_t i = 0; i < script_.size(); ++i) {
        const auto& e = script_[i];
        if (consumed_[i] || e.model != model || e.kind != kind) continue;
        if (e.match && text.find(*e.match) == std::string::npos) continue;
        if (!e.repeat) consumed_[i] = true;
        return e.response;
    }
    std::string excerpt = text.size() > 60 ? "..." + text.substr(text.size() - 60) : text;
    throw BackendError("mock: no scripted " + std::string(to_string(kind)) + " response for model '" + model +
                       "' (request: \"" + excerpt + "\")");
}

GenerationRecord MockBackend::generate(const ModelRef& model, const std::string& prompt_text,
                                       const SamplingConfig& /*sampling*/, Rng& /*rng*/) {
    auto doc = take(model, RequestKind::generate, prompt_text);
    if (!doc.contains("prompt_id")) doc["prompt_id"] = "";
    auto record = GenerationRecord::from_json(doc);
    record.validate();
    return record;
}

NextTokenDistribution MockBackend::next_token_distribution(const ModelRef& model, const std::string& context) {
    auto dist = distribution_from_json(take(model, RequestKind::next_token, context));
    dist.validate(1e-6);
    return dist;
}

ModelRef MockBackend::finetune(const ModelRef& model, std::span<const TrainingPair> pairs,
                               const FinetuneConfig& /*config*/, const FinetuneRequest& /*request*/) {
    auto doc = take(model, RequestKind::finetune, "");
    {
        std::lock_guard lock(mutex_);
        finetune_sizes_.push_back(pairs.size());
    }
    return doc.at("model").get<std::string>();
}

std::size_t MockBackend::call_count(RequestKind kind) const {
    std::lock_guard lock(mutex_);
    auto it = calls_.find(kind);
    return it == calls_.end() ? 0 : it->second;
}

std::vector<std::size_t> MockBackend::finetune_sizes() const {
    std::lock_guard lock(mutex_);
    return finetune_sizes_;
}

}  // namespace soft

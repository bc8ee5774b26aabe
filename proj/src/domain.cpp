#include "soft/domain.hpp"

#include "soft/error.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <stdexcept>

namespace soft {

namespace {

std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string_view ltrim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    return first == std::string_view::npos ? std::string_view{} : s.substr(first);
}

std::string require_string(const json& doc, const char* key, const std::string& where) {
    auto it = doc.find(key);
    if (it == doc.end() || !it->is_string()) {
        throw ConfigError(where + ": missing string field '" + key + "'");
    }
    return it->get<std::string>();
}

}  // namespace

// ---------------------------------------------------------------------------
// PromptDataset

PromptDataset::PromptDataset(std::vector<Prompt> prompts) : prompts_(std::move(prompts)) {
    index_.reserve(prompts_.size());
    for (std::size_t i = 0; i < prompts_.size(); ++i) {
        const auto& p = prompts_[i];
        if (p.id.empty()) throw std::invalid_argument("prompt #" + std::to_string(i) + " has an empty id");
        if (p.text.empty()) throw std::invalid_argument("prompt '" + p.id + "' has empty text");
        if (!index_.emplace(p.id, i).second) throw std::invalid_argument("duplicate prompt id '" + p.id + "'");
    }
}

const Prompt* PromptDataset::find(std::string_view id) const {
    auto idx = index_of(id);
    return idx ? &prompts_[*idx] : nullptr;
}

std::optional<std::size_t> PromptDataset::index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

PromptDataset parse_prompts(std::string_view jsonl, std::string_view source_name) {
    std::vector<Prompt> prompts;
    const auto rows = parse_jsonl(jsonl, source_name);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto where = std::string(source_name) + " entry " + std::to_string(i);
        if (!rows[i].is_object()) throw ConfigError(where + ": not an object");
        Prompt p;
        p.id = require_string(rows[i], "id", where);
        p.text = require_string(rows[i], "text", where);
        p.origin = rows[i].value("origin", std::string{});
        prompts.push_back(std::move(p));
    }
    try {
        return PromptDataset(std::move(prompts));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string(source_name) + ": " + e.what());
    }
}

PromptDataset load_prompts(const std::filesystem::path& path) {
    return parse_prompts(read_text_file(path), path.string());
}

std::string serialize_prompts(const PromptDataset& dataset) {
    std::vector<json> rows;
    rows.reserve(dataset.size());
    for (const auto& p : dataset) rows.push_back({{"id", p.id}, {"text", p.text}, {"origin", p.origin}});
    return to_jsonl(rows);
}

// ---------------------------------------------------------------------------
// RefusalMatcher

RefusalMatcher::RefusalMatcher(std::vector<std::string> patterns) : patterns_(std::move(patterns)) {
    for (const auto& p : patterns_) {
        if (p.rfind("re:", 0) == 0) {
            try {
                regexes_.emplace_back(p.substr(3), std::regex::ECMAScript | std::regex::icase);
            } catch (const std::regex_error& e) {
                throw ConfigError("bad refusal regex '" + p + "': " + e.what());
            }
        } else if (!p.empty()) {
            lowered_prefixes_.push_back(lowercase(p));
        }
    }
}

RefusalMatcher RefusalMatcher::defaults() {
    return RefusalMatcher({
        "As an AI language model, I lack specific information",
        "As an AI language model, I am unable",
        "As an AI language model",
        "I am an AI language model",
        "I'm sorry, but",
        "As of my last knowledge update",
    });
}

RefusalMatcher RefusalMatcher::from_json(const json& doc) {
    const json& list = doc.is_object() ? doc.at("patterns") : doc;
    if (!list.is_array()) throw ConfigError("refusal patterns must be an array of strings");
    std::vector<std::string> patterns;
    for (const auto& p : list) {
        if (!p.is_string()) throw ConfigError("refusal patterns must be an array of strings");
        patterns.push_back(p.get<std::string>());
    }
    return RefusalMatcher(std::move(patterns));
}

bool RefusalMatcher::matches(std::string_view text) const {
    const auto lowered = lowercase(ltrim(text));
    for (const auto& prefix : lowered_prefixes_) {
        if (lowered.compare(0, prefix.size(), prefix) == 0) return true;
    }
    const std::string full(text);
    return std::any_of(regexes_.begin(), regexes_.end(),
                       [&](const std::regex& re) { return std::regex_search(full, re); });
}

// ---------------------------------------------------------------------------
// ICL pool

std::size_t IclPool::refusal_count() const {
    return static_cast<std::size_t>(
        std::count_if(examples.begin(), examples.end(), [](const IclExample& e) { return e.refusal; }));
}

PoolLoadResult load_pool(std::string_view jsonl, const PoolLoadOptions& options) {
    PoolLoadResult result;
    result.pool.expected_size = options.expected_size;
    result.pool.expected_refusal_count = options.expected_refusal_count;

    std::vector<json> rows;
    try {
        rows = parse_jsonl(jsonl, "<pool>");
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("malformed pool: ") + e.what());
    }

    auto problem = [&](const std::string& msg) {
        if (options.strict) throw ConfigError(msg);
        result.warnings.push_back(msg);
    };

    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const auto where = "malformed pool entry " + std::to_string(i);
        if (!row.is_object()) throw ConfigError(where + ": not an object");
        IclExample ex;
        ex.user_text = require_string(row, "user", where);
        ex.internal_thoughts = require_string(row, "internal_thoughts", where);
        ex.assistant_text = require_string(row, "assistant", where);
        if (ex.user_text.empty() || ex.internal_thoughts.empty() || ex.assistant_text.empty()) {
            throw ConfigError(where + ": empty segment");
        }
        const auto polarity = row.value("polarity", std::string("positive"));
        if (polarity == "positive") {
            ex.polarity = Polarity::positive;
        } else if (polarity == "negative") {
            ex.polarity = Polarity::negative;
        } else {
            throw ConfigError(where + ": unknown polarity '" + polarity + "'");
        }
        auto refusal = row.find("refusal");
        if (refusal != row.end() && !refusal->is_boolean()) throw ConfigError(where + ": refusal must be boolean");
        ex.refusal = refusal != row.end() && refusal->get<bool>();
        ex.pool_index = i;
        if (ex.refusal && !options.matcher.matches(ex.assistant_text)) {
            problem("pool entry " + std::to_string(i) + " is flagged refusal but matches no refusal pattern");
        }
        result.pool.examples.push_back(std::move(ex));
    }

    if (result.pool.size() != options.expected_size) {
        problem("size mismatch " + std::to_string(result.pool.size()) + " != " + std::to_string(options.expected_size));
    }
    if (result.pool.refusal_count() != options.expected_refusal_count) {
        problem("refusal count mismatch " + std::to_string(result.pool.refusal_count()) +
                " != " + std::to_string(options.expected_refusal_count));
    }
    return result;
}

PoolLoadResult load_pool_file(const std::filesystem::path& path, const PoolLoadOptions& options) {
    try {
        return load_pool(read_text_file(path), options);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string serialize_pool(const IclPool& pool) {
    std::vector<json> rows;
    rows.reserve(pool.size());
    for (const auto& ex : pool.examples) {
        rows.push_back({{"user", ex.user_text},
                        {"internal_thoughts", ex.internal_thoughts},
                        {"assistant", ex.assistant_text},
                        {"polarity", ex.polarity == Polarity::positive ? "positive" : "negative"},
                        {"refusal", ex.refusal}});
    }
    return to_jsonl(rows);
}

std::vector<IclExample> sample_icl(const IclPool& pool, std::size_t k, Rng& rng) {
    const auto n = pool.size();
    if (k == 0) throw std::invalid_argument("sample_icl: k must be >= 1");
    if (k > n) {
        throw std::out_of_range("sample_icl: k=" + std::to_string(k) + " exceeds pool size " + std::to_string(n));
    }
    // Partial Fisher-Yates: the first k slots are the draw, in draw order.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<IclExample> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
        std::swap(idx[i], idx[j]);
        out.push_back(pool.examples[idx[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Principles and template rendering

void PrincipleSet::validate() const {
    if (rules.size() != 16) throw ConfigError("principle set must have 16 rules, got " + std::to_string(rules.size()));
    for (std::size_t i = 0; i < rules.size(); ++i) {
        const auto& r = rules[i];
        if (r.index != static_cast<int>(i) + 1) {
            throw ConfigError("rule at position " + std::to_string(i + 1) + " has index " + std::to_string(r.index));
        }
        if (r.title.empty() || r.body.empty()) {
            throw ConfigError("rule " + std::to_string(r.index) + " has an empty title or body");
        }
    }
    if (question_slot.find("{question}") == std::string::npos) {
        throw ConfigError("question_slot lacks the {question} marker");
    }
}

PrincipleSet PrincipleSet::from_json(const json& doc) {
    PrincipleSet p;
    try {
        p.title = doc.value("title", p.title);
        p.rules_header = doc.value("rules_header", p.rules_header);
        p.preamble = doc.at("preamble").get<std::string>();
        for (const auto& r : doc.at("rules")) {
            p.rules.push_back({r.at("index").get<int>(), r.at("title").get<std::string>(), r.at("body").get<std::string>()});
        }
        p.examples_header = doc.value("examples_header", p.examples_header);
        p.examples_intro = doc.value("examples_intro", std::string{});
        if (auto labels = doc.find("labels"); labels != doc.end()) {
            p.user_label = labels->value("user", p.user_label);
            p.thoughts_label = labels->value("thoughts", p.thoughts_label);
            p.assistant_label = labels->value("assistant", p.assistant_label);
        }
        const auto& sep = doc.at("separator");
        p.separator_user = sep.at("user").get<std::string>();
        p.separator_reply_label = sep.at("reply_label").get<std::string>();
        p.separator_reply = sep.at("reply").get<std::string>();
        p.question_slot = doc.value("question_slot", p.question_slot);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed principle set: ") + e.what());
    }
    p.validate();
    return p;
}

PrincipleSet PrincipleSet::load(const std::filesystem::path& path) {
    try {
        return from_json(read_json(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

json PrincipleSet::to_json() const {
    json rule_rows = json::array();
    for (const auto& r : rules) rule_rows.push_back({{"index", r.index}, {"title", r.title}, {"body", r.body}});
    return {{"title", title},
            {"rules_header", rules_header},
            {"preamble", preamble},
            {"rules", rule_rows},
            {"examples_header", examples_header},
            {"examples_intro", examples_intro},
            {"labels", {{"user", user_label}, {"thoughts", thoughts_label}, {"assistant", assistant_label}}},
            {"separator", {{"user", separator_user}, {"reply_label", separator_reply_label}, {"reply", separator_reply}}},
            {"question_slot", question_slot}};
}

AssembledPrompt assemble_prompt(const PrincipleSet& principles, std::span<const IclExample> examples,
                                const Prompt& prompt) {
    if (examples.empty()) throw std::invalid_argument("assemble_prompt: at least one example is required");

    AssembledPrompt out;
    out.prompt_id = prompt.id;
    std::string& t = out.text;
    auto para = [&t](std::string_view s) {
        t.append(s);
        t.append("\n\n");
    };
    auto turn = [&para](std::string_view label, std::string_view body) {
        std::string line(label);
        line += ": ";
        line += body;
        para(line);
    };

    para(principles.title);
    para(principles.rules_header);
    para(principles.preamble);
    for (const auto& r : principles.rules) {
        para(std::to_string(r.index) + " (" + r.title + "). " + r.body);
    }
    para(principles.examples_header);
    if (!principles.examples_intro.empty()) para(principles.examples_intro);
    for (const auto& ex : examples) {
        turn(principles.user_label, ex.user_text);
        turn(principles.thoughts_label, ex.internal_thoughts);
        turn(principles.assistant_label, ex.assistant_text);
        turn(principles.user_label, principles.separator_user);
        turn(principles.separator_reply_label, principles.separator_reply);
        out.example_ids.push_back(ex.pool_index);
    }
    std::string slot = principles.question_slot;
    slot.replace(slot.find("{question}"), 10, prompt.text);
    t.append(slot);
    return out;
}

// ---------------------------------------------------------------------------
// Generation records

std::string_view to_string(FinishReason finish) {
    return finish == FinishReason::eos ? "eos" : "length_limit";
}

FinishReason finish_from_string(std::string_view text) {
    if (text == "eos") return FinishReason::eos;
    if (text == "length_limit") return FinishReason::length_limit;
    throw ProtocolError("unknown finish reason '" + std::string(text) + "'");
}

std::size_t GenerationRecord::output_length() const noexcept {
    if (finish == FinishReason::eos && !tokens.empty()) return tokens.size() - 1;
    return tokens.size();
}

std::vector<double> GenerationRecord::token_probabilities() const {
    std::vector<double> probs;
    probs.reserve(tokens.size());
    for (const auto& t : tokens) probs.push_back(t.probability);
    return probs;
}

void GenerationRecord::validate() const {
    if (!response_text.empty() && tokens.empty()) {
        throw ProtocolError("record for '" + prompt_id + "' has response text but no tokens");
    }
    for (const auto& t : tokens) {
        if (!(t.probability > 0.0 && t.probability <= 1.0)) {
            throw ProtocolError("record for '" + prompt_id + "' has token probability outside (0,1]");
        }
    }
    if (eos_probability_trace) {
        if (eos_probability_trace->size() != tokens.size()) {
            throw ProtocolError("record for '" + prompt_id + "' has an EOS trace of the wrong length");
        }
        for (double p : *eos_probability_trace) {
            if (!(p >= 0.0 && p <= 1.0)) {
                throw ProtocolError("record for '" + prompt_id + "' has EOS probability outside [0,1]");
            }
        }
    }
}

json GenerationRecord::to_json() const {
    json toks = json::array();
    for (const auto& t : tokens) toks.push_back({{"token", t.token}, {"probability", t.probability}});
    json doc = {{"schema_version", kSchemaVersion},
                {"prompt_id", prompt_id},
                {"response_text", response_text},
                {"tokens", toks},
                {"eos_probability_trace", nullptr},
                {"finish", to_string(finish)}};
    if (eos_probability_trace) doc["eos_probability_trace"] = *eos_probability_trace;
    return doc;
}

GenerationRecord GenerationRecord::from_json(const json& doc) {
    GenerationRecord r;
    r.prompt_id = doc.at("prompt_id").get<std::string>();
    r.response_text = doc.at("response_text").get<std::string>();
    for (const auto& t : doc.at("tokens")) {
        r.tokens.push_back({t.at("token").get<std::string>(), t.at("probability").get<double>()});
    }
    if (auto it = doc.find("eos_probability_trace"); it != doc.end() && !it->is_null()) {
        r.eos_probability_trace = it->get<std::vector<double>>();
    }
    r.finish = finish_from_string(doc.at("finish").get<std::string>());
    return r;
}

json TrainingPair::to_json() const {
    return {{"schema_version", kSchemaVersion},
            {"prompt_id", prompt_id},
            {"prompt", prompt_text},
            {"response", response_text}};
}

TrainingPair TrainingPair::from_json(const json& doc) {
    return {doc.at("prompt_id").get<std::string>(), doc.at("prompt").get<std::string>(),
            doc.at("response").get<std::string>()};
}

TrainingPair make_training_pair(const Prompt& prompt, const GenerationRecord& record) {
    return {prompt.id, prompt.text, record.response_text};
}

double refusal_rate(std::span<const GenerationRecord> records, const RefusalMatcher& matcher) {
    if (records.empty()) throw std::invalid_argument("refusal_rate: no records");
    const auto hits = std::count_if(records.begin(), records.end(),
                                    [&](const GenerationRecord& r) { return matcher.matches(r.response_text); });
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

}  // namespace soft

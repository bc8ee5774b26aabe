#include "soft/probes.hpp"

#include "soft/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace soft {

namespace {

constexpr std::array<char, 4> kLabels{'A', 'B', 'C', 'D'};

std::string expand_variant(const std::string& pattern, char label) {
    std::string out = pattern;
    const auto pos = out.find("{}");
    if (pos != std::string::npos) out.replace(pos, 2, std::string(1, label));
    return out;
}

}  // namespace

ChoiceValidationItem ChoiceValidationItem::from_json(const json& doc) {
    ChoiceValidationItem item;
    try {
        item.question = doc.at("question").get<std::string>();
        const auto options = doc.at("options").get<std::vector<std::string>>();
        if (options.size() != 4) throw ConfigError("choice item needs exactly 4 options, got " + std::to_string(options.size()));
        for (std::size_t i = 0; i < 4; ++i) {
            if (options[i].empty()) throw ConfigError("choice item option " + std::to_string(i) + " is empty");
            item.options[i] = options[i];
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed choice item: ") + e.what());
    }
    if (item.question.empty()) throw ConfigError("choice item has an empty question");
    return item;
}

json ChoiceValidationItem::to_json() const {
    return {{"question", question}, {"options", std::vector<std::string>(options.begin(), options.end())}};
}

GenValidationItem GenValidationItem::from_json(const json& doc) {
    GenValidationItem item;
    try {
        item.question = doc.at("question").get<std::string>();
        item.reference_response = doc.value("reference_response", std::string{});
        item.reference_tokens = doc.value("reference_tokens", std::vector<std::string>{});
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed generation item: ") + e.what());
    }
    if (item.question.empty()) throw ConfigError("generation item has an empty question");
    return item;
}

json GenValidationItem::to_json() const {
    return {{"question", question}, {"reference_response", reference_response}, {"reference_tokens", reference_tokens}};
}

std::vector<ChoiceValidationItem> load_choice_items(const std::filesystem::path& path) {
    std::vector<ChoiceValidationItem> items;
    for (const auto& row : read_jsonl(path)) {
        try {
            items.push_back(ChoiceValidationItem::from_json(row));
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }
    return items;
}

std::vector<GenValidationItem> load_gen_items(const std::filesystem::path& path) {
    std::vector<GenValidationItem> items;
    for (const auto& row : read_jsonl(path)) {
        try {
            items.push_back(GenValidationItem::from_json(row));
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }
    return items;
}

void write_gen_items(const std::filesystem::path& path, std::span<const GenValidationItem> items) {
    std::vector<json> rows;
    for (const auto& item : items) rows.push_back(item.to_json());
    write_jsonl(path, rows);
}

void ProbeConfig::validate() const {
    if (!(eos_gen_ratio > 1.0)) throw ConfigError("eos_gen_ratio must be > 1");
    for (auto k : tail_k) {
        if (k < 1) throw ConfigError("tail_K values must be >= 1");
    }
    if (!eos_choice_enabled && !eos_gen_enabled) throw ConfigError("at least one probe gate must be enabled");
    if (label_variants.empty()) throw ConfigError("label_variants must not be empty");
}

json ProbeConfig::to_json() const {
    json gates = json::array();
    if (eos_choice_enabled) gates.push_back("eos_choice");
    if (eos_gen_enabled) gates.push_back("eos_gen");
    return {{"eos_gen_ratio", eos_gen_ratio},
            {"tail_K", tail_k},
            {"refusal_patterns", refusal.patterns()},
            {"gates", gates},
            {"choice_aggregation", aggregation == ChoiceAggregation::majority ? "majority" : "any"},
            {"answer_suffix", answer_suffix},
            {"label_variants", label_variants},
            {"tail_contexts", tail_contexts}};
}

ProbeConfig ProbeConfig::from_json(const json& doc) {
    ProbeConfig c;
    try {
        c.eos_gen_ratio = doc.value("eos_gen_ratio", c.eos_gen_ratio);
        c.tail_k = doc.value("tail_K", c.tail_k);
        if (auto it = doc.find("refusal_patterns"); it != doc.end()) c.refusal = RefusalMatcher::from_json(*it);
        if (auto it = doc.find("gates"); it != doc.end()) {
            c.eos_choice_enabled = c.eos_gen_enabled = false;
            for (const auto& g : *it) {
                const auto name = g.get<std::string>();
                if (name == "eos_choice") {
                    c.eos_choice_enabled = true;
                } else if (name == "eos_gen") {
                    c.eos_gen_enabled = true;
                } else {
                    throw ConfigError("unknown gate '" + name + "'");
                }
            }
        }
        const auto agg = doc.value("choice_aggregation", std::string("majority"));
        if (agg == "majority") {
            c.aggregation = ChoiceAggregation::majority;
        } else if (agg == "any") {
            c.aggregation = ChoiceAggregation::any;
        } else {
            throw ConfigError("unknown choice_aggregation '" + agg + "'");
        }
        c.answer_suffix = doc.value("answer_suffix", c.answer_suffix);
        c.label_variants = doc.value("label_variants", c.label_variants);
        c.tail_contexts = doc.value("tail_contexts", c.tail_contexts);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed probe config: ") + e.what());
    }
    c.validate();
    return c;
}

double ChoiceProbeResult::mean_eos_prob() const {
    if (items.empty()) return 0.0;
    double total = 0.0;
    for (const auto& i : items) total += i.eos_prob;
    return total / static_cast<double>(items.size());
}

json ProbeReport::to_json() const {
    json doc;
    doc["schema_version"] = kSchemaVersion;
    if (eos_choice) {
        json items = json::array();
        for (const auto& i : eos_choice->items) {
            items.push_back({{"eos_prob", i.eos_prob}, {"min_option_prob", i.min_option_prob}, {"triggered", i.triggered}});
        }
        doc["eos_choice"] = {{"items", items},
                             {"triggered_count", eos_choice->triggered_count},
                             {"mean_eos_prob", eos_choice->mean_eos_prob()},
                             {"aggregate_triggered", eos_choice->aggregate_triggered}};
    } else {
        doc["eos_choice"] = nullptr;
    }
    if (eos_gen) {
        doc["eos_gen"] = {{"avg_eos_prob", eos_gen->avg_eos_prob},
                          {"previous", eos_gen->previous ? json(*eos_gen->previous) : json(nullptr)},
                          {"triggered", eos_gen->triggered}};
    } else {
        doc["eos_gen"] = nullptr;
    }
    json tails = json::object();
    for (const auto& [k, v] : tail_mass) tails[std::to_string(k)] = v;
    doc["tail_mass"] = tails;
    doc["avg_output_length"] = avg_output_length ? json(*avg_output_length) : json(nullptr);
    doc["refusal_rate"] = refusal_rate ? json(*refusal_rate) : json(nullptr);
    doc["verdict"] = verdict;
    doc["warnings"] = warnings;
    return doc;
}

ProbeReport ProbeReport::from_json(const json& doc) {
    ProbeReport r;
    if (const auto& c = doc.at("eos_choice"); !c.is_null()) {
        ChoiceProbeResult res;
        for (const auto& i : c.at("items")) {
            res.items.push_back({i.at("eos_prob").get<double>(), i.at("min_option_prob").get<double>(),
                                 i.at("triggered").get<bool>()});
        }
        res.triggered_count = c.at("triggered_count").get<std::size_t>();
        res.aggregate_triggered = c.at("aggregate_triggered").get<bool>();
        r.eos_choice = std::move(res);
    }
    if (const auto& g = doc.at("eos_gen"); !g.is_null()) {
        GenProbeResult res;
        res.avg_eos_prob = g.at("avg_eos_prob").get<double>();
        if (!g.at("previous").is_null()) res.previous = g.at("previous").get<double>();
        res.triggered = g.at("triggered").get<bool>();
        r.eos_gen = res;
    }
    for (const auto& [k, v] : doc.at("tail_mass").items()) r.tail_mass[std::stoul(k)] = v.get<double>();
    if (!doc.at("avg_output_length").is_null()) r.avg_output_length = doc.at("avg_output_length").get<double>();
    if (!doc.at("refusal_rate").is_null()) r.refusal_rate = doc.at("refusal_rate").get<double>();
    r.verdict = doc.at("verdict").get<bool>();
    r.warnings = doc.value("warnings", std::vector<std::string>{});
    return r;
}

bool choice_aggregate_triggered(std::size_t triggered, std::size_t total, ChoiceAggregation aggregation) noexcept {
    if (aggregation == ChoiceAggregation::any) return triggered > 0;
    return 2 * triggered > total;
}

std::string render_choice_context(const ChoiceValidationItem& item, std::string_view answer_suffix) {
    std::string out = item.question;
    for (std::size_t i = 0; i < 4; ++i) {
        out += '\n';
        out += kLabels[i];
        out += ". ";
        out += item.options[i];
    }
    out += '\n';
    out += answer_suffix;
    return out;
}

ChoiceItemResult score_choice_distribution(const NextTokenDistribution& dist, const ProbeConfig& config) {
    ChoiceItemResult result;
    result.eos_prob = dist.eos_probability();
    double min_option = 1.0;
    for (char label : kLabels) {
        double mass = 0.0;
        bool found = false;
        for (const auto& variant : config.label_variants) {
            if (auto p = dist.probability_of(expand_variant(variant, label))) {
                mass += *p;
                found = true;
            }
        }
        if (!found && dist.truncated) {
            throw CapabilityError(std::string("truncated distribution lacks option label '") + label + "'");
        }
        min_option = std::min(min_option, mass);
    }
    result.min_option_prob = min_option;
    result.triggered = choice_item_triggered(result.eos_prob, result.min_option_prob);
    return result;
}

ChoiceProbeResult eos_choice_probe(ModelBackend& backend, const ModelRef& model,
                                   std::span<const ChoiceValidationItem> items, const ProbeConfig& config) {
    if (items.empty()) throw std::invalid_argument("eos_choice_probe: no items");
    ChoiceProbeResult out;
    for (const auto& item : items) {
        const auto dist = backend.next_token_distribution(model, render_choice_context(item, config.answer_suffix));
        out.items.push_back(score_choice_distribution(dist, config));
        if (out.items.back().triggered) ++out.triggered_count;
    }
    out.aggregate_triggered = choice_aggregate_triggered(out.triggered_count, out.items.size(), config.aggregation);
    return out;
}

GenProbeResult eos_gen_probe(ModelBackend& backend, const ModelRef& model, std::span<const GenValidationItem> items,
                             std::optional<double> previous_avg, double ratio) {
    if (items.empty()) throw std::invalid_argument("eos_gen_probe: no items");
    if (!(ratio > 1.0)) throw std::invalid_argument("eos_gen_probe: ratio must be > 1");
    double total = 0.0;
    std::size_t positions = 0;
    for (const auto& item : items) {
        if (!item.has_reference()) {
            throw std::invalid_argument("eos_gen_probe: item without a reference response: " + item.question);
        }
        for (double p : backend.eos_trace(model, item.question, item.reference_tokens)) {
            total += p;
            ++positions;
        }
    }
    GenProbeResult out;
    out.avg_eos_prob = total / static_cast<double>(positions);
    out.previous = previous_avg;
    out.triggered = gen_gate_triggered(out.avg_eos_prob, previous_avg, ratio);
    return out;
}

double tail_mass(std::span<const double> distribution, std::size_t k) {
    if (k < 1 || k > distribution.size()) {
        throw std::out_of_range("tail_mass: K=" + std::to_string(k) + " outside 1.." + std::to_string(distribution.size()));
    }
    const double total = std::accumulate(distribution.begin(), distribution.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("tail_mass: distribution is not normalized");
    std::vector<double> sorted(distribution.begin(), distribution.end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
    std::sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k));
    // Summing smallest-first keeps the low end of the tail exact.
    return std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
}

double tail_mass(const NextTokenDistribution& distribution, std::size_t k) {
    if (distribution.truncated) {
        throw CapabilityError("tail mass needs the full vocabulary; use an in-process backend for tail diagnostics");
    }
    return tail_mass(std::span<const double>(distribution.probs), k);
}

double avg_output_length(std::span<const GenerationRecord> records) {
    if (records.empty()) throw std::invalid_argument("avg_output_length: no records");
    double total = 0.0;
    for (const auto& r : records) total += static_cast<double>(r.output_length());
    return total / static_cast<double>(records.size());
}

ProbeReport validate(ModelBackend& backend, const ModelRef& model, const ValidationSets& sets, ProbeState& state,
                     const ProbeConfig& config, std::span<const GenerationRecord> round_records) {
    config.validate();
    ProbeReport report;

    if (config.eos_choice_enabled) report.eos_choice = eos_choice_probe(backend, model, sets.choice, config);
    if (config.eos_gen_enabled) {
        report.eos_gen = eos_gen_probe(backend, model, sets.gen, state.previous_gen_avg, config.eos_gen_ratio);
        state.previous_gen_avg = report.eos_gen->avg_eos_prob;
    }

    // Diagnostics.
    try {
        std::vector<std::string> contexts = config.tail_contexts;
        if (contexts.empty()) {
            for (const auto& item : sets.choice) contexts.push_back(render_choice_context(item, config.answer_suffix));
        }
        if (!contexts.empty() && !config.tail_k.empty()) {
            std::vector<NextTokenDistribution> dists;
            for (const auto& ctx : contexts) dists.push_back(backend.next_token_distribution(model, ctx));
            for (auto k : config.tail_k) {
                try {
                    double sum = 0.0;
                    for (const auto& d : dists) sum += tail_mass(d, k);
                    report.tail_mass[k] = sum / static_cast<double>(dists.size());
                } catch (const std::exception& e) {
                    report.warnings.push_back("tail_mass K=" + std::to_string(k) + ": " + e.what());
                }
            }
        }
    } catch (const std::exception& e) {
        report.warnings.push_back(std::string("tail_mass: ") + e.what());
    }
    if (!round_records.empty()) {
        report.avg_output_length = avg_output_length(round_records);
        report.refusal_rate = refusal_rate(round_records, config.refusal);
    }

    const bool choice_fired = report.eos_choice && report.eos_choice->aggregate_triggered;
    const bool gen_fired = report.eos_gen && report.eos_gen->triggered;
    report.verdict = !(choice_fired || gen_fired);
    return report;
}

std::vector<GenValidationItem> prepare_gen_references(ModelBackend& backend, const ModelRef& model,
                                                      std::vector<GenValidationItem> items,
                                                      const SamplingConfig& sampling, std::uint64_t seed) {
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& item = items[i];
        if (item.has_reference()) continue;
        for (std::uint64_t attempt = 0; attempt < 16 && !item.has_reference(); ++attempt) {
            Rng rng(derive_seed(seed, i, attempt));
            const auto record = backend.generate(model, item.question, sampling, rng);
            item.reference_response = record.response_text;
            item.reference_tokens.clear();
            for (std::size_t t = 0; t < record.output_length(); ++t) item.reference_tokens.push_back(record.tokens[t].token);
        }
        if (!item.has_reference()) {
            throw BackendError("could not obtain a non-empty reference response for: " + item.question);
        }
    }
    return items;
}

}  // namespace soft

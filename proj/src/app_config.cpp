#include "soft/app_config.hpp"

#include "soft/error.hpp"
#include "soft/mock.hpp"
#include "soft/ngram.hpp"

#include <charconv>

#ifndef SOFT_DEFAULT_DATA_DIR
#define SOFT_DEFAULT_DATA_DIR "data"
#endif

namespace soft {

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
    std::filesystem::path p(value);
    return p.is_absolute() ? p : (base / p).lexically_normal();
}

std::filesystem::path data_path(const json& data, const char* key, const std::filesystem::path& base,
                                const char* default_file) {
    if (auto it = data.find(key); it != data.end()) {
        if (!it->is_string()) throw ConfigError(std::string("data.") + key + " must be a path string");
        return resolve(base, it->get<std::string>());
    }
    return std::filesystem::path(SOFT_DEFAULT_DATA_DIR) / default_file;
}

}  // namespace

AppConfig AppConfig::from_json(const json& doc, const std::filesystem::path& base_dir) {
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    AppConfig c;
    c.base_dir = base_dir;
    c.raw = doc;
    c.soft = SoftConfig::from_json(doc);

    const auto data = doc.value("data", json::object());
    if (!data.is_object()) throw ConfigError("data must be an object");
    if (!data.contains("prompts")) throw ConfigError("data.prompts is required");
    c.data.prompts = data_path(data, "prompts", base_dir, "");
    c.data.pool = data_path(data, "pool", base_dir, "icl_pool.jsonl");
    c.data.principles = data_path(data, "principles", base_dir, "principles.json");
    c.data.validation_choice = data_path(data, "validation_choice", base_dir, "validation_choice.jsonl");
    c.data.validation_gen = data_path(data, "validation_gen", base_dir, "validation_gen.jsonl");
    if (data.contains("refusal_patterns")) {
        c.data.refusal_patterns = data_path(data, "refusal_patterns", base_dir, "refusal_patterns.json");
    }

    try {
        c.pool_strict = doc.value("pool_strict", true);
        if (auto it = doc.find("run_dir"); it != doc.end() && !it->is_null()) {
            c.run_dir = resolve(base_dir, it->get<std::string>());
        }
        c.backends = doc.value("backend", json::object());
        if (!c.backends.is_object()) throw ConfigError("backend must be an object");
        c.default_backend = c.backends.value("default", c.default_backend);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return c;
}

AppConfig AppConfig::load(const std::filesystem::path& path) {
    json doc;
    try {
        doc = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    auto base = std::filesystem::absolute(path).parent_path();
    return from_json(doc, base);
}

void AppConfig::apply_seed_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--seed expects name=value, got '" + assignment + "'");
    const auto name = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    std::uint64_t value = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size()) {
        throw ConfigError("--seed " + name + ": '" + text + "' is not an unsigned integer");
    }
    if (name == "pool_sampling") {
        soft.seeds.pool_sampling = value;
    } else if (name == "segmentation") {
        soft.seeds.segmentation = value;
    } else if (name == "scoring") {
        soft.seeds.scoring = value;
    } else if (name == "sampling") {
        soft.sampling.seed = value;
    } else {
        throw ConfigError("--seed: unknown seed '" + name + "' (pool_sampling, segmentation, scoring, sampling)");
    }
}

LoadedData load_data(AppConfig& config) {
    LoadedData d;
    if (config.data.refusal_patterns) {
        config.soft.probes.refusal = RefusalMatcher::from_json(read_json(*config.data.refusal_patterns));
    }
    d.prompts = load_prompts(config.data.prompts);
    PoolLoadOptions options;
    options.strict = config.pool_strict;
    options.matcher = config.soft.probes.refusal;
    auto pool = load_pool_file(config.data.pool, options);
    d.pool = std::move(pool.pool);
    d.pool_warnings = std::move(pool.warnings);
    d.principles = PrincipleSet::load(config.data.principles);
    d.validation.choice = load_choice_items(config.data.validation_choice);
    d.validation.gen = load_gen_items(config.data.validation_gen);
    return d;
}

std::vector<std::string> vocabulary_texts(const LoadedData& data, const ProbeConfig& probes) {
    std::vector<std::string> texts;
    for (const auto& p : data.prompts) texts.push_back(p.text);
    for (const auto& e : data.pool.examples) {
        texts.push_back(e.user_text);
        texts.push_back(e.internal_thoughts);
        texts.push_back(e.assistant_text);
    }
    for (const auto& item : data.validation.choice) texts.push_back(render_choice_context(item, probes.answer_suffix));
    for (const auto& item : data.validation.gen) {
        texts.push_back(item.question);
        texts.push_back(item.reference_response);
    }
    texts.insert(texts.end(), probes.tail_contexts.begin(), probes.tail_contexts.end());
    texts.emplace_back("A B C D");
    return texts;
}

BackendSetup make_backend(const AppConfig& config, const std::string& kind, const LoadedData& data,
                          const std::optional<std::filesystem::path>& run_dir) {
    const auto section = config.backends.value(kind, json::object());
    if (!section.is_object()) throw ConfigError("backend." + kind + " must be an object");
    BackendSetup setup;
    setup.provenance = {{"kind", kind}};

    if (kind == "ngram") {
        std::filesystem::path corpus = std::filesystem::path(SOFT_DEFAULT_DATA_DIR) / "ngram_corpus.txt";
        std::size_t order = 2;
        double alpha = 0.1;
        try {
            if (section.contains("corpus")) corpus = resolve(config.base_dir, section.at("corpus").get<std::string>());
            order = section.value("order", order);
            alpha = section.value("alpha", alpha);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("malformed backend.ngram: ") + e.what());
        }
        if (order < 1) throw ConfigError("backend.ngram.order must be >= 1");
        if (!(alpha > 0.0)) throw ConfigError("backend.ngram.alpha must be > 0");
        std::vector<std::string> lines;
        {
            const auto text = read_text_file(corpus);
            std::size_t start = 0;
            while (start <= text.size()) {
                auto end = text.find('\n', start);
                if (end == std::string::npos) end = text.size();
                auto line = text.substr(start, end - start);
                if (!tokenize(line).empty()) lines.push_back(std::move(line));
                start = end + 1;
            }
        }
        if (lines.empty()) throw ConfigError(corpus.string() + ": corpus is empty");
        const auto extra = vocabulary_texts(data, config.soft.probes);
        auto backend = run_dir ? std::make_unique<NGramBackend>(*run_dir / "models") : std::make_unique<NGramBackend>();
        setup.initial_model = backend->add_model(NGramModel::train(lines, extra, order, alpha));
        setup.backend = std::move(backend);
        setup.provenance["corpus"] = corpus.string();
        setup.provenance["order"] = order;
        setup.provenance["alpha"] = alpha;
    } else if (kind == "mock") {
        if (!section.contains("script")) throw ConfigError("backend.mock.script is required");
        const auto script = resolve(config.base_dir, section.at("script").get<std::string>());
        setup.backend = std::make_unique<MockBackend>(MockBackend::load(script));
        setup.initial_model = section.value("initial_model", std::string("m0"));
        setup.provenance["script"] = script.string();
    } else if (kind == "remote") {
        auto remote = RemoteConfig::from_json(section);
        remote.apply_environment();
        if (!section.contains("initial_model")) throw ConfigError("backend.remote.initial_model is required");
        setup.initial_model = section.at("initial_model").get<std::string>();
        std::shared_ptr<HttpTransport> transport;
        if (section.contains("replay")) {
            const auto path = resolve(config.base_dir, section.at("replay").get<std::string>());
            transport = std::make_shared<ReplayTransport>(ReplayTransport::load(path));
            if (remote.base_url.empty()) remote.base_url = "replay://";
        } else {
            remote.validate();
            transport = std::make_shared<HttplibTransport>(remote.base_url, remote.timeout_seconds);
        }
        if (section.contains("record")) {
            setup.record_path = resolve(config.base_dir, section.at("record").get<std::string>());
            setup.recorder = std::make_shared<RecordingTransport>(transport);
            transport = setup.recorder;
        }
        setup.backend = std::make_unique<RemoteBackend>(remote, transport);
        setup.provenance["initial_model"] = setup.initial_model;
    } else {
        throw ConfigError("unknown backend '" + kind + "' (expected ngram, remote or mock)");
    }
    return setup;
}

}  // namespace soft

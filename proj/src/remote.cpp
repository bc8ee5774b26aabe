#include "soft/remote.hpp"

#include "soft/error.hpp"

#include <httplib.h>

#include <cmath>
#include <cstdlib>
#include <thread>

namespace soft {

namespace {

std::optional<std::string> header_value(const HttpRequest& r, std::string_view name) {
    for (const auto& [k, v] : r.headers) {
        if (k == name) return v;
    }
    return std::nullopt;
}

json request_json(const HttpRequest& r) {
    json doc = {{"method", r.method}, {"path", r.path}, {"body", r.body}};
    if (auto key = header_value(r, "Idempotency-Key")) doc["idempotency_key"] = *key;
    return doc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Transports

struct HttplibTransport::Impl {
    std::mutex mutex;
    httplib::Client client;
    explicit Impl(const std::string& url) : client(url) {}
};

HttplibTransport::HttplibTransport(std::string base_url, double timeout_seconds)
    : impl_(std::make_unique<Impl>(base_url)) {
    if (!impl_->client.is_valid()) throw ConfigError("invalid remote base_url '" + base_url + "'");
    const auto secs = static_cast<time_t>(timeout_seconds);
    const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
    impl_->client.set_connection_timeout(secs, usecs);
    impl_->client.set_read_timeout(secs, usecs);
    impl_->client.set_write_timeout(secs, usecs);
}

HttplibTransport::~HttplibTransport() = default;

HttpResponse HttplibTransport::send(const HttpRequest& request) {
    httplib::Headers headers;
    for (const auto& [k, v] : request.headers) headers.emplace(k, v);
    std::lock_guard lock(impl_->mutex);
    httplib::Result result = request.method == "GET"
                                 ? impl_->client.Get(request.path, headers)
                                 : impl_->client.Post(request.path, headers, request.body, "application/json");
    if (!result) {
        throw TransportError(request.method + " " + request.path + ": " + httplib::to_string(result.error()));
    }
    return {result->status, result->body};
}

RecordingTransport::RecordingTransport(std::shared_ptr<HttpTransport> inner) : inner_(std::move(inner)) {}

HttpResponse RecordingTransport::send(const HttpRequest& request) {
    json exchange = {{"request", request_json(request)}};
    try {
        auto response = inner_->send(request);
        exchange["response"] = {{"status", response.status}, {"body", response.body}};
        std::lock_guard lock(mutex_);
        exchanges_.push_back(std::move(exchange));
        return response;
    } catch (const TransportError& e) {
        exchange["error"] = e.what();
        std::lock_guard lock(mutex_);
        exchanges_.push_back(std::move(exchange));
        throw;
    }
}

std::string RecordingTransport::transcript_jsonl() const {
    std::lock_guard lock(mutex_);
    return to_jsonl(exchanges_);
}

void RecordingTransport::save(const std::filesystem::path& path) const {
    write_text_file_atomic(path, transcript_jsonl());
}

ReplayTransport::ReplayTransport(std::string_view transcript_jsonl)
    : exchanges_(parse_jsonl(transcript_jsonl, "<transcript>")) {}

ReplayTransport::ReplayTransport(ReplayTransport&& other) noexcept {
    std::lock_guard lock(other.mutex_);
    exchanges_ = std::move(other.exchanges_);
    next_ = other.next_;
}

ReplayTransport ReplayTransport::load(const std::filesystem::path& path) {
    return ReplayTransport(read_text_file(path));
}

HttpResponse ReplayTransport::send(const HttpRequest& request) {
    std::lock_guard lock(mutex_);
    if (next_ >= exchanges_.size()) {
        throw ProtocolError("replay: unexpected extra request " + request.method + " " + request.path);
    }
    const auto& exchange = exchanges_[next_++];
    if (exchange.at("request") != request_json(request)) {
        throw ProtocolError("replay: request #" + std::to_string(next_ - 1) + " (" + request.method + " " +
                            request.path + ") differs from the recorded one");
    }
    if (exchange.contains("error")) throw TransportError(exchange.at("error").get<std::string>());
    return {exchange.at("response").at("status").get<int>(), exchange.at("response").at("body").get<std::string>()};
}

std::size_t ReplayTransport::remaining() const {
    std::lock_guard lock(mutex_);
    return exchanges_.size() - next_;
}

// ---------------------------------------------------------------------------
// Config and wire mapping

void RemoteConfig::validate() const {
    if (base_url.empty()) throw ConfigError("remote.base_url is required");
    if (retry.max_attempts < 1) throw ConfigError("remote.max_attempts must be >= 1");
    if (!(timeout_seconds > 0.0)) throw ConfigError("remote.timeout must be > 0");
    if (!(poll_interval_seconds > 0.0)) throw ConfigError("remote.poll_interval must be > 0");
    if (!(poll_timeout_seconds > 0.0)) throw ConfigError("remote.poll_timeout must be > 0");
    if (retry.backoff_base_seconds < 0.0) throw ConfigError("remote.backoff_base must be >= 0");
}

RemoteConfig RemoteConfig::from_json(const json& doc) {
    RemoteConfig c;
    try {
        c.base_url = doc.value("base_url", std::string{});
        if (auto it = doc.find("token"); it != doc.end() && !it->is_null()) c.auth_token = it->get<std::string>();
        c.timeout_seconds = doc.value("timeout", c.timeout_seconds);
        c.retry.max_attempts = doc.value("max_attempts", c.retry.max_attempts);
        c.retry.backoff_base_seconds = doc.value("backoff_base", c.retry.backoff_base_seconds);
        c.poll_interval_seconds = doc.value("poll_interval", c.poll_interval_seconds);
        c.poll_timeout_seconds = doc.value("poll_timeout", c.poll_timeout_seconds);
        c.next_token_top_k = doc.value("next_token_top_k", c.next_token_top_k);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed remote config: ") + e.what());
    }
    return c;
}

void RemoteConfig::apply_environment() {
    if (const char* url = std::getenv("SOFT_REMOTE_URL"); url && *url) base_url = url;
    if (const char* token = std::getenv("SOFT_REMOTE_TOKEN"); token && *token) auth_token = token;
}

FinetuneJob FinetuneJob::from_json(const json& doc) {
    FinetuneJob job;
    try {
        job.job_id = doc.at("job_id").get<std::string>();
        const auto status = doc.at("status").get<std::string>();
        if (status == "queued") {
            job.status = JobStatus::queued;
        } else if (status == "running") {
            job.status = JobStatus::running;
        } else if (status == "succeeded") {
            job.status = JobStatus::succeeded;
        } else if (status == "failed") {
            job.status = JobStatus::failed;
        } else {
            throw ProtocolError("unknown job status '" + status + "'");
        }
        if (auto it = doc.find("result_model_id"); it != doc.end() && !it->is_null()) {
            job.result_model_id = it->get<std::string>();
        }
        if (auto it = doc.find("error"); it != doc.end() && !it->is_null()) job.error = it->get<std::string>();
    } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed job document: ") + e.what());
    }
    if (job.result_model_id.has_value() != (job.status == JobStatus::succeeded)) {
        throw ProtocolError("job " + job.job_id + ": result_model_id must be present exactly when succeeded");
    }
    return job;
}

namespace {

double probability_from_logprob(double logprob) {
    if (!std::isfinite(logprob) || logprob > 1e-9) {
        throw ProtocolError("logprob " + std::to_string(logprob) + " is not a valid natural-log probability");
    }
    return std::min(1.0, std::exp(logprob));
}

}  // namespace

GenerationRecord parse_generate_response(const json& body) {
    GenerationRecord record;
    auto tokens = body.find("tokens");
    if (tokens == body.end() || !tokens->is_array()) {
        throw ProtocolError("generate response lacks the tokens array (per-token log-probabilities are required)");
    }
    try {
        record.response_text = body.at("text").get<std::string>();
        for (const auto& t : *tokens) {
            if (!t.contains("logprob") || t.at("logprob").is_null()) {
                throw ProtocolError("generate response token lacks logprob");
            }
            record.tokens.push_back({t.at("token").get<std::string>(), probability_from_logprob(t.at("logprob").get<double>())});
        }
        if (auto eos = body.find("eos_logprobs"); eos != body.end() && !eos->is_null()) {
            std::vector<double> trace;
            for (const auto& lp : *eos) trace.push_back(probability_from_logprob(lp.get<double>()));
            record.eos_probability_trace = std::move(trace);
        }
        const auto finish = body.value("finish_reason", std::string("stop"));
        if (finish == "stop" || finish == "eos") {
            record.finish = FinishReason::eos;
        } else if (finish == "length") {
            record.finish = FinishReason::length_limit;
        } else {
            throw ProtocolError("unknown finish_reason '" + finish + "'");
        }
    } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed generate response: ") + e.what());
    }
    record.validate();
    return record;
}

NextTokenDistribution parse_next_token_response(const json& body, bool requested_top_k) {
    NextTokenDistribution d;
    try {
        d.tokens = body.at("tokens").get<std::vector<std::string>>();
        d.probs = body.at("probs").get<std::vector<double>>();
        if (auto it = body.find("eos_index"); it != body.end() && !it->is_null()) d.eos_index = it->get<std::size_t>();
        d.remainder = body.value("remainder", 0.0);
    } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed next_token response: ") + e.what());
    }
    d.truncated = requested_top_k || body.contains("remainder");
    d.validate(1e-6);
    return d;
}

json finetune_request_body(const ModelRef& base_model, std::span<const TrainingPair> pairs,
                           const FinetuneConfig& hyperparams) {
    json rows = json::array();
    for (const auto& p : pairs) rows.push_back({{"prompt", p.prompt_text}, {"response", p.response_text}});
    return {{"base_model", base_model}, {"pairs", std::move(rows)}, {"hyperparams", hyperparams}};
}

// ---------------------------------------------------------------------------
// RemoteBackend

RemoteBackend::RemoteBackend(RemoteConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
    config_.validate();
    if (!sleeper_) {
        sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
    }
}

json RemoteBackend::call(HttpRequest request, bool retryable) {
    if (config_.auth_token) request.headers.emplace_back("Authorization", "Bearer " + *config_.auth_token);
    const std::size_t attempts = retryable ? config_.retry.max_attempts : 1;
    std::string last_error;
    for (std::size_t attempt = 1; attempt <= attempts; ++attempt) {
        if (attempt > 1) {
            ++retries_;
            sleeper_(config_.retry.backoff_base_seconds * std::pow(2.0, static_cast<double>(attempt - 2)));
        }
        HttpResponse response;
        try {
            response = transport_->send(request);
        } catch (const TransportError& e) {
            last_error = e.what();
            continue;
        }
        if (response.status >= 200 && response.status < 300) {
            try {
                return json::parse(response.body);
            } catch (const json::parse_error& e) {
                throw ProtocolError(request.path + ": response is not JSON: " + e.what());
            }
        }
        if (request.path == "/v1/next_token" && (response.status == 404 || response.status == 501)) {
            throw CapabilityError("remote server does not support /v1/next_token; EOS probes and tail diagnostics "
                                  "need an in-process backend (ngram) or a server implementing it");
        }
        if (response.status >= 400 && response.status < 500 && response.status != 429) {
            throw ConfigError("remote rejected " + request.method + " " + request.path + " with HTTP " +
                              std::to_string(response.status) + ": " + response.body);
        }
        last_error = "HTTP " + std::to_string(response.status);
    }
    throw TransportError(request.method + " " + request.path + " failed after " + std::to_string(attempts) +
                         " attempt(s): " + last_error);
}

GenerationRecord RemoteBackend::generate(const ModelRef& model, const std::string& prompt_text,
                                         const SamplingConfig& sampling, Rng& rng) {
    const json body = {{"model", model},
                       {"prompt", prompt_text},
                       {"temperature", sampling.temperature},
                       {"top_p", sampling.top_p},
                       {"max_tokens", sampling.max_new_tokens},
                       {"logprobs", true},
                       {"eos_logprobs", true}};
    HttpRequest request{"POST", "/v1/generate", body.dump(), {}};
    request.headers.emplace_back("X-Request-Id", sha256_hex(request.body + std::to_string(rng.next())).substr(0, 32));
    return parse_generate_response(call(std::move(request), true));
}

NextTokenDistribution RemoteBackend::next_token_distribution(const ModelRef& model, const std::string& context) {
    const json body = {{"model", model}, {"prompt", context}, {"top_k", config_.next_token_top_k}};
    return parse_next_token_response(call({"POST", "/v1/next_token", body.dump(), {}}, true),
                                     config_.next_token_top_k > 0);
}

FinetuneJob RemoteBackend::poll_job(const std::string& job_id) {
    return FinetuneJob::from_json(call({"GET", "/v1/jobs/" + job_id, "", {}}, true));
}

ModelRef RemoteBackend::finetune(const ModelRef& model, std::span<const TrainingPair> pairs,
                                 const FinetuneConfig& config, const FinetuneRequest& request) {
    if (pairs.empty()) throw std::invalid_argument("remote finetune: no training pairs");

    std::string job_id;
    if (request.resume_job_id) {
        job_id = *request.resume_job_id;
    } else {
        HttpRequest http{"POST", "/v1/finetune", finetune_request_body(model, pairs, config).dump(), {}};
        const bool keyed = !request.idempotency_key.empty();
        if (keyed) http.headers.emplace_back("Idempotency-Key", request.idempotency_key);
        // Without a key a lost response could leave a duplicate job behind.
        const auto reply = call(std::move(http), keyed);
        try {
            job_id = reply.at("job_id").get<std::string>();
        } catch (const json::exception& e) {
            throw ProtocolError(std::string("finetune response lacks job_id: ") + e.what());
        }
        if (request.on_job_submitted) request.on_job_submitted(job_id);
    }

    double waited = 0.0;
    for (;;) {
        const auto job = poll_job(job_id);
        if (job.status == JobStatus::succeeded) return *job.result_model_id;
        if (job.status == JobStatus::failed) {
            throw JobFailedError("fine-tune job " + job_id + " failed: " + job.error.value_or("(no message)"));
        }
        if (waited + config_.poll_interval_seconds > config_.poll_timeout_seconds) {
            throw JobFailedError("fine-tune job " + job_id + " did not finish within " +
                                 std::to_string(config_.poll_timeout_seconds) + "s");
        }
        sleeper_(config_.poll_interval_seconds);
        waited += config_.poll_interval_seconds;
    }
}

}  // namespace soft

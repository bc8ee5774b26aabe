#pragma once

// ModelBackend over a small JSON-over-HTTP protocol:
//   POST /v1/generate    {model, prompt, temperature, top_p, max_tokens, logprobs, eos_logprobs}
//   POST /v1/next_token  {model, prompt, top_k}
//   POST /v1/finetune    {base_model, pairs: [{prompt, response}], hyperparams}
//   GET  /v1/jobs/{id}
// Log-probabilities on the wire are natural logs.

#include "soft/backend.hpp"

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace soft {

struct HttpRequest {
    std::string method;
    std::string path;
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;
};

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// Sends one request. Throws TransportError when no HTTP response was received.
class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse send(const HttpRequest& request) = 0;
};

/// cpp-httplib client.
class HttplibTransport : public HttpTransport {
public:
    HttplibTransport(std::string base_url, double timeout_seconds);
    ~HttplibTransport() override;
    HttpResponse send(const HttpRequest& request) override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Appends every exchange to an in-memory transcript. Authorization headers
/// are not recorded.
class RecordingTransport : public HttpTransport {
public:
    explicit RecordingTransport(std::shared_ptr<HttpTransport> inner);
    HttpResponse send(const HttpRequest& request) override;

    std::string transcript_jsonl() const;
    void save(const std::filesystem::path& path) const;

private:
    std::shared_ptr<HttpTransport> inner_;
    mutable std::mutex mutex_;
    std::vector<json> exchanges_;
};

/// Serves responses from a transcript, in order. A request whose method,
/// path, idempotency key or body differs from the recorded one is a
/// ProtocolError.
class ReplayTransport : public HttpTransport {
public:
    explicit ReplayTransport(std::string_view transcript_jsonl);
    ReplayTransport(ReplayTransport&& other) noexcept;
    static ReplayTransport load(const std::filesystem::path& path);
    HttpResponse send(const HttpRequest& request) override;
    std::size_t remaining() const;

private:
    mutable std::mutex mutex_;
    std::vector<json> exchanges_;
    std::size_t next_ = 0;
};

struct RetryPolicy {
    std::size_t max_attempts = 3;
    double backoff_base_seconds = 0.5;
};

struct RemoteConfig {
    std::string base_url;
    std::optional<std::string> auth_token;
    double timeout_seconds = 60.0;
    RetryPolicy retry;
    double poll_interval_seconds = 5.0;
    double poll_timeout_seconds = 24.0 * 3600.0;
    /// 0 requests the full vocabulary from /v1/next_token.
    std::size_t next_token_top_k = 0;

    void validate() const;
    static RemoteConfig from_json(const json& doc);
    /// SOFT_REMOTE_URL and SOFT_REMOTE_TOKEN override file values.
    void apply_environment();
};

enum class JobStatus { queued, running, succeeded, failed };

struct FinetuneJob {
    std::string job_id;
    JobStatus status = JobStatus::queued;
    std::optional<std::string> result_model_id;
    std::optional<std::string> error;

    bool terminal() const noexcept { return status == JobStatus::succeeded || status == JobStatus::failed; }
    static FinetuneJob from_json(const json& doc);
};

/// Maps a /v1/generate response body onto a GenerationRecord.
GenerationRecord parse_generate_response(const json& body);
/// Maps a /v1/next_token response body onto a distribution.
NextTokenDistribution parse_next_token_response(const json& body, bool requested_top_k);
/// The exact /v1/finetune request body.
json finetune_request_body(const ModelRef& base_model, std::span<const TrainingPair> pairs,
                           const FinetuneConfig& hyperparams);

class RemoteBackend : public ModelBackend {
public:
    using Sleeper = std::function<void(double seconds)>;

    RemoteBackend(RemoteConfig config, std::shared_ptr<HttpTransport> transport, Sleeper sleeper = {});

    std::string name() const override { return "remote"; }
    GenerationRecord generate(const ModelRef& model, const std::string& prompt_text, const SamplingConfig& sampling,
                              Rng& rng) override;
    NextTokenDistribution next_token_distribution(const ModelRef& model, const std::string& context) override;
    ModelRef finetune(const ModelRef& model, std::span<const TrainingPair> pairs, const FinetuneConfig& config,
                      const FinetuneRequest& request) override;

    FinetuneJob poll_job(const std::string& job_id);

    /// Attempts beyond the first, summed over all requests.
    std::size_t retries_performed() const noexcept { return retries_.load(); }

private:
    json call(HttpRequest request, bool retryable);

    RemoteConfig config_;
    std::shared_ptr<HttpTransport> transport_;
    Sleeper sleeper_;
    std::atomic<std::size_t> retries_{0};
};

}  // namespace soft

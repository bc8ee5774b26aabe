#pragma once

// Deterministic in-process implementation of the inference/fine-tune
// protocol, with failure injection. Responses depend only on request
// contents, so recorded sessions are reproducible.

#include "soft/io.hpp"

#include <httplib.h>

#include <cstddef>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace soft::test {

class StubServer {
public:
    struct Options {
        /// GET /v1/jobs/{id} answers queued, then running, and succeeds on this poll.
        std::size_t polls_to_finish = 3;
        bool next_token_supported = true;
        std::size_t max_generate_tokens = 6;
    };

    StubServer() : StubServer(Options{}) {}
    explicit StubServer(Options options);
    ~StubServer();

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

    /// The next `count` requests whose path starts with `prefix` get `status`.
    void inject_status(const std::string& prefix, int status, std::size_t count = 1);
    /// The next finetune POST creates its job but answers 503, as if the
    /// response were lost.
    void lose_next_finetune_response();
    /// Jobs created from now on end in status=failed.
    void fail_jobs(bool fail);

    std::size_t jobs_created() const;
    std::size_t finetune_posts() const;
    std::size_t request_count(const std::string& prefix) const;
    std::vector<std::string> finetune_bodies() const;
    std::vector<std::string> idempotency_keys() const;

    /// The distribution served for (model, prompt); also used by tests as the oracle.
    static json distribution_for(const std::string& model, const std::string& prompt, std::size_t top_k);

private:
    struct Job {
        std::string id;
        std::string result_model;
        std::size_t polls = 0;
        bool fail = false;
    };

    void handle(const httplib::Request& req, httplib::Response& res);
    bool injected(const std::string& path, httplib::Response& res);

    Options options_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;

    mutable std::mutex mutex_;
    std::vector<std::pair<std::string, std::pair<int, std::size_t>>> injections_;
    bool lose_finetune_ = false;
    bool fail_jobs_ = false;
    std::map<std::string, Job> jobs_;
    std::map<std::string, std::string> job_by_key_;
    std::vector<std::string> finetune_bodies_;
    std::vector<std::string> keys_;
    std::vector<std::string> paths_;
};

}  // namespace soft::test

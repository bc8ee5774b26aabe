#include "stub_server.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace soft::test {

namespace {

const std::vector<std::string> kWords{"the", "model", "answers", "kindly", "with", "care", "and", "detail"};
const std::vector<std::string> kDistTokens{"</s>", "A", "B", "C", "D", "the", "model", "answers"};

std::uint64_t hash64(const std::string& s) { return std::stoull(sha256_hex(s).substr(0, 15), nullptr, 16); }

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

}  // namespace

StubServer::StubServer(Options options) : options_(options) {
    server_.Post(R"(/v1/.*)", [this](const httplib::Request& q, httplib::Response& r) { handle(q, r); });
    server_.Get(R"(/v1/.*)", [this](const httplib::Request& q, httplib::Response& r) { handle(q, r); });
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw std::runtime_error("stub server: bind failed");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    while (!server_.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
}

StubServer::~StubServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
}

void StubServer::inject_status(const std::string& prefix, int status, std::size_t count) {
    std::lock_guard lock(mutex_);
    injections_.push_back({prefix, {status, count}});
}

void StubServer::lose_next_finetune_response() {
    std::lock_guard lock(mutex_);
    lose_finetune_ = true;
}

void StubServer::fail_jobs(bool fail) {
    std::lock_guard lock(mutex_);
    fail_jobs_ = fail;
}

std::size_t StubServer::jobs_created() const {
    std::lock_guard lock(mutex_);
    return jobs_.size();
}

std::size_t StubServer::finetune_posts() const { return request_count("/v1/finetune"); }

std::size_t StubServer::request_count(const std::string& prefix) const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& p : paths_) n += p.rfind(prefix, 0) == 0;
    return n;
}

std::vector<std::string> StubServer::finetune_bodies() const {
    std::lock_guard lock(mutex_);
    return finetune_bodies_;
}

std::vector<std::string> StubServer::idempotency_keys() const {
    std::lock_guard lock(mutex_);
    return keys_;
}

json StubServer::distribution_for(const std::string& model, const std::string& prompt, std::size_t top_k) {
    std::vector<double> weights;
    double total = 0.0;
    for (std::size_t i = 0; i < kDistTokens.size(); ++i) {
        // EOS draws from a tenth of the range so a healthy model usually passes the choice gate.
        const std::uint64_t range = i == 0 ? 100 : 1000;
        const double w = 1.0 + static_cast<double>(hash64(model + "\n" + prompt + "\n" + kDistTokens[i]) % range);
        weights.push_back(w);
        total += w;
    }
    std::vector<std::string> tokens = kDistTokens;
    std::vector<double> probs;
    for (double w : weights) probs.push_back(w / total);
    if (top_k == 0 || top_k >= tokens.size()) return {{"tokens", tokens}, {"probs", probs}, {"eos_index", 0}};

    std::vector<std::size_t> order(tokens.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    json out_tokens = json::array();
    json out_probs = json::array();
    json eos = nullptr;
    double kept = 0.0;
    for (std::size_t r = 0; r < top_k; ++r) {
        const auto i = order[r];
        if (i == 0) eos = r;
        out_tokens.push_back(tokens[i]);
        out_probs.push_back(probs[i]);
        kept += probs[i];
    }
    return {{"tokens", out_tokens}, {"probs", out_probs}, {"eos_index", eos}, {"remainder", 1.0 - kept}};
}

bool StubServer::injected(const std::string& path, httplib::Response& res) {
    for (auto it = injections_.begin(); it != injections_.end(); ++it) {
        if (path.rfind(it->first, 0) != 0) continue;
        res.status = it->second.first;
        res.set_content(R"({"error":"injected"})", "application/json");
        if (--it->second.second == 0) injections_.erase(it);
        return true;
    }
    return false;
}

void StubServer::handle(const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(mutex_);
    paths_.push_back(req.path);
    if (injected(req.path, res)) return;

    if (req.method == "POST" && req.path == "/v1/generate") {
        const auto body = json::parse(req.body);
        const auto seed = hash64(body.dump() + req.get_header_value("X-Request-Id"));
        const std::size_t n = 1 + seed % options_.max_generate_tokens;
        json tokens = json::array();
        json eos = json::array();
        std::string text;
        for (std::size_t i = 0; i < n; ++i) {
            const auto h = hash64(std::to_string(seed) + "/" + std::to_string(i));
            const auto& w = kWords[h % kWords.size()];
            text += (i ? " " : "") + w;
            tokens.push_back({{"token", w}, {"logprob", std::log(0.05 + static_cast<double>(h % 900) / 1000.0)}});
            eos.push_back(std::log(0.001 + static_cast<double>((h >> 12) % 50) / 1000.0));
        }
        tokens.push_back({{"token", "</s>"}, {"logprob", std::log(0.3)}});
        eos.push_back(std::log(0.3));
        reply(res, 200, {{"text", text}, {"tokens", tokens}, {"eos_logprobs", eos}, {"finish_reason", "stop"}});
        return;
    }
    if (req.method == "POST" && req.path == "/v1/next_token") {
        if (!options_.next_token_supported) {
            reply(res, 404, {{"error", "not found"}});
            return;
        }
        const auto body = json::parse(req.body);
        reply(res, 200,
              distribution_for(body.at("model").get<std::string>(), body.at("prompt").get<std::string>(),
                               body.value("top_k", std::size_t{0})));
        return;
    }
    if (req.method == "POST" && req.path == "/v1/finetune") {
        finetune_bodies_.push_back(req.body);
        const auto key = req.get_header_value("Idempotency-Key");
        keys_.push_back(key);
        std::string id;
        if (auto it = job_by_key_.find(key); !key.empty() && it != job_by_key_.end()) {
            id = it->second;
        } else {
            const auto body = json::parse(req.body);
            id = "job-" + std::to_string(jobs_.size() + 1);
            jobs_[id] = {id, "m-" + sha256_hex(req.body).substr(0, 12), 0, fail_jobs_};
            if (!key.empty()) job_by_key_[key] = id;
        }
        if (lose_finetune_) {
            lose_finetune_ = false;
            reply(res, 503, {{"error", "lost response"}});
            return;
        }
        reply(res, 200, {{"job_id", id}});
        return;
    }
    if (req.method == "GET" && req.path.rfind("/v1/jobs/", 0) == 0) {
        const auto id = req.path.substr(9);
        auto it = jobs_.find(id);
        if (it == jobs_.end()) {
            reply(res, 404, {{"error", "no such job"}});
            return;
        }
        auto& job = it->second;
        ++job.polls;
        json doc = {{"job_id", id}};
        if (job.polls >= options_.polls_to_finish) {
            if (job.fail) {
                doc["status"] = "failed";
                doc["error"] = "out of memory";
            } else {
                doc["status"] = "succeeded";
                doc["result_model_id"] = job.result_model;
            }
        } else {
            doc["status"] = job.polls == 1 ? "queued" : "running";
        }
        reply(res, 200, doc);
        return;
    }
    reply(res, 404, {{"error", "unknown endpoint"}});
}

}  // namespace soft::test

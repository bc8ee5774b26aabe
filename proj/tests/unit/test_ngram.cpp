#include "oracles.hpp"
#include "test_util.hpp"

#include "soft/error.hpp"
#include "soft/ngram.hpp"
#include "soft/probes.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace soft;

namespace {

NGramModel toy_model() {
    const std::vector<std::string> corpus{"the cat sat on the mat", "the dog sat on the log", "a cat and a dog"};
    return NGramModel::train(corpus);
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("tokenize splits on whitespace") {
    CHECK(tokenize("  a  b\tc\nd ") == std::vector<std::string>{"a", "b", "c", "d"});
    CHECK(tokenize("").empty());
}

TEST_CASE("vocabulary layout") {
    NGramModel m({"a", "b"});
    CHECK(m.vocab_size() == 4);
    CHECK(m.vocab()[m.eos_id()] == kEosToken);
    CHECK(m.vocab()[m.unk_id()] == kUnkToken);
    CHECK(m.id_of("zzz") == m.unk_id());
    CHECK(m.context_of(std::vector<NGramModel::TokenId>{}) == NGramModel::Context{NGramModel::kBos});
}

TEST_CASE("bigram smoothing matches the hand formula") {
    // Fresh bigram over {</s>, <unk>, a, b}: |V| = 4.
    NGramModel m({"a", "b"}, 2, 0.1);
    REQUIRE(m.vocab_size() == 4);
    const std::vector<TrainingPair> pairs{{"x", "a", "b"}};
    const auto tuned = ngram_finetune(m, pairs, json::object());
    const auto a = tuned.id_of("a");
    const auto b = tuned.id_of("b");
    const double p = tuned.probability({a}, b);
    CHECK(p == doctest::Approx(oracle::smoothed(1, 1, 0.1, 4)).epsilon(1e-15));
    CHECK(p == doctest::Approx(1.1 / 1.4).epsilon(1e-15));
    // The untouched parent is still uniform.
    CHECK(m.probability({a}, b) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("conditionals are positive and normalized on random count tables") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> vocab;
        const auto v = 2 + rng.uniform_index(30);
        for (std::size_t i = 0; i < v; ++i) vocab.push_back("w" + std::to_string(i));
        NGramModel m(vocab, 1 + rng.uniform_index(3), 0.01 + rng.uniform01());
        std::vector<NGramModel::TokenId> stream;
        for (int i = 0; i < 200; ++i) stream.push_back(static_cast<NGramModel::TokenId>(rng.uniform_index(m.vocab_size())));
        m.accumulate(stream, 0.5 + rng.uniform01());
        for (int q = 0; q < 10; ++q) {
            std::vector<NGramModel::TokenId> hist;
            for (int i = 0; i < 3; ++i) hist.push_back(static_cast<NGramModel::TokenId>(rng.uniform_index(m.vocab_size())));
            const auto probs = m.conditional(m.context_of(hist));
            CHECK(std::abs(sum(probs) - 1.0) <= 1e-9);
            for (double p : probs) CHECK(p > 0.0);
        }
    }
}

TEST_CASE("greedy limit emits the argmax sequence") {
    // Untied argmax at every step, so the limit is a single sequence.
    const std::vector<std::string> corpus{"the cat sat", "the cat sat", "the dog ran"};
    const auto m = NGramModel::train(corpus);
    SamplingConfig cfg;
    cfg.temperature = 1e-6;
    cfg.top_p = 0.95;
    cfg.max_new_tokens = 12;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        const auto r = ngram_generate(m, "the", cfg, rng);
        // Oracle: follow argmax of the closed-form conditional.
        auto hist = m.encode("the");
        for (const auto& t : r.tokens) {
            const auto probs = m.conditional(m.context_of(hist));
            const auto best = static_cast<NGramModel::TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
            CHECK(t.token == m.vocab()[best]);
            CHECK(t.probability == doctest::Approx(1.0));
            hist.push_back(best);
        }
        CHECK(r.response_text == "cat sat");
        CHECK(r.finish == FinishReason::eos);
    }
}

TEST_CASE("sampling frequencies match the smoothed conditional") {
    const auto m = toy_model();
    SamplingConfig cfg;
    cfg.temperature = 1.0;
    cfg.top_p = 1.0;
    cfg.max_new_tokens = 1;
    const auto probs = m.conditional(m.context_of(m.encode("the")));
    std::vector<double> freq(m.vocab_size(), 0.0);
    const int n = 100000;
    Rng rng(2024);
    for (int i = 0; i < n; ++i) {
        const auto r = ngram_generate(m, "the", cfg, rng);
        freq[m.id_of(r.tokens.at(0).token)] += 1.0 / n;
    }
    for (std::size_t i = 0; i < probs.size(); ++i) CHECK(std::abs(freq[i] - probs[i]) <= 0.01);
}

TEST_CASE("recorded probabilities are the temperature-adjusted conditionals") {
    const auto m = toy_model();
    SamplingConfig cfg;
    cfg.temperature = 0.7;
    cfg.top_p = 0.9;
    cfg.max_new_tokens = 20;
    Rng rng(77);
    const auto r = ngram_generate(m, "a cat", cfg, rng);
    REQUIRE(r.eos_probability_trace);
    REQUIRE(r.eos_probability_trace->size() == r.tokens.size());
    auto hist = m.encode("a cat");
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
        const auto base = m.conditional(m.context_of(hist));
        // Closed form: p^(1/T) / sum p^(1/T).
        double z = 0.0;
        for (double p : base) z += std::pow(p, 1.0 / 0.7);
        const auto id = m.id_of(r.tokens[i].token);
        CHECK(r.tokens[i].probability == doctest::Approx(std::pow(base[id], 1.0 / 0.7) / z).epsilon(1e-12));
        CHECK((*r.eos_probability_trace)[i] ==
              doctest::Approx(std::pow(base[m.eos_id()], 1.0 / 0.7) / z).epsilon(1e-12));
        hist.push_back(id);
    }
    if (r.finish == FinishReason::eos) CHECK(r.tokens.back().token == kEosToken);
}

TEST_CASE("generation is deterministic under a fixed seed") {
    const auto m = toy_model();
    SamplingConfig cfg;
    cfg.max_new_tokens = 30;
    Rng a(5), b(5);
    CHECK(ngram_generate(m, "the dog", cfg, a) == ngram_generate(m, "the dog", cfg, b));
}

TEST_CASE("a model that can only stop emits one EOS token") {
    NGramModel m({}, 2, 1e-9);
    std::vector<NGramModel::TokenId> stream{m.eos_id()};
    m.accumulate(stream, 1e6);
    SamplingConfig cfg;
    cfg.temperature = 1.0;
    cfg.top_p = 0.5;
    Rng rng(1);
    const auto r = ngram_generate(m, "", cfg, rng);
    REQUIRE(r.tokens.size() == 1);
    CHECK(r.tokens[0].token == kEosToken);
    CHECK(r.finish == FinishReason::eos);
    CHECK(r.output_length() == 0);
    CHECK(r.response_text.empty());
}

TEST_CASE("length limit") {
    const auto m = toy_model();
    SamplingConfig cfg;
    cfg.max_new_tokens = 3;
    cfg.temperature = 1e-6;
    Rng rng(1);
    auto big = m.finetuned(std::vector<TrainingPair>{{"x", "the cat", "sat on the cat sat on the cat"}}, 100.0);
    const auto r = ngram_generate(big, "the cat", cfg, rng);
    CHECK(r.finish == FinishReason::length_limit);
    CHECK(r.output_length() == 3);
}

TEST_CASE("temperature is monotone for the argmax token") {
    const auto m = toy_model();
    Rng rng(12);
    for (int i = 0; i < 100; ++i) {
        std::vector<NGramModel::TokenId> hist{static_cast<NGramModel::TokenId>(rng.uniform_index(m.vocab_size()))};
        const auto base = m.conditional(m.context_of(hist));
        const auto best = std::max_element(base.begin(), base.end()) - base.begin();
        const double p05 = apply_temperature(base, 0.5)[best];
        const double p07 = apply_temperature(base, 0.7)[best];
        const double p10 = apply_temperature(base, 1.0)[best];
        CHECK(p05 >= p07 - 1e-15);
        CHECK(p07 >= p10 - 1e-15);
    }
    const std::vector<double> d{0.2, 0.3, 0.5};
    CHECK(apply_temperature(d, 1.0) == d);
}

TEST_CASE("finetune continuity and lineage persistence") {
    const auto m = toy_model();
    const std::vector<TrainingPair> pairs{{"x", "the cat", "sat on the dog"}};
    const auto tiny = ngram_finetune(m, pairs, json{{"weight", 1e-12}});
    for (const auto& ctx : {"the", "cat", "sat"}) {
        const auto a = m.conditional(m.context_of(m.encode(ctx)));
        const auto b = tiny.conditional(tiny.context_of(tiny.encode(ctx)));
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-9);
    }
    CHECK_THROWS_AS(ngram_finetune(m, pairs, json{{"weight", 0.0}}), ConfigError);
    CHECK_THROWS_AS(ngram_finetune(m, {}, json::object()), std::invalid_argument);

    NGramBackend backend;
    std::vector<ModelRef> lineage{backend.add_model(m)};
    std::vector<std::vector<double>> before;
    for (int i = 0; i < 4; ++i) {
        before.push_back(backend.next_token_distribution(lineage.back(), "the").probs);
        lineage.push_back(backend.finetune(lineage.back(), pairs, json::object(), {}));
    }
    for (std::size_t i = 0; i < before.size(); ++i) {
        CHECK(backend.next_token_distribution(lineage[i], "the").probs == before[i]);
    }
    CHECK(lineage[1] != lineage[2]);
}

TEST_CASE("snapshot JSON round-trip and store reload") {
    const auto m = toy_model().finetuned(std::vector<TrainingPair>{{"x", "a", "cat sat"}}, 2.0);
    const auto back = NGramModel::from_json(m.to_json());
    CHECK(back.to_json() == m.to_json());
    CHECK(back.conditional(back.context_of(back.encode("a"))) == m.conditional(m.context_of(m.encode("a"))));

    soft::test::TempDir dir;
    ModelRef ref;
    {
        NGramBackend writer(dir.path());
        ref = writer.add_model(m);
    }
    NGramBackend reader(dir.path());
    CHECK(reader.next_token_distribution(ref, "a").probs == m.conditional(m.context_of(m.encode("a"))));
    CHECK_THROWS_AS(reader.model("ngram-missing"), BackendError);
}

TEST_CASE("eos trace matches per-position next-token queries") {
    NGramBackend backend;
    const auto ref = backend.add_model(toy_model());
    const std::vector<std::string> tokens{"cat", "sat", "on"};
    const auto fast = backend.eos_trace(ref, "the", tokens);
    const auto slow = backend.ModelBackend::eos_trace(ref, "the", tokens);
    REQUIRE(fast.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-15));
}

TEST_CASE("repeated self-finetuning sharpens the tail") {
    std::vector<std::string> corpus;
    for (int i = 0; i < 60; ++i) corpus.push_back("topic" + std::to_string(i) + " ? word" + std::to_string(i % 7));
    const auto base = NGramModel::train(corpus);
    const std::size_t k = (base.vocab_size() + 9) / 10;
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto model = base;
        std::vector<double> tail;
        SamplingConfig cfg;
        cfg.max_new_tokens = 8;
        Rng rng(seed);
        for (int round = 0; round < 5; ++round) {
            std::vector<TrainingPair> pairs;
            for (int s = 0; s < 200; ++s) {
                const auto r = ngram_generate(model, "?", cfg, rng);
                pairs.push_back({"p", "?", r.response_text});
            }
            model = ngram_finetune(model, pairs, json::object());
            tail.push_back(tail_mass(model.conditional(model.context_of(model.encode("?"))), k));
        }
        improved += tail.back() < tail.front();
    }
    CHECK(improved >= 9);
}

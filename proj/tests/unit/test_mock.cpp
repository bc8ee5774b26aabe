#include "test_util.hpp"

#include "soft/error.hpp"
#include "soft/mock.hpp"
#include "soft/probes.hpp"

#include <doctest.h>

using namespace soft;
using soft::test::record_doc;

TEST_CASE("mock exhaustion names the request") {
    MockBackend mock({{"m0", RequestKind::generate, std::nullopt, false, record_doc({"hi", "</s>"}, {0.5, 0.5})}});
    Rng rng(1);
    const auto r = mock.generate("m0", "hello there", {}, rng);
    CHECK(r.response_text == "hi");
    try {
        mock.generate("m0", "hello there", {}, rng);
        FAIL("expected an error");
    } catch (const BackendError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("generate") != std::string::npos);
        CHECK(msg.find("m0") != std::string::npos);
        CHECK(msg.find("hello there") != std::string::npos);
    }
    CHECK(mock.call_count(RequestKind::generate) == 2);
}

TEST_CASE("mock routes by model, kind and match; repeat entries persist") {
    MockBackend mock({{"m0", RequestKind::next_token, "alpha", true, soft::test::eos_distribution_doc(0.1)},
                      {"m0", RequestKind::next_token, std::nullopt, true, soft::test::eos_distribution_doc(0.2)},
                      {"m1", RequestKind::next_token, std::nullopt, false, soft::test::eos_distribution_doc(0.3)},
                      {"m0", RequestKind::finetune, std::nullopt, false, {{"model", "m1"}}}});
    for (int i = 0; i < 3; ++i) {
        CHECK(mock.next_token_distribution("m0", "x alpha y").eos_probability() == 0.1);
        CHECK(mock.next_token_distribution("m0", "beta").eos_probability() == 0.2);
    }
    CHECK(mock.next_token_distribution("m1", "").eos_probability() == 0.3);
    CHECK_THROWS_AS(mock.next_token_distribution("m1", ""), BackendError);
    const std::vector<TrainingPair> pairs{{"a", "q", "r"}, {"b", "q2", "r2"}};
    CHECK(mock.finetune("m0", pairs, json::object(), {}) == "m1");
    CHECK(mock.finetune_sizes() == std::vector<std::size_t>{2});
}

TEST_CASE("mock scripts load from JSONL") {
    const auto text = MockEntry{"m0", RequestKind::finetune, std::nullopt, false, {{"model", "m9"}}}.to_json().dump() +
                      "\n";
    auto mock = MockBackend::from_jsonl(text);
    CHECK(mock.finetune("m0", std::vector<TrainingPair>{{"a", "b", "c"}}, json::object(), {}) == "m9");
    CHECK_THROWS_AS(MockBackend::from_jsonl("{\"model\":\"m\"}\n"), ConfigError);
}

TEST_CASE("mock validates scripted distributions") {
    MockBackend bad({{"m0", RequestKind::next_token, std::nullopt, false,
                      {{"tokens", {"</s>", "x"}}, {"probs", {0.5, 0.6}}, {"eos_index", 0}}}});
    CHECK_THROWS_AS(bad.next_token_distribution("m0", ""), ProtocolError);
}

TEST_CASE("uniform labels with zero EOS never trigger the choice probe") {
    MockBackend mock({{"m0", RequestKind::next_token, std::nullopt, true,
                       {{"tokens", {"A", "B", "C", "D", "</s>"}}, {"probs", {0.25, 0.25, 0.25, 0.25, 0.0}}, {"eos_index", 4}}}});
    const std::vector<ChoiceValidationItem> items(5, {"q", {"a", "b", "c", "d"}});
    const auto r = eos_choice_probe(mock, "m0", items, ProbeConfig{});
    CHECK(r.triggered_count == 0);
    CHECK_FALSE(r.aggregate_triggered);
}

TEST_CASE("distribution helpers") {
    NextTokenDistribution d;
    d.tokens = {"</s>", "a"};
    d.probs = {0.25, 0.75};
    d.eos_index = 0;
    const auto back = distribution_from_json(distribution_to_json(d));
    CHECK(back.tokens == d.tokens);
    CHECK(back.probs == d.probs);
    CHECK(back.eos_probability() == 0.25);
    CHECK(back.probability_of("a") == 0.75);
    CHECK_FALSE(back.probability_of("b"));

    NextTokenDistribution no_eos;
    no_eos.tokens = {"a"};
    no_eos.probs = {1.0};
    CHECK_THROWS_AS(no_eos.eos_probability(), CapabilityError);

    NextTokenDistribution top;
    top.tokens = {"</s>", "a"};
    top.probs = {0.2, 0.3};
    top.remainder = 0.5;
    top.truncated = true;
    CHECK_NOTHROW(top.validate());
    top.remainder = 0.4;
    CHECK_THROWS_AS(top.validate(), ProtocolError);
}

TEST_CASE("sampling config validation") {
    SamplingConfig s;
    CHECK(s.temperature == 0.7);
    CHECK(s.top_p == 0.95);
    CHECK(s.max_new_tokens == 512);
    CHECK_NOTHROW(s.validate());
    s.temperature = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = {};
    s.top_p = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.top_p = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = {};
    s.max_new_tokens = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    SamplingConfig round;
    round.seed = 44;
    CHECK(SamplingConfig::from_json(round.to_json()).seed == 44);
    const auto ft = default_finetune_config();
    CHECK(ft.at("r") == 64);
    CHECK(ft.at("alpha") == 16);
    CHECK(ft.at("max_seq_len") == 512);
    CHECK(ft.at("max_lr").get<double>() == 1e-4);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "criticgate/gate.hpp"
#include "criticgate/tokenizer.hpp"

using namespace criticgate;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

const std::set<TokenId> kVerdicts{Tokenizer::kPass, Tokenizer::kFail};

std::vector<double> random_logits(std::mt19937_64& rng, double spread = 10.0) {
    std::uniform_real_distribution<double> d(-spread, spread);
    std::vector<double> z(Tokenizer::kVocabSize);
    for (double& v : z) v = d(rng);
    return z;
}

EvidenceSet one_doc_set(const std::string& text) {
    EvidenceSet s;
    s.push({"d0", text, Provenance::retrieved});
    return s;
}

}  // namespace

TEST_CASE("mask admits exactly the two allowed ids") {
    const LogitMask mask = build_logit_mask(260, {256, 257});
    int zeros = 0, minus_inf = 0;
    for (int v = 0; v < 260; ++v) {
        if (mask.entries[v] == 0.0) ++zeros;
        else if (mask.entries[v] == -kInf) ++minus_inf;
    }
    CHECK(zeros == 2);
    CHECK(minus_inf == 258);
    CHECK(mask.entries[256] == 0.0);
    CHECK(mask.entries[257] == 0.0);
}

TEST_CASE("mask construction rejects bad allowed sets") {
    // {256, 256} collapses to one element: not a binary verdict set.
    CHECK_THROWS_AS(build_logit_mask(260, std::set<TokenId>{256, 256}), std::invalid_argument);
    CHECK_THROWS_AS(build_logit_mask(260, {256, 999}), std::out_of_range);
    CHECK_THROWS_AS(build_logit_mask(260, {10, 20, 30}), std::invalid_argument);
}

TEST_CASE("two-term softmax: e^2/(1+e^2) reference point") {
    const LogitMask mask = build_logit_mask(260, kVerdicts);
    std::mt19937_64 rng(1);
    std::vector<double> z = random_logits(rng);  // others arbitrary
    z[Tokenizer::kPass] = 2.0;
    z[Tokenizer::kFail] = 0.0;
    const auto [p_pass, p_fail] = constrained_distribution(z, mask);
    CHECK(p_pass == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(p_fail == doctest::Approx(0.1192).epsilon(1e-4));
    CHECK(p_pass + p_fail == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("equal verdict logits split mass evenly") {
    const LogitMask mask = build_logit_mask(260, kVerdicts);
    std::vector<double> z(260, -3.7);
    const auto [p_pass, p_fail] = constrained_distribution(z, mask);
    CHECK(p_pass == 0.5);
    CHECK(p_fail == 0.5);
}

TEST_CASE("uniform logit shift leaves the distribution unchanged") {
    const LogitMask mask = build_logit_mask(260, kVerdicts);
    std::mt19937_64 rng(2);
    std::vector<double> z = random_logits(rng);
    const auto base = constrained_distribution(z, mask);
    for (double& v : z) v += 100.0;
    const auto shifted = constrained_distribution(z, mask);
    CHECK(shifted.first == doctest::Approx(base.first).epsilon(1e-12));
    CHECK(shifted.second == doctest::Approx(base.second).epsilon(1e-12));
}

TEST_CASE("mass confinement over 10k random vectors") {
    const LogitMask mask = build_logit_mask(260, kVerdicts);
    std::mt19937_64 rng(7);
    for (int i = 0; i < 10000; ++i) {
        const std::vector<double> z = random_logits(rng, 30.0);
        const auto [p_pass, p_fail] = constrained_distribution(z, mask);
        CHECK(p_pass >= 0.0);
        CHECK(p_fail >= 0.0);
        // Disallowed ids receive exactly zero by construction: the pair is
        // the entire support. Normalization within 1e-9:
        REQUIRE(std::abs(p_pass + p_fail - 1.0) <= 1e-9);
    }
}

TEST_CASE("non-finite allowed logits are rejected") {
    const LogitMask mask = build_logit_mask(260, kVerdicts);
    std::vector<double> z(260, 0.0);
    z[Tokenizer::kPass] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(constrained_distribution(z, mask), std::invalid_argument);
    z[Tokenizer::kPass] = kInf;
    CHECK_THROWS_AS(constrained_distribution(z, mask), std::invalid_argument);
    // Non-finite garbage at masked positions must NOT matter.
    z[Tokenizer::kPass] = 1.0;
    z[0] = kInf;
    const auto [p_pass, p_fail] = constrained_distribution(z, mask);
    CHECK(p_pass + p_fail == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("length mismatch between logits and mask is an error") {
    const LogitMask mask = build_logit_mask(260, kVerdicts);
    CHECK_THROWS_AS(constrained_distribution(std::vector<double>(100, 0.0), mask),
                    std::invalid_argument);
}

TEST_CASE("decide: structural contract on a real model") {
    const CriticModel m = build_model(ModelConfig{});
    const Query q{"q0", "Kavo Bridge was built in __?", std::nullopt};
    const EvidenceSet d = one_doc_set("Kavo Bridge was built in 1921.");
    const RoutingDecision r = decide(q, d, m);
    CHECK(r.decode_steps == 1);
    CHECK(r.p_pass + r.p_fail == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(r.critic_latency_ms > 0.0);
    const bool pass_means_higher =
        (r.action == RoutingAction::Pass) == (r.p_pass > r.p_fail);
    CHECK(pass_means_higher);
    // Deterministic (timing aside) on repeat.
    const RoutingDecision r2 = decide(q, d, m);
    CHECK(r2.action == r.action);
    CHECK(r2.p_pass == r.p_pass);
}

TEST_CASE("decide: exact tie falls back") {
    // Zero unembedding => all logits identical => exact tie.
    CriticModel m = build_model(ModelConfig{});
    m.unemb.fill(0.0);
    const Query q{"q0", "Kavo Bridge was built in __?", std::nullopt};
    const RoutingDecision r = decide(q, one_doc_set("Kavo Bridge was built in 1921."), m);
    CHECK(r.p_pass == 0.5);
    CHECK(r.action == RoutingAction::Fallback);
}

TEST_CASE("decide: context overflow carries token counts") {
    ModelConfig cfg;
    cfg.max_ctx = 32;
    const CriticModel m = build_model(cfg);
    const Query q{"q0", "Kavo Bridge was built in __?", std::nullopt};
    try {
        decide(q, one_doc_set("Kavo Bridge was built in 1921."), m);
        FAIL("expected overflow");
    } catch (const SequenceTooLongError& e) {
        CHECK(e.required > 32);
        CHECK(e.available == 32);
    }
}

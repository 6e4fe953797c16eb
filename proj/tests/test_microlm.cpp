#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "criticgate/checkpoint.hpp"
#include "criticgate/model.hpp"
#include "criticgate/tokenizer.hpp"
#include "criticgate/train.hpp"

using namespace criticgate;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_ctx = 64;
    cfg.lora_rank = 4;
    cfg.lora_alpha = 8.0;
    return cfg;
}

std::vector<TokenId> sample_tokens(int n, uint64_t seed = 5) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> byte(32, 126);
    std::vector<TokenId> out;
    for (int i = 0; i < n; ++i) out.push_back(byte(rng));
    return out;
}

// Give the adapters nonzero content so the side path actually fires.
void randomize_adapters(CriticModel& m, uint64_t seed, double stddev = 0.05) {
    std::mt19937_64 rng(seed);
    for (auto* p : adapter_param_ptrs(m)) p->fill_normal(rng, stddev);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double mx = 0.0;
    for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
    return mx;
}

std::vector<TrainExample> toy_trainset() {
    // Learnable toy rule: inputs containing 'x' are fail, 'o' are pass.
    std::vector<TrainExample> out;
    for (int i = 0; i < 12; ++i) {
        const bool pass = i % 2 == 0;
        std::string text = "sample " + std::to_string(i) + (pass ? " oooo" : " xxxx");
        out.push_back({Tokenizer::encode(text), pass ? Tokenizer::kPass : Tokenizer::kFail});
    }
    return out;
}

}  // namespace

TEST_CASE("tokenizer round-trips byte strings with stable special ids") {
    const std::string text = "query: Kavo Bridge was built in __?\nverdict:";
    CHECK(Tokenizer::decode(Tokenizer::encode(text)) == text);
    CHECK(Tokenizer::kVocabSize == 260);
    CHECK(Tokenizer::kPad == 256);
    CHECK(Tokenizer::kSep == 257);
    CHECK(Tokenizer::kPass == 258);
    CHECK(Tokenizer::kFail == 259);
    CHECK(Tokenizer::special_name(Tokenizer::kPass) == std::string("T_PASS"));
    // Byte 0xFF must not sign-extend into a bogus id.
    CHECK(Tokenizer::encode("\xff")[0] == 255);
}

TEST_CASE("forward_prefill shape, counter, determinism") {
    const CriticModel m = build_model(tiny_config());
    const auto tokens = sample_tokens(17);
    const PrefillResult r1 = forward_prefill(m, tokens);
    CHECK(r1.logits.size() == 260);
    CHECK(r1.tokens_processed == 17);

    const PrefillResult r2 = forward_prefill(m, tokens);
    CHECK(r1.logits == r2.logits);  // bitwise

    ModelConfig big = tiny_config();
    big.max_ctx = 256;
    const CriticModel m2 = build_model(big);
    CHECK(forward_prefill(m2, sample_tokens(128)).tokens_processed == 128);
}

TEST_CASE("forward_prefill rejects overlong and empty input") {
    const CriticModel m = build_model(tiny_config());
    try {
        forward_prefill(m, sample_tokens(65));
        FAIL("expected length error");
    } catch (const SequenceTooLongError& e) {
        CHECK(e.required == 65);
        CHECK(e.available == 64);
    }
    CHECK_THROWS_AS(forward_prefill(m, std::vector<TokenId>{}), std::invalid_argument);
}

TEST_CASE("merge_adapter zero-B is the identity on W0") {
    std::mt19937_64 rng(3);
    Matrix w0(6, 6);
    w0.fill_normal(rng, 1.0);
    LoraAdapter ad;
    ad.rank = 2;
    ad.alpha = 4.0;
    ad.B = Matrix(6, 2);
    ad.A = Matrix(2, 6);
    ad.A.fill_normal(rng, 1.0);
    const Matrix merged = merge_adapter(w0, ad);
    CHECK(merged.data == w0.data);  // exact, not approximate
}

TEST_CASE("merge_adapter hand-computed rank-1 update") {
    // d=m=2, r=1, alpha=2 => scale 2; B=[1,0]^T, A=[1,0] => dW=[[2,0],[0,0]].
    Matrix w0(2, 2);
    w0.at(0, 0) = 0.5;
    w0.at(1, 1) = -1.0;
    LoraAdapter ad;
    ad.rank = 1;
    ad.alpha = 2.0;
    ad.B = Matrix(2, 1);
    ad.B.at(0, 0) = 1.0;
    ad.A = Matrix(1, 2);
    ad.A.at(0, 0) = 1.0;
    const Matrix merged = merge_adapter(w0, ad);
    CHECK(merged.at(0, 0) == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(merged.at(0, 1) == 0.0);
    CHECK(merged.at(1, 0) == 0.0);
    CHECK(merged.at(1, 1) == -1.0);

    LoraAdapter bad = ad;
    bad.A = Matrix(1, 3);
    CHECK_THROWS_AS(merge_adapter(w0, bad), std::invalid_argument);
}

TEST_CASE("zero-init adapters are an exact no-op on the forward pass") {
    const CriticModel m = build_model(tiny_config());
    const CriticModel bare = merge_all_adapters(m);  // dW = 0, side path dropped
    const auto tokens = sample_tokens(21);
    const auto la = forward_prefill(m, tokens).logits;
    const auto lb = forward_prefill(bare, tokens).logits;
    CHECK(max_abs_diff(la, lb) <= 1e-9);
}

TEST_CASE("merged weights match the adapter side path") {
    CriticModel m = build_model(tiny_config());
    randomize_adapters(m, 11);
    const CriticModel merged = merge_all_adapters(m);
    for (uint64_t s = 0; s < 5; ++s) {
        const auto tokens = sample_tokens(16 + 3 * static_cast<int>(s), 100 + s);
        const auto la = forward_prefill(m, tokens).logits;
        const auto lb = forward_prefill(merged, tokens).logits;
        CHECK(max_abs_diff(la, lb) <= 1e-6);
    }
}

TEST_CASE("final-position softmax normalizes within 1e-9") {
    CriticModel m = build_model(tiny_config());
    randomize_adapters(m, 13);
    const auto logits = forward_prefill(m, sample_tokens(30)).logits;
    double mx = logits[0];
    for (double z : logits) mx = std::max(mx, z);
    double zsum = 0.0;
    for (double z : logits) zsum += std::exp(z - mx);
    double psum = 0.0;
    for (double z : logits) psum += std::exp(z - mx) / zsum;
    CHECK(psum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("uniform logits give per-example loss ln(260)") {
    CriticModel m = build_model(tiny_config());
    m.unemb.fill(0.0);  // all logits 0 => uniform distribution
    const TrainExample ex{sample_tokens(10), Tokenizer::kPass};
    const BatchLoss l = final_token_loss(m, {ex});
    CHECK(l.mean == doctest::Approx(std::log(260.0)).epsilon(1e-12));
    CHECK(l.mean == doctest::Approx(5.5607).epsilon(1e-4));
}

TEST_CASE("batch loss is the sum of per-example losses; mean for the optimizer") {
    CriticModel m = build_model(tiny_config());
    randomize_adapters(m, 17);
    const TrainExample a{sample_tokens(12, 1), Tokenizer::kPass};
    const TrainExample b{sample_tokens(19, 2), Tokenizer::kFail};
    const double la = final_token_loss(m, {a}).sum;
    const double lb = final_token_loss(m, {b}).sum;
    const BatchLoss both = final_token_loss(m, {a, b});
    CHECK(both.n == 2);
    CHECK(both.sum == doctest::Approx(la + lb).epsilon(1e-12));
    CHECK(both.mean == doctest::Approx((la + lb) / 2.0).epsilon(1e-12));
}

TEST_CASE("loss vanishes when the label dominates the logits") {
    CriticModel m = build_model(tiny_config());
    // Point the unembedding so the label row dwarfs everything else.
    m.unemb.fill(0.0);
    const auto tokens = sample_tokens(8);
    ForwardCache cache;
    forward_prefill(m, tokens, &cache);
    for (int i = 0; i < m.cfg.d_model; ++i)
        m.unemb.at(Tokenizer::kPass, i) = 50.0 * cache.lnf_xhat[i];
    const BatchLoss l = final_token_loss(m, {{tokens, Tokenizer::kPass}});
    CHECK(l.mean < 1e-3);
}

TEST_CASE("loss rejects empty batches and non-verdict labels") {
    CriticModel m = build_model(tiny_config());
    CHECK_THROWS_AS(final_token_loss(m, {}), std::invalid_argument);
    CHECK_THROWS_AS(final_token_loss(m, {{sample_tokens(5), Tokenizer::kSep}}),
                    std::invalid_argument);
}

TEST_CASE("gradients are central-difference accurate on the default micro config") {
    CriticModel m = build_model(ModelConfig{});
    const TrainExample ex{Tokenizer::encode("query: Kavo Bridge was built in __?\nverdict:"),
                          Tokenizer::kFail};
    const GradCheckResult r = finite_difference_check(m, ex, 1e-5);
    CHECK(r.params_checked >= 200);
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("finite_difference_check enforces its epsilon range") {
    CriticModel m = build_model(tiny_config());
    const TrainExample ex{sample_tokens(6), Tokenizer::kPass};
    CHECK_THROWS_AS(finite_difference_check(m, ex, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(finite_difference_check(m, ex, 1e-2), std::invalid_argument);
}

TEST_CASE("one optimizer step on the checked batch decreases the loss") {
    CriticModel m = build_model(tiny_config());
    randomize_adapters(m, 23);
    std::vector<TrainExample> batch = toy_trainset();
    AdapterGrads grads = AdapterGrads::zeros_like(m);
    ForwardCache cache;
    const BatchLoss before = final_token_loss(m, batch, &grads, &cache);
    grads.scale(1.0 / batch.size());
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    AdamW opt(m, tc);
    opt.step(grads);
    const BatchLoss after = final_token_loss(m, batch);
    CHECK(after.mean < before.mean);
}

TEST_CASE("training: frozen base, epoch history, loss trend, determinism") {
    TrainConfig tc;
    tc.epochs = 6;
    tc.learning_rate = 3e-3;
    tc.batch_size = 4;

    CriticModel m1 = build_model(tiny_config());
    const CriticModel pristine = m1;
    const auto trainset = toy_trainset();
    const TrainHistory h = train(m1, trainset, tc);

    CHECK(h.epoch_mean_loss.size() == 6);
    CHECK(h.epoch_mean_loss.back() < h.epoch_mean_loss.front());
    CHECK(h.warnings.empty());

    // Base weights bit-identical; adapters actually moved.
    for (size_t l = 0; l < m1.layers.size(); ++l) {
        CHECK(m1.layers[l].wq.data == pristine.layers[l].wq.data);
        CHECK(m1.layers[l].wk.data == pristine.layers[l].wk.data);
        CHECK(m1.layers[l].wv.data == pristine.layers[l].wv.data);
        CHECK(m1.layers[l].wo.data == pristine.layers[l].wo.data);
        CHECK(m1.layers[l].w1.data == pristine.layers[l].w1.data);
        CHECK(m1.layers[l].w2.data == pristine.layers[l].w2.data);
    }
    CHECK(m1.tok_emb.data == pristine.tok_emb.data);
    CHECK(m1.unemb.data == pristine.unemb.data);
    CHECK(m1.adapters[0].q.B.data != pristine.adapters[0].q.B.data);

    CriticModel m2 = build_model(tiny_config());
    train(m2, trainset, tc);
    const auto p1 = adapter_param_ptrs(m1);
    const auto p2 = adapter_param_ptrs(m2);
    for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->data == p2[i]->data);
}

TEST_CASE("single-class trainset trains but records a warning") {
    TrainConfig tc;
    tc.epochs = 2;
    CriticModel m = build_model(tiny_config());
    std::vector<TrainExample> one_class;
    for (int i = 0; i < 6; ++i)
        one_class.push_back({sample_tokens(10, i), Tokenizer::kPass});
    const TrainHistory h = train(m, one_class, tc);
    CHECK(h.epoch_mean_loss.size() == 2);
    REQUIRE(!h.warnings.empty());
    CHECK(h.warnings.front().find("class") != std::string::npos);
}

TEST_CASE("train validates its inputs") {
    CriticModel m = build_model(tiny_config());
    TrainConfig tc;
    CHECK_THROWS_AS(train(m, {}, tc), std::invalid_argument);
    tc.epochs = 0;
    CHECK_THROWS_AS(train(m, toy_trainset(), tc), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip is bitwise stable and preserves predictions") {
    const fs::path dir = fs::temp_directory_path() / "cg_ckpt_test";
    fs::create_directories(dir);
    CriticModel m = build_model(tiny_config());
    randomize_adapters(m, 31);

    const std::string p1 = (dir / "a").string();
    const std::string p2 = (dir / "b").string();
    save_checkpoint(m, p1);
    CriticModel loaded = load_checkpoint(p1);
    CHECK(loaded.cfg == m.cfg);
    save_checkpoint(loaded, p2);

    // float32 quantization happens once: save(load(save(m))) == save(m).
    std::ifstream b1(p1 + ".bin", std::ios::binary), b2(p2 + ".bin", std::ios::binary);
    const std::string blob1((std::istreambuf_iterator<char>(b1)), {});
    const std::string blob2((std::istreambuf_iterator<char>(b2)), {});
    CHECK(blob1 == blob2);
    CHECK(!blob1.empty());

    const auto tokens = sample_tokens(25);
    const auto la = forward_prefill(m, tokens).logits;
    const auto lb = forward_prefill(loaded, tokens).logits;
    // Predictions survive the float32 round-trip even though logits move a little.
    CHECK(max_abs_diff(la, lb) < 1e-3);
    CHECK(std::distance(la.begin(), std::max_element(la.begin(), la.end())) ==
          std::distance(lb.begin(), std::max_element(lb.begin(), lb.end())));
    fs::remove_all(dir);
}

TEST_CASE("checkpoint integrity failures are distinct error types") {
    const fs::path dir = fs::temp_directory_path() / "cg_ckpt_err";
    fs::create_directories(dir);
    const CriticModel m = build_model(tiny_config());
    const std::string p = (dir / "m").string();
    save_checkpoint(m, p);

    SUBCASE("flipped tensor byte -> checksum error") {
        std::fstream f(p + ".bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        char c;
        f.seekg(100);
        f.get(c);
        f.seekp(100);
        f.put(static_cast<char>(c ^ 0x40));
        f.close();
        CHECK_THROWS_AS(load_checkpoint(p), CheckpointChecksumError);
    }
    SUBCASE("truncated blob -> truncation error") {
        fs::resize_file(p + ".bin", fs::file_size(p + ".bin") / 2);
        CHECK_THROWS_AS(load_checkpoint(p), CheckpointTruncatedError);
    }
    SUBCASE("future format_version -> version error") {
        std::ifstream in(p + ".json");
        std::string manifest((std::istreambuf_iterator<char>(in)), {});
        in.close();
        const std::string needle = "\"format_version\": 1";
        const auto pos = manifest.find(needle);
        REQUIRE(pos != std::string::npos);
        manifest.replace(pos, needle.size(), "\"format_version\": 2");
        std::ofstream(p + ".json") << manifest;
        CHECK_THROWS_AS(load_checkpoint(p), CheckpointVersionError);
    }
    SUBCASE("missing file -> generic checkpoint error") {
        CHECK_THROWS_AS(load_checkpoint((dir / "nope").string()), CheckpointError);
    }
    fs::remove_all(dir);
}

TEST_CASE("model config validation") {
    ModelConfig bad = tiny_config();
    bad.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(build_model(bad), std::invalid_argument);
    bad = tiny_config();
    bad.lora_rank = 0;
    CHECK_THROWS_AS(build_model(bad), std::invalid_argument);
}

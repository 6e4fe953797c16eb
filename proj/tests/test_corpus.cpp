#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "criticgate/corpus.hpp"

using namespace criticgate;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

CorpusSpec small_spec(int n = 120, uint64_t seed = 7) {
    CorpusSpec s;
    s.n_facts = n;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("corpus generation is deterministic with one doc and query per fact") {
    const Corpus a = generate_corpus(small_spec(200));
    const Corpus b = generate_corpus(small_spec(200));
    CHECK(a.facts.size() == 200);
    CHECK(a.gold_docs.size() == 200);
    CHECK(a.queries.size() == 200);
    for (size_t i = 0; i < a.facts.size(); ++i) {
        CHECK(a.facts[i].subject == b.facts[i].subject);
        CHECK(a.gold_docs[i].text == b.gold_docs[i].text);
        CHECK(a.queries[i].text == b.queries[i].text);
        CHECK(a.gold_docs[i].provenance == Provenance::gold);
        REQUIRE(a.queries[i].gold_entity.has_value());
        CHECK(*a.queries[i].gold_entity == a.facts[i].object.text);
        // The doc states the fact; the query blanks the object.
        CHECK(a.gold_docs[i].text.find(a.facts[i].subject) == 0);
        CHECK(a.gold_docs[i].text.find(a.facts[i].object.text) != std::string::npos);
        CHECK(a.queries[i].text.find("__?") != std::string::npos);
    }
    // (subject, relation) unique per corpus.
    std::set<std::string> keys;
    for (const auto& f : a.facts) keys.insert(f.subject + "|" + f.relation);
    CHECK(keys.size() == a.facts.size());
}

TEST_CASE("different seeds give different corpora") {
    const Corpus a = generate_corpus(small_spec(50, 7));
    const Corpus b = generate_corpus(small_spec(50, 8));
    int same = 0;
    for (size_t i = 0; i < a.facts.size(); ++i)
        if (a.facts[i].subject == b.facts[i].subject) ++same;
    CHECK(same < 10);
}

TEST_CASE("corpus too small for the rank window is rejected") {
    CHECK_THROWS_AS(generate_corpus(small_spec(15)), std::invalid_argument);
}

TEST_CASE("hard negatives occupy ranks [10,20] under a brute-force oracle") {
    const Corpus corpus = generate_corpus(small_spec(150));
    const TfIdfIndex index(corpus.gold_docs);
    for (int qi : {0, 17, 93}) {
        const Query& q = corpus.queries[qi];
        const auto negs = mine_hard_negatives(q, corpus, index, 10, 20);
        CHECK(!negs.empty());

        // Independent oracle: rank every doc by (similarity desc, id asc).
        const std::vector<double> sims = index.similarities(q.text);
        std::vector<int> order(corpus.gold_docs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (sims[a] != sims[b]) return sims[a] > sims[b];
            return corpus.gold_docs[a].id < corpus.gold_docs[b].id;
        });
        std::map<std::string, int> rank_of;  // 1-based
        for (size_t r = 0; r < order.size(); ++r)
            rank_of[corpus.gold_docs[order[r]].id] = static_cast<int>(r) + 1;

        for (const auto& d : negs) {
            CHECK(d.provenance == Provenance::hard_negative);
            CHECK(d.id != corpus.gold_docs[qi].id);  // gold never returned
            const int r = rank_of.at(d.id);
            CHECK(r >= 10);
            CHECK(r <= 20);
        }
    }
}

TEST_CASE("mine_hard_negatives rejects a corpus smaller than the window") {
    const Corpus corpus = generate_corpus(small_spec(30));
    const TfIdfIndex index(corpus.gold_docs);
    // 12-doc view with hi=20 cannot satisfy the window.
    Corpus tiny = corpus;
    tiny.facts.resize(12);
    tiny.gold_docs.resize(12);
    tiny.queries.resize(12);
    const TfIdfIndex tiny_index(tiny.gold_docs);
    CHECK_THROWS_AS(mine_hard_negatives(tiny.queries[0], tiny, tiny_index, 10, 20),
                    std::invalid_argument);
}

TEST_CASE("falsify_entity swaps the object, preserves kind, and is seeded") {
    const Corpus corpus = generate_corpus(small_spec(60));
    for (int i : {0, 1, 2, 10, 25}) {
        const EvidenceDoc alt = falsify_entity(corpus.gold_docs[i], corpus.facts[i], 99);
        CHECK(alt.provenance == Provenance::conflicting_distractor);
        CHECK(alt.id != corpus.gold_docs[i].id);
        CHECK(alt.text != corpus.gold_docs[i].text);
        CHECK(alt.text.find(corpus.facts[i].object.text) == std::string::npos);
        // Replacement drawn from the same entity pool.
        const auto& pool = entity_pool(corpus.facts[i].object.kind);
        bool found = false;
        for (const auto& e : pool)
            if (e != corpus.facts[i].object.text && alt.text.find(e) != std::string::npos)
                found = true;
        CHECK(found);
        const EvidenceDoc again = falsify_entity(corpus.gold_docs[i], corpus.facts[i], 99);
        CHECK(again.text == alt.text);
        const EvidenceDoc other = falsify_entity(corpus.gold_docs[i], corpus.facts[i], 100);
        CHECK(other.text != alt.text);  // overwhelmingly likely under a new seed
    }
}

TEST_CASE("falsify_entity requires the object to be present") {
    EvidenceDoc doc{"d0", "Totally unrelated sentence.", Provenance::gold};
    Fact fact{"Kavo Bridge", "was built in", {"1921", EntityKind::date}};
    CHECK_THROWS_AS(falsify_entity(doc, fact, 1), std::invalid_argument);
}

TEST_CASE("noise injection hits floor(rho*n) exactly with an even type split") {
    auto count_kinds = [](const std::vector<RetrievalSet>& sets) {
        std::map<SetKind, int> c;
        for (const auto& s : sets) ++c[s.kind];
        return c;
    };

    SUBCASE("100 queries at rho=0.45 -> exactly 45 adversarial") {
        const Corpus corpus = generate_corpus(small_spec(100));
        const auto sets = assemble_retrieval_sets(corpus);
        REQUIRE(sets.size() == 100);
        auto c = count_kinds(sets);
        CHECK(c[SetKind::clean] == 55);
        // 45 adversarial: 22 hard-negative, 23 distractor (odd one there).
        CHECK(c[SetKind::hard_negative] == 22);
        CHECK(c[SetKind::conflicting_distractor] == 23);
    }
    SUBCASE("rho=0 -> all clean, all T_PASS") {
        CorpusSpec s = small_spec(60);
        s.rho = 0.0;
        const auto sets = assemble_retrieval_sets(generate_corpus(s));
        for (const auto& set : sets) {
            CHECK(set.kind == SetKind::clean);
            CHECK(set.label == Tokenizer::kPass);
        }
    }
    SUBCASE("rho=1 -> no clean sets") {
        CorpusSpec s = small_spec(60);
        s.rho = 1.0;
        const auto sets = assemble_retrieval_sets(generate_corpus(s));
        for (const auto& set : sets) {
            CHECK(set.kind != SetKind::clean);
            CHECK(set.label == Tokenizer::kFail);
        }
    }
    SUBCASE("floor rule across odd products") {
        CorpusSpec s = small_spec(101);  // 101 * 0.45 = 45.45 -> 45
        const auto sets = assemble_retrieval_sets(generate_corpus(s));
        auto c = count_kinds(sets);
        CHECK(c[SetKind::hard_negative] + c[SetKind::conflicting_distractor] == 45);
    }
}

TEST_CASE("set composition matches its kind label") {
    const Corpus corpus = generate_corpus(small_spec(150));
    const auto sets = assemble_retrieval_sets(corpus);
    std::map<std::string, int> qindex;
    for (size_t i = 0; i < corpus.queries.size(); ++i) qindex[corpus.queries[i].id] = i;

    for (const auto& s : sets) {
        CHECK(s.docs.k() == corpus.spec.k);
        const int qi = qindex.at(s.query.id);
        const EvidenceDoc& gold = corpus.gold_docs[qi];
        const bool has_gold = s.docs.contains_id(gold.id);

        if (s.kind == SetKind::clean) {
            CHECK(s.label == Tokenizer::kPass);
            CHECK(has_gold);
        } else if (s.kind == SetKind::hard_negative) {
            CHECK(s.label == Tokenizer::kFail);
            CHECK(!has_gold);  // "lacking factual grounding"
        } else {
            CHECK(s.label == Tokenizer::kFail);
            // A falsified copy of the gold statement is present, directly
            // followed by the unmodified gold doc: the set contradicts
            // itself, and the falsified version shadows gold for any
            // first-match reader.
            int alt_pos = -1, gold_pos = -1;
            for (int i = 0; i < s.docs.k(); ++i) {
                if (s.docs.docs[i].provenance == Provenance::conflicting_distractor)
                    alt_pos = i;
                if (s.docs.docs[i].id == gold.id) gold_pos = i;
            }
            REQUIRE(alt_pos >= 0);
            REQUIRE(gold_pos >= 0);
            CHECK(gold_pos == alt_pos + 1);
            CHECK(s.docs.docs[alt_pos].text != gold.text);
        }
    }
}

TEST_CASE("critic input template is byte-exact") {
    Query q{"q0", "Kavo Bridge was built in __?", std::nullopt};
    EvidenceSet d;
    d.push({"a", "First doc.", Provenance::retrieved});
    d.push({"b", "Second doc.", Provenance::retrieved});
    CHECK(format_critic_input(q, d) ==
          "query: Kavo Bridge was built in __?\n"
          "[doc 1] First doc.\n"
          "[doc 2] Second doc.\n"
          "verdict:");
    CHECK(format_critic_input(q, EvidenceSet{}) ==
          "query: Kavo Bridge was built in __?\nverdict:");
    CHECK(format_critic_input(q, d) == format_critic_input(q, d));
}

TEST_CASE("trainset labels follow set kinds") {
    const Corpus corpus = generate_corpus(small_spec(80));
    const auto sets = assemble_retrieval_sets(corpus);
    const auto examples = build_trainset(sets);
    REQUIRE(examples.size() == sets.size());
    for (size_t i = 0; i < examples.size(); ++i) {
        CHECK(examples[i].x == format_critic_input(sets[i].query, sets[i].docs));
        CHECK((examples[i].label == Tokenizer::kPass) == (examples[i].kind == SetKind::clean));
    }
}

TEST_CASE("jsonl persistence reproduces files byte-for-byte") {
    const fs::path dir = fs::temp_directory_path() / "cg_corpus_test";
    fs::create_directories(dir);
    const Corpus corpus = generate_corpus(small_spec(60));
    const auto sets = assemble_retrieval_sets(corpus);

    const std::string cpath = (dir / "corpus.jsonl").string();
    save_corpus_jsonl(corpus, cpath);
    const Corpus loaded = load_corpus_jsonl(cpath);
    save_corpus_jsonl(loaded, (dir / "corpus2.jsonl").string());
    CHECK(slurp(cpath) == slurp((dir / "corpus2.jsonl").string()));
    CHECK(loaded.spec.seed == corpus.spec.seed);
    CHECK(loaded.facts.size() == corpus.facts.size());

    const std::string spath = (dir / "sets.jsonl").string();
    save_sets_jsonl(sets, spath);
    const auto sets2 = load_sets_jsonl(spath);
    REQUIRE(sets2.size() == sets.size());
    for (size_t i = 0; i < sets.size(); ++i) {
        CHECK(sets2[i].label == sets[i].label);
        CHECK(sets2[i].kind == sets[i].kind);
        CHECK(sets2[i].docs.k() == sets[i].docs.k());
    }
    // Regeneration under the same seed is byte-identical to the saved file.
    save_corpus_jsonl(generate_corpus(small_spec(60)), (dir / "corpus3.jsonl").string());
    CHECK(slurp(cpath) == slurp((dir / "corpus3.jsonl").string()));
    fs::remove_all(dir);
}

TEST_CASE("qa jsonl import maps question/answer/context") {
    const fs::path dir = fs::temp_directory_path() / "cg_import_test";
    fs::create_directories(dir);
    const std::string path = (dir / "qa.jsonl").string();
    std::ofstream(path) << R"({"id":"x1","question":"Who built it?","answer":"Rossi",)"
                        << R"("context":["Rossi built it.","Noise."]})" << "\n";
    const auto imported = import_qa_jsonl(path);
    REQUIRE(imported.size() == 1);
    CHECK(imported[0].query.id == "x1");
    CHECK(imported[0].query.text == "Who built it?");
    REQUIRE(imported[0].query.gold_entity.has_value());
    CHECK(*imported[0].query.gold_entity == "Rossi");
    CHECK(imported[0].docs.k() == 2);
    fs::remove_all(dir);
}

TEST_CASE("cosine similarity sanity on the tf-idf index") {
    const Corpus corpus = generate_corpus(small_spec(40));
    const TfIdfIndex index(corpus.gold_docs);
    const SparseVector v = index.vectorize(corpus.gold_docs[0].text);
    CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-12));
    // A doc is more similar to its own query than an unrelated query is.
    const auto sims = index.similarities(corpus.queries[0].text);
    double max_other = 0.0;
    for (size_t i = 1; i < sims.size(); ++i) max_other = std::max(max_other, sims[i]);
    CHECK(sims[0] > 0.0);
    CHECK(sims[0] > max_other * 0.5);  // own gold doc scores competitively
}

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "criticgate/tokenizer.hpp"
#include "criticgate/types.hpp"

namespace criticgate {

enum class EntityKind { date, location, name };

const char* entity_kind_name(EntityKind k);
EntityKind entity_kind_from_name(const std::string& s);
const std::vector<std::string>& entity_pool(EntityKind k);

struct Entity {
    std::string text;
    EntityKind kind = EntityKind::date;
};

struct Fact {
    std::string subject;
    std::string relation;
    Entity object;
};

struct CorpusSpec {
    int n_facts = 2500;
    uint64_t seed = 7;
    double rho = 0.45;
    int hard_negative_lo = 10;
    int hard_negative_hi = 20;
    int k = 5;

    void validate() const;
};

// Facts, their gold documents, and one query per fact, all parallel.
struct Corpus {
    CorpusSpec spec;
    std::vector<Fact> facts;
    std::vector<EvidenceDoc> gold_docs;
    std::vector<Query> queries;
};

Corpus generate_corpus(const CorpusSpec& spec);

// Character 3-gram TF-IDF with cosine similarity; the deterministic
// stand-in for a dense embedder.
struct SparseVector {
    std::map<uint32_t, double> weights;
};

double cosine(const SparseVector& a, const SparseVector& b);

class TfIdfIndex {
public:
    explicit TfIdfIndex(const std::vector<EvidenceDoc>& docs);
    SparseVector vectorize(const std::string& text) const;
    // Cosine of `text` against every indexed doc, in doc order.
    std::vector<double> similarities(const std::string& text) const;
    int n_docs() const { return static_cast<int>(doc_vecs_.size()); }

private:
    std::map<uint32_t, int> df_;
    int n_ = 0;
    std::vector<SparseVector> doc_vecs_;
};

// Docs at similarity ranks [lo, hi] against q (1-based, descending, ties
// by doc id), excluding q's own gold doc; provenance=hard_negative.
std::vector<EvidenceDoc> mine_hard_negatives(const Query& q, const Corpus& corpus,
                                             const TfIdfIndex& index, int lo, int hi);

// Replaces the fact's object in the doc with a different same-kind entity.
EvidenceDoc falsify_entity(const EvidenceDoc& doc, const Fact& fact, uint64_t seed);

enum class SetKind { clean, hard_negative, conflicting_distractor };
const char* set_kind_name(SetKind k);
SetKind set_kind_from_name(const std::string& s);

struct RetrievalSet {
    Query query;
    EvidenceSet docs;
    TokenId label = Tokenizer::kFail;  // kPass iff clean
    SetKind kind = SetKind::clean;
};

// The noise-injection protocol: exactly floor(rho * n) adversarial sets,
// split evenly between the two contamination types (odd one to the
// distractor side); clean sets contain the gold doc plus benign fillers.
std::vector<RetrievalSet> assemble_retrieval_sets(const Corpus& corpus);

// Exact critic input template:
//   "query: {q.text}\n" + "[doc i] {text}\n" per doc + "verdict:"
std::string format_critic_input(const Query& q, const EvidenceSet& d);

struct LabeledExample {
    std::string x;
    TokenId label = Tokenizer::kFail;
    std::string query_id;
    SetKind kind = SetKind::clean;
};

std::vector<LabeledExample> build_trainset(const std::vector<RetrievalSet>& sets);

// JSONL persistence; regeneration under the same seed is byte-identical.
void save_corpus_jsonl(const Corpus& corpus, const std::string& path);
Corpus load_corpus_jsonl(const std::string& path);
void save_sets_jsonl(const std::vector<RetrievalSet>& sets, const std::string& path);
std::vector<RetrievalSet> load_sets_jsonl(const std::string& path);
void save_trainset_jsonl(const std::vector<LabeledExample>& examples, const std::string& path);
std::vector<LabeledExample> load_trainset_jsonl(const std::string& path);

// Import path for external QA data shaped {id, question, answer, context[]}.
struct ImportedExample {
    Query query;
    EvidenceSet docs;
};
std::vector<ImportedExample> import_qa_jsonl(const std::string& path);

}  // namespace criticgate

#include "criticgate/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace criticgate {

namespace {

using nlohmann::json;

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

const std::vector<std::string> kLocations = {
    "Lyon",   "Oslo",   "Cairo",  "Quito",  "Lagos",  "Hanoi",  "Turin",  "Dakar",
    "Kyoto",  "Porto",  "Bergen", "Tunis",  "Accra",  "Perth",  "Davao",  "Gdansk",
    "Leeds",  "Malmo",  "Basel",  "Varna",  "Arica",  "Kochi",  "Tartu",  "Split",
    "Galway", "Namur",  "Evora",  "Patras", "Liege",  "Brno",   "Graz",   "Pecs",
    "Trier",  "Udine",  "Vigo",   "Zadar",  "Sorel",  "Cusco",  "Nampo",  "Ibarra",
    "Kolda",  "Moroni", "Tacna",  "Sabha",  "Jinja",  "Mopti",  "Rivne",  "Kavala"};

const std::vector<std::string> kNames = {
    "Okafor",  "Jansen",  "Moreau",  "Tanaka",  "Silva",   "Novak",   "Iversen", "Castro",
    "Weber",   "Rossi",   "Haddad",  "Petrov",  "Lindqvist", "Duarte", "Farkas",  "Nilsen",
    "Campos",  "Vargas",  "Keller",  "Bruun",   "Santos",  "Molnar",  "Dubois",  "Sato",
    "Hansen",  "Costa",   "Walsh",   "Ferro",   "Olsen",   "Marino",  "Abara",   "Kovacs",
    "Lemaire", "Nakano",  "Pinto",   "Sorensen", "Gallo",  "Herrera", "Blanc",   "Madsen",
    "Ricci",   "Fonseca", "Larsen",  "Morel",   "Vidal",   "Egede",   "Bakken",  "Amari"};

std::vector<std::string> make_years() {
    std::vector<std::string> out;
    for (int y = 1800; y <= 1999; ++y) out.push_back(std::to_string(y));
    return out;
}

const std::vector<std::string> kSyllables = {
    "ka", "vo", "ri", "ne", "lu", "ta", "mo", "se", "ba", "di", "fu", "ge",
    "hi", "jo", "pa", "we", "zu", "ni", "ro", "my", "an", "el", "or", "iv",
    "ce", "qu", "xa", "yo", "ad", "ek", "ob", "ur", "ig", "ax", "ef", "ib"};

const std::vector<std::string> kStructures = {
    "Bridge", "Tower", "Hall",  "Dam",   "Mill",  "Gate",  "Arch",  "Fort",
    "Quay",   "Spire", "Vault", "Kiln",  "Plaza", "Wharf", "Lodge", "Yard",
    "Crypt",  "Ridge", "Jetty", "Union", "Annex", "Niche", "Obelisk", "Inn"};

struct RelationInfo {
    const char* text;
    EntityKind kind;
};
const RelationInfo kRelations[] = {
    {"was built in", EntityKind::date},
    {"stands in", EntityKind::location},
    {"was designed by", EntityKind::name},
};

std::string make_subject(std::mt19937_64& rng) {
    std::uniform_int_distribution<size_t> syl(0, kSyllables.size() - 1);
    std::uniform_int_distribution<size_t> st(0, kStructures.size() - 1);
    std::string word = kSyllables[syl(rng)] + kSyllables[syl(rng)];
    word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
    return word + " " + kStructures[st(rng)];
}

std::string doc_text(const Fact& f) {
    return f.subject + " " + f.relation + " " + f.object.text + ".";
}

std::string query_text(const Fact& f) { return f.subject + " " + f.relation + " __?"; }

std::string query_id_for(int i) { return "q" + std::to_string(i); }
std::string doc_id_for(int i) { return "d" + std::to_string(i); }

}  // namespace

const char* entity_kind_name(EntityKind k) {
    switch (k) {
        case EntityKind::date: return "date";
        case EntityKind::location: return "location";
        case EntityKind::name: return "name";
    }
    return "?";
}

EntityKind entity_kind_from_name(const std::string& s) {
    if (s == "date") return EntityKind::date;
    if (s == "location") return EntityKind::location;
    if (s == "name") return EntityKind::name;
    throw std::invalid_argument("unknown entity kind: " + s);
}

const std::vector<std::string>& entity_pool(EntityKind k) {
    static const std::vector<std::string> years = make_years();
    switch (k) {
        case EntityKind::date: return years;
        case EntityKind::location: return kLocations;
        case EntityKind::name: return kNames;
    }
    return years;
}

const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::retrieved: return "retrieved";
        case Provenance::fallback: return "fallback";
        case Provenance::hard_negative: return "hard_negative";
        case Provenance::conflicting_distractor: return "conflicting_distractor";
        case Provenance::gold: return "gold";
    }
    return "?";
}

Provenance provenance_from_name(const std::string& s) {
    if (s == "retrieved") return Provenance::retrieved;
    if (s == "fallback") return Provenance::fallback;
    if (s == "hard_negative") return Provenance::hard_negative;
    if (s == "conflicting_distractor") return Provenance::conflicting_distractor;
    if (s == "gold") return Provenance::gold;
    throw std::invalid_argument("unknown provenance: " + s);
}

const char* set_kind_name(SetKind k) {
    switch (k) {
        case SetKind::clean: return "clean";
        case SetKind::hard_negative: return "hard_negative";
        case SetKind::conflicting_distractor: return "conflicting_distractor";
    }
    return "?";
}

SetKind set_kind_from_name(const std::string& s) {
    if (s == "clean") return SetKind::clean;
    if (s == "hard_negative") return SetKind::hard_negative;
    if (s == "conflicting_distractor") return SetKind::conflicting_distractor;
    throw std::invalid_argument("unknown set kind: " + s);
}

void CorpusSpec::validate() const {
    if (n_facts < 1) throw std::invalid_argument("CorpusSpec: n_facts must be >= 1");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("CorpusSpec: rho outside [0,1]");
    if (hard_negative_lo < 1 || hard_negative_hi < hard_negative_lo)
        throw std::invalid_argument("CorpusSpec: bad hard-negative window");
    if (n_facts < hard_negative_hi + 1)
        throw std::invalid_argument("CorpusSpec: n_facts too small for rank window [" +
                                    std::to_string(hard_negative_lo) + "," +
                                    std::to_string(hard_negative_hi) + "]");
    if (k < 1) throw std::invalid_argument("CorpusSpec: k must be >= 1");
}

Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus c;
    c.spec = spec;
    std::mt19937_64 rng(splitmix64(spec.seed));
    std::set<std::pair<std::string, std::string>> seen;
    std::uniform_int_distribution<size_t> rel_pick(0, std::size(kRelations) - 1);

    for (int i = 0; i < spec.n_facts; ++i) {
        Fact f;
        for (;;) {
            const RelationInfo& rel = kRelations[rel_pick(rng)];
            f.subject = make_subject(rng);
            f.relation = rel.text;
            f.object.kind = rel.kind;
            if (seen.emplace(f.subject, f.relation).second) break;
        }
        const auto& pool = entity_pool(f.object.kind);
        std::uniform_int_distribution<size_t> ent(0, pool.size() - 1);
        f.object.text = pool[ent(rng)];

        EvidenceDoc doc{doc_id_for(i), doc_text(f), Provenance::gold};
        Query q{query_id_for(i), query_text(f), f.object.text};
        c.facts.push_back(std::move(f));
        c.gold_docs.push_back(std::move(doc));
        c.queries.push_back(std::move(q));
    }
    return c;
}

double cosine(const SparseVector& a, const SparseVector& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [k, v] : a.weights) na += v * v;
    for (const auto& [k, v] : b.weights) nb += v * v;
    if (na == 0.0 || nb == 0.0) return 0.0;
    const SparseVector& small = a.weights.size() <= b.weights.size() ? a : b;
    const SparseVector& big = a.weights.size() <= b.weights.size() ? b : a;
    for (const auto& [k, v] : small.weights) {
        auto it = big.weights.find(k);
        if (it != big.weights.end()) dot += v * it->second;
    }
    return dot / std::sqrt(na * nb);
}

namespace {
void count_trigrams(const std::string& text, std::map<uint32_t, int>& out) {
    if (text.size() < 3) return;
    for (size_t i = 0; i + 2 < text.size(); ++i) {
        const uint32_t key = (static_cast<uint32_t>(static_cast<unsigned char>(text[i])) << 16) |
                             (static_cast<uint32_t>(static_cast<unsigned char>(text[i + 1])) << 8) |
                             static_cast<uint32_t>(static_cast<unsigned char>(text[i + 2]));
        ++out[key];
    }
}
}  // namespace

TfIdfIndex::TfIdfIndex(const std::vector<EvidenceDoc>& docs) : n_(static_cast<int>(docs.size())) {
    std::vector<std::map<uint32_t, int>> tfs(docs.size());
    for (size_t i = 0; i < docs.size(); ++i) {
        count_trigrams(docs[i].text, tfs[i]);
        for (const auto& [k, v] : tfs[i]) ++df_[k];
    }
    doc_vecs_.resize(docs.size());
    for (size_t i = 0; i < docs.size(); ++i) {
        for (const auto& [k, tf] : tfs[i]) {
            const double idf = std::log((1.0 + n_) / (1.0 + df_.at(k))) + 1.0;
            doc_vecs_[i].weights[k] = tf * idf;
        }
    }
}

SparseVector TfIdfIndex::vectorize(const std::string& text) const {
    std::map<uint32_t, int> tf;
    count_trigrams(text, tf);
    SparseVector v;
    for (const auto& [k, c] : tf) {
        auto it = df_.find(k);
        const int df = it == df_.end() ? 0 : it->second;
        const double idf = std::log((1.0 + n_) / (1.0 + df)) + 1.0;
        v.weights[k] = c * idf;
    }
    return v;
}

std::vector<double> TfIdfIndex::similarities(const std::string& text) const {
    const SparseVector qv = vectorize(text);
    std::vector<double> out(doc_vecs_.size());
    for (size_t i = 0; i < doc_vecs_.size(); ++i) out[i] = cosine(qv, doc_vecs_[i]);
    return out;
}

std::vector<EvidenceDoc> mine_hard_negatives(const Query& q, const Corpus& corpus,
                                             const TfIdfIndex& index, int lo, int hi) {
    const int n = static_cast<int>(corpus.gold_docs.size());
    if (n <= hi)
        throw std::invalid_argument("mine_hard_negatives: corpus of " + std::to_string(n) +
                                    " docs too small for rank window up to " + std::to_string(hi));
    std::vector<double> sims = index.similarities(q.text);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return corpus.gold_docs[a].id < corpus.gold_docs[b].id;
    });

    // q's own gold doc shares the query id suffix by construction.
    std::string gold_id;
    for (size_t i = 0; i < corpus.queries.size(); ++i)
        if (corpus.queries[i].id == q.id) gold_id = corpus.gold_docs[i].id;

    std::vector<EvidenceDoc> out;
    for (int rank = lo; rank <= hi; ++rank) {
        const EvidenceDoc& d = corpus.gold_docs[order[rank - 1]];
        if (d.id == gold_id) continue;
        out.push_back(EvidenceDoc{d.id, d.text, Provenance::hard_negative});
    }
    return out;
}

EvidenceDoc falsify_entity(const EvidenceDoc& doc, const Fact& fact, uint64_t seed) {
    const size_t pos = doc.text.find(fact.object.text);
    if (pos == std::string::npos)
        throw std::invalid_argument("falsify_entity: object '" + fact.object.text +
                                    "' absent from doc " + doc.id);
    const auto& pool = entity_pool(fact.object.kind);
    std::mt19937_64 rng(splitmix64(seed));
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    std::string replacement;
    do {
        replacement = pool[pick(rng)];
    } while (replacement == fact.object.text);

    EvidenceDoc out;
    out.id = doc.id + "#alt";
    out.text = doc.text;
    out.text.replace(pos, fact.object.text.size(), replacement);
    out.provenance = Provenance::conflicting_distractor;
    return out;
}

std::vector<RetrievalSet> assemble_retrieval_sets(const Corpus& corpus) {
    const CorpusSpec& spec = corpus.spec;
    spec.validate();
    const int n = static_cast<int>(corpus.queries.size());
    const int n_adv = static_cast<int>(std::floor(spec.rho * n));
    const int n_hard = n_adv / 2;  // odd remainder goes to the distractor side

    std::mt19937_64 rng(splitmix64(spec.seed ^ 0xA55A5AA5ULL));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<SetKind> kinds(n, SetKind::clean);
    for (int i = 0; i < n_adv; ++i)
        kinds[order[i]] = i < n_hard ? SetKind::hard_negative : SetKind::conflicting_distractor;

    TfIdfIndex index(corpus.gold_docs);

    auto pick_fillers = [&](int self, int count, std::vector<EvidenceDoc>& out) {
        std::uniform_int_distribution<int> pick(0, n - 1);
        std::set<std::string> used{corpus.gold_docs[self].id};
        for (const auto& d : out) used.insert(d.id);
        while (static_cast<int>(out.size()) < count) {
            int j = pick(rng);
            if (!used.insert(corpus.gold_docs[j].id).second) continue;
            out.push_back(
                EvidenceDoc{corpus.gold_docs[j].id, corpus.gold_docs[j].text, Provenance::retrieved});
        }
    };

    std::vector<RetrievalSet> sets;
    sets.reserve(n);
    for (int i = 0; i < n; ++i) {
        RetrievalSet rs;
        rs.query = corpus.queries[i];
        rs.kind = kinds[i];
        rs.label = kinds[i] == SetKind::clean ? Tokenizer::kPass : Tokenizer::kFail;

        std::vector<EvidenceDoc> slots;
        if (kinds[i] == SetKind::clean) {
            slots.push_back(corpus.gold_docs[i]);
            pick_fillers(i, spec.k, slots);
            std::shuffle(slots.begin(), slots.end(), rng);
        } else if (kinds[i] == SetKind::hard_negative) {
            std::vector<EvidenceDoc> cands = mine_hard_negatives(
                rs.query, corpus, index, spec.hard_negative_lo, spec.hard_negative_hi);
            std::shuffle(cands.begin(), cands.end(), rng);
            for (const auto& d : cands) {
                if (static_cast<int>(slots.size()) >= spec.k) break;
                slots.push_back(d);
            }
            // Window smaller than k (non-default configs): pad with fillers.
            if (static_cast<int>(slots.size()) < spec.k) pick_fillers(i, spec.k, slots);
        } else {
            EvidenceDoc distractor =
                falsify_entity(corpus.gold_docs[i], corpus.facts[i], spec.seed ^ (0xD157ULL + i));
            std::vector<EvidenceDoc> fillers;
            if (spec.k > 2) pick_fillers(i, spec.k - 2, fillers);
            // Distractor directly before the gold doc: the distractor is the
            // extractive answer source, the pair is the conflict signal.
            std::uniform_int_distribution<int> pos_pick(0, std::max(0, spec.k - 2));
            const int p = spec.k >= 2 ? pos_pick(rng) : 0;
            int fi = 0;
            for (int s = 0; s < spec.k; ++s) {
                if (s == p) {
                    slots.push_back(distractor);
                } else if (s == p + 1 && spec.k >= 2) {
                    slots.push_back(corpus.gold_docs[i]);
                } else {
                    slots.push_back(fillers[fi++]);
                }
            }
        }
        for (auto& d : slots) rs.docs.push(std::move(d));
        sets.push_back(std::move(rs));
    }
    return sets;
}

std::string format_critic_input(const Query& q, const EvidenceSet& d) {
    std::string out = "query: " + q.text + "\n";
    for (int i = 0; i < d.k(); ++i)
        out += "[doc " + std::to_string(i + 1) + "] " + d.docs[i].text + "\n";
    out += "verdict:";
    return out;
}

std::vector<LabeledExample> build_trainset(const std::vector<RetrievalSet>& sets) {
    std::vector<LabeledExample> out;
    out.reserve(sets.size());
    for (const auto& rs : sets)
        out.push_back(LabeledExample{format_critic_input(rs.query, rs.docs), rs.label,
                                     rs.query.id, rs.kind});
    return out;
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

namespace {
json spec_to_json(const CorpusSpec& s) {
    return json{{"n_facts", s.n_facts},
                {"seed", s.seed},
                {"rho", s.rho},
                {"hard_negative_window", {s.hard_negative_lo, s.hard_negative_hi}},
                {"k", s.k}};
}

CorpusSpec spec_from_json(const json& j) {
    CorpusSpec s;
    s.n_facts = j.at("n_facts").get<int>();
    s.seed = j.at("seed").get<uint64_t>();
    s.rho = j.at("rho").get<double>();
    s.hard_negative_lo = j.at("hard_negative_window")[0].get<int>();
    s.hard_negative_hi = j.at("hard_negative_window")[1].get<int>();
    s.k = j.at("k").get<int>();
    return s;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    return f;
}
}  // namespace

void save_corpus_jsonl(const Corpus& corpus, const std::string& path) {
    auto f = open_out(path);
    f << json{{"kind", "corpus_header"}, {"spec", spec_to_json(corpus.spec)}}.dump() << "\n";
    for (size_t i = 0; i < corpus.facts.size(); ++i) {
        const Fact& fact = corpus.facts[i];
        f << json{{"kind", "fact"},
                  {"subject", fact.subject},
                  {"relation", fact.relation},
                  {"object", fact.object.text},
                  {"object_kind", entity_kind_name(fact.object.kind)},
                  {"doc_id", corpus.gold_docs[i].id},
                  {"doc_text", corpus.gold_docs[i].text},
                  {"query_id", corpus.queries[i].id},
                  {"query_text", corpus.queries[i].text}}
                 .dump()
          << "\n";
    }
}

Corpus load_corpus_jsonl(const std::string& path) {
    auto f = open_in(path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("empty corpus file: " + path);
    json header = json::parse(line);
    if (header.at("kind") != "corpus_header")
        throw std::runtime_error("missing corpus header in " + path);
    Corpus c;
    c.spec = spec_from_json(header.at("spec"));
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        Fact fact;
        fact.subject = j.at("subject").get<std::string>();
        fact.relation = j.at("relation").get<std::string>();
        fact.object.text = j.at("object").get<std::string>();
        fact.object.kind = entity_kind_from_name(j.at("object_kind").get<std::string>());
        c.facts.push_back(fact);
        c.gold_docs.push_back(EvidenceDoc{j.at("doc_id").get<std::string>(),
                                          j.at("doc_text").get<std::string>(), Provenance::gold});
        c.queries.push_back(Query{j.at("query_id").get<std::string>(),
                                  j.at("query_text").get<std::string>(), fact.object.text});
    }
    return c;
}

void save_sets_jsonl(const std::vector<RetrievalSet>& sets, const std::string& path) {
    auto f = open_out(path);
    for (const auto& rs : sets) {
        json docs = json::array();
        for (const auto& d : rs.docs.docs)
            docs.push_back(json{{"id", d.id}, {"text", d.text},
                                {"provenance", provenance_name(d.provenance)}});
        f << json{{"query_id", rs.query.id},
                  {"query_text", rs.query.text},
                  {"gold_entity", rs.query.gold_entity.value_or("")},
                  {"label", rs.label == Tokenizer::kPass ? "pass" : "fail"},
                  {"set_kind", set_kind_name(rs.kind)},
                  {"docs", docs}}
                 .dump()
          << "\n";
    }
}

std::vector<RetrievalSet> load_sets_jsonl(const std::string& path) {
    auto f = open_in(path);
    std::vector<RetrievalSet> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        RetrievalSet rs;
        rs.query.id = j.at("query_id").get<std::string>();
        rs.query.text = j.at("query_text").get<std::string>();
        const std::string gold = j.at("gold_entity").get<std::string>();
        if (!gold.empty()) rs.query.gold_entity = gold;
        rs.label = j.at("label") == "pass" ? Tokenizer::kPass : Tokenizer::kFail;
        rs.kind = set_kind_from_name(j.at("set_kind").get<std::string>());
        for (const auto& dj : j.at("docs"))
            rs.docs.push(EvidenceDoc{dj.at("id").get<std::string>(),
                                     dj.at("text").get<std::string>(),
                                     provenance_from_name(dj.at("provenance").get<std::string>())});
        out.push_back(std::move(rs));
    }
    return out;
}

void save_trainset_jsonl(const std::vector<LabeledExample>& examples, const std::string& path) {
    auto f = open_out(path);
    for (const auto& ex : examples)
        f << json{{"x", ex.x},
                  {"label", ex.label == Tokenizer::kPass ? "pass" : "fail"},
                  {"query_id", ex.query_id},
                  {"set_kind", set_kind_name(ex.kind)}}
                 .dump()
          << "\n";
}

std::vector<LabeledExample> load_trainset_jsonl(const std::string& path) {
    auto f = open_in(path);
    std::vector<LabeledExample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        out.push_back(LabeledExample{
            j.at("x").get<std::string>(),
            j.at("label") == "pass" ? Tokenizer::kPass : Tokenizer::kFail,
            j.at("query_id").get<std::string>(),
            set_kind_from_name(j.at("set_kind").get<std::string>())});
    }
    return out;
}

std::vector<ImportedExample> import_qa_jsonl(const std::string& path) {
    auto f = open_in(path);
    std::vector<ImportedExample> out;
    std::string line;
    int n = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ImportedExample ex;
        ex.query.id = j.at("id").get<std::string>();
        ex.query.text = j.at("question").get<std::string>();
        ex.query.gold_entity = j.at("answer").get<std::string>();
        int c = 0;
        for (const auto& ctx : j.at("context"))
            ex.docs.push(EvidenceDoc{"ctx" + std::to_string(n) + "_" + std::to_string(c++),
                                     ctx.get<std::string>(), Provenance::retrieved});
        out.push_back(std::move(ex));
        ++n;
    }
    return out;
}

}  // namespace criticgate

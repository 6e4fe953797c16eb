#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace criticgate {

struct Query {
    std::string id;
    std::string text;
    std::optional<std::string> gold_entity;  // evaluation-only ground truth
};

enum class Provenance { retrieved, fallback, hard_negative, conflicting_distractor, gold };

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& s);

struct EvidenceDoc {
    std::string id;
    std::string text;
    Provenance provenance = Provenance::retrieved;
};

struct EvidenceSet {
    std::vector<EvidenceDoc> docs;

    int k() const { return static_cast<int>(docs.size()); }
    bool empty() const { return docs.empty(); }
    bool contains_id(const std::string& id) const {
        for (const auto& d : docs)
            if (d.id == id) return true;
        return false;
    }
    void push(EvidenceDoc d) {
        if (contains_id(d.id)) throw std::invalid_argument("EvidenceSet: duplicate doc id " + d.id);
        docs.push_back(std::move(d));
    }
};

enum class RoutingAction { Fallback = 0, Pass = 1 };

inline const char* action_name(RoutingAction a) {
    return a == RoutingAction::Pass ? "pass" : "fallback";
}

struct ToolCallRecord {
    std::string tool_name;
    double duration_ms = 0.0;
    bool ok = false;
    std::string outcome;
};

enum class GeneratorKind { templated_extractive, remote_http };

struct GeneratorBackend {
    GeneratorKind kind = GeneratorKind::templated_extractive;
    std::map<std::string, std::string> config;
};

}  // namespace criticgate

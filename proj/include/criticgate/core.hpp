#pragma once

#include <string>

#include "criticgate/gate.hpp"
#include "criticgate/model.hpp"
#include "criticgate/toolproto.hpp"
#include "criticgate/types.hpp"

namespace criticgate {

inline constexpr const char* kInsufficientEvidence = "INSUFFICIENT_EVIDENCE";

struct AnswerTrace {
    Query query;
    RoutingAction action = RoutingAction::Pass;
    RoutingDecision decision;
    EvidenceSet docs_used;
    std::string answer;
    std::vector<ToolCallRecord> tool_calls;
    bool degraded = false;
    struct {
        double routing_ms = 0.0;
        double generation_ms = 0.0;
        double ttft_ms = 0.0;
    } timings;
    struct {
        int critic_input = 0;
        int generator_input = 0;
        int generator_output = 0;
    } token_counts;
};

// Original docs first, then fallback docs not already present (dedup by id).
EvidenceSet merge_context(const EvidenceSet& d, const EvidenceSet& d_prime);

// Deterministic extractive generator: the object entity of the first doc
// matching the query's (subject, relation) pattern, else the abstention
// sentinel.
std::string generate_extractive(const Query& q, const EvidenceSet& docs);

// The routing DAG: pass -> generate over D; fallback -> one tool call for
// D', generate over merge_context(D, D'). Tool failure after one retry
// degrades to generation over D with degraded=true.
AnswerTrace route_and_answer(const Query& q, const EvidenceSet& d, const CriticModel& critic,
                             ToolClient* tool, const GeneratorBackend& gen);

}  // namespace criticgate

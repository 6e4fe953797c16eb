#include "criticgate/core.hpp"

#include <chrono>
#include <stdexcept>

namespace criticgate {

namespace {
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}
}  // namespace

EvidenceSet merge_context(const EvidenceSet& d, const EvidenceSet& d_prime) {
    EvidenceSet out = d;
    for (const auto& doc : d_prime.docs)
        if (!out.contains_id(doc.id)) out.docs.push_back(doc);
    return out;
}

std::string generate_extractive(const Query& q, const EvidenceSet& docs) {
    // Query template is "{subject} {relation} __?"; the fact pattern is
    // everything before the blank.
    static constexpr const char* kBlank = " __?";
    std::string prefix = q.text;
    if (prefix.size() > 4 && prefix.ends_with(kBlank)) prefix.resize(prefix.size() - 4);

    // First matching doc wins, except that freshly fetched fallback
    // evidence outranks the original retrieval: when the context holds
    // conflicting statements of the same fact, trust the clean re-fetch.
    const EvidenceDoc* chosen = nullptr;
    for (const auto& doc : docs.docs) {
        if (doc.text.size() > prefix.size() + 2 && doc.text.starts_with(prefix) &&
            doc.text[prefix.size()] == ' ' && doc.text.back() == '.') {
            if (doc.provenance == Provenance::fallback) {
                chosen = &doc;
                break;
            }
            if (chosen == nullptr) chosen = &doc;
        }
    }
    if (chosen == nullptr) return kInsufficientEvidence;
    return chosen->text.substr(prefix.size() + 1, chosen->text.size() - prefix.size() - 2);
}

AnswerTrace route_and_answer(const Query& q, const EvidenceSet& d, const CriticModel& critic,
                             ToolClient* tool, const GeneratorBackend& gen) {
    if (d.empty()) throw std::invalid_argument("route_and_answer: empty evidence set");
    if (gen.kind != GeneratorKind::templated_extractive)
        throw std::runtime_error("generator backend unreachable: only templated_extractive is "
                                 "available in this build");

    const auto t0 = Clock::now();
    AnswerTrace trace;
    trace.query = q;
    trace.decision = decide(q, d, critic);
    trace.action = trace.decision.action;
    trace.timings.routing_ms = trace.decision.critic_latency_ms;
    trace.token_counts.critic_input = static_cast<int>(format_critic_input(q, d).size());

    EvidenceSet context = d;
    if (trace.action == RoutingAction::Fallback) {
        if (tool == nullptr) {
            trace.degraded = true;
            trace.tool_calls.push_back({MockRetrievalTool::kToolName, 0.0, false,
                                        "no tool client configured"});
        } else {
            const auto tc0 = Clock::now();
            ToolCallRecord rec;
            rec.tool_name = MockRetrievalTool::kToolName;
            try {
                EvidenceSet d_prime =
                    tool->call_tool(MockRetrievalTool::kToolName, {{"query", q.text}});
                rec.ok = true;
                rec.outcome = "ok:" + std::to_string(d_prime.k()) + " docs";
                context = merge_context(d, d_prime);
            } catch (const std::exception& e) {
                // Retries happen inside the client; exhaustion degrades to
                // generation over the original evidence.
                rec.ok = false;
                rec.outcome = e.what();
                trace.degraded = true;
            }
            rec.duration_ms = ms_since(tc0);
            trace.tool_calls.push_back(std::move(rec));
        }
    }

    const auto g0 = Clock::now();
    trace.docs_used = context;
    trace.answer = generate_extractive(q, context);
    trace.timings.generation_ms = ms_since(g0);
    trace.timings.ttft_ms = ms_since(t0);

    int gen_input = 0;
    for (const auto& doc : context.docs) gen_input += static_cast<int>(doc.text.size());
    trace.token_counts.generator_input = gen_input + static_cast<int>(q.text.size());
    trace.token_counts.generator_output = static_cast<int>(trace.answer.size());
    return trace;
}

}  // namespace criticgate

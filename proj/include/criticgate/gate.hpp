#pragma once

#include <set>
#include <vector>

#include "criticgate/model.hpp"
#include "criticgate/types.hpp"

namespace criticgate {

// {-inf, 0} mask over the vocabulary admitting exactly the two verdict
// tokens; applied additively to the final-position logits.
struct LogitMask {
    std::vector<double> entries;  // -inf or 0
    std::set<TokenId> allowed;
};

struct RoutingDecision {
    RoutingAction action = RoutingAction::Fallback;
    double p_pass = 0.0;
    double p_fail = 0.0;
    double logit_pass = 0.0;
    double logit_fail = 0.0;
    double critic_latency_ms = 0.0;
    int decode_steps = 1;
};

LogitMask build_logit_mask(int vocab_size, const std::set<TokenId>& allowed);

// Two-token softmax over the masked logits; disallowed ids get exactly
// zero mass. Stable under uniform logit shifts.
std::pair<double, double> constrained_distribution(const std::vector<double>& logits,
                                                   const LogitMask& mask);

// Format x = Concat(q, D), run one prefill, mask, and take the greedy
// verdict. Ties fail safe to Fallback. Latency spans format+prefill+mask.
RoutingDecision decide(const Query& q, const EvidenceSet& d, const CriticModel& critic);

}  // namespace criticgate

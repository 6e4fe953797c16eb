#include "criticgate/gate.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "criticgate/corpus.hpp"

namespace criticgate {

LogitMask build_logit_mask(int vocab_size, const std::set<TokenId>& allowed) {
    if (allowed.size() != 2)
        throw std::invalid_argument("build_logit_mask: allowed set must contain exactly 2 ids");
    for (TokenId id : allowed)
        if (id < 0 || id >= vocab_size)
            throw std::out_of_range("build_logit_mask: token id " + std::to_string(id) +
                                    " outside vocab of " + std::to_string(vocab_size));
    LogitMask m;
    m.allowed = allowed;
    m.entries.assign(vocab_size, -std::numeric_limits<double>::infinity());
    for (TokenId id : allowed) m.entries[id] = 0.0;
    return m;
}

std::pair<double, double> constrained_distribution(const std::vector<double>& logits,
                                                   const LogitMask& mask) {
    if (logits.size() != mask.entries.size())
        throw std::invalid_argument("constrained_distribution: logits/mask length mismatch");
    auto it = mask.allowed.begin();
    const TokenId lo_id = *it++;
    const TokenId hi_id = *it;
    const double a = logits[lo_id];
    const double b = logits[hi_id];
    if (!std::isfinite(a) || !std::isfinite(b))
        throw std::invalid_argument("constrained_distribution: non-finite logit at allowed id");
    const double mx = std::max(a, b);
    const double ea = std::exp(a - mx);
    const double eb = std::exp(b - mx);
    const double z = ea + eb;
    // Returned as (p at smaller id, p at larger id); decide() maps ids.
    return {ea / z, eb / z};
}

RoutingDecision decide(const Query& q, const EvidenceSet& d, const CriticModel& critic) {
    const auto t0 = std::chrono::steady_clock::now();

    const std::string x = format_critic_input(q, d);
    const std::vector<TokenId> tokens = Tokenizer::encode(x);
    if (static_cast<int>(tokens.size()) > critic.cfg.max_ctx)
        throw SequenceTooLongError(static_cast<int>(tokens.size()), critic.cfg.max_ctx);

    PrefillResult fwd = forward_prefill(critic, tokens);
    const LogitMask mask =
        build_logit_mask(critic.cfg.vocab_size, {Tokenizer::kPass, Tokenizer::kFail});
    auto [p_lo, p_hi] = constrained_distribution(fwd.logits, mask);
    // kPass (258) < kFail (259): p_lo is p_pass.
    RoutingDecision dec;
    dec.p_pass = p_lo;
    dec.p_fail = p_hi;
    dec.logit_pass = fwd.logits[Tokenizer::kPass];
    dec.logit_fail = fwd.logits[Tokenizer::kFail];
    dec.decode_steps = 1;
    // Greedy argmax at temperature 0; an exact tie fails safe to Fallback.
    if (std::fabs(dec.p_pass - dec.p_fail) <= 1e-12)
        dec.action = RoutingAction::Fallback;
    else
        dec.action = dec.p_pass > dec.p_fail ? RoutingAction::Pass : RoutingAction::Fallback;

    const auto t1 = std::chrono::steady_clock::now();
    dec.critic_latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return dec;
}

}  // namespace criticgate

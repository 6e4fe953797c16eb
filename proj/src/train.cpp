#include "criticgate/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace criticgate {

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
}

BatchLoss final_token_loss(const CriticModel& model, const std::vector<TrainExample>& batch,
                           AdapterGrads* grads, ForwardCache* cache) {
    if (batch.empty()) throw std::invalid_argument("final_token_loss: empty batch");
    for (const auto& ex : batch)
        if (ex.label != Tokenizer::kPass && ex.label != Tokenizer::kFail)
            throw std::invalid_argument("final_token_loss: label must be T_PASS or T_FAIL");

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    BatchLoss out;
    out.n = static_cast<int>(batch.size());
    if (grads) {
        for (const auto& ex : batch)
            out.sum += loss_and_grad(model, ex.tokens, ex.label, *grads, c);
    } else {
        for (const auto& ex : batch) {
            PrefillResult r = forward_prefill(model, ex.tokens, &c);
            double mx = *std::max_element(r.logits.begin(), r.logits.end());
            double z = 0.0;
            for (double v : r.logits) z += std::exp(v - mx);
            out.sum += mx + std::log(z) - r.logits[ex.label];
        }
    }
    out.mean = out.sum / out.n;
    return out;
}

AdamW::AdamW(CriticModel& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
    cfg.validate();
    for (const Matrix* p : adapter_param_ptrs(static_cast<const CriticModel&>(model_))) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
    }
}

void AdamW::step(const AdapterGrads& mean_grads) {
    ++t_;
    auto params = adapter_param_ptrs(model_);
    auto grads = grad_ptrs(const_cast<AdapterGrads&>(mean_grads));
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Matrix& p = *params[pi];
        const Matrix& g = *grads[pi];
        Matrix& mm = m_[pi];
        Matrix& vv = v_[pi];
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = g.data[i];
            mm.data[i] = cfg_.beta1 * mm.data[i] + (1.0 - cfg_.beta1) * gi;
            vv.data[i] = cfg_.beta2 * vv.data[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = mm.data[i] / bc1;
            const double vhat = vv.data[i] / bc2;
            p.data[i] -= cfg_.learning_rate *
                         (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * p.data[i]);
        }
    }
}

TrainHistory train(CriticModel& model, const std::vector<TrainExample>& trainset,
                   const TrainConfig& cfg) {
    cfg.validate();
    if (trainset.empty()) throw std::invalid_argument("train: empty trainset");

    TrainHistory hist;
    bool has_pass = false, has_fail = false;
    for (const auto& ex : trainset) {
        has_pass |= ex.label == Tokenizer::kPass;
        has_fail |= ex.label == Tokenizer::kFail;
    }
    if (!has_pass || !has_fail)
        hist.warnings.push_back("trainset covers a single class; critic will not learn a boundary");

    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(trainset.size());
    std::iota(order.begin(), order.end(), 0);

    AdamW opt(model, cfg);
    AdapterGrads grads = AdapterGrads::zeros_like(model);
    ForwardCache cache;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            grads.zero();
            double batch_sum = 0.0;
            for (size_t i = start; i < end; ++i) {
                const TrainExample& ex = trainset[order[i]];
                batch_sum += loss_and_grad(model, ex.tokens, ex.label, grads, cache);
            }
            const double inv_n = 1.0 / static_cast<double>(end - start);
            grads.scale(inv_n);
            opt.step(grads);
            epoch_sum += batch_sum;
        }
        hist.epoch_mean_loss.push_back(epoch_sum / static_cast<double>(trainset.size()));
    }
    return hist;
}

GradCheckResult finite_difference_check(CriticModel& model, const TrainExample& example,
                                        double epsilon, int min_params, uint64_t seed) {
    if (!(epsilon > 0.0 && epsilon <= 1e-3))
        throw std::invalid_argument("finite_difference_check: epsilon must be in (0, 1e-3]");

    AdapterGrads grads = AdapterGrads::zeros_like(model);
    ForwardCache cache;
    loss_and_grad(model, example.tokens, example.label, grads, cache);

    auto params = adapter_param_ptrs(model);
    auto gp = grad_ptrs(grads);
    size_t total = 0;
    for (const Matrix* p : params) total += p->data.size();
    const size_t n_check = std::min<size_t>(total, static_cast<size_t>(min_params));

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, total - 1);

    auto loss_at = [&]() {
        PrefillResult r = forward_prefill(model, example.tokens, &cache);
        double mx = *std::max_element(r.logits.begin(), r.logits.end());
        double z = 0.0;
        for (double v : r.logits) z += std::exp(v - mx);
        return mx + std::log(z) - r.logits[example.label];
    };

    GradCheckResult res;
    for (size_t c = 0; c < n_check; ++c) {
        size_t flat = pick(rng);
        size_t pi = 0;
        while (flat >= params[pi]->data.size()) {
            flat -= params[pi]->data.size();
            ++pi;
        }
        double& theta = params[pi]->data[flat];
        const double orig = theta;
        theta = orig + epsilon;
        const double lp = loss_at();
        theta = orig - epsilon;
        const double lm = loss_at();
        theta = orig;
        const double g_fd = (lp - lm) / (2.0 * epsilon);
        const double g_a = gp[pi]->data[flat];
        const double rel =
            std::fabs(g_a - g_fd) / std::max({std::fabs(g_a), std::fabs(g_fd), 1e-12});
        res.max_rel_error = std::max(res.max_rel_error, rel);
        ++res.params_checked;
    }
    return res;
}

}  // namespace criticgate

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "criticgate/model.hpp"

namespace criticgate {

// One critic training pair: formatted input bytes plus the verdict token.
struct TrainExample {
    std::vector<TokenId> tokens;
    TokenId label = Tokenizer::kFail;  // kPass or kFail
};

struct TrainConfig {
    int epochs = 15;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    int batch_size = 1;
    uint64_t seed = 42;

    void validate() const;
};

struct BatchLoss {
    double sum = 0.0;   // Eq.-style sum over the batch
    double mean = 0.0;  // what the optimizer consumes
    int n = 0;
};

struct TrainHistory {
    std::vector<double> epoch_mean_loss;
    std::vector<std::string> warnings;
};

// Loss over a batch with gradients accumulated into `grads` (sum over
// examples; callers divide for the mean). Labels must be verdict tokens.
BatchLoss final_token_loss(const CriticModel& model, const std::vector<TrainExample>& batch,
                           AdapterGrads* grads = nullptr, ForwardCache* cache = nullptr);

// AdamW over adapter parameters only; base weights are never touched.
class AdamW {
public:
    AdamW(CriticModel& model, const TrainConfig& cfg);
    void step(const AdapterGrads& mean_grads);
    int64_t steps_taken() const { return t_; }

private:
    CriticModel& model_;
    TrainConfig cfg_;
    std::vector<Matrix> m_, v_;
    int64_t t_ = 0;
};

// Seeded shuffled mini-batch training; returns per-epoch mean loss. A
// single-class trainset trains anyway but records a warning.
TrainHistory train(CriticModel& model, const std::vector<TrainExample>& trainset,
                   const TrainConfig& cfg);

struct GradCheckResult {
    double max_rel_error = 0.0;
    int params_checked = 0;
};

// Central-difference check of the adapter gradients on one example.
// Perturbs a seeded sample of at least min_params parameters.
GradCheckResult finite_difference_check(CriticModel& model, const TrainExample& example,
                                        double epsilon, int min_params = 200,
                                        uint64_t seed = 1);

}  // namespace criticgate

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "criticgate/core.hpp"
#include "criticgate/corpus.hpp"
#include "criticgate/model.hpp"
#include "criticgate/train.hpp"

namespace criticgate {

// Binary routing metrics. The positive class is "evidence is adversarial"
// (label T_FAIL, correct action Fallback), so the false-positive rate is
// the probability of passing adversarial evidence through to the
// generator: FPR = P(Pass | T_FAIL).
struct RoutingMetrics {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double fpr = 0.0;
    long n() const { return tp + fp + tn + fn; }
};

RoutingMetrics routing_metrics(const std::vector<RoutingAction>& predicted,
                               const std::vector<TokenId>& labels);

// Fraction of traces whose final answer exactly equals the gold entity
// string. Abstentions (fallback sentinel) count as unfaithful. Throws if
// a trace's query id is missing from gold.
double faithfulness_proxy(const std::vector<AnswerTrace>& traces,
                          const std::map<std::string, std::string>& gold);

// Nearest-rank percentiles over latency samples, milliseconds.
struct LatencyStats {
    double p50 = 0.0, p90 = 0.0, p99 = 0.0;
    double mean = 0.0;
    int n = 0;
};

LatencyStats latency_stats(std::vector<double> samples_ms);

// One timed pipeline invocation: total time-to-first-token plus the slice
// of it spent in the routing decision.
struct TimedRun {
    double ttft_ms = 0.0;
    double routing_ms = 0.0;
};

struct TtftResult {
    LatencyStats ttft;
    LatencyStats routing;
};

// Runs pipeline(i) for i in [0, n_queries) x reps after `warmup` full
// discarded sweeps (warmup >= 1 enforced so first-touch costs never land
// in the measured distribution).
TtftResult measure_ttft(const std::function<TimedRun(int)>& pipeline, int n_queries, int reps,
                        int warmup);

// --- Cost-per-query model ------------------------------------------------

struct ExplicitApiCost {
    double queries = 10000;
    double avg_tokens_per_query = 2000;
    double rate_per_1m_tokens = 0.15;  // USD
};

struct LocalServingCost {
    double hourly_rate = 1.006;  // USD per instance-hour
    double throughput_qps = 47;
    double queries = 10000;
};

// Cost of verification spirals: a failed verification triggers extra
// retrieval/generation hops billed at the generator's token rate.
struct ImplicitSpiralCost {
    double spiral_prob = 0.45;
    double queries = 10000;
    double extra_hops = 2;
    double tokens_per_hop = 222;
    double rate_per_1m_tokens = 0.60;
};

double cpq_explicit_api(const ExplicitApiCost& c);
double cpq_local_serving(const LocalServingCost& c);
double cpq_implicit_spiral(const ImplicitSpiralCost& c);

// --- Pipeline comparison -------------------------------------------------

enum class PipelineKind { naive_rag, tiny_critic, heavy_critic_stub };
const char* pipeline_name(PipelineKind k);

struct HeavyStubConfig {
    double injected_latency_ms = 785.0;  // applied during timed runs only
    double label_noise = 0.05;           // P(decision flipped from ground truth)
    uint64_t seed = 99;
};

struct BenchConfig {
    CorpusSpec corpus;
    ModelConfig model;
    TrainConfig train;
    int n_eval = 500;                 // held-out tail of the corpus
    std::string checkpoint_path;      // load if set, else train in-process
    HeavyStubConfig heavy;
    int latency_queries = 24;
    int latency_reps = 3;
    int latency_warmup = 1;
    ExplicitApiCost explicit_cost;
    LocalServingCost local_cost;
    ImplicitSpiralCost implicit_cost;
    std::string out_dir;              // report.json / summary.csv / traces.jsonl
};

struct PipelineReport {
    PipelineKind kind;
    std::optional<RoutingMetrics> routing;  // absent for the naive pipeline
    double faithfulness = 0.0;
    LatencyStats ttft;
    LatencyStats routing_overhead;
    double cpq_usd = 0.0;
};

struct BenchReport {
    std::vector<PipelineReport> pipelines;
    int n_eval = 0;
    int n_train = 0;
    double train_seconds = 0.0;
};

// Full comparison run: builds the corpus, trains or loads the critic,
// evaluates all three pipelines on the held-out slice, and writes
// report.json, summary.csv and traces.jsonl into cfg.out_dir (if set).
BenchReport run_benchmark(const BenchConfig& cfg);

void write_report_files(const BenchReport& report, const BenchConfig& cfg,
                        const std::vector<std::pair<std::string, AnswerTrace>>& traces);

}  // namespace criticgate

#include "criticgate/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>

#include "criticgate/checkpoint.hpp"
#include "criticgate/gate.hpp"
#include "criticgate/toolproto.hpp"

namespace criticgate {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {
double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}
}  // namespace

RoutingMetrics routing_metrics(const std::vector<RoutingAction>& predicted,
                               const std::vector<TokenId>& labels) {
    if (predicted.size() != labels.size())
        throw std::invalid_argument("routing_metrics: size mismatch");
    if (predicted.empty()) throw std::invalid_argument("routing_metrics: no predictions");
    RoutingMetrics m;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != Tokenizer::kPass && labels[i] != Tokenizer::kFail)
            throw std::invalid_argument("routing_metrics: label is not a verdict token");
        const bool adversarial = labels[i] == Tokenizer::kFail;
        const bool flagged = predicted[i] == RoutingAction::Fallback;
        if (adversarial && flagged) ++m.tp;
        else if (adversarial && !flagged) ++m.fn;
        else if (!adversarial && flagged) ++m.fp;
        else ++m.tn;
    }
    m.precision = (m.tp + m.fp) ? static_cast<double>(m.tp) / (m.tp + m.fp) : 0.0;
    m.recall = (m.tp + m.fn) ? static_cast<double>(m.tp) / (m.tp + m.fn) : 0.0;
    m.f1 = (m.precision + m.recall > 0.0)
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    // Rate of adversarial evidence waved through to the generator.
    m.fpr = (m.tp + m.fn) ? static_cast<double>(m.fn) / (m.tp + m.fn) : 0.0;
    return m;
}

double faithfulness_proxy(const std::vector<AnswerTrace>& traces,
                          const std::map<std::string, std::string>& gold) {
    if (traces.empty()) throw std::invalid_argument("faithfulness_proxy: no traces");
    long faithful = 0;
    for (const auto& t : traces) {
        auto it = gold.find(t.query.id);
        if (it == gold.end())
            throw std::invalid_argument("faithfulness_proxy: no gold entity for query " +
                                        t.query.id);
        if (t.answer == it->second) ++faithful;
    }
    return static_cast<double>(faithful) / static_cast<double>(traces.size());
}

LatencyStats latency_stats(std::vector<double> samples_ms) {
    if (samples_ms.empty()) throw std::invalid_argument("latency_stats: no samples");
    std::sort(samples_ms.begin(), samples_ms.end());
    const int n = static_cast<int>(samples_ms.size());
    auto nearest_rank = [&](double pct) {
        int rank = static_cast<int>(std::ceil(pct / 100.0 * n));
        rank = std::clamp(rank, 1, n);
        return samples_ms[rank - 1];
    };
    LatencyStats s;
    s.n = n;
    s.p50 = nearest_rank(50.0);
    s.p90 = nearest_rank(90.0);
    s.p99 = nearest_rank(99.0);
    double sum = 0.0;
    for (double v : samples_ms) sum += v;
    s.mean = sum / n;
    return s;
}

TtftResult measure_ttft(const std::function<TimedRun(int)>& pipeline, int n_queries, int reps,
                        int warmup) {
    if (n_queries < 1 || reps < 1)
        throw std::invalid_argument("measure_ttft: need at least one query and one rep");
    if (warmup < 1)
        throw std::invalid_argument("measure_ttft: at least one warmup sweep is required");
    for (int w = 0; w < warmup; ++w)
        for (int i = 0; i < n_queries; ++i) pipeline(i);
    std::vector<double> ttft, routing;
    ttft.reserve(static_cast<size_t>(n_queries) * reps);
    routing.reserve(ttft.capacity());
    for (int r = 0; r < reps; ++r)
        for (int i = 0; i < n_queries; ++i) {
            const TimedRun t = pipeline(i);
            ttft.push_back(t.ttft_ms);
            routing.push_back(t.routing_ms);
        }
    return {latency_stats(std::move(ttft)), latency_stats(std::move(routing))};
}

double cpq_explicit_api(const ExplicitApiCost& c) {
    return c.queries * c.avg_tokens_per_query / 1e6 * c.rate_per_1m_tokens;
}

double cpq_local_serving(const LocalServingCost& c) {
    if (c.throughput_qps <= 0.0)
        throw std::invalid_argument("cpq_local_serving: throughput must be positive");
    return c.queries / c.throughput_qps / 3600.0 * c.hourly_rate;
}

double cpq_implicit_spiral(const ImplicitSpiralCost& c) {
    return c.spiral_prob * c.queries * c.extra_hops * c.tokens_per_hop / 1e6 *
           c.rate_per_1m_tokens;
}

const char* pipeline_name(PipelineKind k) {
    switch (k) {
        case PipelineKind::naive_rag: return "naive";
        case PipelineKind::tiny_critic: return "tiny_critic";
        case PipelineKind::heavy_critic_stub: return "heavy_stub";
    }
    return "?";
}

namespace {

json trace_to_json(const std::string& pipeline, const AnswerTrace& t, TokenId label,
                   SetKind kind) {
    return json{{"pipeline", pipeline},
                {"query_id", t.query.id},
                {"action", action_name(t.action)},
                {"label", Tokenizer::special_name(label)},
                {"set_kind", set_kind_name(kind)},
                {"answer", t.answer},
                {"degraded", t.degraded},
                {"tool_calls", t.tool_calls.size()},
                {"decode_steps", t.decision.decode_steps}};
}

json metrics_to_json(const PipelineReport& p) {
    json j{{"pipeline", pipeline_name(p.kind)},
           {"faithfulness", p.faithfulness},
           {"ttft_ms", {{"p50", p.ttft.p50}, {"p90", p.ttft.p90}, {"p99", p.ttft.p99}}},
           {"routing_overhead_ms",
            {{"p50", p.routing_overhead.p50}, {"p90", p.routing_overhead.p90}}},
           {"cpq_usd", p.cpq_usd}};
    if (p.routing) {
        j["routing"] = {{"f1", p.routing->f1},     {"precision", p.routing->precision},
                        {"recall", p.routing->recall}, {"fpr", p.routing->fpr},
                        {"tp", p.routing->tp},     {"fp", p.routing->fp},
                        {"tn", p.routing->tn},     {"fn", p.routing->fn}};
    }
    return j;
}

std::string csv_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

void write_report_files(const BenchReport& report, const BenchConfig& cfg,
                        const std::vector<std::pair<std::string, AnswerTrace>>&) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    json j{{"n_train", report.n_train},
           {"n_eval", report.n_eval},
           {"train_seconds", report.train_seconds},
           {"corpus", {{"n_facts", cfg.corpus.n_facts},
                       {"seed", cfg.corpus.seed},
                       {"rho", cfg.corpus.rho},
                       {"k", cfg.corpus.k}}},
           {"pipelines", json::array()}};
    for (const auto& p : report.pipelines) j["pipelines"].push_back(metrics_to_json(p));
    std::ofstream(fs::path(cfg.out_dir) / "report.json") << j.dump(2) << "\n";

    std::ofstream csv(fs::path(cfg.out_dir) / "summary.csv");
    csv << "pipeline,R-F1,Faithfulness,TTFT_ms,CPQ_usd\n";
    for (const auto& p : report.pipelines) {
        csv << pipeline_name(p.kind) << ','
            << (p.routing ? csv_num(p.routing->f1) : std::string("n/a")) << ','
            << csv_num(p.faithfulness) << ',' << csv_num(p.ttft.p50) << ','
            << csv_num(p.cpq_usd) << "\n";
    }
}

BenchReport run_benchmark(const BenchConfig& cfg) {
    const Corpus corpus = generate_corpus(cfg.corpus);
    std::vector<RetrievalSet> sets = assemble_retrieval_sets(corpus);
    if (cfg.n_eval < 1 || cfg.n_eval >= static_cast<int>(sets.size()))
        throw std::invalid_argument("run_benchmark: n_eval out of range");

    const int n_train = static_cast<int>(sets.size()) - cfg.n_eval;
    std::vector<RetrievalSet> eval_sets(sets.begin() + n_train, sets.end());
    sets.resize(n_train);

    BenchReport report;
    report.n_train = n_train;
    report.n_eval = cfg.n_eval;

    CriticModel model;
    if (!cfg.checkpoint_path.empty()) {
        model = load_checkpoint(cfg.checkpoint_path);
    } else {
        model = build_model(cfg.model);
        std::vector<TrainExample> trainset;
        trainset.reserve(sets.size());
        for (const auto& s : sets)
            trainset.push_back({Tokenizer::encode(format_critic_input(s.query, s.docs)),
                                s.label});
        const auto t0 = Clock::now();
        train(model, trainset, cfg.train);
        report.train_seconds = ms_since(t0) / 1000.0;
    }

    std::map<std::string, std::string> gold;
    for (const auto& q : corpus.queries)
        if (q.gold_entity) gold[q.id] = *q.gold_entity;

    MockRetrievalTool mock(corpus);
    ToolClient tool(std::make_shared<InProcessTransport>(mock.handler()));
    const GeneratorBackend gen{GeneratorKind::templated_extractive, {}};

    std::mt19937_64 heavy_rng(cfg.heavy.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    // Heavy-critic decisions are precomputed so the latency phase replays
    // the same verdicts instead of consuming fresh randomness.
    std::vector<RoutingAction> heavy_actions(eval_sets.size());
    for (size_t i = 0; i < eval_sets.size(); ++i) {
        bool adversarial = eval_sets[i].label == Tokenizer::kFail;
        if (unit(heavy_rng) < cfg.heavy.label_noise) adversarial = !adversarial;
        heavy_actions[i] = adversarial ? RoutingAction::Fallback : RoutingAction::Pass;
    }

    auto run_fixed_action = [&](const RetrievalSet& s, RoutingAction action) {
        AnswerTrace t;
        t.query = s.query;
        t.action = action;
        t.decision.action = action;
        EvidenceSet context = s.docs;
        if (action == RoutingAction::Fallback) {
            ToolCallRecord rec{MockRetrievalTool::kToolName, 0.0, false, ""};
            const auto tc0 = Clock::now();
            try {
                EvidenceSet d_prime =
                    tool.call_tool(MockRetrievalTool::kToolName, {{"query", s.query.text}});
                rec.ok = true;
                context = merge_context(s.docs, d_prime);
            } catch (const std::exception& e) {
                rec.outcome = e.what();
                t.degraded = true;
            }
            rec.duration_ms = ms_since(tc0);
            t.tool_calls.push_back(std::move(rec));
        }
        t.docs_used = context;
        t.answer = generate_extractive(s.query, context);
        return t;
    };

    std::vector<std::pair<std::string, AnswerTrace>> all_traces;
    std::vector<TokenId> labels;
    for (const auto& s : eval_sets) labels.push_back(s.label);

    report.pipelines.resize(3);
    const double explicit_usd = cpq_explicit_api(cfg.explicit_cost);
    const double local_usd = cpq_local_serving(cfg.local_cost);
    const double implicit_usd = cpq_implicit_spiral(cfg.implicit_cost);
    const double q = cfg.explicit_cost.queries;

    // Naive: evidence always passes straight to the generator; no critic
    // serving cost, but verification spirals go unchecked.
    {
        PipelineReport& p = report.pipelines[0];
        p.kind = PipelineKind::naive_rag;
        std::vector<AnswerTrace> traces;
        for (const auto& s : eval_sets) {
            traces.push_back(run_fixed_action(s, RoutingAction::Pass));
            all_traces.emplace_back(pipeline_name(p.kind), traces.back());
        }
        p.faithfulness = faithfulness_proxy(traces, gold);
        p.cpq_usd = (explicit_usd + implicit_usd) / q;
    }

    // Tiny critic: the real routing DAG.
    {
        PipelineReport& p = report.pipelines[1];
        p.kind = PipelineKind::tiny_critic;
        std::vector<AnswerTrace> traces;
        std::vector<RoutingAction> actions;
        for (const auto& s : eval_sets) {
            traces.push_back(route_and_answer(s.query, s.docs, model, &tool, gen));
            actions.push_back(traces.back().action);
            all_traces.emplace_back(pipeline_name(p.kind), traces.back());
        }
        p.routing = routing_metrics(actions, labels);
        p.faithfulness = faithfulness_proxy(traces, gold);
        p.cpq_usd = (explicit_usd + local_usd) / q;
    }

    // Heavy stub: near-oracle verdicts at large-model latency and cost.
    {
        PipelineReport& p = report.pipelines[2];
        p.kind = PipelineKind::heavy_critic_stub;
        std::vector<AnswerTrace> traces;
        std::vector<RoutingAction> actions;
        for (size_t i = 0; i < eval_sets.size(); ++i) {
            traces.push_back(run_fixed_action(eval_sets[i], heavy_actions[i]));
            actions.push_back(heavy_actions[i]);
            all_traces.emplace_back(pipeline_name(p.kind), traces.back());
        }
        p.routing = routing_metrics(actions, labels);
        p.faithfulness = faithfulness_proxy(traces, gold);
        LocalServingCost heavy_cost = cfg.local_cost;
        heavy_cost.throughput_qps = 1000.0 / cfg.heavy.injected_latency_ms;
        p.cpq_usd = (explicit_usd + cpq_local_serving(heavy_cost)) / q;
    }

    // Latency phase over a fixed slice of the eval set.
    const int nq = std::min(cfg.latency_queries, static_cast<int>(eval_sets.size()));
    auto naive_timed = [&](int i) {
        const auto t0 = Clock::now();
        run_fixed_action(eval_sets[i], RoutingAction::Pass);
        return TimedRun{ms_since(t0), 0.0};
    };
    auto tiny_timed = [&](int i) {
        const auto t0 = Clock::now();
        AnswerTrace t = route_and_answer(eval_sets[i].query, eval_sets[i].docs, model, &tool, gen);
        return TimedRun{ms_since(t0), t.decision.critic_latency_ms};
    };
    auto heavy_timed = [&](int i) {
        const auto t0 = Clock::now();
        const auto r0 = Clock::now();
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(
            cfg.heavy.injected_latency_ms));
        const double routing = ms_since(r0);
        run_fixed_action(eval_sets[i], heavy_actions[i]);
        return TimedRun{ms_since(t0), routing};
    };
    {
        TtftResult r = measure_ttft(naive_timed, nq, cfg.latency_reps, cfg.latency_warmup);
        report.pipelines[0].ttft = r.ttft;
        report.pipelines[0].routing_overhead = r.routing;
    }
    {
        TtftResult r = measure_ttft(tiny_timed, nq, cfg.latency_reps, cfg.latency_warmup);
        report.pipelines[1].ttft = r.ttft;
        report.pipelines[1].routing_overhead = r.routing;
    }
    {
        // One rep and one query-sweep warmup would already cost minutes at
        // 785 ms per call; sample a handful of queries instead.
        const int heavy_nq = std::min(nq, 4);
        TtftResult r = measure_ttft(heavy_timed, heavy_nq, 1, 1);
        report.pipelines[2].ttft = r.ttft;
        report.pipelines[2].routing_overhead = r.routing;
    }

    if (!cfg.out_dir.empty()) {
        write_report_files(report, cfg, all_traces);
        std::ofstream out(std::filesystem::path(cfg.out_dir) / "traces.jsonl");
        for (const auto& [name, t] : all_traces) {
            SetKind kind = SetKind::clean;
            TokenId label = Tokenizer::kPass;
            for (const auto& s : eval_sets)
                if (s.query.id == t.query.id) {
                    kind = s.kind;
                    label = s.label;
                    break;
                }
            out << trace_to_json(name, t, label, kind).dump() << "\n";
        }
    }
    return report;
}

}  // namespace criticgate

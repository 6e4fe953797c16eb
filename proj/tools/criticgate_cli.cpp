// criticgate: corpus -> train -> eval -> serve -> bench lifecycle driver.
//
// Exit codes: 0 success, 2 usage, 3 config error, 4 data error,
// 5 model/checkpoint error, 6 port in use.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <zlib.h>

#include "criticgate/bench.hpp"
#include "criticgate/checkpoint.hpp"
#include "criticgate/core.hpp"
#include "criticgate/corpus.hpp"
#include "criticgate/gate.hpp"
#include "criticgate/service.hpp"
#include "criticgate/toolproto.hpp"
#include "criticgate/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace criticgate;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitData = 4;
constexpr int kExitModel = 5;

constexpr const char* kVersion = "0.1.0";

uint32_t file_crc32(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    uLong crc = crc32(0L, Z_NULL, 0);
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        crc = crc32(crc, reinterpret_cast<const Bytef*>(buf),
                    static_cast<uInt>(in.gcount()));
    return static_cast<uint32_t>(crc);
}

// Every subcommand that produces artifacts drops a manifest beside them:
// the config + seed are sufficient to regenerate the listed files
// bit-exactly (timings excluded).
void write_manifest(const fs::path& run_dir, const std::string& command, const json& config,
                    uint64_t seed, const std::vector<fs::path>& files) {
    json flist = json::array();
    for (const auto& f : files) {
        char crc[16];
        std::snprintf(crc, sizeof(crc), "%08x", file_crc32(f));
        flist.push_back({{"path", fs::relative(f, run_dir).string()},
                         {"bytes", static_cast<int64_t>(fs::file_size(f))},
                         {"crc32", crc}});
    }
    json m{{"run_id", command + "-" + std::to_string(seed)},
           {"command", command},
           {"config", config},
           {"seed", seed},
           {"files", flist},
           {"versions", {{"criticgate", kVersion}, {"compiler", __VERSION__}}}};
    std::ofstream(run_dir / "manifest.json") << m.dump(2) << "\n";
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config file not found: " + path);
    return json::parse(in);
}

// Config-file value unless the flag was given on the command line.
template <typename T>
void cfg_override(const CLI::Option* opt, const json& cfg, const char* key, T& value) {
    if (opt->count() == 0 && cfg.contains(key)) value = cfg.at(key).get<T>();
}

struct CorpusArgs {
    CorpusSpec spec;
    std::string run_dir = "runs/corpus";
};

int cmd_gen_corpus(const CorpusArgs& a, const json&) {
    fs::create_directories(a.run_dir);
    const Corpus corpus = generate_corpus(a.spec);
    const fs::path out = fs::path(a.run_dir) / "corpus.jsonl";
    save_corpus_jsonl(corpus, out.string());
    write_manifest(a.run_dir, "gen-corpus",
                   json{{"n_facts", a.spec.n_facts},
                        {"seed", a.spec.seed},
                        {"rho", a.spec.rho},
                        {"k", a.spec.k}},
                   a.spec.seed, {out});
    std::cout << "wrote " << out.string() << " (" << corpus.facts.size() << " facts)\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"criticgate: evidence-routing critic toolkit"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its keys");

    // ---- gen-corpus ----
    CorpusArgs ca;
    auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate the synthetic fact corpus");
    auto* o_nf = gen_cmd->add_option("--n-facts", ca.spec.n_facts);
    auto* o_seed = gen_cmd->add_option("--seed", ca.spec.seed);
    auto* o_rho = gen_cmd->add_option("--rho", ca.spec.rho);
    auto* o_k = gen_cmd->add_option("--k", ca.spec.k);
    gen_cmd->add_option("--out", ca.run_dir, "Run directory");

    // ---- inject-noise ----
    std::string in_corpus, noise_dir = "runs/sets";
    auto* noise_cmd =
        app.add_subcommand("inject-noise", "Assemble clean/adversarial retrieval sets");
    noise_cmd->add_option("--corpus", in_corpus, "corpus.jsonl from gen-corpus")->required();
    noise_cmd->add_option("--out", noise_dir, "Run directory");

    // ---- build-trainset ----
    std::string sets_path, trainset_dir = "runs/trainset";
    auto* bt_cmd = app.add_subcommand("build-trainset",
                                      "Flatten retrieval sets into labeled critic inputs");
    bt_cmd->add_option("--sets", sets_path, "sets.jsonl from inject-noise")->required();
    bt_cmd->add_option("--out", trainset_dir, "Run directory");

    // ---- train ----
    std::string train_trainset, train_dir = "runs/train";
    TrainConfig tc;
    ModelConfig mc;
    auto* train_cmd = app.add_subcommand("train", "Train LoRA adapters on a trainset");
    train_cmd->add_option("--trainset", train_trainset)->required();
    auto* o_epochs = train_cmd->add_option("--epochs", tc.epochs);
    auto* o_lr = train_cmd->add_option("--lr", tc.learning_rate);
    auto* o_bs = train_cmd->add_option("--batch-size", tc.batch_size);
    auto* o_tseed = train_cmd->add_option("--seed", tc.seed);
    auto* o_iseed = train_cmd->add_option("--init-seed", mc.init_seed);
    train_cmd->add_option("--out", train_dir, "Run directory");

    // ---- eval ----
    std::string eval_ckpt, eval_sets, eval_dir = "runs/eval";
    auto* eval_cmd = app.add_subcommand("eval", "Routing metrics on labeled retrieval sets");
    eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
    eval_cmd->add_option("--sets", eval_sets)->required();
    eval_cmd->add_option("--out", eval_dir, "Run directory");

    // ---- serve ----
    ServiceConfig sc;
    auto* serve_cmd = app.add_subcommand("serve", "HTTP routing/answering service");
    auto* o_host = serve_cmd->add_option("--host", sc.listen_host);
    auto* o_port = serve_cmd->add_option("--port", sc.listen_port);
    auto* o_ckpt = serve_cmd->add_option("--checkpoint", sc.checkpoint_path);
    auto* o_thost = serve_cmd->add_option("--tool-http-host", sc.tool_http_host);
    auto* o_tport = serve_cmd->add_option("--tool-http-port", sc.tool_http_port);
    auto* o_tcmd = serve_cmd->add_option("--tool-stdio-command", sc.tool_stdio_command);
    auto* o_mdocs = serve_cmd->add_option("--max-docs", sc.max_docs);

    // ---- bench ----
    BenchConfig bc;
    bc.out_dir = "runs/bench";
    auto* bench_cmd = app.add_subcommand("bench", "Three-pipeline comparison benchmark");
    auto* o_bnf = bench_cmd->add_option("--n-facts", bc.corpus.n_facts);
    auto* o_bseed = bench_cmd->add_option("--seed", bc.corpus.seed);
    auto* o_brho = bench_cmd->add_option("--rho", bc.corpus.rho);
    auto* o_bne = bench_cmd->add_option("--n-eval", bc.n_eval);
    auto* o_bep = bench_cmd->add_option("--epochs", bc.train.epochs);
    bench_cmd->add_option("--checkpoint", bc.checkpoint_path,
                          "Reuse a trained checkpoint instead of training");
    bench_cmd->add_option("--out", bc.out_dir, "Run directory");

    // ---- report ----
    std::string report_dir;
    auto* report_cmd = app.add_subcommand("report", "Print a bench run's summary");
    report_cmd->add_option("--run", report_dir, "Bench run directory")->required();

    // ---- tool-server ----
    std::string ts_corpus;
    bool ts_stdio = false;
    int ts_port = 0;
    auto* ts_cmd = app.add_subcommand("tool-server", "Mock retrieval tool server");
    ts_cmd->add_option("--corpus", ts_corpus)->required();
    ts_cmd->add_flag("--stdio", ts_stdio, "NDJSON over stdin/stdout");
    ts_cmd->add_option("--http-port", ts_port, "JSON-RPC over HTTP POST /rpc");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    json cfg;
    try {
        cfg = load_config_file(config_path);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (gen_cmd->parsed()) {
            cfg_override(o_nf, cfg, "n_facts", ca.spec.n_facts);
            cfg_override(o_seed, cfg, "seed", ca.spec.seed);
            cfg_override(o_rho, cfg, "rho", ca.spec.rho);
            cfg_override(o_k, cfg, "k", ca.spec.k);
            try {
                ca.spec.validate();
            } catch (const std::exception& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return kExitConfig;
            }
            return cmd_gen_corpus(ca, cfg);
        }

        if (noise_cmd->parsed()) {
            Corpus corpus;
            try {
                corpus = load_corpus_jsonl(in_corpus);
            } catch (const std::exception& e) {
                std::cerr << "data error: " << e.what() << "\n";
                return kExitData;
            }
            fs::create_directories(noise_dir);
            const auto sets = assemble_retrieval_sets(corpus);
            const fs::path out = fs::path(noise_dir) / "sets.jsonl";
            save_sets_jsonl(sets, out.string());
            write_manifest(noise_dir, "inject-noise",
                           json{{"corpus", in_corpus}, {"rho", corpus.spec.rho}},
                           corpus.spec.seed, {out});
            std::cout << "wrote " << out.string() << " (" << sets.size() << " sets)\n";
            return kExitOk;
        }

        if (bt_cmd->parsed()) {
            std::vector<RetrievalSet> sets;
            try {
                sets = load_sets_jsonl(sets_path);
            } catch (const std::exception& e) {
                std::cerr << "data error: " << e.what() << "\n";
                return kExitData;
            }
            fs::create_directories(trainset_dir);
            const auto examples = build_trainset(sets);
            const fs::path out = fs::path(trainset_dir) / "trainset.jsonl";
            save_trainset_jsonl(examples, out.string());
            write_manifest(trainset_dir, "build-trainset", json{{"sets", sets_path}}, 0, {out});
            std::cout << "wrote " << out.string() << " (" << examples.size() << " examples)\n";
            return kExitOk;
        }

        if (train_cmd->parsed()) {
            cfg_override(o_epochs, cfg, "epochs", tc.epochs);
            cfg_override(o_lr, cfg, "learning_rate", tc.learning_rate);
            cfg_override(o_bs, cfg, "batch_size", tc.batch_size);
            cfg_override(o_tseed, cfg, "train_seed", tc.seed);
            cfg_override(o_iseed, cfg, "init_seed", mc.init_seed);
            std::vector<LabeledExample> examples;
            try {
                examples = load_trainset_jsonl(train_trainset);
                if (examples.empty()) throw std::runtime_error("trainset is empty");
            } catch (const std::exception& e) {
                std::cerr << "data error: " << e.what() << "\n";
                return kExitData;
            }
            std::vector<TrainExample> trainset;
            trainset.reserve(examples.size());
            for (const auto& ex : examples)
                trainset.push_back({Tokenizer::encode(ex.x), ex.label});
            fs::create_directories(train_dir);
            CriticModel model = build_model(mc);
            const TrainHistory hist = train(model, trainset, tc);
            const fs::path ckpt = fs::path(train_dir) / "critic";
            save_checkpoint(model, ckpt.string());
            json jh{{"epoch_mean_loss", hist.epoch_mean_loss}, {"warnings", hist.warnings}};
            const fs::path histf = fs::path(train_dir) / "loss_history.json";
            std::ofstream(histf) << jh.dump(2) << "\n";
            write_manifest(train_dir, "train",
                           json{{"epochs", tc.epochs},
                                {"learning_rate", tc.learning_rate},
                                {"batch_size", tc.batch_size},
                                {"train_seed", tc.seed},
                                {"init_seed", mc.init_seed},
                                {"trainset", train_trainset}},
                           tc.seed,
                           {fs::path(ckpt.string() + ".json"),
                            fs::path(ckpt.string() + ".bin"), histf});
            std::cout << "wrote " << ckpt.string() << ".{json,bin}; final epoch loss "
                      << hist.epoch_mean_loss.back() << "\n";
            return kExitOk;
        }

        if (eval_cmd->parsed()) {
            CriticModel model;
            try {
                model = load_checkpoint(eval_ckpt);
            } catch (const std::exception& e) {
                std::cerr << "model error: " << e.what() << "\n";
                return kExitModel;
            }
            std::vector<RetrievalSet> sets;
            try {
                sets = load_sets_jsonl(eval_sets);
                if (sets.empty()) throw std::runtime_error("no sets");
            } catch (const std::exception& e) {
                std::cerr << "data error: " << e.what() << "\n";
                return kExitData;
            }
            std::vector<RoutingAction> actions;
            std::vector<TokenId> labels;
            for (const auto& s : sets) {
                actions.push_back(decide(s.query, s.docs, model).action);
                labels.push_back(s.label);
            }
            const RoutingMetrics m = routing_metrics(actions, labels);
            fs::create_directories(eval_dir);
            json jm{{"n", m.n()},       {"f1", m.f1},   {"precision", m.precision},
                    {"recall", m.recall}, {"fpr", m.fpr}, {"tp", m.tp},
                    {"fp", m.fp},         {"tn", m.tn},   {"fn", m.fn}};
            const fs::path out = fs::path(eval_dir) / "eval.json";
            std::ofstream(out) << jm.dump(2) << "\n";
            write_manifest(eval_dir, "eval",
                           json{{"checkpoint", eval_ckpt}, {"sets", eval_sets}}, 0, {out});
            std::cout << jm.dump(2) << "\n";
            return kExitOk;
        }

        if (serve_cmd->parsed()) {
            cfg_override(o_host, cfg, "listen_host", sc.listen_host);
            cfg_override(o_port, cfg, "listen_port", sc.listen_port);
            cfg_override(o_ckpt, cfg, "checkpoint", sc.checkpoint_path);
            cfg_override(o_thost, cfg, "tool_http_host", sc.tool_http_host);
            cfg_override(o_tport, cfg, "tool_http_port", sc.tool_http_port);
            cfg_override(o_tcmd, cfg, "tool_stdio_command", sc.tool_stdio_command);
            cfg_override(o_mdocs, cfg, "max_docs", sc.max_docs);
            sc.apply_env_overrides();
            if (sc.checkpoint_path.empty()) {
                std::cerr << "config error: --checkpoint is required\n";
                return kExitConfig;
            }
            RoutingService service(sc);
            const ServiceStartupError err = service.start();
            if (err == ServiceStartupError::bad_checkpoint) {
                std::cerr << "model error: cannot load checkpoint " << sc.checkpoint_path
                          << "\n";
                return kExitModel;
            }
            if (err == ServiceStartupError::port_in_use) {
                std::cerr << "startup error: port " << sc.listen_port << " in use\n";
                return static_cast<int>(ServiceStartupError::port_in_use);
            }
            std::cout << "listening on " << sc.listen_host << ":" << sc.listen_port << "\n";
            service.serve_forever();
            return kExitOk;
        }

        if (bench_cmd->parsed()) {
            cfg_override(o_bnf, cfg, "n_facts", bc.corpus.n_facts);
            cfg_override(o_bseed, cfg, "seed", bc.corpus.seed);
            cfg_override(o_brho, cfg, "rho", bc.corpus.rho);
            cfg_override(o_bne, cfg, "n_eval", bc.n_eval);
            cfg_override(o_bep, cfg, "epochs", bc.train.epochs);
            try {
                bc.corpus.validate();
            } catch (const std::exception& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return kExitConfig;
            }
            const BenchReport report = run_benchmark(bc);
            write_manifest(bc.out_dir, "bench",
                           json{{"n_facts", bc.corpus.n_facts},
                                {"seed", bc.corpus.seed},
                                {"rho", bc.corpus.rho},
                                {"n_eval", bc.n_eval},
                                {"epochs", bc.train.epochs}},
                           bc.corpus.seed,
                           {fs::path(bc.out_dir) / "report.json",
                            fs::path(bc.out_dir) / "summary.csv",
                            fs::path(bc.out_dir) / "traces.jsonl"});
            std::cout << "wrote " << bc.out_dir << "/{report.json,summary.csv,traces.jsonl}\n";
            for (const auto& p : report.pipelines)
                std::cout << pipeline_name(p.kind) << ": faithfulness "
                          << p.faithfulness
                          << (p.routing ? ", F1 " + std::to_string(p.routing->f1) : "")
                          << "\n";
            return kExitOk;
        }

        if (report_cmd->parsed()) {
            std::ifstream in(fs::path(report_dir) / "report.json");
            if (!in) {
                std::cerr << "data error: no report.json in " << report_dir << "\n";
                return kExitData;
            }
            const json j = json::parse(in);
            std::printf("%-12s %8s %8s %14s %10s %10s\n", "pipeline", "F1", "FPR",
                        "faithfulness", "ttft_p50", "cpq_usd");
            for (const auto& p : j.at("pipelines")) {
                const bool has_r = p.contains("routing");
                std::printf("%-12s %8s %8s %14.3f %10.3f %10.5f\n",
                            p.at("pipeline").get<std::string>().c_str(),
                            has_r ? std::to_string(p["routing"]["f1"].get<double>())
                                        .substr(0, 5)
                                        .c_str()
                                  : "n/a",
                            has_r ? std::to_string(p["routing"]["fpr"].get<double>())
                                        .substr(0, 5)
                                        .c_str()
                                  : "n/a",
                            p.at("faithfulness").get<double>(),
                            p.at("ttft_ms").at("p50").get<double>(),
                            p.at("cpq_usd").get<double>());
            }
            return kExitOk;
        }

        if (ts_cmd->parsed()) {
            Corpus corpus;
            try {
                corpus = load_corpus_jsonl(ts_corpus);
            } catch (const std::exception& e) {
                std::cerr << "data error: " << e.what() << "\n";
                return kExitData;
            }
            MockRetrievalTool mock(corpus);
            if (ts_stdio) {
                serve_stdio_tool(mock.handler());
                return kExitOk;
            }
            if (ts_port <= 0) {
                std::cerr << "config error: pass --stdio or --http-port\n";
                return kExitConfig;
            }
            httplib::Server server;
            server.Post("/rpc", [&](const httplib::Request& req, httplib::Response& res) {
                json out;
                try {
                    out = mock.handle(json::parse(req.body));
                } catch (const std::exception& e) {
                    out = json{{"jsonrpc", "2.0"},
                               {"id", nullptr},
                               {"error",
                                {{"code", kJsonRpcInvalidRequest}, {"message", e.what()}}}};
                }
                res.set_content(out.dump(), "application/json");
            });
            std::cout << "tool server on port " << ts_port << "\n";
            if (!server.listen("127.0.0.1", ts_port)) {
                std::cerr << "startup error: port " << ts_port << " in use\n";
                return static_cast<int>(ServiceStartupError::port_in_use);
            }
            return kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}

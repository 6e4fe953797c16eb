#include "criticgate/service.hpp"

#include <cstdlib>
#include <stdexcept>

#include <httplib.h>

#include "criticgate/checkpoint.hpp"
#include "criticgate/gate.hpp"

namespace criticgate {

using json = nlohmann::json;

namespace {

const char* env(const char* name) { return std::getenv(name); }

json error_body(const std::string& code, const std::string& message) {
    return json{{"error", {{"code", code}, {"message", message}}}};
}

Query parse_query(const json& j) {
    Query q;
    if (j.is_string()) {
        q.id = "adhoc";
        q.text = j.get<std::string>();
    } else {
        q.id = j.value("id", "adhoc");
        q.text = j.at("text").get<std::string>();
    }
    if (q.text.empty()) throw std::invalid_argument("query text is empty");
    return q;
}

EvidenceSet parse_docs(const json& j) {
    EvidenceSet set;
    int i = 0;
    for (const auto& d : j) {
        EvidenceDoc doc;
        doc.id = d.value("id", "doc" + std::to_string(i));
        doc.text = d.at("text").get<std::string>();
        doc.provenance = Provenance::retrieved;
        set.push(std::move(doc));
        ++i;
    }
    return set;
}

json trace_json(const AnswerTrace& t) {
    json tool_calls = json::array();
    for (const auto& c : t.tool_calls)
        tool_calls.push_back({{"tool", c.tool_name},
                              {"duration_ms", c.duration_ms},
                              {"ok", c.ok},
                              {"outcome", c.outcome}});
    json docs = json::array();
    for (const auto& d : t.docs_used.docs)
        docs.push_back({{"id", d.id}, {"text", d.text}, {"provenance", provenance_name(d.provenance)}});
    return json{{"query_id", t.query.id},
                {"action", action_name(t.action)},
                {"p_pass", t.decision.p_pass},
                {"p_fail", t.decision.p_fail},
                {"decode_steps", t.decision.decode_steps},
                {"answer", t.answer},
                {"degraded", t.degraded},
                {"docs_used", docs},
                {"tool_calls", tool_calls},
                {"timings", {{"routing_ms", t.timings.routing_ms},
                             {"generation_ms", t.timings.generation_ms},
                             {"ttft_ms", t.timings.ttft_ms}}}};
}

}  // namespace

void ServiceConfig::apply_env_overrides() {
    if (const char* v = env("CRITIC_GATE_LISTEN_HOST")) listen_host = v;
    if (const char* v = env("CRITIC_GATE_LISTEN_PORT")) listen_port = std::atoi(v);
    if (const char* v = env("CRITIC_GATE_CHECKPOINT")) checkpoint_path = v;
    if (const char* v = env("CRITIC_GATE_TOOL_HTTP_HOST")) tool_http_host = v;
    if (const char* v = env("CRITIC_GATE_TOOL_HTTP_PORT")) tool_http_port = std::atoi(v);
    if (const char* v = env("CRITIC_GATE_TOOL_STDIO_COMMAND")) tool_stdio_command = v;
    if (const char* v = env("CRITIC_GATE_MAX_DOCS")) max_docs = std::atoi(v);
    if (const char* v = env("CRITIC_GATE_MAX_BODY_BYTES")) max_body_bytes = std::atoi(v);
    if (const char* v = env("CRITIC_GATE_MAX_CONCURRENT")) max_concurrent_requests = std::atoi(v);
}

ServiceConfig ServiceConfig::from_json(const json& j) {
    ServiceConfig c;
    c.listen_host = j.value("listen_host", c.listen_host);
    c.listen_port = j.value("listen_port", c.listen_port);
    c.checkpoint_path = j.value("checkpoint", c.checkpoint_path);
    c.tool_http_host = j.value("tool_http_host", c.tool_http_host);
    c.tool_http_port = j.value("tool_http_port", c.tool_http_port);
    c.tool_stdio_command = j.value("tool_stdio_command", c.tool_stdio_command);
    c.max_docs = j.value("max_docs", c.max_docs);
    c.max_body_bytes = j.value("max_body_bytes", c.max_body_bytes);
    c.max_concurrent_requests = j.value("max_concurrent", c.max_concurrent_requests);
    return c;
}

json ServiceConfig::to_json() const {
    return json{{"listen_host", listen_host},
                {"listen_port", listen_port},
                {"checkpoint", checkpoint_path},
                {"tool_http_host", tool_http_host},
                {"tool_http_port", tool_http_port},
                {"tool_stdio_command", tool_stdio_command},
                {"max_docs", max_docs},
                {"max_body_bytes", max_body_bytes},
                {"max_concurrent", max_concurrent_requests}};
}

void ServiceMetrics::observe_latency(double ms) {
    int b = 0;
    while (b < 9 && ms > kBuckets[b]) ++b;
    latency_buckets[b].fetch_add(1, std::memory_order_relaxed);
}

json ServiceMetrics::to_json() const {
    json hist = json::array();
    for (int b = 0; b < 9; ++b)
        hist.push_back({{"le_ms", kBuckets[b]}, {"count", latency_buckets[b].load()}});
    hist.push_back({{"le_ms", "inf"}, {"count", latency_buckets[9].load()}});
    return json{{"requests", requests.load()},
                {"pass_count", pass_count.load()},
                {"fallback_count", fallback_count.load()},
                {"tool_failures", tool_failures.load()},
                {"rejected", rejected.load()},
                {"latency_histogram_ms", hist}};
}

RoutingService::RoutingService(ServiceConfig cfg)
    : cfg_(std::move(cfg)), server_(std::make_unique<httplib::Server>()) {}

RoutingService::~RoutingService() { stop(); }

void RoutingService::install_routes() {
    auto& s = *server_;
    s.set_payload_max_length(static_cast<size_t>(cfg_.max_body_bytes));

    s.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
        if (!ready_.load()) {
            res.status = 503;
            res.set_content(json{{"status", "loading"}}.dump(), "application/json");
        } else {
            res.set_content(json{{"status", "ok"}}.dump(), "application/json");
        }
    });

    s.Get("/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(metrics_.to_json().dump(2), "application/json");
    });

    // Shared guard for the two inference endpoints: readiness, body size,
    // doc-count limit, concurrency cap.
    auto guarded = [this](const httplib::Request& req, httplib::Response& res,
                          auto&& handler) {
        if (!ready_.load()) {
            res.status = 503;
            res.set_content(error_body("not_ready", "model not loaded").dump(),
                            "application/json");
            return;
        }
        if (static_cast<int>(req.body.size()) > cfg_.max_body_bytes) {
            res.status = 400;
            res.set_content(error_body("body_too_large", "request body exceeds limit").dump(),
                            "application/json");
            return;
        }
        if (in_flight_.fetch_add(1) >= cfg_.max_concurrent_requests) {
            in_flight_.fetch_sub(1);
            metrics_.rejected.fetch_add(1);
            res.status = 429;
            res.set_content(error_body("overloaded", "concurrent request limit reached").dump(),
                            "application/json");
            return;
        }
        metrics_.requests.fetch_add(1);
        try {
            json body = json::parse(req.body);
            const Query q = parse_query(body.at("query"));
            const EvidenceSet docs = parse_docs(body.at("docs"));
            if (docs.k() > cfg_.max_docs) {
                res.status = 400;
                res.set_content(
                    error_body("too_many_docs",
                               "docs exceed limit of " + std::to_string(cfg_.max_docs))
                        .dump(),
                    "application/json");
            } else if (docs.empty()) {
                res.status = 400;
                res.set_content(error_body("empty_docs", "at least one doc required").dump(),
                                "application/json");
            } else {
                handler(q, docs, res);
            }
        } catch (const json::exception& e) {
            res.status = 400;
            res.set_content(error_body("bad_request", e.what()).dump(), "application/json");
        } catch (const std::invalid_argument& e) {
            res.status = 400;
            res.set_content(error_body("bad_request", e.what()).dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(error_body("internal", e.what()).dump(), "application/json");
        }
        in_flight_.fetch_sub(1);
    };

    s.Post("/v1/route", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(req, res, [this](const Query& q, const EvidenceSet& docs,
                                 httplib::Response& out) {
            const RoutingDecision d = decide(q, docs, *model_);
            if (d.action == RoutingAction::Pass) metrics_.pass_count.fetch_add(1);
            else metrics_.fallback_count.fetch_add(1);
            metrics_.observe_latency(d.critic_latency_ms);
            out.set_content(json{{"action", action_name(d.action)},
                                 {"p_pass", d.p_pass},
                                 {"p_fail", d.p_fail},
                                 {"latency_ms", d.critic_latency_ms},
                                 {"decode_steps", d.decode_steps}}
                                .dump(),
                            "application/json");
        });
    });

    s.Post("/v1/answer", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(req, res, [this](const Query& q, const EvidenceSet& docs,
                                 httplib::Response& out) {
            const GeneratorBackend gen{GeneratorKind::templated_extractive, {}};
            AnswerTrace t = route_and_answer(q, docs, *model_, tool_.get(), gen);
            if (t.action == RoutingAction::Pass) metrics_.pass_count.fetch_add(1);
            else metrics_.fallback_count.fetch_add(1);
            for (const auto& c : t.tool_calls)
                if (!c.ok) metrics_.tool_failures.fetch_add(1);
            metrics_.observe_latency(t.timings.routing_ms);
            out.set_content(trace_json(t).dump(), "application/json");
        });
    });
}

ServiceStartupError RoutingService::start() {
    try {
        model_ = std::make_unique<CriticModel>(load_checkpoint(cfg_.checkpoint_path));
    } catch (const std::exception&) {
        return ServiceStartupError::bad_checkpoint;
    }
    if (!cfg_.tool_http_host.empty()) {
        tool_ = std::make_shared<ToolClient>(
            std::make_shared<HttpTransport>(cfg_.tool_http_host, cfg_.tool_http_port));
    } else if (!cfg_.tool_stdio_command.empty()) {
        tool_ = std::make_shared<ToolClient>(
            std::make_shared<StdioTransport>(cfg_.tool_stdio_command));
    }
    install_routes();
    if (!server_->bind_to_port(cfg_.listen_host, cfg_.listen_port))
        return ServiceStartupError::port_in_use;
    ready_.store(true);
    return ServiceStartupError::none;
}

void RoutingService::serve_forever() { server_->listen_after_bind(); }

int RoutingService::listen_on_ephemeral_port() {
    // An empty checkpoint path leaves the service bound but not ready,
    // which is how tests exercise the 503 readiness contract.
    const bool load = !cfg_.checkpoint_path.empty();
    if (load) {
        try {
            model_ = std::make_unique<CriticModel>(load_checkpoint(cfg_.checkpoint_path));
        } catch (const std::exception&) {
            return -1;
        }
    }
    install_routes();
    const int port = server_->bind_to_any_port(cfg_.listen_host);
    if (port < 0) return -1;
    listen_thread_ = std::thread([this] { server_->listen_after_bind(); });
    while (!server_->is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    if (load) ready_.store(true);
    return port;
}

void RoutingService::stop() {
    if (server_) server_->stop();
    if (listen_thread_.joinable()) listen_thread_.join();
}

}  // namespace criticgate

#include "criticgate/toolproto.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <iostream>

#include <httplib.h>

namespace criticgate {

using nlohmann::json;

json ToolRequest::to_json() const {
    json j{{"jsonrpc", "2.0"}, {"id", id}, {"method", method}};
    if (method == "tools/call") j["params"] = json{{"name", name}, {"arguments", arguments}};
    return j;
}

ToolRequest ToolRequest::from_json(const json& j) {
    if (j.value("jsonrpc", "") != "2.0")
        throw std::invalid_argument("ToolRequest: missing jsonrpc 2.0 marker");
    ToolRequest r;
    r.id = j.at("id").get<int64_t>();
    r.method = j.at("method").get<std::string>();
    if (r.method == "tools/call") {
        const json& p = j.at("params");
        r.name = p.at("name").get<std::string>();
        r.arguments = p.value("arguments", json::object());
    }
    return r;
}

json ToolResponse::to_json() const {
    json j{{"jsonrpc", "2.0"}, {"id", id}};
    if (error)
        j["error"] = json{{"code", error->first}, {"message", error->second}};
    else
        j["result"] = result.value_or(json::object());
    return j;
}

ToolResponse ToolResponse::from_json(const json& j) {
    ToolResponse r;
    r.id = j.at("id").get<int64_t>();
    const bool has_result = j.contains("result");
    const bool has_error = j.contains("error");
    if (has_result == has_error)
        throw std::invalid_argument("ToolResponse: exactly one of result/error required");
    if (has_result)
        r.result = j.at("result");
    else
        r.error = std::make_pair(j.at("error").at("code").get<int>(),
                                 j.at("error").at("message").get<std::string>());
    return r;
}

std::string InProcessTransport::roundtrip(const std::string& body, int) {
    return handler_(json::parse(body)).dump();
}

HttpTransport::HttpTransport(std::string host, int port, std::string path)
    : host_(std::move(host)), port_(port), path_(std::move(path)) {}

std::string HttpTransport::roundtrip(const std::string& body, int timeout_ms) {
    httplib::Client cli(host_, port_);
    cli.set_connection_timeout(0, timeout_ms * 1000);
    cli.set_read_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
    auto res = cli.Post(path_, body, "application/json");
    if (!res) throw std::runtime_error("http transport failure: " + to_string(res.error()));
    if (res->status != 200)
        throw std::runtime_error("http transport status " + std::to_string(res->status));
    return res->body;
}

StdioTransport::StdioTransport(const std::string& command) {
    int in_pipe[2];   // parent -> child
    int out_pipe[2];  // child -> parent
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0)
        throw std::runtime_error("stdio transport: pipe() failed");
    child_ = fork();
    if (child_ < 0) throw std::runtime_error("stdio transport: fork() failed");
    if (child_ == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), nullptr);
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
}

StdioTransport::~StdioTransport() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    if (child_ > 0) {
        int status = 0;
        kill(child_, SIGTERM);
        waitpid(child_, &status, 0);
    }
}

std::string StdioTransport::roundtrip(const std::string& body, int timeout_ms) {
    std::string line = body;
    line.push_back('\n');
    size_t written = 0;
    while (written < line.size()) {
        ssize_t n = write(to_child_, line.data() + written, line.size() - written);
        if (n < 0) throw std::runtime_error("stdio transport: write failed");
        written += static_cast<size_t>(n);
    }

    const auto deadline =
        std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    for (;;) {
        const size_t nl = rx_buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string doc = rx_buffer_.substr(0, nl);
            rx_buffer_.erase(0, nl + 1);
            return doc;
        }
        const auto now = std::chrono::steady_clock::now();
        if (now >= deadline) throw std::runtime_error("stdio transport: timeout");
        const int remaining = static_cast<int>(
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count());
        struct pollfd pfd = {from_child_, POLLIN, 0};
        const int pr = poll(&pfd, 1, std::max(1, remaining));
        if (pr < 0) throw std::runtime_error("stdio transport: poll failed");
        if (pr == 0) throw std::runtime_error("stdio transport: timeout");
        char buf[4096];
        const ssize_t n = read(from_child_, buf, sizeof(buf));
        if (n <= 0) throw std::runtime_error("stdio transport: child closed pipe");
        rx_buffer_.append(buf, static_cast<size_t>(n));
    }
}

ToolClient::ToolClient(std::shared_ptr<Transport> transport, ToolClientConfig cfg)
    : transport_(std::move(transport)), cfg_(cfg) {}

ToolResponse ToolClient::dispatch(const ToolRequest& req) {
    // A previous out-of-order read may already hold our answer.
    if (auto it = pending_.find(req.id); it != pending_.end()) {
        ToolResponse r = it->second;
        pending_.erase(it);
        return r;
    }
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
        try {
            std::string raw = transport_->roundtrip(req.to_json().dump(), cfg_.timeout_ms);
            ToolResponse resp = ToolResponse::from_json(json::parse(raw));
            if (resp.id == req.id) return resp;
            // Correlate strictly by id: park strays, keep reading nothing —
            // the next attempt resends and may find the parked answer.
            pending_[resp.id] = resp;
            if (auto it = pending_.find(req.id); it != pending_.end()) {
                ToolResponse r = it->second;
                pending_.erase(it);
                return r;
            }
            last_error = "response id mismatch";
        } catch (const std::exception& e) {
            last_error = e.what();
        }
    }
    throw ToolUnavailableError("tool unavailable after " + std::to_string(cfg_.retries + 1) +
                               " attempts: " + last_error);
}

EvidenceSet ToolClient::call_tool(const std::string& name, const json& arguments) {
    ToolRequest req;
    req.id = next_id_++;
    req.method = "tools/call";
    req.name = name;
    req.arguments = arguments;
    ToolResponse resp = dispatch(req);
    if (resp.error) throw ToolProtocolError(resp.error->first, resp.error->second);

    EvidenceSet out;
    for (const auto& dj : resp.result->value("docs", json::array()))
        out.push(EvidenceDoc{dj.at("id").get<std::string>(), dj.at("text").get<std::string>(),
                             Provenance::fallback});
    return out;
}

std::vector<std::string> ToolClient::list_tools() {
    ToolRequest req;
    req.id = next_id_++;
    req.method = "tools/list";
    ToolResponse resp = dispatch(req);
    if (resp.error) throw ToolProtocolError(resp.error->first, resp.error->second);
    std::vector<std::string> names;
    for (const auto& t : resp.result->value("tools", json::array()))
        names.push_back(t.at("name").get<std::string>());
    return names;
}

MockRetrievalTool::MockRetrievalTool(const Corpus& corpus) {
    for (size_t i = 0; i < corpus.queries.size(); ++i)
        by_query_text_[corpus.queries[i].text] = corpus.gold_docs[i];
}

json MockRetrievalTool::handle(const json& request) const {
    ToolRequest req;
    try {
        req = ToolRequest::from_json(request);
    } catch (const std::exception& e) {
        ToolResponse resp;
        resp.id = request.value("id", 0);
        resp.error = std::make_pair(kJsonRpcInvalidRequest, std::string(e.what()));
        return resp.to_json();
    }

    ToolResponse resp;
    resp.id = req.id;
    if (req.method == "tools/list") {
        resp.result = json{{"tools", json::array({json{{"name", kToolName}}})}};
    } else if (req.method == "tools/call") {
        if (req.name != kToolName) {
            resp.error = std::make_pair(kJsonRpcMethodNotFound, "unknown tool: " + req.name);
        } else {
            json docs = json::array();
            const std::string query = req.arguments.value("query", "");
            // Responses carry the tool's own doc ids: a fresh retrieval
            // must not collide with (and get deduplicated against) ids
            // assigned by the caller's original retriever.
            if (auto it = by_query_text_.find(query); it != by_query_text_.end())
                docs.push_back(json{{"id", it->second.id + "#fb"}, {"text", it->second.text}});
            resp.result = json{{"docs", docs}};
        }
    } else {
        resp.error = std::make_pair(kJsonRpcMethodNotFound, "unknown method: " + req.method);
    }
    return resp.to_json();
}

void serve_stdio_tool(const ToolHandler& handler) {
    std::string line;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        json out;
        try {
            out = handler(json::parse(line));
        } catch (const std::exception& e) {
            out = ToolResponse{0, std::nullopt,
                               std::make_pair(kJsonRpcInvalidRequest, std::string(e.what()))}
                      .to_json();
        }
        std::cout << out.dump() << "\n" << std::flush;
    }
}

}  // namespace criticgate

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "criticgate/corpus.hpp"
#include "criticgate/types.hpp"

namespace criticgate {

// Minimal MCP-style JSON-RPC 2.0 surface: tools/list and tools/call.

inline constexpr int kJsonRpcMethodNotFound = -32601;
inline constexpr int kJsonRpcInvalidRequest = -32600;

struct ToolRequest {
    int64_t id = 0;
    std::string method;                // "tools/call" | "tools/list"
    std::string name;                  // params.name (tools/call only)
    nlohmann::json arguments = nlohmann::json::object();

    nlohmann::json to_json() const;
    static ToolRequest from_json(const nlohmann::json& j);
};

struct ToolResponse {
    int64_t id = 0;
    std::optional<nlohmann::json> result;
    std::optional<std::pair<int, std::string>> error;  // {code, message}

    nlohmann::json to_json() const;
    static ToolResponse from_json(const nlohmann::json& j);
};

// Protocol-level error reported by the server (e.g. -32601).
struct ToolProtocolError : std::runtime_error {
    int code;
    ToolProtocolError(int c, const std::string& msg)
        : std::runtime_error("tool error " + std::to_string(c) + ": " + msg), code(c) {}
};

// Transport failure after retry exhaustion; triggers the degraded path.
struct ToolUnavailableError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Transport {
public:
    virtual ~Transport() = default;
    // Sends one JSON-RPC document; returns one raw response document.
    // Throws on transport failure.
    virtual std::string roundtrip(const std::string& body, int timeout_ms) = 0;
};

using ToolHandler = std::function<nlohmann::json(const nlohmann::json&)>;

// Direct in-process dispatch, used by tests and the benchmark harness.
class InProcessTransport : public Transport {
public:
    explicit InProcessTransport(ToolHandler handler) : handler_(std::move(handler)) {}
    std::string roundtrip(const std::string& body, int timeout_ms) override;

private:
    ToolHandler handler_;
};

// HTTP POST, one JSON body per call.
class HttpTransport : public Transport {
public:
    HttpTransport(std::string host, int port, std::string path = "/rpc");
    std::string roundtrip(const std::string& body, int timeout_ms) override;

private:
    std::string host_;
    int port_;
    std::string path_;
};

// Newline-delimited JSON to a child process over stdin/stdout.
class StdioTransport : public Transport {
public:
    explicit StdioTransport(const std::string& command);
    ~StdioTransport() override;
    StdioTransport(const StdioTransport&) = delete;
    StdioTransport& operator=(const StdioTransport&) = delete;
    std::string roundtrip(const std::string& body, int timeout_ms) override;

private:
    int to_child_ = -1;
    int from_child_ = -1;
    pid_t child_ = -1;
    std::string rx_buffer_;
};

struct ToolClientConfig {
    int timeout_ms = 2000;
    int retries = 1;
};

class ToolClient {
public:
    ToolClient(std::shared_ptr<Transport> transport, ToolClientConfig cfg = {});

    // Returns D' with provenance=fallback. Protocol errors surface as
    // ToolProtocolError; transport exhaustion as ToolUnavailableError.
    EvidenceSet call_tool(const std::string& name, const nlohmann::json& arguments);
    std::vector<std::string> list_tools();

private:
    ToolResponse dispatch(const ToolRequest& req);
    std::shared_ptr<Transport> transport_;
    ToolClientConfig cfg_;
    int64_t next_id_ = 1;
    std::map<int64_t, ToolResponse> pending_;  // out-of-order responses parked by id
};

// Deterministic retrieval tool over a generated corpus: returns the gold
// doc(s) for a known query text, an empty list otherwise.
class MockRetrievalTool {
public:
    explicit MockRetrievalTool(const Corpus& corpus);
    nlohmann::json handle(const nlohmann::json& request) const;
    ToolHandler handler() const {
        return [this](const nlohmann::json& j) { return handle(j); };
    }
    static constexpr const char* kToolName = "mock_retrieval";

private:
    std::map<std::string, EvidenceDoc> by_query_text_;
};

// Blocking NDJSON server loop over stdin/stdout (tool-server --stdio).
void serve_stdio_tool(const ToolHandler& handler);

}  // namespace criticgate

#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "criticgate/core.hpp"
#include "criticgate/model.hpp"
#include "criticgate/toolproto.hpp"

namespace httplib {
class Server;
}

namespace criticgate {

struct ServiceConfig {
    std::string listen_host = "127.0.0.1";
    int listen_port = 8080;
    std::string checkpoint_path;
    std::string tool_http_host;       // if set, fallback tool over HTTP
    int tool_http_port = 0;
    std::string tool_stdio_command;   // else, if set, stdio child process
    int max_docs = 32;
    int max_body_bytes = 1 << 20;
    int max_concurrent_requests = 8;

    // CRITIC_GATE_LISTEN_PORT, CRITIC_GATE_CHECKPOINT, ... override fields.
    void apply_env_overrides();
    static ServiceConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Startup failures map to distinct process exit codes.
enum class ServiceStartupError { none = 0, bad_checkpoint = 5, port_in_use = 6 };

struct ServiceMetrics {
    std::atomic<long> requests{0};
    std::atomic<long> pass_count{0};
    std::atomic<long> fallback_count{0};
    std::atomic<long> tool_failures{0};
    std::atomic<long> rejected{0};
    // Latency histogram, bucket upper bounds in ms.
    static constexpr double kBuckets[] = {1, 2, 5, 10, 25, 50, 100, 250, 1000};
    std::atomic<long> latency_buckets[10]{};
    void observe_latency(double ms);
    nlohmann::json to_json() const;
};

// HTTP routing/answering service over one immutable loaded model.
// Readiness: /healthz is 503 until the checkpoint has loaded.
class RoutingService {
public:
    explicit RoutingService(ServiceConfig cfg);
    ~RoutingService();

    // Loads the checkpoint and binds the port; returns the startup error
    // class (none on success). serve_forever() then blocks.
    ServiceStartupError start();
    void serve_forever();

    // Test harness: bind to an ephemeral port on a background thread.
    int listen_on_ephemeral_port();
    void stop();

    const ServiceMetrics& metrics() const { return metrics_; }

private:
    void install_routes();

    ServiceConfig cfg_;
    std::unique_ptr<httplib::Server> server_;
    std::unique_ptr<CriticModel> model_;
    std::shared_ptr<ToolClient> tool_;
    std::thread listen_thread_;
    std::atomic<bool> ready_{false};
    std::atomic<int> in_flight_{0};
    ServiceMetrics metrics_;
};

}  // namespace criticgate

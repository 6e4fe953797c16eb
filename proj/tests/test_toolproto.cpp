#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>

#include <httplib.h>

#include "criticgate/corpus.hpp"
#include "criticgate/toolproto.hpp"

using namespace criticgate;
using json = nlohmann::json;

namespace {

Corpus test_corpus() {
    CorpusSpec s;
    s.n_facts = 40;
    s.seed = 7;
    return generate_corpus(s);
}

// Transport wrapper that fails the first n roundtrips.
class FlakyTransport : public Transport {
public:
    FlakyTransport(std::shared_ptr<Transport> inner, int failures)
        : inner_(std::move(inner)), failures_left_(failures) {}
    std::string roundtrip(const std::string& body, int timeout_ms) override {
        ++calls;
        if (failures_left_-- > 0) throw std::runtime_error("injected transport failure");
        return inner_->roundtrip(body, timeout_ms);
    }
    int calls = 0;

private:
    std::shared_ptr<Transport> inner_;
    int failures_left_;
};

}  // namespace

TEST_CASE("request/response wire format is JSON-RPC 2.0") {
    ToolRequest req{7, "tools/call", "mock_retrieval", {{"query", "x"}}};
    const json j = req.to_json();
    CHECK(j.at("jsonrpc") == "2.0");
    CHECK(j.at("id") == 7);
    CHECK(j.at("method") == "tools/call");
    CHECK(j.at("params").at("name") == "mock_retrieval");
    const ToolRequest back = ToolRequest::from_json(j);
    CHECK(back.id == 7);
    CHECK(back.name == "mock_retrieval");

    SUBCASE("exactly one of result/error must be present") {
        json bad{{"jsonrpc", "2.0"}, {"id", 1}};
        CHECK_THROWS(ToolResponse::from_json(bad));
        bad["result"] = json::object();
        bad["error"] = {{"code", -1}, {"message", "x"}};
        CHECK_THROWS(ToolResponse::from_json(bad));
    }
}

TEST_CASE("mock tool serves gold docs in-process") {
    const Corpus corpus = test_corpus();
    MockRetrievalTool mock(corpus);
    ToolClient client(std::make_shared<InProcessTransport>(mock.handler()));

    const auto tools = client.list_tools();
    REQUIRE(tools.size() == 1);
    CHECK(tools[0] == "mock_retrieval");

    const EvidenceSet d = client.call_tool("mock_retrieval", {{"query", corpus.queries[3].text}});
    REQUIRE(d.k() == 1);
    CHECK(d.docs[0].text == corpus.gold_docs[3].text);
    CHECK(d.docs[0].provenance == Provenance::fallback);
    // The tool assigns its own response ids, so merged contexts never
    // deduplicate the re-fetched doc against the original retrieval.
    CHECK(d.docs[0].id != corpus.gold_docs[3].id);

    const EvidenceSet miss = client.call_tool("mock_retrieval", {{"query", "unknown stuff"}});
    CHECK(miss.empty());
}

TEST_CASE("unknown tool surfaces -32601 verbatim") {
    const Corpus corpus = test_corpus();
    MockRetrievalTool mock(corpus);
    ToolClient client(std::make_shared<InProcessTransport>(mock.handler()));
    try {
        client.call_tool("no_such_tool", {});
        FAIL("expected protocol error");
    } catch (const ToolProtocolError& e) {
        CHECK(e.code == -32601);
    }
}

TEST_CASE("transport failure is retried once, then surfaces as unavailable") {
    const Corpus corpus = test_corpus();
    MockRetrievalTool mock(corpus);
    auto inner = std::make_shared<InProcessTransport>(mock.handler());

    SUBCASE("one failure -> retry succeeds") {
        auto flaky = std::make_shared<FlakyTransport>(inner, 1);
        ToolClient client(flaky);
        const EvidenceSet d =
            client.call_tool("mock_retrieval", {{"query", corpus.queries[0].text}});
        CHECK(d.k() == 1);
        CHECK(flaky->calls == 2);
    }
    SUBCASE("two failures -> exhausted") {
        auto flaky = std::make_shared<FlakyTransport>(inner, 2);
        ToolClient client(flaky);
        CHECK_THROWS_AS(client.call_tool("mock_retrieval", {{"query", "x"}}),
                        ToolUnavailableError);
        CHECK(flaky->calls == 2);  // initial attempt + exactly one retry
    }
}

TEST_CASE("http transport round-trips against a live server") {
    const Corpus corpus = test_corpus();
    MockRetrievalTool mock(corpus);

    httplib::Server server;
    server.Post("/rpc", [&](const httplib::Request& req, httplib::Response& res) {
        res.set_content(mock.handle(json::parse(req.body)).dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread t([&] { server.listen_after_bind(); });
    while (!server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));

    {
        ToolClient client(std::make_shared<HttpTransport>("127.0.0.1", port));
        const EvidenceSet d =
            client.call_tool("mock_retrieval", {{"query", corpus.queries[5].text}});
        REQUIRE(d.k() == 1);
        CHECK(d.docs[0].text == corpus.gold_docs[5].text);
        try {
            client.call_tool("bogus", {});
            FAIL("expected -32601 over http");
        } catch (const ToolProtocolError& e) {
            CHECK(e.code == -32601);
        }
    }
    server.stop();
    t.join();
}

TEST_CASE("http transport to a dead port exhausts as unavailable") {
    ToolClient client(std::make_shared<HttpTransport>("127.0.0.1", 1),
                      ToolClientConfig{200, 1});
    CHECK_THROWS_AS(client.call_tool("mock_retrieval", {{"query", "x"}}),
                    ToolUnavailableError);
}

TEST_CASE("stdio transport drives a child tool process") {
    // `cat` echoes our NDJSON back; craft a self-satisfying request? No:
    // use the real CLI tool-server if available, else a jq-free shell echo
    // responder that answers every line with a fixed response keyed to id 1.
    // Simplest deterministic child: a shell loop emitting a canned
    // tools/list response per input line.
    const std::string child =
        "while read -r line; do "
        "echo '{\"jsonrpc\":\"2.0\",\"id\":1,\"result\":{\"tools\":[{\"name\":"
        "\"mock_retrieval\"}]}}'; done";
    ToolClient client(std::make_shared<StdioTransport>(child));
    const auto tools = client.list_tools();
    REQUIRE(tools.size() == 1);
    CHECK(tools[0] == "mock_retrieval");
}

TEST_CASE("stdio transport times out on a silent child") {
    ToolClient client(std::make_shared<StdioTransport>("sleep 30"),
                      ToolClientConfig{150, 1});
    CHECK_THROWS_AS(client.list_tools(), ToolUnavailableError);
}

TEST_CASE("out-of-order responses are correlated by id") {
    // A handler that answers request id N with a response for id N but
    // delivered after "pre-sending" a response for a different id is hard
    // to fake over a 1:1 roundtrip transport; instead verify strictness:
    // a mismatched id must not be accepted for the pending call.
    auto wrong_id = std::make_shared<InProcessTransport>([](const json& req) {
        json r{{"jsonrpc", "2.0"},
               {"id", req.at("id").get<int64_t>() + 1000},
               {"result", json::object()}};
        return r;
    });
    ToolClient client(wrong_id, ToolClientConfig{100, 1});
    CHECK_THROWS_AS(client.list_tools(), ToolUnavailableError);
}

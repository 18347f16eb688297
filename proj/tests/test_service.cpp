#include <doctest.h>

#include <chrono>
#include <functional>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "dcpref/itinerary.hpp"
#include "dcpref/service/http_api.hpp"

using namespace dcpref::service;
namespace fs = std::filesystem;

namespace {

// Four nests with three instances each, features on a 2D grid.
Json twelve_instances() {
  Json out = Json::array();
  for (int k = 0; k < 12; ++k) {
    out.push_back(Json{{"id", 100 + k},
                       {"name", "option " + std::to_string(k)},
                       {"nest", "n" + std::to_string(k / 3)},
                       {"features", {0.1 * k, (k % 3) * 0.4}}});
  }
  return out;
}

Json quick_config(const std::string& mode, int budget = 4) {
  return Json{{"surrogate", "gp"}, {"budget", budget}, {"seed", 11}, {"max_iterations", 150}, {"fit_mode", mode}};
}

// Prefers the instance whose first feature is larger.
long long preferred(const Json& query) {
  const Json& a = query.at("first");
  const Json& b = query.at("second");
  return a.at("features")[0].get<double>() >= b.at("features")[0].get<double>() ? a.at("id").get<long long>()
                                                                                 : b.at("id").get<long long>();
}

int expect_error(int status, const std::string& code, const std::function<void()>& call) {
  try {
    call();
  } catch (const ServiceError& e) {
    CHECK(e.status() == status);
    CHECK(e.body().at("error") == code);
    return e.status();
  }
  FAIL("expected a service error");
  return 0;
}

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("dcpref_service_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("create returns a first query") {
  SessionService svc({});
  const Json r = svc.create(Json{{"instances", twelve_instances()}, {"config", quick_config("sync")}});
  CHECK(r.at("status") == "awaiting_answer");
  const Json& q = r.at("query");
  CHECK(q.at("token") == "q1");
  CHECK(q.at("phase") == "phase1");
  CHECK(q.at("first").at("nest") == q.at("second").at("nest"));
  const Json st = svc.state(r.at("session_id"));
  CHECK(st.at("instance_count") == 12);
  CHECK(st.at("budget") == 4);
  CHECK(st.at("surrogate") == "gp");
  CHECK(st.at("feature_names") == Json{"x1", "x2"});
  CHECK(st.at("history").empty());
  CHECK(st.at("x_best").is_null());
}

TEST_CASE("default configuration") {
  SessionService svc({});
  const Json r = svc.create(Json{{"instances", twelve_instances()}});
  const Json st = svc.state(r.at("session_id"));
  CHECK(st.at("surrogate") == "dgp1");
  CHECK(st.at("acquisition") == "pi");
  CHECK(st.at("budget") == 20);
}

TEST_CASE("payload validation") {
  SessionService svc({});
  Json dup = twelve_instances();
  dup[3]["id"] = 100;
  expect_error(400, "validation_error", [&] { svc.create(Json{{"instances", dup}}); });
  Json lonely = twelve_instances();
  lonely[11]["nest"] = "alone";
  expect_error(400, "validation_error", [&] { svc.create(Json{{"instances", lonely}}); });
  Json ragged = twelve_instances();
  ragged[2]["features"] = {1.0};
  expect_error(400, "validation_error", [&] { svc.create(Json{{"instances", ragged}}); });
  expect_error(400, "validation_error", [&] { svc.create(Json{{"nothing", 1}}); });
  expect_error(400, "validation_error",
               [&] { svc.create(Json{{"instances", twelve_instances()}, {"config", {{"surrogate", "svm"}}}}); });
  expect_error(400, "validation_error",
               [&] { svc.create(Json{{"instances", twelve_instances()}, {"config", {{"fit_mode", "later"}}}}); });
  expect_error(404, "not_found", [&] { svc.state("nope"); });
}

TEST_CASE("answer protocol") {
  SessionService svc({});
  const Json r = svc.create(Json{{"instances", twelve_instances()}, {"config", quick_config("sync")}});
  const std::string id = r.at("session_id");
  const Json q1 = r.at("query");
  const long long w = preferred(q1);

  SUBCASE("winner outside the pair") {
    expect_error(400, "validation_error", [&] { svc.answer(id, Json{{"query_token", "q1"}, {"winner_id", 999}}); });
  }
  SUBCASE("idempotent resubmission") {
    const Json a = svc.answer(id, Json{{"query_token", "q1"}, {"winner_id", w}});
    const Json b = svc.answer(id, Json{{"query_token", "q1"}, {"winner_id", w}});
    CHECK(a == b);
    CHECK(svc.state(id).at("history").size() == 1);
    const long long other = q1.at("first").at("id") == w ? q1.at("second").at("id").get<long long>()
                                                         : q1.at("first").at("id").get<long long>();
    expect_error(409, "conflict", [&] { svc.answer(id, Json{{"query_token", "q1"}, {"winner_id", other}}); });
  }
  SUBCASE("stale token") {
    svc.answer(id, Json{{"query_token", "q1"}, {"winner_id", w}});
    expect_error(409, "stale_query", [&] { svc.answer(id, Json{{"query_token", "q7"}, {"winner_id", w}}); });
  }
  SUBCASE("run to exhaustion") {
    Json cur = r;
    int answered = 0;
    while (cur.at("status") == "awaiting_answer") {
      const Json& q = cur.at("query");
      cur = svc.answer(id, Json{{"query_token", q.at("token")}, {"winner_id", preferred(q)}});
      ++answered;
      const Json st = svc.state(id);
      CHECK(st.at("history").size() == static_cast<std::size_t>(answered));
      CHECK(st.at("status") == cur.at("status"));
    }
    CHECK(cur.at("status") == "exhausted");
    const Json st = svc.state(id);
    // 4 phase-1, 3 to 6 phase-2 and 4 active queries
    CHECK(st.at("active_queries") == 4);
    CHECK(answered >= 4 + 3 + 4);
    CHECK(answered <= 4 + 6 + 4);
    CHECK(st.at("query").is_null());
    CHECK(cur.at("x_best") == st.at("x_best"));
    CHECK_FALSE(st.at("estimates").empty());
    for (const auto& h : st.at("history")) CHECK(h.at("winner_id") != h.at("loser_id"));
    expect_error(409, "stale_query", [&] { svc.answer(id, Json{{"query_token", "q99"}, {"winner_id", 100}}); });
  }
}

TEST_CASE("asynchronous fits") {
  SessionService svc({});
  Json cur = svc.create(Json{{"instances", twelve_instances()}, {"config", quick_config("async", 2)}});
  const std::string id = cur.at("session_id");
  bool saw_fitting = false;
  for (int guard = 0; guard < 50; ++guard) {
    if (cur.at("status") == "fitting") {
      saw_fitting = true;
      svc.wait_idle(id);
      cur = svc.state(id);
    }
    if (cur.at("status") != "awaiting_answer") break;
    const Json& q = cur.at("query");
    cur = svc.answer(id, Json{{"query_token", q.at("token")}, {"winner_id", preferred(q)}});
  }
  CHECK(saw_fitting);
  CHECK(cur.at("status") == "exhausted");
}

TEST_CASE("sessions replay after a restart") {
  TempDir dir;
  std::string id;
  std::string before;
  {
    SessionService svc({dir.path, FitMode::sync});
    Json cur = svc.create(Json{{"instances", twelve_instances()}, {"config", quick_config("sync", 3)}});
    id = cur.at("session_id");
    for (int k = 0; k < 9 && cur.at("status") == "awaiting_answer"; ++k) {
      const Json& q = cur.at("query");
      cur = svc.answer(id, Json{{"query_token", q.at("token")}, {"winner_id", preferred(q)}});
    }
    before = svc.state(id).dump();
  }
  CHECK(fs::exists(dir.path / (id + ".jsonl")));
  SessionService again({dir.path, FitMode::sync});
  again.recover();
  REQUIRE(again.session_ids() == std::vector<std::string>{id});
  CHECK(again.state(id).dump() == before);
  // the outstanding token survives the restart
  const Json st = again.state(id);
  if (!st.at("query").is_null()) {
    const Json next = again.answer(id, Json{{"query_token", st.at("query").at("token")},
                                            {"winner_id", preferred(st.at("query"))}});
    CHECK(next.at("status") != "failed");
  }
}

TEST_CASE("csv uploads") {
  SessionService svc({});
  SUBCASE("generic schema") {
    const std::string csv = "id,nest,name,price,rating\n1,a,first,10,4\n2,a,second,12,3\n3,b,third,9,5\n4,b,fourth,20,2\n";
    const Json r = svc.create(Json{{"instances_csv", csv}, {"config", quick_config("sync")}});
    const Json st = svc.state(r.at("session_id"));
    CHECK(st.at("feature_names") == Json{"price", "rating"});
    CHECK(st.at("instance_count") == 4);
  }
  SUBCASE("malformed generic row") {
    const std::string csv = "id,nest,name,price\n1,a,first,10\n2,a,second,abc\n";
    try {
      svc.create(Json{{"instances_csv", csv}});
      FAIL("expected a parse error");
    } catch (const ServiceError& e) {
      CHECK(e.status() == 400);
      CHECK(e.body().at("error") == "parse_error");
      CHECK(e.body().at("details").at("line") == 3);
    }
  }
  SUBCASE("itinerary schema with 543 rows") {
    std::ifstream in(std::string(DCPREF_DATA_DIR) + "/itineraries_synthetic.csv");
    std::ostringstream text;
    text << in.rdbuf();
    const Json r = svc.create(Json{{"instances_csv", text.str()}, {"config", quick_config("sync")}});
    const Json st = svc.state(r.at("session_id"));
    CHECK(st.at("instance_count") == 543);
    CHECK(st.at("feature_names").size() == static_cast<std::size_t>(dcpref::kItineraryFeatureCount));
  }
}

TEST_CASE("bind address parsing") {
  CHECK(parse_bind_address("0.0.0.0:9000") == std::pair<std::string, int>{"0.0.0.0", 9000});
  CHECK(parse_bind_address("8080") == std::pair<std::string, int>{"127.0.0.1", 8080});
  CHECK_THROWS(parse_bind_address("host:port"));
  CHECK_THROWS(parse_bind_address(":80"));
}

TEST_CASE("http routes") {
  SessionService svc({});
  httplib::Server server;
  register_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);

  auto health = client.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

  const Json body{{"instances", twelve_instances()}, {"config", quick_config("sync")}};
  auto created = client.Post("/sessions", body.dump(), "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const Json r = Json::parse(created->body);
  const std::string id = r.at("session_id");

  const Json q = r.at("query");
  auto answered = client.Post("/sessions/" + id + "/answer",
                              Json{{"query_token", q.at("token")}, {"winner_id", preferred(q)}}.dump(),
                              "application/json");
  REQUIRE(answered);
  CHECK(answered->status == 200);
  auto stale = client.Post("/sessions/" + id + "/answer", Json{{"query_token", "q0"}, {"winner_id", 100}}.dump(),
                           "application/json");
  REQUIRE(stale);
  CHECK(stale->status == 409);
  CHECK(Json::parse(stale->body).at("error") == "stale_query");

  auto st = client.Get("/sessions/" + id + "/state");
  REQUIRE(st);
  CHECK(st->status == 200);
  CHECK(Json::parse(st->body).at("history").size() == 1);

  auto bad = client.Post("/sessions", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto missing = client.Get("/sessions/unknown/state");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  auto preflight = client.Options("/sessions");
  REQUIRE(preflight);
  CHECK(preflight->status == 204);

  server.stop();
  t.join();
}

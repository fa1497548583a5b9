#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <future>
#include <map>
#include <sstream>
#include <thread>

#include "dstn/error.hpp"
#include "dstn/serving.hpp"
#include "dstn/train_eval.hpp"

using namespace dstn;

namespace {

Schema serving_schema() {
  Schema s;
  s.group(AdGroup::target).fields = {{"user_id", FieldKind::univalent, {}},
                                     {"ad_id", FieldKind::univalent, {}},
                                     {"ad_title", FieldKind::multivalent, {}}};
  for (AdGroup g : kAuxGroups)
    s.group(g).fields = {{"ad_id", FieldKind::univalent, {}}, {"ad_title", FieldKind::multivalent, {}}};
  s.validate();
  return s;
}

RawRecord ad_record(int i) {
  RawRecord r;
  r.fields = {{"ad_id", "a" + std::to_string(i)}, {"ad_title", "title number " + std::to_string(i)}};
  return r;
}

struct Fixture {
  Schema schema = serving_schema();
  Vocabulary vocab;
  AdEncoder encoder{schema, vocab};

  Fixture() {
    std::vector<RawRecord> rs;
    for (int i = 0; i < 12; ++i) {
      RawRecord r = ad_record(i);
      r.fields.emplace_back("user_id", "u" + std::to_string(i % 3));
      rs.push_back(r);
    }
    vocab = build_vocabulary(rs, schema);
  }

  std::vector<Candidate> candidates(int n, const std::string& user = "u0") const {
    RawRecord profile;
    profile.fields = {{"user_id", user}};
    std::vector<Candidate> out;
    for (int i = 0; i < n; ++i) out.push_back(encoder.candidate(profile, ad_record(i), 1.0 + i));
    return out;
  }

  Model model(std::uint64_t seed) const {
    ModelConfig cfg;
    cfg.variant = Variant::dstn_i;
    cfg.embedding_dim = 4;
    cfg.hidden = {8, 4};
    cfg.attention_dim = 4;
    cfg.embedding_init_scale = 1.0;
    return Model(cfg, schema, vocab.size(), seed);
  }
};

// Scores by a per-key table, ignoring context.
FunctionScorer table_scorer(std::map<std::uint32_t, double> by_ad_index) {
  return FunctionScorer([by_ad_index](const EncodedInstance& c, const AuxContext&) {
    return by_ad_index.at(c.field(1)[0]);
  });
}

std::vector<std::string> keys(const RankResult& r) {
  std::vector<std::string> out;
  for (const auto& a : r.ads) out.push_back(a.key);
  return out;
}

}  // namespace

TEST_CASE("zero-parameter model: every pCTR is one half and ordinals break ties") {
  Fixture f;
  Model m = f.model(1);
  for (Param& p : m.params()) p.value.fill(0.0);
  const ModelScorer scorer(m);
  SessionStore store;
  const RankResult r = rank_request(scorer, store, {"u0", 100, f.candidates(6), 4});
  CHECK(keys(r) == std::vector<std::string>{"a0", "a1", "a2", "a3"});
  for (const auto& a : r.ads) CHECK(a.pctr == 0.5);
  CHECK(r.ads[0].round == 1);
  CHECK(r.ads[1].round == 2);
}

TEST_CASE("ranking does not depend on candidate order") {
  Fixture f;
  const Model m = f.model(2);
  const ModelScorer scorer(m);
  SessionStore store;
  store.record_event("u0", f.encoder.session_ad(ad_record(7), true), true, 50);
  auto cands = f.candidates(6);
  const RankResult base = rank_request(scorer, store, {"u0", 100, cands, 4});
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    rng.shuffle(cands);
    const RankResult r = rank_request(scorer, store, {"u0", 100, cands, 4});
    REQUIRE(r.ads.size() == base.ads.size());
    for (std::size_t i = 0; i < r.ads.size(); ++i) {
      CHECK(r.ads[i].key == base.ads[i].key);
      CHECK(r.ads[i].pctr == doctest::Approx(base.ads[i].pctr).epsilon(1e-12));
    }
  }
}

TEST_CASE("single candidate and the forward budget") {
  Fixture f;
  const Model m = f.model(3);
  ModelScorer scorer(m);
  SessionStore store;
  const RankResult one = rank_request(scorer, store, {"u0", 0, f.candidates(1), 4});
  REQUIRE(one.ads.size() == 1);
  CHECK(one.ads[0].round == 1);
  CHECK(scorer.batches() == 1);
  CHECK(scorer.forwards() == 1);
  for (std::size_t n = 2; n <= 8; ++n) {
    scorer.reset_counters();
    rank_request(scorer, store, {"u0", 0, f.candidates(static_cast<int>(n)), 1});
    CHECK(scorer.batches() == 2);
    CHECK(scorer.forwards() == n + (n - 1));
  }
}

TEST_CASE("round two uses the winner as the only contextual ad") {
  Fixture f;
  const auto cands = f.candidates(5);
  std::vector<std::size_t> ctx_sizes;
  std::vector<EncodedInstance> seen_ctx;
  FunctionScorer scorer([&](const EncodedInstance& c, const AuxContext& aux) {
    ctx_sizes.push_back(aux.contextual.size());
    if (!aux.contextual.empty()) seen_ctx.push_back(aux.contextual[0]);
    return c.field(1)[0] == cands[2].as(AdGroup::target).field(1)[0] ? 0.9 : 0.1 + 0.01 * c.field(1)[0];
  });
  SessionStore store;
  const RankResult r = rank_request(scorer, store, {"u0", 0, cands, 4});
  CHECK(r.ads.size() == 4);
  CHECK(r.ads[0].key == "a2");
  CHECK(std::count(ctx_sizes.begin(), ctx_sizes.end(), 0u) == 5);
  CHECK(std::count(ctx_sizes.begin(), ctx_sizes.end(), 1u) == 4);
  for (const auto& c : seen_ctx) CHECK(c == cands[2].as(AdGroup::contextual));
}

TEST_CASE("a context-free stub reproduces top-k by score") {
  Fixture f;
  const auto cands = f.candidates(8);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::map<std::uint32_t, double> table;
    std::vector<std::pair<double, std::string>> expected;
    for (const auto& c : cands) {
      const double s = rng.uniform();
      table[c.as(AdGroup::target).field(1)[0]] = s;
      expected.emplace_back(-s, c.key);
    }
    std::sort(expected.begin(), expected.end());
    const std::size_t slots = 1 + rng.below(5);
    SessionStore store;
    const RankResult r = rank_request(table_scorer(table), store, {"u0", 0, cands, slots});
    REQUIRE(r.ads.size() == slots);
    for (std::size_t i = 0; i < slots; ++i) CHECK(r.ads[i].key == expected[i].second);
  }
}

TEST_CASE("bid weighting is invariant to scaling every bid") {
  Fixture f;
  const Model m = f.model(5);
  const ModelScorer scorer(m);
  SessionStore store;
  auto cands = f.candidates(6);
  const RankResult base = rank_request(scorer, store, {"u0", 0, cands, 3}, {true});
  for (auto& c : cands) c.bid *= 7.5;
  CHECK(keys(rank_request(scorer, store, {"u0", 0, cands, 3}, {true})) == keys(base));
}

TEST_CASE("rank_request contract") {
  Fixture f;
  FunctionScorer s([](const EncodedInstance&, const AuxContext&) { return 0.5; });
  SessionStore store;
  CHECK_THROWS_AS(rank_request(s, store, {"u0", 0, {}, 4}), ContractViolation);
  CHECK_THROWS_AS(rank_request(s, store, {"u0", 0, f.candidates(2), 0}), ContractViolation);
  auto dup = f.candidates(2);
  dup.push_back(dup[0]);
  CHECK_THROWS_AS(rank_request(s, store, {"u0", 0, dup, 4}), ContractViolation);
}

TEST_CASE("model scorer rejects instances for the wrong group") {
  Fixture f;
  const Model m = f.model(6);
  const ModelScorer scorer(m);
  const auto cands = f.candidates(1);
  AuxContext aux;
  aux.clicked.push_back(cands[0].as(AdGroup::contextual));
  const EncodedInstance t = cands[0].as(AdGroup::target);
  CHECK_THROWS_AS(scorer.score(aux, std::span(&t, 1)), ContractViolation);
}

TEST_CASE("replay: read-your-writes, lag, ordering") {
  Fixture f;
  std::vector<std::size_t> clicked_seen;
  FunctionScorer scorer([&](const EncodedInstance&, const AuxContext& aux) {
    clicked_seen.push_back(aux.clicked.size());
    return 0.5;
  });
  std::istringstream log(
      "profile\tu0\tuser_id=u0\n"
      "click\tu0\t100\tad_id=a3;ad_title=x\n"
      "request\tr1\tu0\t100\tad_id=a1;ad_title=t|ad_id=a2;ad_title=t\n"
      "request\tr2\tu0\t105\tad_id=a1;ad_title=t\n"
      "request\tr3\tu0\t110\tad_id=a1;ad_title=t\n");
  const auto events = parse_serving_log(log, f.encoder);
  REQUIRE(events.size() == 4);

  SUBCASE("lag zero sees the click at once") {
    SessionStore store;
    replay_session(scorer, store, events, {4, 0, false, {}});
    CHECK(clicked_seen.front() == 1);
  }
  SUBCASE("ten-second lag hides the click until ts + 10") {
    SessionStore store;
    const auto out = replay_session(scorer, store, events, {4, 10, false, {}});
    REQUIRE(out.size() == 3);
    // r1: 2 + 1 forwards, r2: 1, r3: 1.
    REQUIRE(clicked_seen.size() == 5);
    CHECK(clicked_seen[0] == 0);
    CHECK(clicked_seen[3] == 0);
    CHECK(clicked_seen[4] == 1);
  }
  SUBCASE("served pages become unclicked impressions") {
    SessionStore store;
    replay_session(scorer, store, events, {});
    CHECK(store.get_history("u0", 110).unclicked.size() == 4);
  }
  SUBCASE("empty log") {
    SessionStore store;
    CHECK(replay_session(scorer, store, {}, {}).empty());
  }
  SUBCASE("decreasing timestamps for a user") {
    std::istringstream bad(
        "click\tu0\t100\tad_id=a3\n"
        "request\tr1\tu0\t90\tad_id=a1\n");
    const auto ev = parse_serving_log(bad, f.encoder);
    SessionStore store;
    CHECK_THROWS_AS(replay_session(scorer, store, ev, {}), ParseError);
  }
}

TEST_CASE("serving log parsing and the generated log") {
  Fixture f;
  std::istringstream bad_kind("bogus\tu0\n");
  CHECK_THROWS_AS(parse_serving_log(bad_kind, f.encoder), ParseError);
  std::istringstream bad_ts("click\tu0\tsoon\tad_id=a1\n");
  CHECK_THROWS_AS(parse_serving_log(bad_ts, f.encoder), ParseError);
  std::istringstream bad_bids("request\tr\tu0\t1\tad_id=a1|ad_id=a2\t1.0\n");
  CHECK_THROWS_AS(parse_serving_log(bad_bids, f.encoder), ParseError);
  std::istringstream no_ad_id("request\tr\tu0\t1\tad_title=x\n");
  CHECK_THROWS_AS(parse_serving_log(no_ad_id, f.encoder), ParseError);

  std::istringstream bids("request\tr\tu0\t1\tad_id=a1|ad_id=a2\t2,0.5\n");
  const auto ev = parse_serving_log(bids, f.encoder);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0].candidates[0].bid == 2.0);
  CHECK(ev[0].candidates[1].key == "a2");

  std::vector<RawExample> examples;
  for (int i = 0; i < 20; ++i) {
    RawExample ex;
    ex.label = i % 3 == 0;
    ex.timestamp = 10 * i;
    ex.user_id = "u" + std::to_string(i % 3);
    ex.target = ad_record(i % 12);
    ex.target.fields.insert(ex.target.fields.begin(), {"user_id", ex.user_id});
    examples.push_back(ex);
  }
  std::ostringstream out;
  write_serving_log(out, examples, 3, 9);
  std::istringstream in(out.str());
  const auto parsed = parse_serving_log(in, f.encoder);
  std::size_t requests = 0, clicks = 0;
  for (const auto& e : parsed) {
    if (e.kind == ServingEvent::Kind::request) {
      ++requests;
      CHECK(e.candidates.size() == 4);
    }
    clicks += e.kind == ServingEvent::Kind::click;
  }
  CHECK(requests == 20);
  CHECK(clicks == 7);
  std::ostringstream again;
  write_serving_log(again, examples, 3, 9);
  CHECK(again.str() == out.str());
}

TEST_CASE("results file format") {
  RankResult r;
  r.ads = {{0, "a0", 0.25, 1}, {3, "a3", 0.5, 2}};
  const std::vector<ReplayOutput> outs{{"r9", r}};
  std::ostringstream os;
  write_results(os, outs);
  CHECK(os.str() == "r9\t0\ta0\t1\t0.25\nr9\t1\ta3\t2\t0.5\n");
}

TEST_CASE("line protocol") {
  Fixture f;
  const Model m = f.model(7);
  const ModelScorer scorer(m);
  SessionStore store;
  std::unordered_map<std::string, RawRecord> catalog;
  for (int i = 0; i < 6; ++i) catalog["a" + std::to_string(i)] = ad_record(i);
  ProtocolHandler h(scorer, store, f.encoder, catalog);

  CHECK(h.handle("EVENT u1 50 clk a4") == "OK");
  CHECK(store.get_history("u1", 50).clicked.size() == 1);
  const std::string reply = h.handle("RANK u1 60 3 a0,a1,a2,a3");
  CHECK(reply.rfind("OK ", 0) == 0);
  CHECK(std::count(reply.begin(), reply.end(), ' ') == 3);
  CHECK(reply.find(":1") != std::string::npos);
  CHECK(h.handle("RANK u1 60 3 a0,zz").rfind("ERR", 0) == 0);
  CHECK(h.handle("RANK u1 60 0 a0").rfind("ERR", 0) == 0);
  CHECK(h.handle("EVENT u1 -3 clk a0").rfind("ERR", 0) == 0);
  CHECK(h.handle("EVENT u1 3 maybe a0").rfind("ERR", 0) == 0);
  CHECK(h.handle("HELLO").rfind("ERR", 0) == 0);
  CHECK(h.handle("").rfind("ERR", 0) == 0);

  std::istringstream in("EVENT u2 1 unclk a0\nQUIT\nEVENT u2 2 unclk a1\n");
  std::ostringstream out;
  serve_stream(in, out, h);
  CHECK(out.str() == "OK\n");
  CHECK(store.get_history("u2", 5).unclicked.size() == 1);
}

TEST_CASE("line protocol over a loopback socket") {
  Fixture f;
  const Model m = f.model(8);
  const ModelScorer scorer(m);
  SessionStore store;
  std::unordered_map<std::string, RawRecord> catalog;
  for (int i = 0; i < 4; ++i) catalog["a" + std::to_string(i)] = ad_record(i);
  ProtocolHandler h(scorer, store, f.encoder, catalog);

  std::promise<std::uint16_t> ready;
  auto port_future = ready.get_future();
  std::thread server([&] { serve_tcp(0, h, 1, [&](std::uint16_t p) { ready.set_value(p); }); });
  const std::uint16_t port = port_future.get();

  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  const std::string msg = "EVENT u 5 clk a1\nRANK u 6 2 a0,a2,a3\nQUIT\n";
  REQUIRE(::send(fd, msg.data(), msg.size(), 0) == static_cast<ssize_t>(msg.size()));
  std::string got;
  char buf[512];
  ssize_t n;
  while ((n = ::recv(fd, buf, sizeof buf, 0)) > 0) got.append(buf, static_cast<std::size_t>(n));
  ::close(fd);
  server.join();

  CHECK(got.rfind("OK\nOK ", 0) == 0);
  CHECK(std::count(got.begin(), got.end(), '\n') == 2);
  CHECK(store.get_history("u", 6).clicked.size() == 1);
}

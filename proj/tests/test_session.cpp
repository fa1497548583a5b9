#include <doctest.h>

#include <algorithm>
#include <sstream>
#include <thread>

#include "dstn/error.hpp"
#include "dstn/numerics.hpp"
#include "dstn/session.hpp"
#include "oracles.hpp"

using namespace dstn;

namespace {

SessionAd ad(const std::string& id) {
  SessionAd a;
  a.raw.fields = {{"ad_id", id}, {"ad_title", "title " + id}};
  a.key = session_ad_key(a.raw);
  return a;
}

std::vector<std::int64_t> times(const std::vector<HistoryEntry>& xs) {
  std::vector<std::int64_t> out;
  for (const auto& e : xs) out.push_back(e.ts);
  return out;
}

std::vector<std::string> keys(const std::vector<HistoryEntry>& xs) {
  std::vector<std::string> out;
  for (const auto& e : xs) out.push_back(e.ad.key);
  return out;
}

bool matches(const std::vector<HistoryEntry>& got, const std::vector<oracle::SessionLog::Event>& want) {
  if (got.size() != want.size()) return false;
  for (std::size_t i = 0; i < got.size(); ++i)
    if (got[i].ts != want[i].ts || got[i].ad.key != want[i].key) return false;
  return true;
}

}  // namespace

TEST_CASE("session store examples") {
  SessionStore s;
  SUBCASE("six clicks keep the latest five") {
    for (int t = 1; t <= 6; ++t) s.record_event("u", ad("a" + std::to_string(t)), true, t);
    const UserHistory h = s.get_history("u", 10);
    CHECK(times(h.clicked) == std::vector<std::int64_t>{2, 3, 4, 5, 6});
    CHECK(h.unclicked.empty());
  }
  SUBCASE("unknown user") {
    const UserHistory h = s.get_history("nobody", 100);
    CHECK(h.clicked.empty());
    CHECK(h.unclicked.empty());
    CHECK(s.user_count() == 0);
  }
  SUBCASE("out-of-order arrival is stored in timestamp order") {
    s.record_event("u", ad("late"), false, 10);
    s.record_event("u", ad("early"), false, 5);
    s.record_event("u", ad("tie"), false, 10);
    const UserHistory h = s.get_history("u", 10);
    CHECK(times(h.unclicked) == std::vector<std::int64_t>{5, 10, 10});
    CHECK(keys(h.unclicked) == std::vector<std::string>{"early", "late", "tie"});
  }
  SUBCASE("window boundary") {
    s.record_event("u", ad("x"), true, 1);
    CHECK(s.get_history("u", 1 + kThreeDaysSeconds - 1).clicked.size() == 1);
    CHECK(s.get_history("u", 1 + kThreeDaysSeconds).clicked.empty());
  }
  SUBCASE("writes purge relative to the event time") {
    s.record_event("u", ad("old"), true, 0);
    s.record_event("u", ad("new"), true, kThreeDaysSeconds);
    CHECK(keys(s.get_history("u", kThreeDaysSeconds).clicked) == std::vector<std::string>{"new"});
  }
  SUBCASE("a click with its impression time replaces the unclicked entry") {
    s.record_event("u", ad("a"), false, 100);
    s.record_event("u", ad("b"), false, 100);
    s.record_event("u", ad("a"), true, 104, 100);
    const UserHistory h = s.get_history("u", 105);
    CHECK(keys(h.unclicked) == std::vector<std::string>{"b"});
    CHECK(keys(h.clicked) == std::vector<std::string>{"a"});
    // Without an impression time nothing is removed.
    s.record_event("u", ad("b"), true, 106);
    CHECK(keys(s.get_history("u", 106).unclicked) == std::vector<std::string>{"b"});
  }
  CHECK_THROWS_AS(s.record_event("u", ad("neg"), true, -1), ContractViolation);
}

TEST_CASE("session store agrees with the brute-force log") {
  Rng rng(5);
  SessionStore store;
  oracle::SessionLog log(5, kThreeDaysSeconds);
  std::int64_t now = 0, last_query = 0;
  for (int i = 0; i < 5000; ++i) {
    now += static_cast<std::int64_t>(rng.below(20000));
    const std::string user = "u" + std::to_string(rng.below(40));
    if (rng.bernoulli(0.8)) {
      const bool clicked = rng.bernoulli(0.3);
      const std::string key = "a" + std::to_string(rng.below(30));
      store.record_event(user, ad(key), clicked, now);
      log.record(user, key, clicked, now);
    } else {
      // Query times never go backwards.
      const std::int64_t q = last_query = std::max(last_query, now + static_cast<std::int64_t>(rng.below(100000)));
      const UserHistory h = store.get_history(user, q);
      CHECK(matches(h.clicked, log.query(user, true, q)));
      CHECK(matches(h.unclicked, log.query(user, false, q)));
      CHECK(h.clicked.size() <= 5);
      CHECK(h.unclicked.size() <= 5);
    }
  }
}

TEST_CASE("concurrent writers on distinct users") {
  SessionStore store;
  constexpr int kThreads = 8, kEvents = 2000;
  std::vector<std::thread> threads;
  for (int t = 0; t < kThreads; ++t)
    threads.emplace_back([&store, t] {
      Rng rng(100 + static_cast<std::uint64_t>(t));
      for (int i = 0; i < kEvents; ++i) {
        const std::string user = "t" + std::to_string(t) + "_" + std::to_string(rng.below(10));
        store.record_event(user, ad("a" + std::to_string(i)), rng.bernoulli(0.5), i);
        store.get_history(user, i);
      }
    });
  for (auto& th : threads) th.join();
  CHECK(store.user_count() == kThreads * 10);

  // A sequential replay of the same streams gives the same contents.
  SessionStore seq;
  for (int t = 0; t < kThreads; ++t) {
    Rng rng(100 + static_cast<std::uint64_t>(t));
    for (int i = 0; i < kEvents; ++i) {
      const std::string user = "t" + std::to_string(t) + "_" + std::to_string(rng.below(10));
      seq.record_event(user, ad("a" + std::to_string(i)), rng.bernoulli(0.5), i);
    }
  }
  CHECK(store == seq);
}

TEST_CASE("snapshot and restore reproduce the store") {
  SessionStore s;
  Rng rng(9);
  for (int i = 0; i < 300; ++i)
    s.record_event("u" + std::to_string(rng.below(12)), ad("a" + std::to_string(rng.below(50))), rng.bernoulli(0.4),
                   i * 10);
  std::ostringstream os;
  s.snapshot(os);
  const auto encode = [](const RawRecord&, AdGroup g) {
    EncodedInstance e;
    e.group = g;
    return e;
  };
  SessionStore back;
  std::istringstream in(os.str());
  back.restore(in, encode);
  // The originals carry default encodings for both lists; align the groups.
  SessionStore expected;
  std::istringstream again(os.str());
  expected.restore(again, encode);
  CHECK(back == expected);
  CHECK(back.users() == s.users());
  for (const std::string& u : s.users()) {
    CHECK(keys(back.get_history(u, 3000).clicked) == keys(s.get_history(u, 3000).clicked));
    CHECK(times(back.get_history(u, 3000).unclicked) == times(s.get_history(u, 3000).unclicked));
  }
  std::ostringstream os2;
  back.snapshot(os2);
  CHECK(os2.str() == os.str());

  std::istringstream bad("u\tmaybe\t5\tad_id=a\n");
  CHECK_THROWS_AS(back.restore(bad, encode), ParseError);
  std::istringstream order("u\tclk\t9\tad_id=a\nu\tclk\t5\tad_id=b\n");
  CHECK_THROWS_AS(back.restore(order, encode), ParseError);
  CHECK(back.users() == s.users());  // failed restores leave the store alone
}

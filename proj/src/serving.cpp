#include "dstn/serving.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <system_error>
#include <unordered_set>

#include "dstn/error.hpp"

namespace dstn {

std::vector<double> Scorer::score(const AuxContext& aux, std::span<const EncodedInstance> candidates) const {
  ++batches_;
  forwards_ += candidates.size();
  return score_impl(aux, candidates);
}

namespace {

void check_group(const EncodedInstance& inst, AdGroup expected, const Schema& schema) {
  if (inst.group != expected) throw ContractViolation("score_batch: instance encoded for the wrong group");
  if (inst.field_count() != schema.group(expected).field_count())
    throw ContractViolation("score_batch: instance field count does not match the schema");
}

}  // namespace

std::vector<double> ModelScorer::score_impl(const AuxContext& aux,
                                            std::span<const EncodedInstance> candidates) const {
  const Schema& schema = model_.schema();
  for (const auto& c : candidates) check_group(c, AdGroup::target, schema);
  for (const auto& a : aux.contextual) check_group(a, AdGroup::contextual, schema);
  for (const auto& a : aux.clicked) check_group(a, AdGroup::clicked, schema);
  for (const auto& a : aux.unclicked) check_group(a, AdGroup::unclicked, schema);
  std::vector<LabeledExample> batch(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    batch[i].target = candidates[i];
    batch[i].contextual = aux.contextual;
    batch[i].clicked = aux.clicked;
    batch[i].unclicked = aux.unclicked;
  }
  return model_.predict(batch);
}

std::vector<double> FunctionScorer::score_impl(const AuxContext& aux,
                                               std::span<const EncodedInstance> candidates) const {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(fn_(c, aux));
  return out;
}

std::vector<double> score_batch(const Scorer& scorer, const UserHistory& history,
                                std::span<const EncodedInstance> contextual,
                                std::span<const EncodedInstance> candidates) {
  require(history.clicked.size() <= kMaxAuxAds && history.unclicked.size() <= kMaxAuxAds,
          "score_batch: history lists hold at most 5 ads");
  require(contextual.size() <= kMaxAuxAds, "score_batch: at most 5 contextual ads");
  AuxContext aux;
  aux.contextual.assign(contextual.begin(), contextual.end());
  for (auto it = history.clicked.rbegin(); it != history.clicked.rend(); ++it) aux.clicked.push_back(it->ad.encoded);
  for (auto it = history.unclicked.rbegin(); it != history.unclicked.rend(); ++it)
    aux.unclicked.push_back(it->ad.encoded);
  return scorer.score(aux, candidates);
}

bool is_profile_field(std::string_view name) {
  return name == "user_id" || name.rfind("user_", 0) == 0;
}

RankResult rank_request(const Scorer& scorer, SessionStore& store, const RankRequest& req,
                        const RankOptions& opts) {
  const std::size_t n = req.candidates.size();
  require(n > 0, "rank_request: no candidates");
  require(req.slots >= 1, "rank_request: slots must be at least 1");
  {
    std::unordered_set<std::string> seen;
    for (const auto& c : req.candidates)
      require(seen.insert(c.key).second, "rank_request: duplicate candidate");
  }
  const UserHistory history = store.get_history(req.user_id, req.now);
  auto rank_score = [&](std::size_t i, double pctr) {
    return opts.bid_weighted ? pctr * req.candidates[i].bid : pctr;
  };

  std::vector<EncodedInstance> targets;
  targets.reserve(n);
  for (const auto& c : req.candidates) targets.push_back(c.as(AdGroup::target));
  const std::vector<double> round1 = score_batch(scorer, history, {}, targets);

  std::size_t winner = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (rank_score(i, round1[i]) > rank_score(winner, round1[winner])) winner = i;

  RankResult result;
  result.ads.push_back({winner, req.candidates[winner].key, round1[winner], 1});
  if (n == 1) return result;

  std::vector<std::size_t> rest;
  std::vector<EncodedInstance> rest_targets;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == winner) continue;
    rest.push_back(i);
    rest_targets.push_back(targets[i]);
  }
  const EncodedInstance context = req.candidates[winner].as(AdGroup::contextual);
  const std::vector<double> round2 = score_batch(scorer, history, std::span(&context, 1), rest_targets);

  std::vector<std::size_t> order(rest.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rank_score(rest[a], round2[a]) > rank_score(rest[b], round2[b]);
  });
  const std::size_t picks = std::min(req.slots - 1, order.size());
  for (std::size_t k = 0; k < picks; ++k) {
    const std::size_t j = order[k];
    result.ads.push_back({rest[j], req.candidates[rest[j]].key, round2[j], 2});
  }
  return result;
}

EncodedInstance AdEncoder::encode(const RawRecord& raw, AdGroup g) const {
  return encode_instance(raw, schema_.group(g), vocab_);
}

Candidate AdEncoder::candidate(const RawRecord& profile, const RawRecord& ad, double bid) const {
  Candidate c;
  c.key = session_ad_key(ad);
  c.raw = ad;
  c.bid = bid;
  RawRecord target = profile;
  target.fields.insert(target.fields.end(), ad.fields.begin(), ad.fields.end());
  c.encoded[static_cast<int>(AdGroup::target)] = encode(target, AdGroup::target);
  for (AdGroup g : kAuxGroups) c.encoded[static_cast<int>(g)] = encode(ad, g);
  return c;
}

SessionAd AdEncoder::session_ad(const RawRecord& ad, bool clicked) const {
  return SessionAd{session_ad_key(ad), ad, encode(ad, clicked ? AdGroup::clicked : AdGroup::unclicked)};
}

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && !s.empty();
}

std::int64_t parse_ts(std::string_view s, std::size_t lineno) {
  std::int64_t v = 0;
  if (!parse_number(s, v) || v < 0) throw ParseError("bad timestamp '" + std::string(s) + "'", lineno);
  return v;
}

}  // namespace

std::vector<ServingEvent> parse_serving_log(std::istream& in, const AdEncoder& encoder) {
  std::vector<ServingEvent> out;
  std::unordered_map<std::string, RawRecord> profiles;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split(line, '\t');
    const std::string_view kind = cols[0];
    auto need = [&](std::size_t lo, std::size_t hi) {
      if (cols.size() < lo || cols.size() > hi)
        throw ParseError("wrong column count for '" + std::string(kind) + "'", lineno);
    };
    try {
      if (kind == "profile") {
        need(3, 3);
        profiles[std::string(cols[1])] = parse_fields(cols[2], lineno);
      } else if (kind == "impression" || kind == "click") {
        const bool clicked = kind == "click";
        need(4, clicked ? 5 : 4);
        ServingEvent ev;
        ev.kind = clicked ? ServingEvent::Kind::click : ServingEvent::Kind::impression;
        ev.line = lineno;
        ev.user_id = cols[1];
        ev.ts = parse_ts(cols[2], lineno);
        ev.ad = encoder.session_ad(parse_fields(cols[3], lineno), clicked);
        if (cols.size() == 5 && !cols[4].empty()) ev.impression_ts = parse_ts(cols[4], lineno);
        out.push_back(std::move(ev));
      } else if (kind == "request") {
        need(5, 6);
        ServingEvent ev;
        ev.kind = ServingEvent::Kind::request;
        ev.line = lineno;
        ev.request_id = cols[1];
        ev.user_id = cols[2];
        ev.ts = parse_ts(cols[3], lineno);
        const std::vector<RawRecord> ads = parse_block(cols[4], lineno);
        if (ads.empty()) throw ParseError("request without candidates", lineno);
        std::vector<double> bids(ads.size(), 1.0);
        if (cols.size() == 6) {
          const auto parts = split(cols[5], ',');
          if (parts.size() != ads.size()) throw ParseError("bid count does not match candidates", lineno);
          for (std::size_t i = 0; i < parts.size(); ++i)
            if (!parse_number(parts[i], bids[i]) || !(bids[i] > 0)) throw ParseError("bad bid", lineno);
        }
        auto pit = profiles.find(ev.user_id);
        RawRecord profile;
        if (pit != profiles.end()) profile = pit->second;
        else profile.fields.emplace_back("user_id", ev.user_id);
        for (std::size_t i = 0; i < ads.size(); ++i) ev.candidates.push_back(encoder.candidate(profile, ads[i], bids[i]));
        out.push_back(std::move(ev));
      } else {
        throw ParseError("unknown record kind '" + std::string(kind) + "'", lineno);
      }
    } catch (const EncodeError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

void write_serving_log(std::ostream& out, const std::vector<RawExample>& examples,
                       std::size_t extra_candidates, std::uint64_t seed) {
  auto split_target = [](const RawRecord& target, RawRecord& profile, RawRecord& ad) {
    for (const auto& kv : target.fields) (is_profile_field(kv.first) ? profile : ad).fields.push_back(kv);
  };

  std::vector<RawRecord> pool;
  std::unordered_set<std::string> pool_keys;
  for (const auto& ex : examples) {
    RawRecord profile, ad;
    split_target(ex.target, profile, ad);
    if (pool_keys.insert(session_ad_key(ad)).second) pool.push_back(std::move(ad));
  }

  Rng rng(seed);
  std::unordered_set<std::string> profiled;
  std::size_t request = 0;
  for (const auto& ex : examples) {
    RawRecord profile, ad;
    split_target(ex.target, profile, ad);
    if (profiled.insert(ex.user_id).second)
      out << "profile\t" << ex.user_id << '\t' << format_fields(profile) << '\n';
    std::vector<RawRecord> cands{ad};
    std::unordered_set<std::string> used{session_ad_key(ad)};
    const std::size_t want = std::min(extra_candidates, pool.size() - 1);
    while (cands.size() < want + 1) {
      const RawRecord& other = pool[rng.below(pool.size())];
      if (used.insert(session_ad_key(other)).second) cands.push_back(other);
    }
    rng.shuffle(cands);
    out << "request\tr" << request++ << '\t' << ex.user_id << '\t' << ex.timestamp << '\t' << format_block(cands)
        << '\n';
    if (ex.label == 1)
      out << "click\t" << ex.user_id << '\t' << ex.timestamp << '\t' << format_fields(ad) << '\t' << ex.timestamp
          << '\n';
  }
}

std::vector<ReplayOutput> replay_session(const Scorer& scorer, SessionStore& store,
                                         std::span<const ServingEvent> log, const ReplayOptions& opts) {
  require(opts.lag_seconds >= 0, "replay_session: lag must be non-negative");
  struct Pending {
    std::int64_t visible_at;
    std::string user_id;
    SessionAd ad;
    bool clicked;
    std::int64_t ts;
    std::optional<std::int64_t> impression_ts;
  };
  std::vector<Pending> pending;
  auto apply_until = [&](std::optional<std::int64_t> now) {
    std::vector<Pending> keep;
    for (auto& p : pending) {
      if (!now || p.visible_at <= *now)
        store.record_event(p.user_id, std::move(p.ad), p.clicked, p.ts, p.impression_ts);
      else
        keep.push_back(std::move(p));
    }
    pending = std::move(keep);
  };

  std::unordered_map<std::string, std::int64_t> last_ts;
  std::vector<ReplayOutput> out;
  for (const ServingEvent& ev : log) {
    auto [it, fresh] = last_ts.try_emplace(ev.user_id, ev.ts);
    if (!fresh) {
      if (ev.ts < it->second) throw ParseError("timestamps decrease for user '" + ev.user_id + "'", ev.line);
      it->second = ev.ts;
    }
    if (ev.kind != ServingEvent::Kind::request) {
      pending.push_back({ev.ts + opts.lag_seconds, ev.user_id, ev.ad, ev.kind == ServingEvent::Kind::click, ev.ts,
                         ev.impression_ts});
      continue;
    }
    apply_until(ev.ts);
    RankRequest req{ev.user_id, ev.ts, ev.candidates, opts.slots};
    RankResult res = rank_request(scorer, store, req, opts.rank);
    if (opts.log_impressions) {
      for (const RankedAd& a : res.ads) {
        const Candidate& c = ev.candidates[a.candidate];
        pending.push_back({ev.ts + opts.lag_seconds, ev.user_id,
                           SessionAd{c.key, c.raw, c.as(AdGroup::unclicked)}, false, ev.ts, std::nullopt});
      }
    }
    out.push_back({ev.request_id, std::move(res)});
  }
  apply_until(std::nullopt);
  return out;
}

void write_results(std::ostream& out, std::span<const ReplayOutput> results) {
  for (const auto& r : results)
    for (std::size_t pos = 0; pos < r.result.ads.size(); ++pos) {
      const RankedAd& a = r.result.ads[pos];
      out << r.request_id << '\t' << pos << '\t' << a.key << '\t' << a.round << '\t' << format_double(a.pctr)
          << '\n';
    }
}

ProtocolHandler::ProtocolHandler(const Scorer& scorer, SessionStore& store, const AdEncoder& encoder,
                                 std::unordered_map<std::string, RawRecord> catalog,
                                 std::unordered_map<std::string, RawRecord> profiles, RankOptions opts)
    : scorer_(scorer),
      store_(store),
      encoder_(encoder),
      catalog_(std::move(catalog)),
      profiles_(std::move(profiles)),
      opts_(opts) {}

std::string ProtocolHandler::handle(std::string_view line) {
  std::vector<std::string> tok;
  {
    std::istringstream ss{std::string(line)};
    std::string t;
    while (ss >> t) tok.push_back(t);
  }
  if (tok.empty()) return "ERR empty request";
  auto find_ad = [&](const std::string& id) -> const RawRecord& {
    auto it = catalog_.find(id);
    if (it == catalog_.end()) throw std::invalid_argument("unknown ad '" + id + "'");
    return it->second;
  };
  try {
    if (tok[0] == "RANK") {
      if (tok.size() != 5) return "ERR usage: RANK <user_id> <now> <slots> <ad_id,...>";
      RankRequest req;
      req.user_id = tok[1];
      std::size_t slots = 0;
      if (!parse_number(std::string_view(tok[2]), req.now) || req.now < 0) return "ERR bad timestamp";
      if (!parse_number(std::string_view(tok[3]), slots) || slots == 0) return "ERR bad slot count";
      req.slots = slots;
      RawRecord profile;
      if (auto it = profiles_.find(req.user_id); it != profiles_.end()) profile = it->second;
      else profile.fields.emplace_back("user_id", req.user_id);
      for (std::string_view id : split(tok[4], ','))
        req.candidates.push_back(encoder_.candidate(profile, find_ad(std::string(id))));
      const RankResult res = rank_request(scorer_, store_, req, opts_);
      std::string reply = "OK";
      for (const RankedAd& a : res.ads) reply += " " + a.key + ":" + format_double(a.pctr) + ":" + std::to_string(a.round);
      return reply;
    }
    if (tok[0] == "EVENT") {
      if (tok.size() != 5) return "ERR usage: EVENT <user_id> <ts> <clk|unclk> <ad_id>";
      std::int64_t ts = 0;
      if (!parse_number(std::string_view(tok[2]), ts) || ts < 0) return "ERR bad timestamp";
      if (tok[3] != "clk" && tok[3] != "unclk") return "ERR list must be clk or unclk";
      const bool clicked = tok[3] == "clk";
      store_.record_event(tok[1], encoder_.session_ad(find_ad(tok[4]), clicked), clicked, ts);
      return "OK";
    }
    return "ERR unknown command '" + tok[0] + "'";
  } catch (const std::exception& e) {
    return std::string("ERR ") + e.what();
  }
}

void serve_stream(std::istream& in, std::ostream& out, ProtocolHandler& handler) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "QUIT") break;
    out << handler.handle(line) << '\n' << std::flush;
  }
}

namespace {

struct Fd {
  int fd = -1;
  explicit Fd(int f) : fd(f) {}
  ~Fd() {
    if (fd >= 0) ::close(fd);
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
};

[[noreturn]] void sys_fail(const char* what) { throw std::system_error(errno, std::generic_category(), what); }

bool send_all(int fd, const std::string& s) {
  std::size_t sent = 0;
  while (sent < s.size()) {
    const ssize_t n = ::send(fd, s.data() + sent, s.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

void serve_connection(int fd, ProtocolHandler& handler) {
  std::string buf;
  char chunk[4096];
  while (true) {
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n <= 0) return;
    buf.append(chunk, static_cast<std::size_t>(n));
    std::size_t nl;
    while ((nl = buf.find('\n')) != std::string::npos) {
      std::string line = buf.substr(0, nl);
      buf.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line == "QUIT") return;
      if (!send_all(fd, handler.handle(line) + "\n")) return;
    }
  }
}

}  // namespace

void serve_tcp(std::uint16_t port, ProtocolHandler& handler, std::size_t max_connections,
               const std::function<void(std::uint16_t)>& on_ready) {
  Fd listener(::socket(AF_INET, SOCK_STREAM, 0));
  if (listener.fd < 0) sys_fail("socket");
  const int one = 1;
  ::setsockopt(listener.fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listener.fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) sys_fail("bind");
  if (::listen(listener.fd, 8) != 0) sys_fail("listen");
  socklen_t len = sizeof addr;
  if (::getsockname(listener.fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) sys_fail("getsockname");
  if (on_ready) on_ready(ntohs(addr.sin_port));
  for (std::size_t served = 0; max_connections == 0 || served < max_connections; ++served) {
    Fd conn(::accept(listener.fd, nullptr, nullptr));
    if (conn.fd < 0) sys_fail("accept");
    serve_connection(conn.fd, handler);
  }
}

}  // namespace dstn

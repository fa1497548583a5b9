#include "dstn/session.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <ostream>

#include "dstn/error.hpp"
#include "dstn/ingest.hpp"

namespace dstn {

std::string session_ad_key(const RawRecord& raw) {
  if (const std::string* id = raw.find("ad_id")) return *id;
  return format_fields(raw);
}

SessionStore::SessionStore(std::size_t capacity, std::int64_t window_seconds)
    : capacity_(capacity), window_(window_seconds) {
  require(capacity_ > 0, "SessionStore: capacity must be positive");
  require(window_ > 0, "SessionStore: window must be positive");
}

SessionStore::SessionStore(const SessionStore& other) : capacity_(other.capacity_), window_(other.window_) {
  std::shared_lock lock(other.map_mu_);
  for (const auto& [user, slot] : other.users_) {
    auto copy = std::make_shared<Slot>();
    std::lock_guard g(slot->mu);
    copy->history = slot->history;
    users_.emplace(user, std::move(copy));
  }
}

SessionStore& SessionStore::operator=(const SessionStore& other) {
  if (this != &other) {
    SessionStore tmp(other);
    std::unique_lock lock(map_mu_);
    capacity_ = tmp.capacity_;
    window_ = tmp.window_;
    users_ = std::move(tmp.users_);
  }
  return *this;
}

std::shared_ptr<SessionStore::Slot> SessionStore::find_slot(const std::string& user_id) const {
  std::shared_lock lock(map_mu_);
  auto it = users_.find(user_id);
  return it == users_.end() ? nullptr : it->second;
}

std::shared_ptr<SessionStore::Slot> SessionStore::get_or_create(const std::string& user_id) {
  if (auto s = find_slot(user_id)) return s;
  std::unique_lock lock(map_mu_);
  auto& slot = users_[user_id];
  if (!slot) slot = std::make_shared<Slot>();
  return slot;
}

void SessionStore::purge(UserHistory& h, std::int64_t now) const {
  const std::int64_t cutoff = now - window_;
  for (auto* list : {&h.clicked, &h.unclicked}) {
    auto keep_from = std::find_if(list->begin(), list->end(),
                                  [&](const HistoryEntry& e) { return e.ts > cutoff; });
    list->erase(list->begin(), keep_from);
  }
}

void SessionStore::record_event(const std::string& user_id, SessionAd ad, bool clicked, std::int64_t ts,
                                std::optional<std::int64_t> impression_ts) {
  require(ts >= 0, "record_event: timestamp must be non-negative");
  auto slot = get_or_create(user_id);
  std::lock_guard lock(slot->mu);
  UserHistory& h = slot->history;
  if (clicked && impression_ts) {
    auto it = std::find_if(h.unclicked.begin(), h.unclicked.end(), [&](const HistoryEntry& e) {
      return e.ts == *impression_ts && e.ad.key == ad.key;
    });
    if (it != h.unclicked.end()) h.unclicked.erase(it);
  }
  auto& list = clicked ? h.clicked : h.unclicked;
  auto pos = std::upper_bound(list.begin(), list.end(), ts,
                              [](std::int64_t t, const HistoryEntry& e) { return t < e.ts; });
  list.insert(pos, HistoryEntry{std::move(ad), ts});
  if (list.size() > capacity_) list.erase(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(list.size() - capacity_));
  purge(h, ts);
}

UserHistory SessionStore::get_history(const std::string& user_id, std::int64_t now) {
  auto slot = find_slot(user_id);
  if (!slot) return {};
  std::lock_guard lock(slot->mu);
  purge(slot->history, now);
  return slot->history;
}

std::size_t SessionStore::user_count() const {
  std::shared_lock lock(map_mu_);
  return users_.size();
}

std::vector<std::string> SessionStore::users() const {
  std::shared_lock lock(map_mu_);
  std::vector<std::string> out;
  out.reserve(users_.size());
  for (const auto& kv : users_) out.push_back(kv.first);
  std::sort(out.begin(), out.end());
  return out;
}

void SessionStore::snapshot(std::ostream& os) const {
  for (const std::string& user : users()) {
    auto slot = find_slot(user);
    std::lock_guard lock(slot->mu);
    for (const auto& [tag, list] : {std::pair{"clk", &slot->history.clicked},
                                    std::pair{"unclk", &slot->history.unclicked}}) {
      for (const HistoryEntry& e : *list)
        os << user << '\t' << tag << '\t' << e.ts << '\t' << format_fields(e.ad.raw) << '\n';
    }
  }
}

void SessionStore::restore(std::istream& is, const Encoder& encode) {
  std::unordered_map<std::string, std::shared_ptr<Slot>> fresh;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (int i = 0; i < 3; ++i) {
      const std::size_t tab = line.find('\t', start);
      if (tab == std::string::npos) throw ParseError("snapshot line needs 4 columns", lineno);
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    cols.push_back(line.substr(start));
    const bool clicked = cols[1] == "clk";
    if (!clicked && cols[1] != "unclk") throw ParseError("snapshot list must be clk or unclk", lineno);
    std::int64_t ts = 0;
    auto [p, ec] = std::from_chars(cols[2].data(), cols[2].data() + cols[2].size(), ts);
    if (ec != std::errc() || p != cols[2].data() + cols[2].size()) throw ParseError("bad timestamp", lineno);
    SessionAd ad;
    ad.raw = parse_fields(cols[3], lineno);
    ad.key = session_ad_key(ad.raw);
    ad.encoded = encode(ad.raw, clicked ? AdGroup::clicked : AdGroup::unclicked);
    auto& slot = fresh[cols[0]];
    if (!slot) slot = std::make_shared<Slot>();
    auto& list = clicked ? slot->history.clicked : slot->history.unclicked;
    if (!list.empty() && list.back().ts > ts) throw ParseError("snapshot entries out of order", lineno);
    if (list.size() == capacity_) throw ParseError("snapshot exceeds capacity", lineno);
    list.push_back(HistoryEntry{std::move(ad), ts});
  }
  std::unique_lock lock(map_mu_);
  users_ = std::move(fresh);
}

bool operator==(const SessionStore& a, const SessionStore& b) {
  if (a.capacity_ != b.capacity_ || a.window_ != b.window_) return false;
  const auto ua = a.users();
  if (ua != b.users()) return false;
  auto same = [](const std::vector<HistoryEntry>& x, const std::vector<HistoryEntry>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].ts != y[i].ts || x[i].ad.key != y[i].ad.key || !(x[i].ad.raw == y[i].ad.raw) ||
          !(x[i].ad.encoded == y[i].ad.encoded))
        return false;
    return true;
  };
  for (const std::string& u : ua) {
    auto sa = a.find_slot(u);
    auto sb = b.find_slot(u);
    std::scoped_lock lock(sa->mu, sb->mu);
    if (!same(sa->history.clicked, sb->history.clicked) || !same(sa->history.unclicked, sb->history.unclicked))
      return false;
  }
  return true;
}

}  // namespace dstn

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "dstn/schema.hpp"

namespace dstn {

inline constexpr std::int64_t kThreeDaysSeconds = 259200;

/// An ad as remembered by the session store.
struct SessionAd {
  /// Identity used to pair a click with its impression.
  std::string key;
  RawRecord raw;
  /// Encoded against the clicked or unclicked group schema.
  EncodedInstance encoded;
};

/// `ad_id` field value if present, else the formatted record.
std::string session_ad_key(const RawRecord& raw);

struct HistoryEntry {
  SessionAd ad;
  std::int64_t ts = 0;
};

/// Lists are ordered oldest first.
struct UserHistory {
  std::vector<HistoryEntry> clicked;
  std::vector<HistoryEntry> unclicked;
};

/// Per-user bounded history of clicked and unclicked ads inside a sliding
/// time window. Operations on one user are serialized; different users
/// proceed independently.
class SessionStore {
 public:
  explicit SessionStore(std::size_t capacity = 5, std::int64_t window_seconds = kThreeDaysSeconds);

  SessionStore(const SessionStore& other);
  SessionStore& operator=(const SessionStore& other);

  std::size_t capacity() const noexcept { return capacity_; }
  std::int64_t window() const noexcept { return window_; }

  /// Inserts in timestamp order (after equal timestamps), evicts the oldest
  /// entry beyond capacity, then drops entries at or before ts - window. A
  /// click carrying `impression_ts` also removes the unclicked entry with the
  /// same key and timestamp.
  void record_event(const std::string& user_id, SessionAd ad, bool clicked, std::int64_t ts,
                    std::optional<std::int64_t> impression_ts = std::nullopt);

  /// Entries with ts > now - window, oldest first; unknown users get empty
  /// lists. Expired entries are purged as a side effect.
  UserHistory get_history(const std::string& user_id, std::int64_t now);

  std::size_t user_count() const;
  std::vector<std::string> users() const;

  /// `user_id \t {clk|unclk} \t ts \t field=value;...` lines, users sorted.
  void snapshot(std::ostream& os) const;

  using Encoder = std::function<EncodedInstance(const RawRecord&, AdGroup)>;
  /// Replaces the contents with a snapshot; `encode` re-encodes each ad for
  /// the clicked or unclicked group.
  void restore(std::istream& is, const Encoder& encode);

  friend bool operator==(const SessionStore& a, const SessionStore& b);

 private:
  struct Slot {
    mutable std::mutex mu;
    UserHistory history;
  };

  std::shared_ptr<Slot> find_slot(const std::string& user_id) const;
  std::shared_ptr<Slot> get_or_create(const std::string& user_id);
  void purge(UserHistory& h, std::int64_t now) const;

  std::size_t capacity_;
  std::int64_t window_;
  mutable std::shared_mutex map_mu_;
  std::unordered_map<std::string, std::shared_ptr<Slot>> users_;
};

}  // namespace dstn

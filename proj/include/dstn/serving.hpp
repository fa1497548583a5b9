#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dstn/ingest.hpp"
#include "dstn/models.hpp"
#include "dstn/session.hpp"

namespace dstn {

/// Auxiliary ads shared by every candidate of one scoring batch. Clicked and
/// unclicked lists are most recent first.
struct AuxContext {
  std::vector<EncodedInstance> contextual;
  std::vector<EncodedInstance> clicked;
  std::vector<EncodedInstance> unclicked;
};

/// Model-server side of the protocol. Counts batches and per-candidate
/// forwards.
class Scorer {
 public:
  virtual ~Scorer() = default;

  std::vector<double> score(const AuxContext& aux, std::span<const EncodedInstance> candidates) const;

  std::size_t batches() const noexcept { return batches_.load(); }
  std::size_t forwards() const noexcept { return forwards_.load(); }
  void reset_counters() noexcept {
    batches_ = 0;
    forwards_ = 0;
  }

 protected:
  virtual std::vector<double> score_impl(const AuxContext& aux,
                                         std::span<const EncodedInstance> candidates) const = 0;

 private:
  mutable std::atomic<std::size_t> batches_{0};
  mutable std::atomic<std::size_t> forwards_{0};
};

/// Eval-mode forward through a trained model.
class ModelScorer final : public Scorer {
 public:
  explicit ModelScorer(const Model& model) : model_(model) {}

 protected:
  std::vector<double> score_impl(const AuxContext& aux,
                                 std::span<const EncodedInstance> candidates) const override;

 private:
  const Model& model_;
};

/// Scores each candidate with a plain function; used for stubs.
class FunctionScorer final : public Scorer {
 public:
  using Fn = std::function<double(const EncodedInstance& candidate, const AuxContext& aux)>;
  explicit FunctionScorer(Fn fn) : fn_(std::move(fn)) {}

 protected:
  std::vector<double> score_impl(const AuxContext& aux,
                                 std::span<const EncodedInstance> candidates) const override;

 private:
  Fn fn_;
};

/// One batch: pCTR per candidate, in order. History lists are oldest first
/// as returned by SessionStore; at most 5 ads per list.
std::vector<double> score_batch(const Scorer& scorer, const UserHistory& history,
                                std::span<const EncodedInstance> contextual,
                                std::span<const EncodedInstance> candidates);

/// A candidate ad encoded for every group it may appear in.
struct Candidate {
  std::string key;
  RawRecord raw;
  /// Indexed by AdGroup.
  std::array<EncodedInstance, 4> encoded;
  double bid = 1.0;

  const EncodedInstance& as(AdGroup g) const { return encoded[static_cast<int>(g)]; }
};

struct RankRequest {
  std::string user_id;
  std::int64_t now = 0;
  std::vector<Candidate> candidates;
  std::size_t slots = 4;
};

struct RankOptions {
  /// Rank by pCTR x bid instead of pCTR.
  bool bid_weighted = false;
};

struct RankedAd {
  std::size_t candidate = 0;
  std::string key;
  double pctr = 0.0;
  int round = 1;
};

/// ads[0] is the round-1 winner; the rest are round-2 picks by descending
/// score.
struct RankResult {
  std::vector<RankedAd> ads;
};

/// Two-round protocol: round 1 scores all candidates without contextual ads
/// and keeps the argmax (lowest ordinal on ties); round 2 re-scores the rest
/// with the winner as the only contextual ad and keeps the top slots - 1.
/// Throws ContractViolation on empty candidates, slots == 0 or duplicate keys.
RankResult rank_request(const Scorer& scorer, SessionStore& store, const RankRequest& req,
                        const RankOptions& opts = {});

/// Encodes raw ads and user profiles against a schema and vocabulary.
class AdEncoder {
 public:
  AdEncoder(const Schema& schema, const Vocabulary& vocab) : schema_(schema), vocab_(vocab) {}

  EncodedInstance encode(const RawRecord& raw, AdGroup g) const;
  /// Target encoding uses the profile fields followed by the ad fields.
  Candidate candidate(const RawRecord& profile, const RawRecord& ad, double bid = 1.0) const;
  SessionAd session_ad(const RawRecord& ad, bool clicked) const;

  const Schema& schema() const noexcept { return schema_; }

 private:
  const Schema& schema_;
  const Vocabulary& vocab_;
};

struct ServingEvent {
  enum class Kind { impression, click, request };
  Kind kind = Kind::impression;
  std::size_t line = 0;
  std::string user_id;
  /// Event time, or the request's `now`.
  std::int64_t ts = 0;
  SessionAd ad;
  std::optional<std::int64_t> impression_ts;
  std::string request_id;
  std::vector<Candidate> candidates;
};

// Serving event log, TSV, one record per line ('#' comments allowed):
//   profile    \t user_id \t fields
//   impression \t user_id \t ts \t ad_fields
//   click      \t user_id \t ts \t ad_fields [\t impression_ts]
//   request    \t request_id \t user_id \t now \t ad_block [\t bid,bid,...]
// Profile fields are prepended to every candidate's target record.

/// Target fields describing the user rather than the ad: `user_id` and
/// `user_*`.
bool is_profile_field(std::string_view name);

std::vector<ServingEvent> parse_serving_log(std::istream& in, const AdEncoder& encoder);

/// Writes a serving log that replays `examples` (sorted by timestamp): one
/// request per example offering its target ad plus `extra_candidates` ads
/// drawn from other examples, then a click on the target when labelled 1.
void write_serving_log(std::ostream& out, const std::vector<RawExample>& examples,
                       std::size_t extra_candidates, std::uint64_t seed);

struct ReplayOptions {
  std::size_t slots = 4;
  /// Events become visible to requests at ts + lag_seconds.
  std::int64_t lag_seconds = 0;
  /// Record each served page as unclicked impressions at the request time.
  bool log_impressions = true;
  RankOptions rank;
};

struct ReplayOutput {
  std::string request_id;
  RankResult result;
};

/// Applies events and answers requests in log order. Throws ParseError when
/// a user's timestamps decrease. Pending events are applied at the end.
std::vector<ReplayOutput> replay_session(const Scorer& scorer, SessionStore& store,
                                         std::span<const ServingEvent> log, const ReplayOptions& opts = {});

/// `request_id \t position \t ad_id \t round \t pctr` lines.
void write_results(std::ostream& out, std::span<const ReplayOutput> results);

/// Line protocol for the serve-sim socket mode:
///   RANK <user_id> <now> <slots> <ad_id,...>  ->  OK <ad_id:pctr:round ...>
///   EVENT <user_id> <ts> <clk|unclk> <ad_id>   ->  OK
/// Failures answer `ERR <message>`.
class ProtocolHandler {
 public:
  ProtocolHandler(const Scorer& scorer, SessionStore& store, const AdEncoder& encoder,
                  std::unordered_map<std::string, RawRecord> catalog,
                  std::unordered_map<std::string, RawRecord> profiles = {}, RankOptions opts = {});

  std::string handle(std::string_view line);

 private:
  const Scorer& scorer_;
  SessionStore& store_;
  const AdEncoder& encoder_;
  std::unordered_map<std::string, RawRecord> catalog_;
  std::unordered_map<std::string, RawRecord> profiles_;
  RankOptions opts_;
};

/// Answers each input line until EOF or `QUIT`.
void serve_stream(std::istream& in, std::ostream& out, ProtocolHandler& handler);

/// Listens on 127.0.0.1:`port` (0 picks a free port) and serves connections
/// one at a time. `on_ready` receives the bound port. Returns after
/// `max_connections` connections when non-zero.
void serve_tcp(std::uint16_t port, ProtocolHandler& handler, std::size_t max_connections = 0,
               const std::function<void(std::uint16_t)>& on_ready = {});

}  // namespace dstn

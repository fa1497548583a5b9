#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "dstn/schema.hpp"

namespace dstn {

inline constexpr std::size_t kMaxAuxAds = 5;

/// One log line before encoding. Auxiliary lists are most-recent-first
/// (clicked/unclicked) or top-to-bottom page order (contextual).
struct RawExample {
  int label = 0;
  std::int64_t timestamp = 0;
  std::string user_id;
  RawRecord target;
  std::vector<RawRecord> contextual;
  std::vector<RawRecord> clicked;
  std::vector<RawRecord> unclicked;

  friend bool operator==(const RawExample&, const RawExample&) = default;
};

/// A target ad with its label and encoded auxiliary ads.
struct LabeledExample {
  int label = 0;
  std::int64_t timestamp = 0;
  std::string user_id;
  EncodedInstance target;
  std::vector<EncodedInstance> contextual;
  std::vector<EncodedInstance> clicked;
  std::vector<EncodedInstance> unclicked;

  const std::vector<EncodedInstance>& aux(AdGroup g) const;
  std::vector<EncodedInstance>& aux(AdGroup g);
};

// Log format, one example per line, TSV:
//   label \t timestamp \t user_id \t target_fields \t ctx_block \t clk_block \t unclk_block
// `*_fields` are `field=value` pairs joined by ';' (multivalent items joined
// by ','); blocks are ads joined by '|'; an empty block is an empty string.

/// Parses one line. Auxiliary lists longer than 5 keep their first 5 entries
/// (the most recent ones for clicked/unclicked). Throws ParseError carrying
/// `lineno` on malformed input.
RawExample parse_raw_line(std::string_view line, std::size_t lineno = 0);

/// Canonical serialization; parse_raw_line(format_raw_line(x)) == x for any
/// already-truncated example.
std::string format_raw_line(const RawExample& ex);

RawRecord parse_fields(std::string_view text, std::size_t lineno = 0);
std::string format_fields(const RawRecord& rec);
std::vector<RawRecord> parse_block(std::string_view text, std::size_t lineno = 0);
std::string format_block(const std::vector<RawRecord>& ads);

LabeledExample encode_example(const RawExample& raw, const Schema& schema, const Vocabulary& vocab);

/// parse_raw_line followed by encode_example; encode failures are reported
/// as ParseError with the line number.
LabeledExample parse_log_line(std::string_view line, const Schema& schema, const Vocabulary& vocab,
                              std::size_t lineno = 0);

std::vector<RawExample> read_raw_log(std::istream& in);
std::vector<RawExample> read_raw_log(const std::string& path);
void write_raw_log(std::ostream& out, const std::vector<RawExample>& examples);
void write_raw_log(const std::string& path, const std::vector<RawExample>& examples);

/// Feeds every ad of every example into a vocabulary builder.
Vocabulary build_vocabulary(const std::vector<RawExample>& examples, const Schema& schema);

std::vector<LabeledExample> encode_all(const std::vector<RawExample>& raw, const Schema& schema,
                                       const Vocabulary& vocab);

/// Synthetic click-log generator settings.
struct SyntheticConfig {
  std::size_t users = 2000;
  std::size_t ads = 1000;
  std::size_t topics = 10;
  std::size_t words_per_topic = 12;

  std::size_t train_examples = 100000;
  std::size_t val_examples = 10000;
  std::size_t test_examples = 10000;

  double base_ctr = 0.10;
  /// Added per clicked ad sharing the target's topic.
  double affinity_boost = 0.15;
  /// Subtracted per contextual ad sharing the target's topic.
  double context_suppression = 0.05;
  /// Subtracted per unclicked ad sharing the target's topic.
  double unclicked_penalty = 0.01;
  /// Per-ad intrinsic CTR offset drawn uniformly from [-spread, +spread].
  double quality_spread = 0.03;
  double min_ctr = 0.005;
  double max_ctr = 0.995;

  /// Auxiliary list sizes are uniform over [min, max] (max <= 5).
  std::size_t min_contextual = 3;
  std::size_t min_clicked = 5;
  std::size_t min_unclicked = 5;
  std::size_t max_contextual = 3;
  std::size_t max_clicked = 5;
  std::size_t max_unclicked = 5;
  /// Probability a contextual ad is drawn from the target's topic.
  double context_same_topic = 0.4;
  /// Probability a clicked / unclicked ad is drawn from the user's preferred topics.
  double clicked_preferred = 0.7;
  double unclicked_preferred = 0.3;
  /// Probability the target ad is drawn from the user's preferred topics.
  double target_preferred = 0.5;

  std::uint64_t seed = 1;

  void validate() const;
};

SyntheticConfig load_synthetic_config(const std::string& path);
std::string to_json(const SyntheticConfig& cfg);

/// Latent state behind one generated example, logged for oracle checks.
struct GeneratedTruth {
  double probability = 0.0;
  double quality = 0.0;
  std::size_t target_topic = 0;
  std::vector<std::size_t> contextual_topics;
  std::vector<std::size_t> clicked_topics;
  std::vector<std::size_t> unclicked_topics;
};

struct SyntheticSplit {
  std::vector<RawExample> examples;
  std::vector<GeneratedTruth> truth;
};

struct SyntheticDataset {
  Schema schema;
  SyntheticSplit train;
  SyntheticSplit validation;
  SyntheticSplit test;
};

/// The schema every synthetic dataset uses.
Schema synthetic_schema();

/// Click probability from latent topics: base + quality + boost * #clicked
/// matches - suppression * #contextual matches - penalty * #unclicked
/// matches, clamped to [min_ctr, max_ctr].
double synthetic_click_probability(const SyntheticConfig& cfg, const GeneratedTruth& t);

/// Deterministic in cfg (including seed). Train covers days 0-6, validation
/// day 7, test day 8.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

/// `probability \t quality \t target_topic \t ctx \t clk \t unclk` (topic
/// lists comma-joined).
void write_truth(const std::string& path, const std::vector<GeneratedTruth>& truth);
std::vector<GeneratedTruth> read_truth(const std::string& path);

/// Writes schema.tsv, {train,val,test}.tsv, {train,val,test}.truth.tsv and
/// config.json into `dir`.
void write_dataset(const SyntheticDataset& ds, const SyntheticConfig& cfg, const std::string& dir);

}  // namespace dstn

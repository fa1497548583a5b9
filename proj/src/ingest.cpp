#include "dstn/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dstn/error.hpp"
#include "dstn/numerics.hpp"

namespace dstn {

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

void truncate(std::vector<RawRecord>& ads) {
  if (ads.size() > kMaxAuxAds) ads.resize(kMaxAuxAds);
}

}  // namespace

const std::vector<EncodedInstance>& LabeledExample::aux(AdGroup g) const {
  switch (g) {
    case AdGroup::contextual: return contextual;
    case AdGroup::clicked: return clicked;
    case AdGroup::unclicked: return unclicked;
    case AdGroup::target: break;
  }
  throw ContractViolation("aux: target is not an auxiliary group");
}

std::vector<EncodedInstance>& LabeledExample::aux(AdGroup g) {
  return const_cast<std::vector<EncodedInstance>&>(std::as_const(*this).aux(g));
}

RawRecord parse_fields(std::string_view text, std::size_t lineno) {
  RawRecord rec;
  if (text.empty()) return rec;
  for (std::string_view pair : split(text, ';')) {
    const std::size_t eq = pair.find('=');
    if (eq == std::string_view::npos || eq == 0)
      throw ParseError("expected field=value, got '" + std::string(pair) + "'", lineno);
    rec.fields.emplace_back(std::string(pair.substr(0, eq)), std::string(pair.substr(eq + 1)));
  }
  return rec;
}

std::string format_fields(const RawRecord& rec) {
  std::string out;
  for (std::size_t i = 0; i < rec.fields.size(); ++i) {
    if (i) out.push_back(';');
    out += rec.fields[i].first;
    out.push_back('=');
    out += rec.fields[i].second;
  }
  return out;
}

std::vector<RawRecord> parse_block(std::string_view text, std::size_t lineno) {
  std::vector<RawRecord> ads;
  if (text.empty()) return ads;
  for (std::string_view ad : split(text, '|')) ads.push_back(parse_fields(ad, lineno));
  return ads;
}

std::string format_block(const std::vector<RawRecord>& ads) {
  std::string out;
  for (std::size_t i = 0; i < ads.size(); ++i) {
    if (i) out.push_back('|');
    out += format_fields(ads[i]);
  }
  return out;
}

RawExample parse_raw_line(std::string_view line, std::size_t lineno) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  const auto cols = split(line, '\t');
  if (cols.size() != 7)
    throw ParseError("expected 7 tab-separated columns, got " + std::to_string(cols.size()), lineno);
  RawExample ex;
  if (cols[0] == "0") {
    ex.label = 0;
  } else if (cols[0] == "1") {
    ex.label = 1;
  } else {
    throw ParseError("label must be 0 or 1, got '" + std::string(cols[0]) + "'", lineno);
  }
  {
    const std::string_view ts = cols[1];
    auto [p, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), ex.timestamp);
    if (ts.empty() || ec != std::errc() || p != ts.data() + ts.size())
      throw ParseError("unparsable timestamp '" + std::string(ts) + "'", lineno);
  }
  ex.user_id = std::string(cols[2]);
  ex.target = parse_fields(cols[3], lineno);
  ex.contextual = parse_block(cols[4], lineno);
  ex.clicked = parse_block(cols[5], lineno);
  ex.unclicked = parse_block(cols[6], lineno);
  truncate(ex.contextual);
  truncate(ex.clicked);
  truncate(ex.unclicked);
  return ex;
}

std::string format_raw_line(const RawExample& ex) {
  std::string out;
  out += std::to_string(ex.label);
  out.push_back('\t');
  out += std::to_string(ex.timestamp);
  out.push_back('\t');
  out += ex.user_id;
  out.push_back('\t');
  out += format_fields(ex.target);
  out.push_back('\t');
  out += format_block(ex.contextual);
  out.push_back('\t');
  out += format_block(ex.clicked);
  out.push_back('\t');
  out += format_block(ex.unclicked);
  return out;
}

LabeledExample encode_example(const RawExample& raw, const Schema& schema, const Vocabulary& vocab) {
  LabeledExample ex;
  ex.label = raw.label;
  ex.timestamp = raw.timestamp;
  ex.user_id = raw.user_id;
  ex.target = encode_instance(raw.target, schema.group(AdGroup::target), vocab);
  auto encode_list = [&](const std::vector<RawRecord>& ads, AdGroup g) {
    std::vector<EncodedInstance> out;
    out.reserve(ads.size());
    for (const RawRecord& r : ads) out.push_back(encode_instance(r, schema.group(g), vocab));
    return out;
  };
  ex.contextual = encode_list(raw.contextual, AdGroup::contextual);
  ex.clicked = encode_list(raw.clicked, AdGroup::clicked);
  ex.unclicked = encode_list(raw.unclicked, AdGroup::unclicked);
  return ex;
}

LabeledExample parse_log_line(std::string_view line, const Schema& schema, const Vocabulary& vocab,
                              std::size_t lineno) {
  RawExample raw = parse_raw_line(line, lineno);
  try {
    return encode_example(raw, schema, vocab);
  } catch (const EncodeError& e) {
    throw ParseError(e.what(), lineno);
  }
}

std::vector<RawExample> read_raw_log(std::istream& in) {
  std::vector<RawExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(parse_raw_line(line, lineno));
  }
  return out;
}

std::vector<RawExample> read_raw_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open log " + path);
  return read_raw_log(in);
}

void write_raw_log(std::ostream& out, const std::vector<RawExample>& examples) {
  for (const RawExample& ex : examples) out << format_raw_line(ex) << '\n';
}

void write_raw_log(const std::string& path, const std::vector<RawExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write log " + path);
  write_raw_log(out, examples);
}

Vocabulary build_vocabulary(const std::vector<RawExample>& examples, const Schema& schema) {
  VocabularyBuilder b(schema);
  for (const RawExample& ex : examples) {
    b.observe(ex.target);
    for (const auto* list : {&ex.contextual, &ex.clicked, &ex.unclicked})
      for (const RawRecord& r : *list) b.observe(r);
  }
  return std::move(b).finish();
}

std::vector<LabeledExample> encode_all(const std::vector<RawExample>& raw, const Schema& schema,
                                       const Vocabulary& vocab) {
  std::vector<LabeledExample> out;
  out.reserve(raw.size());
  for (const RawExample& r : raw) out.push_back(encode_example(r, schema, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("SyntheticConfig: " + m); };
  if (users == 0 || ads == 0 || topics == 0 || words_per_topic == 0) fail("counts must be positive");
  if (ads < topics) fail("need at least one ad per topic");
  if (!(base_ctr > 0.0 && base_ctr < 1.0)) fail("base_ctr must be in (0, 1)");
  if (!(min_ctr > 0.0 && min_ctr < max_ctr && max_ctr < 1.0)) fail("need 0 < min_ctr < max_ctr < 1");
  if (affinity_boost < 0 || context_suppression < 0 || unclicked_penalty < 0 || quality_spread < 0)
    fail("effect sizes must be non-negative");
  if (max_contextual > kMaxAuxAds || max_clicked > kMaxAuxAds || max_unclicked > kMaxAuxAds)
    fail("auxiliary list bounds must be <= 5");
  if (min_contextual > max_contextual || min_clicked > max_clicked || min_unclicked > max_unclicked)
    fail("auxiliary list minimum exceeds maximum");
  for (double p : {context_same_topic, clicked_preferred, unclicked_preferred, target_preferred})
    if (p < 0.0 || p > 1.0) fail("probabilities must be in [0, 1]");
}

SyntheticConfig load_synthetic_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  const nlohmann::json j = nlohmann::json::parse(in);
  SyntheticConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("users", c.users);
  get("ads", c.ads);
  get("topics", c.topics);
  get("words_per_topic", c.words_per_topic);
  get("train_examples", c.train_examples);
  get("val_examples", c.val_examples);
  get("test_examples", c.test_examples);
  get("base_ctr", c.base_ctr);
  get("affinity_boost", c.affinity_boost);
  get("context_suppression", c.context_suppression);
  get("unclicked_penalty", c.unclicked_penalty);
  get("quality_spread", c.quality_spread);
  get("min_ctr", c.min_ctr);
  get("max_ctr", c.max_ctr);
  get("min_contextual", c.min_contextual);
  get("max_contextual", c.max_contextual);
  get("min_clicked", c.min_clicked);
  get("max_clicked", c.max_clicked);
  get("min_unclicked", c.min_unclicked);
  get("max_unclicked", c.max_unclicked);
  get("context_same_topic", c.context_same_topic);
  get("clicked_preferred", c.clicked_preferred);
  get("unclicked_preferred", c.unclicked_preferred);
  get("target_preferred", c.target_preferred);
  get("seed", c.seed);
  c.validate();
  return c;
}

std::string to_json(const SyntheticConfig& c) {
  nlohmann::ordered_json j;
  j["users"] = c.users;
  j["ads"] = c.ads;
  j["topics"] = c.topics;
  j["words_per_topic"] = c.words_per_topic;
  j["train_examples"] = c.train_examples;
  j["val_examples"] = c.val_examples;
  j["test_examples"] = c.test_examples;
  j["base_ctr"] = c.base_ctr;
  j["affinity_boost"] = c.affinity_boost;
  j["context_suppression"] = c.context_suppression;
  j["unclicked_penalty"] = c.unclicked_penalty;
  j["quality_spread"] = c.quality_spread;
  j["min_ctr"] = c.min_ctr;
  j["max_ctr"] = c.max_ctr;
  j["min_contextual"] = c.min_contextual;
  j["max_contextual"] = c.max_contextual;
  j["min_clicked"] = c.min_clicked;
  j["max_clicked"] = c.max_clicked;
  j["min_unclicked"] = c.min_unclicked;
  j["max_unclicked"] = c.max_unclicked;
  j["context_same_topic"] = c.context_same_topic;
  j["clicked_preferred"] = c.clicked_preferred;
  j["unclicked_preferred"] = c.unclicked_preferred;
  j["target_preferred"] = c.target_preferred;
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

Schema synthetic_schema() {
  Schema s;
  auto uni = [](const char* n) { return FieldSchema{n, FieldKind::univalent, {}}; };
  auto multi = [](const char* n) { return FieldSchema{n, FieldKind::multivalent, {}}; };
  auto num = [](const char* n, std::vector<double> b) {
    return FieldSchema{n, FieldKind::numerical, std::move(b)};
  };
  s.group(AdGroup::target).fields = {uni("user_id"),      num("user_age", {18, 25, 35, 45, 55}),
                                     uni("ad_id"),        uni("ad_category"),
                                     multi("ad_title"),   num("ad_price", {10, 50, 100, 200})};
  for (AdGroup g : kAuxGroups)
    s.group(g).fields = {uni("ad_id"), uni("ad_category"), multi("ad_title")};
  s.validate();
  return s;
}

double synthetic_click_probability(const SyntheticConfig& cfg, const GeneratedTruth& t) {
  auto matches = [&](const std::vector<std::size_t>& topics) {
    return static_cast<double>(std::count(topics.begin(), topics.end(), t.target_topic));
  };
  const double p = cfg.base_ctr + t.quality + cfg.affinity_boost * matches(t.clicked_topics) -
                   cfg.context_suppression * matches(t.contextual_topics) -
                   cfg.unclicked_penalty * matches(t.unclicked_topics);
  return std::clamp(p, cfg.min_ctr, cfg.max_ctr);
}

namespace {

struct SynthAd {
  std::string id;
  std::size_t topic;
  double quality;
  std::string title;
  int price;
};

struct SynthUser {
  std::string id;
  int age;
  std::size_t pref[2];
};

struct World {
  std::vector<SynthAd> ads;
  std::vector<std::vector<std::size_t>> ads_by_topic;
  std::vector<SynthUser> users;
};

std::string random_word(Rng& rng) {
  const std::size_t len = 4 + rng.below(3);
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + rng.below(26)));
  return w;
}

World build_world(const SyntheticConfig& cfg, Rng rng) {
  World w;
  std::vector<std::vector<std::string>> words(cfg.topics);
  for (auto& list : words)
    for (std::size_t i = 0; i < cfg.words_per_topic; ++i) list.push_back(random_word(rng));
  w.ads_by_topic.resize(cfg.topics);
  for (std::size_t a = 0; a < cfg.ads; ++a) {
    SynthAd ad;
    ad.id = "ad" + std::to_string(a);
    ad.topic = a % cfg.topics;
    ad.quality = cfg.quality_spread > 0 ? rng.uniform(-cfg.quality_spread, cfg.quality_spread) : 0.0;
    const std::size_t n_words = 2 + rng.below(2);
    for (std::size_t i = 0; i < n_words; ++i) {
      if (i) ad.title.push_back(' ');
      ad.title += words[ad.topic][rng.below(cfg.words_per_topic)];
    }
    ad.price = 1 + static_cast<int>(rng.below(400));
    w.ads_by_topic[ad.topic].push_back(a);
    w.ads.push_back(std::move(ad));
  }
  for (std::size_t u = 0; u < cfg.users; ++u) {
    SynthUser user;
    user.id = "u" + std::to_string(u);
    user.age = 16 + static_cast<int>(rng.below(55));
    user.pref[0] = rng.below(cfg.topics);
    user.pref[1] = cfg.topics > 1 ? (user.pref[0] + 1 + rng.below(cfg.topics - 1)) % cfg.topics
                                  : user.pref[0];
    w.users.push_back(std::move(user));
  }
  return w;
}

RawRecord aux_record(const SynthAd& ad) {
  RawRecord r;
  r.fields = {{"ad_id", ad.id}, {"ad_category", "cat" + std::to_string(ad.topic)}, {"ad_title", ad.title}};
  return r;
}

std::size_t ad_from_topic(const World& w, std::size_t topic, Rng& rng) {
  const auto& pool = w.ads_by_topic[topic];
  return pool[rng.below(pool.size())];
}

SyntheticSplit generate_split(const SyntheticConfig& cfg, const World& w, std::size_t n,
                              std::int64_t day_begin, std::int64_t days, Rng rng) {
  constexpr std::int64_t kDay = 86400;
  std::vector<std::int64_t> ts(n);
  for (auto& t : ts) t = day_begin * kDay + static_cast<std::int64_t>(rng.below(days * kDay));
  std::sort(ts.begin(), ts.end());

  SyntheticSplit split;
  split.examples.reserve(n);
  split.truth.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const SynthUser& user = w.users[rng.below(w.users.size())];
    auto preferred_or_any = [&](double p_pref) {
      if (rng.bernoulli(p_pref)) return ad_from_topic(w, user.pref[rng.below(2)], rng);
      return static_cast<std::size_t>(rng.below(w.ads.size()));
    };
    const SynthAd& target = w.ads[preferred_or_any(cfg.target_preferred)];

    GeneratedTruth truth;
    truth.target_topic = target.topic;
    truth.quality = target.quality;

    RawExample ex;
    ex.timestamp = ts[i];
    ex.user_id = user.id;
    ex.target.fields = {{"user_id", user.id},
                        {"user_age", std::to_string(user.age)},
                        {"ad_id", target.id},
                        {"ad_category", "cat" + std::to_string(target.topic)},
                        {"ad_title", target.title},
                        {"ad_price", std::to_string(target.price)}};

    const std::size_t n_c = cfg.min_contextual + rng.below(cfg.max_contextual - cfg.min_contextual + 1);
    for (std::size_t k = 0; k < n_c; ++k) {
      const std::size_t a = rng.bernoulli(cfg.context_same_topic)
                                ? ad_from_topic(w, target.topic, rng)
                                : static_cast<std::size_t>(rng.below(w.ads.size()));
      ex.contextual.push_back(aux_record(w.ads[a]));
      truth.contextual_topics.push_back(w.ads[a].topic);
    }
    const std::size_t n_l = cfg.min_clicked + rng.below(cfg.max_clicked - cfg.min_clicked + 1);
    for (std::size_t k = 0; k < n_l; ++k) {
      const std::size_t a = preferred_or_any(cfg.clicked_preferred);
      ex.clicked.push_back(aux_record(w.ads[a]));
      truth.clicked_topics.push_back(w.ads[a].topic);
    }
    const std::size_t n_u = cfg.min_unclicked + rng.below(cfg.max_unclicked - cfg.min_unclicked + 1);
    for (std::size_t k = 0; k < n_u; ++k) {
      const std::size_t a = preferred_or_any(cfg.unclicked_preferred);
      ex.unclicked.push_back(aux_record(w.ads[a]));
      truth.unclicked_topics.push_back(w.ads[a].topic);
    }

    truth.probability = synthetic_click_probability(cfg, truth);
    ex.label = rng.bernoulli(truth.probability) ? 1 : 0;
    split.examples.push_back(std::move(ex));
    split.truth.push_back(std::move(truth));
  }
  return split;
}

std::string join_topics(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s.push_back(',');
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_topics(std::string_view s) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  for (std::string_view tok : split(s, ',')) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) throw ParseError("bad topic id");
    out.push_back(v);
  }
  return out;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  const World world = build_world(cfg, root.fork(1));
  SyntheticDataset ds;
  ds.schema = synthetic_schema();
  ds.train = generate_split(cfg, world, cfg.train_examples, 0, 7, root.fork(2));
  ds.validation = generate_split(cfg, world, cfg.val_examples, 7, 1, root.fork(3));
  ds.test = generate_split(cfg, world, cfg.test_examples, 8, 1, root.fork(4));
  return ds;
}

void write_truth(const std::string& path, const std::vector<GeneratedTruth>& truth) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const GeneratedTruth& t : truth) {
    out << format_double(t.probability) << '\t' << format_double(t.quality) << '\t' << t.target_topic
        << '\t' << join_topics(t.contextual_topics) << '\t' << join_topics(t.clicked_topics) << '\t'
        << join_topics(t.unclicked_topics) << '\n';
  }
}

std::vector<GeneratedTruth> read_truth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<GeneratedTruth> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto cols = split(line, '\t');
    if (cols.size() != 6) throw ParseError("truth line needs 6 columns", lineno);
    GeneratedTruth t;
    auto num = [&](std::string_view s, auto& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) throw ParseError("bad number", lineno);
    };
    num(cols[0], t.probability);
    num(cols[1], t.quality);
    num(cols[2], t.target_topic);
    t.contextual_topics = parse_topics(cols[3]);
    t.clicked_topics = parse_topics(cols[4]);
    t.unclicked_topics = parse_topics(cols[5]);
    out.push_back(std::move(t));
  }
  return out;
}

void write_dataset(const SyntheticDataset& ds, const SyntheticConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  save_schema(ds.schema, (d / "schema.tsv").string());
  write_raw_log((d / "train.tsv").string(), ds.train.examples);
  write_raw_log((d / "val.tsv").string(), ds.validation.examples);
  write_raw_log((d / "test.tsv").string(), ds.test.examples);
  write_truth((d / "train.truth.tsv").string(), ds.train.truth);
  write_truth((d / "val.truth.tsv").string(), ds.validation.truth);
  write_truth((d / "test.truth.tsv").string(), ds.test.truth);
  std::ofstream((d / "config.json").string(), std::ios::binary) << to_json(cfg);
}

}  // namespace dstn

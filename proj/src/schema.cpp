#include "dstn/schema.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>
#include <unordered_set>

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

bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

std::string_view to_string(FieldKind kind) {
  switch (kind) {
    case FieldKind::univalent: return "univalent";
    case FieldKind::multivalent: return "multivalent";
    case FieldKind::numerical: return "numerical";
  }
  return "?";
}

std::string_view to_string(AdGroup group) {
  switch (group) {
    case AdGroup::target: return "target";
    case AdGroup::contextual: return "contextual";
    case AdGroup::clicked: return "clicked";
    case AdGroup::unclicked: return "unclicked";
  }
  return "?";
}

FieldKind parse_field_kind(std::string_view s) {
  if (s == "univalent") return FieldKind::univalent;
  if (s == "multivalent") return FieldKind::multivalent;
  if (s == "numerical") return FieldKind::numerical;
  throw ParseError("unknown field kind '" + std::string(s) + "'");
}

AdGroup parse_group(std::string_view s) {
  if (s == "target") return AdGroup::target;
  if (s == "contextual") return AdGroup::contextual;
  if (s == "clicked") return AdGroup::clicked;
  if (s == "unclicked") return AdGroup::unclicked;
  throw ParseError("unknown ad group '" + std::string(s) + "'");
}

std::size_t FieldSchema::bucket_of(double x) const {
  return static_cast<std::size_t>(std::upper_bound(boundaries.begin(), boundaries.end(), x) -
                                  boundaries.begin());
}

void Schema::validate() const {
  std::unordered_map<std::string, const FieldSchema*> seen;
  for (const GroupSchema& g : groups_) {
    std::unordered_set<std::string> names;
    for (const FieldSchema& f : g.fields) {
      if (f.name.empty()) throw ParseError("empty field name");
      if (!names.insert(f.name).second)
        throw ParseError("duplicate field '" + f.name + "' in group " +
                         std::string(to_string(g.group)));
      if ((f.kind == FieldKind::numerical) != !f.boundaries.empty())
        throw ParseError("field '" + f.name + "': bucket boundaries present iff numerical");
      for (std::size_t i = 1; i < f.boundaries.size(); ++i)
        if (!(f.boundaries[i - 1] < f.boundaries[i]))
          throw ParseError("field '" + f.name + "': boundaries must be strictly increasing");
      auto [it, inserted] = seen.emplace(f.name, &f);
      if (!inserted && (it->second->kind != f.kind || it->second->boundaries != f.boundaries))
        throw ParseError("field '" + f.name + "' defined differently across groups");
    }
  }
}

std::vector<const FieldSchema*> Schema::distinct_fields() const {
  std::vector<const FieldSchema*> out;
  std::unordered_set<std::string> names;
  for (const GroupSchema& g : groups_)
    for (const FieldSchema& f : g.fields)
      if (names.insert(f.name).second) out.push_back(&f);
  return out;
}

std::string Schema::serialize() const {
  std::ostringstream os;
  for (const GroupSchema& g : groups_) {
    for (const FieldSchema& f : g.fields) {
      os << to_string(g.group) << '\t' << f.name << '\t' << to_string(f.kind);
      if (!f.boundaries.empty()) {
        os << '\t';
        for (std::size_t i = 0; i < f.boundaries.size(); ++i)
          os << (i ? "," : "") << format_double(f.boundaries[i]);
      }
      os << '\n';
    }
  }
  return os.str();
}

std::uint64_t Schema::hash() const { return fnv1a64(serialize()); }

Schema parse_schema(std::istream& in) {
  Schema schema;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 3 && cols.size() != 4)
      throw ParseError("schema line needs 3 or 4 tab-separated columns", lineno);
    try {
      FieldSchema f;
      f.name = std::string(cols[1]);
      f.kind = parse_field_kind(cols[2]);
      if (cols.size() == 4) {
        for (std::string_view tok : split(cols[3], ',')) {
          double v;
          if (!parse_double(tok, v)) throw ParseError("bad boundary '" + std::string(tok) + "'");
          f.boundaries.push_back(v);
        }
      }
      schema.group(parse_group(cols[0])).fields.push_back(std::move(f));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  schema.validate();
  return schema;
}

Schema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schema file " + path);
  return parse_schema(in);
}

void save_schema(const Schema& schema, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write schema file " + path);
  out << schema.serialize();
}

const std::string* RawRecord::find(std::string_view name) const {
  for (const auto& [k, v] : fields)
    if (k == name) return &v;
  return nullptr;
}

std::string normalize_text(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : ch);
  }
  return out;
}

std::vector<std::string> char_bigrams(std::string_view text) {
  const std::string norm = normalize_text(text);
  // Split into code points by UTF-8 lead bytes.
  std::vector<std::string_view> cps;
  for (std::size_t i = 0; i < norm.size();) {
    std::size_t j = i + 1;
    while (j < norm.size() && (static_cast<unsigned char>(norm[j]) & 0xC0) == 0x80) ++j;
    cps.push_back(std::string_view(norm).substr(i, j - i));
    i = j;
  }
  std::vector<std::string> out;
  if (cps.size() == 1) {
    out.emplace_back(cps[0]);
    return out;
  }
  for (std::size_t i = 0; i + 1 < cps.size(); ++i) {
    std::string bg(cps[i]);
    bg.append(cps[i + 1]);
    out.push_back(std::move(bg));
  }
  return out;
}

std::vector<std::string> field_tokens(const FieldSchema& field, std::string_view raw) {
  std::vector<std::string> out;
  switch (field.kind) {
    case FieldKind::univalent:
      if (!raw.empty()) out.emplace_back(raw);
      break;
    case FieldKind::multivalent:
      for (std::string_view item : split(raw, ',')) {
        for (std::string& bg : char_bigrams(item)) out.push_back(std::move(bg));
      }
      break;
    case FieldKind::numerical: {
      double x;
      if (!parse_double(raw, x))
        throw EncodeError("field '" + field.name + "': cannot parse number '" + std::string(raw) + "'");
      out.push_back("bucket:" + std::to_string(field.bucket_of(x)));
      break;
    }
  }
  return out;
}

std::uint32_t Vocabulary::lookup(const std::string& field, const std::string& token) const {
  auto it = fields_.find(field);
  if (it == fields_.end()) throw ContractViolation("vocabulary has no field '" + field + "'");
  auto jt = it->second.ids.find(token);
  return jt == it->second.ids.end() ? it->second.oov : jt->second;
}

std::optional<std::uint32_t> Vocabulary::find(const std::string& field,
                                              const std::string& token) const {
  auto it = fields_.find(field);
  if (it == fields_.end()) return std::nullopt;
  auto jt = it->second.ids.find(token);
  if (jt == it->second.ids.end()) return std::nullopt;
  return jt->second;
}

std::uint32_t Vocabulary::oov(const std::string& field) const {
  auto it = fields_.find(field);
  if (it == fields_.end()) throw ContractViolation("vocabulary has no field '" + field + "'");
  return it->second.oov;
}

bool Vocabulary::has_field(const std::string& field) const { return fields_.contains(field); }

void Vocabulary::add_field(const std::string& field) {
  require(!frozen_, "Vocabulary: add_field after freeze");
  if (fields_.contains(field)) return;
  FieldEntries e;
  e.oov = static_cast<std::uint32_t>(size_++);
  fields_.emplace(field, std::move(e));
  by_index_.emplace_back(field, std::string());
}

std::uint32_t Vocabulary::add(const std::string& field, const std::string& token) {
  require(!frozen_, "Vocabulary: add after freeze");
  require(!token.empty(), "Vocabulary: empty token is reserved for OOV");
  auto it = fields_.find(field);
  require(it != fields_.end(), "Vocabulary: add to unknown field");
  auto [jt, inserted] = it->second.ids.emplace(token, static_cast<std::uint32_t>(size_));
  if (inserted) {
    ++size_;
    by_index_.emplace_back(field, token);
  }
  return jt->second;
}

void Vocabulary::write(std::ostream& os) const {
  for (std::size_t i = 0; i < by_index_.size(); ++i)
    os << by_index_[i].first << '\t' << by_index_[i].second << '\t' << i << '\n';
}

Vocabulary Vocabulary::read(std::istream& is) {
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 3) throw ParseError("vocabulary line needs 3 columns", lineno);
    std::size_t idx = 0;
    auto [p, ec] = std::from_chars(cols[2].data(), cols[2].data() + cols[2].size(), idx);
    if (ec != std::errc() || idx != v.size_) throw ParseError("vocabulary indices must be dense", lineno);
    const std::string field(cols[0]);
    if (cols[1].empty()) {
      if (v.fields_.contains(field)) throw ParseError("duplicate OOV row", lineno);
      v.add_field(field);
    } else {
      if (!v.fields_.contains(field)) throw ParseError("token before its field's OOV row", lineno);
      if (v.add(field, std::string(cols[1])) != idx) throw ParseError("duplicate token", lineno);
    }
  }
  v.freeze();
  return v;
}

std::uint64_t Vocabulary::hash() const {
  std::ostringstream os;
  write(os);
  return fnv1a64(os.str());
}

VocabularyBuilder::VocabularyBuilder(const Schema& schema) {
  schema.validate();
  for (const FieldSchema* f : schema.distinct_fields()) {
    by_name_.emplace(f->name, f);
    vocab_.add_field(f->name);
  }
}

void VocabularyBuilder::observe(const RawRecord& record) {
  for (const auto& [name, value] : record.fields) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) continue;
    std::vector<std::string> toks;
    try {
      toks = field_tokens(*it->second, value);
    } catch (const EncodeError&) {
      continue;  // surfaces again at encode time
    }
    for (const std::string& t : toks) vocab_.add(name, t);
  }
}

Vocabulary VocabularyBuilder::finish() && {
  vocab_.freeze();
  return std::move(vocab_);
}

Vocabulary build_vocabulary(std::span<const RawRecord> records, const Schema& schema) {
  VocabularyBuilder b(schema);
  for (const RawRecord& r : records) b.observe(r);
  return std::move(b).finish();
}

void EncodedInstance::push_field(std::span<const std::uint32_t> ids) {
  indices.insert(indices.end(), ids.begin(), ids.end());
  offsets.push_back(static_cast<std::uint32_t>(indices.size()));
}

EncodedInstance encode_instance(const RawRecord& record, const GroupSchema& schema,
                                const Vocabulary& vocab) {
  require(vocab.frozen(), "encode_instance: vocabulary must be frozen");
  EncodedInstance out;
  out.group = schema.group;
  out.offsets.reserve(schema.fields.size() + 1);
  for (const FieldSchema& f : schema.fields) {
    const std::string* raw = record.find(f.name);
    if (f.kind != FieldKind::multivalent && (raw == nullptr || raw->empty()))
      throw EncodeError("missing required field '" + f.name + "'");
    if (raw == nullptr) {
      out.push_field({});
      continue;
    }
    for (const std::string& tok : field_tokens(f, *raw)) out.indices.push_back(vocab.lookup(f.name, tok));
    out.offsets.push_back(static_cast<std::uint32_t>(out.indices.size()));
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t h) {
  for (char c : data) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace dstn

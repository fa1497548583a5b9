#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dstn {

enum class FieldKind { univalent, multivalent, numerical };

/// The role an ad plays relative to the target being scored.
enum class AdGroup { target = 0, contextual = 1, clicked = 2, unclicked = 3 };

inline constexpr std::array<AdGroup, 4> kAllGroups{AdGroup::target, AdGroup::contextual,
                                                   AdGroup::clicked, AdGroup::unclicked};
inline constexpr std::array<AdGroup, 3> kAuxGroups{AdGroup::contextual, AdGroup::clicked,
                                                   AdGroup::unclicked};

std::string_view to_string(FieldKind kind);
std::string_view to_string(AdGroup group);
FieldKind parse_field_kind(std::string_view s);
AdGroup parse_group(std::string_view s);

struct FieldSchema {
  std::string name;
  FieldKind kind = FieldKind::univalent;
  /// Strictly increasing; non-empty only for numerical fields.
  std::vector<double> boundaries;

  /// Bucket id: number of boundaries <= x.
  std::size_t bucket_of(double x) const;
};

struct GroupSchema {
  AdGroup group = AdGroup::target;
  std::vector<FieldSchema> fields;

  std::size_t field_count() const noexcept { return fields.size(); }
};

/// Field lists for all four ad groups. A field name used in several groups
/// refers to the same field (same kind, same vocabulary entries).
class Schema {
 public:
  Schema() { for (AdGroup g : kAllGroups) groups_[static_cast<int>(g)].group = g; }

  GroupSchema& group(AdGroup g) { return groups_[static_cast<int>(g)]; }
  const GroupSchema& group(AdGroup g) const { return groups_[static_cast<int>(g)]; }

  /// Throws ParseError when a rule is broken: duplicate field in a group,
  /// boundaries on a non-numerical field or missing on a numerical one,
  /// non-increasing boundaries, conflicting definitions of a shared name.
  void validate() const;

  /// Distinct field names in first-appearance order (target first).
  std::vector<const FieldSchema*> distinct_fields() const;

  std::string serialize() const;
  std::uint64_t hash() const;

  friend bool operator==(const Schema& a, const Schema& b) { return a.serialize() == b.serialize(); }

 private:
  std::array<GroupSchema, 4> groups_;
};

/// `<group>\t<field_name>\t<kind>[\t<b1,b2,...>]` per line. Blank lines and
/// lines starting with '#' are skipped.
Schema parse_schema(std::istream& in);
Schema load_schema(const std::string& path);
void save_schema(const Schema& schema, const std::string& path);

/// One ad as raw `field=value` pairs, in log order.
struct RawRecord {
  std::vector<std::pair<std::string, std::string>> fields;

  const std::string* find(std::string_view name) const;
  friend bool operator==(const RawRecord&, const RawRecord&) = default;
};

/// Lowercases ASCII and collapses whitespace runs to one space, trimmed.
std::string normalize_text(std::string_view s);

/// Character bi-grams over UTF-8 code points of the normalized text. A
/// single-code-point string yields itself.
std::vector<std::string> char_bigrams(std::string_view text);

/// Vocabulary tokens contributed by one raw field value. Multivalent values
/// are comma-separated items, each expanded into bi-grams. Numerical values
/// become `bucket:<id>`. Throws EncodeError for an unparsable number.
std::vector<std::string> field_tokens(const FieldSchema& field, std::string_view raw);

/// Dense feature-index space: one OOV index per field plus one index per
/// observed (field, token) pair.
class Vocabulary {
 public:
  std::size_t size() const noexcept { return size_; }
  bool frozen() const noexcept { return frozen_; }

  /// Index for a token, or the field's OOV index if unseen.
  std::uint32_t lookup(const std::string& field, const std::string& token) const;
  std::uint32_t oov(const std::string& field) const;
  bool has_field(const std::string& field) const;
  std::optional<std::uint32_t> find(const std::string& field, const std::string& token) const;

  /// `<field>\t<token>\t<index>` lines in index order; OOV rows have an empty token.
  void write(std::ostream& os) const;
  static Vocabulary read(std::istream& is);
  std::uint64_t hash() const;

  // Construction (single writer, before freeze).
  void add_field(const std::string& field);
  std::uint32_t add(const std::string& field, const std::string& token);
  void freeze() noexcept { frozen_ = true; }

 private:
  struct FieldEntries {
    std::uint32_t oov = 0;
    std::unordered_map<std::string, std::uint32_t> ids;
  };
  std::unordered_map<std::string, FieldEntries> fields_;
  // (field, token) per index, for serialization.
  std::vector<std::pair<std::string, std::string>> by_index_;
  std::size_t size_ = 0;
  bool frozen_ = false;
};

/// Scans records (any group) and assigns indices in first-seen order after
/// the per-field OOV block. The result is frozen.
Vocabulary build_vocabulary(std::span<const RawRecord> records, const Schema& schema);

/// Incremental form of build_vocabulary for streamed input.
class VocabularyBuilder {
 public:
  explicit VocabularyBuilder(const Schema& schema);
  void observe(const RawRecord& record);
  Vocabulary finish() &&;

 private:
  std::unordered_map<std::string, const FieldSchema*> by_name_;
  Vocabulary vocab_;
};

/// One ad encoded against a group schema: per field, a list of feature
/// indices (exactly one for univalent and numerical fields).
struct EncodedInstance {
  AdGroup group = AdGroup::target;
  std::vector<std::uint32_t> indices;
  /// offsets[f]..offsets[f+1] delimit field f within `indices`.
  std::vector<std::uint32_t> offsets{0};

  std::size_t field_count() const noexcept { return offsets.size() - 1; }
  std::span<const std::uint32_t> field(std::size_t f) const {
    return {indices.data() + offsets[f], offsets[f + 1] - offsets[f]};
  }
  void push_field(std::span<const std::uint32_t> ids);

  friend bool operator==(const EncodedInstance&, const EncodedInstance&) = default;
};

/// Throws EncodeError naming the field when a univalent or numerical field is
/// missing or empty, or a numerical value does not parse.
EncodedInstance encode_instance(const RawRecord& record, const GroupSchema& schema,
                                const Vocabulary& vocab);

std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace dstn

#pragma once

// The six-metric evaluation protocol over parsed transcripts and ground
// truth: count exactness (DQR), count sensitivity (DS), modification-type and
// object-category micro-F1 (TF1/CF1), weighted cross-query consistency (CR),
// and ground-truth-matched reasoning fraction (DRF), plus error
// categorization for unmatched claims.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "faithkit/common.hpp"
#include "faithkit/judge.hpp"

namespace faithkit::metrics {

// -----------------------------------------------------------------------------
// Domain types
// -----------------------------------------------------------------------------

enum class DiffKind { kColor, kRemove, kPosition };

inline const char* to_string(DiffKind kind) {
  switch (kind) {
    case DiffKind::kColor:
      return "color";
    case DiffKind::kRemove:
      return "remove";
    case DiffKind::kPosition:
      return "position";
  }
  return "color";
}

inline std::optional<DiffKind> parse_kind(const std::string& text) {
  if (text == "color") return DiffKind::kColor;
  if (text == "remove") return DiffKind::kRemove;
  if (text == "position") return DiffKind::kPosition;
  return std::nullopt;
}

struct DifferenceRecord {
  DiffKind kind = DiffKind::kColor;
  std::string category;
  std::string before;
  std::string after;

  // Attribute text used for matching: the color target for color edits, a
  // fixed marker for position edits, empty for removals.
  std::string canonical_detail() const {
    switch (kind) {
      case DiffKind::kColor:
        return "to " + after;
      case DiffKind::kRemove:
        return "";
      case DiffKind::kPosition:
        return "moved";
    }
    return "";
  }

  std::string canonical_text() const {
    return concat("type=", to_string(kind), " category=", category,
                  " detail=\"", canonical_detail(), "\"");
  }
};

struct GroundTruth {
  std::vector<DifferenceRecord> records;
  int m() const { return static_cast<int>(records.size()); }
};

struct Claim {
  std::optional<DiffKind> kind;
  std::optional<std::string> category;
  std::optional<std::string> detail;
  std::string raw_text;
  bool placeholder = false;  // padding inserted to honor the reported count

  bool structured() const { return kind.has_value() && category.has_value(); }

  std::string canonical_text() const {
    if (!structured()) return raw_text;
    return concat("type=", to_string(*kind), " category=", *category,
                  " detail=\"", detail.value_or(""), "\"");
  }
};

struct ClaimSet {
  std::vector<Claim> claims;
  int reported_count = 0;      // raw COUNT value (or marker-extracted count)
  bool count_mismatch = false;
  bool count_missing = false;  // freeform response without a detectable count

  // The model-reported difference count n; fabricated padding keeps it equal
  // to the claim list length.
  int n() const { return static_cast<int>(claims.size()); }
};

struct PairedClaims {
  std::vector<std::string> same_claims;  // D_s
  std::vector<std::string> diff_claims;  // D_d
};

enum class ErrorCategory {
  kTypeCategoryMismatch,
  kTypeConfusion,
  kAttributeError,
  kQuantityError,
  kFabrication,
};

inline const char* to_string(ErrorCategory cat) {
  switch (cat) {
    case ErrorCategory::kTypeCategoryMismatch:
      return "type_category_mismatch";
    case ErrorCategory::kTypeConfusion:
      return "type_confusion";
    case ErrorCategory::kAttributeError:
      return "attribute_error";
    case ErrorCategory::kQuantityError:
      return "quantity_error";
    case ErrorCategory::kFabrication:
      return "fabrication";
  }
  return "fabrication";
}

// -----------------------------------------------------------------------------
// Global perception
// -----------------------------------------------------------------------------

inline int dqr(int n, int m) {
  require(n >= 0 && m >= 0, "dqr: counts must be nonnegative");
  return n == m ? 1 : 0;
}

// max(0, 1 - |n-m|/m); the m = 0 edge is defined as exact-count agreement.
inline double ds(int n, int m) {
  require(n >= 0 && m >= 0, "ds: counts must be nonnegative");
  if (m == 0) return n == 0 ? 1.0 : 0.0;
  return std::max(0.0, 1.0 - static_cast<double>(std::abs(n - m)) /
                             static_cast<double>(m));
}

// -----------------------------------------------------------------------------
// Faithful perception
// -----------------------------------------------------------------------------

// Micro-averaged F1 over per-label counts: 2 * sum(matched) / sum(pred + truth).
// Both sides empty counts as vacuous perfection.
template <typename Key>
double micro_f1(const std::map<Key, long>& matched,
                const std::map<Key, long>& predicted,
                const std::map<Key, long>& truth) {
  long matched_total = 0;
  long denom = 0;
  for (const auto& [key, count] : predicted) denom += count;
  for (const auto& [key, count] : truth) denom += count;
  for (const auto& [key, count] : matched) {
    long pred_count = 0;
    long truth_count = 0;
    if (auto it = predicted.find(key); it != predicted.end()) {
      pred_count = it->second;
    }
    if (auto it = truth.find(key); it != truth.end()) truth_count = it->second;
    require(count >= 0 && count <= std::min(pred_count, truth_count),
            "micro_f1: matched count exceeds available pairs");
    matched_total += count;
  }
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(matched_total) /
         static_cast<double>(denom);
}

inline std::map<DiffKind, long> type_counts(const ClaimSet& claims) {
  std::map<DiffKind, long> counts;
  for (const auto& claim : claims.claims) {
    if (claim.kind) ++counts[*claim.kind];
  }
  return counts;
}

inline std::map<DiffKind, long> type_counts(const GroundTruth& gt) {
  std::map<DiffKind, long> counts;
  for (const auto& record : gt.records) ++counts[record.kind];
  return counts;
}

inline std::map<std::string, long> category_counts(const ClaimSet& claims) {
  std::map<std::string, long> counts;
  for (const auto& claim : claims.claims) {
    if (claim.category) ++counts[judge::normalize_text(*claim.category)];
  }
  return counts;
}

inline std::map<std::string, long> category_counts(const GroundTruth& gt) {
  std::map<std::string, long> counts;
  for (const auto& record : gt.records) {
    ++counts[judge::normalize_text(record.category)];
  }
  return counts;
}

template <typename Key>
std::map<Key, long> label_overlap(const std::map<Key, long>& predicted,
                                  const std::map<Key, long>& truth) {
  std::map<Key, long> matched;
  for (const auto& [key, pred_count] : predicted) {
    if (auto it = truth.find(key); it != truth.end()) {
      matched[key] = std::min(pred_count, it->second);
    }
  }
  return matched;
}

// Modification-type micro-F1: a predicted modification pairs with a
// ground-truth one when they share the type label, independent of which
// object it touched.
inline double type_f1(const ClaimSet& claims, const GroundTruth& gt) {
  const auto pred = type_counts(claims);
  const auto truth = type_counts(gt);
  return micro_f1(label_overlap(pred, truth), pred, truth);
}

// Object-category micro-F1: pairing by category label, independent of the
// modification type.
inline double category_f1(const ClaimSet& claims, const GroundTruth& gt) {
  const auto pred = category_counts(claims);
  const auto truth = category_counts(gt);
  return micro_f1(label_overlap(pred, truth), pred, truth);
}

// -----------------------------------------------------------------------------
// Faithful reasoning
// -----------------------------------------------------------------------------

inline double label_weight(judge::ConsistencyLabel label) {
  switch (label) {
    case judge::ConsistencyLabel::kConsistent:
      return 1.0;
    case judge::ConsistencyLabel::kContradictory:
      return -1.0;
    case judge::ConsistencyLabel::kAmbiguous:
      return 0.5;
  }
  return 0.5;
}

struct CrResult {
  double cr = 1.0;
  int pair_count = 0;        // |D_s| * |D_d|
  int claim_count = 0;       // |D_s| + |D_d|
  bool evaluated = true;     // false when the judge failed on some pair
  std::string failure;
};

// Weighted sum over every cross pair, normalized by |D_s| + |D_d|. Two empty
// claim sets carry no conflict and score 1.0 by convention.
inline CrResult consistency_ratio(const PairedClaims& paired,
                                  judge::Judge& the_judge) {
  CrResult result;
  const int ns = static_cast<int>(paired.same_claims.size());
  const int nd = static_cast<int>(paired.diff_claims.size());
  result.pair_count = ns * nd;
  result.claim_count = ns + nd;
  if (ns == 0 && nd == 0) {
    result.cr = 1.0;
    return result;
  }
  double weight_sum = 0.0;
  try {
    for (const auto& ds_claim : paired.same_claims) {
      for (const auto& dd_claim : paired.diff_claims) {
        weight_sum += label_weight(the_judge.consistency(ds_claim, dd_claim));
      }
    }
  } catch (const judge::JudgeError& err) {
    result.evaluated = false;
    result.failure = err.what();
    return result;
  }
  result.cr = weight_sum / static_cast<double>(result.claim_count);
  const double bound = static_cast<double>(result.pair_count) /
                           static_cast<double>(result.claim_count) +
                       1e-12;
  require(result.cr <= bound && result.cr >= -bound,
          "consistency_ratio: value ", result.cr, " outside attainable range");
  return result;
}

// Unmatched-claim categorization, in priority order. Quantity errors are
// record-level and flagged by drf_score, not here.
inline ErrorCategory categorize_error(const Claim& claim,
                                      const GroundTruth& gt) {
  if (!claim.structured()) return ErrorCategory::kFabrication;
  const std::string claim_cat = judge::normalize_text(*claim.category);
  bool kind_hits = false;
  bool joint_hits = false;
  bool category_hits_other_kind = false;
  for (const auto& record : gt.records) {
    const bool same_kind = record.kind == *claim.kind;
    const bool same_cat = judge::normalize_text(record.category) == claim_cat;
    kind_hits = kind_hits || same_kind;
    joint_hits = joint_hits || (same_kind && same_cat);
    category_hits_other_kind =
        category_hits_other_kind || (same_cat && !same_kind);
  }
  if (kind_hits && !joint_hits) return ErrorCategory::kTypeCategoryMismatch;
  if (category_hits_other_kind && !joint_hits) {
    return ErrorCategory::kTypeConfusion;
  }
  if (joint_hits) return ErrorCategory::kAttributeError;
  return ErrorCategory::kFabrication;
}

struct DrfResult {
  double drf = 0.0;
  std::vector<bool> matched;  // aligned with the claim list
  std::vector<std::optional<ErrorCategory>> errors;  // set for unmatched claims
  bool quantity_error = false;
  bool empty_claims = false;
  bool evaluated = true;
  std::string failure;

  std::map<ErrorCategory, int> error_counts() const {
    std::map<ErrorCategory, int> counts;
    for (const auto& err : errors) {
      if (err) ++counts[*err];
    }
    if (quantity_error) ++counts[ErrorCategory::kQuantityError];
    return counts;
  }
};

// Fraction of claims matching any ground-truth item (max over items, no
// bipartite constraint). An empty claim set is reported as 0.0 and flagged.
inline DrfResult drf_score(const ClaimSet& claims, const GroundTruth& gt,
                           judge::Judge& the_judge,
                           const std::string& context) {
  DrfResult result;
  result.quantity_error = claims.n() != gt.m();
  if (claims.claims.empty()) {
    result.empty_claims = true;
    return result;
  }
  int matched_count = 0;
  try {
    for (const auto& claim : claims.claims) {
      bool matched = false;
      for (const auto& record : gt.records) {
        if (the_judge.match(claim.canonical_text(), record.canonical_text(),
                            context)) {
          matched = true;
          break;
        }
      }
      result.matched.push_back(matched);
      if (matched) {
        result.errors.emplace_back(std::nullopt);
        ++matched_count;
      } else {
        result.errors.emplace_back(categorize_error(claim, gt));
      }
    }
  } catch (const judge::JudgeError& err) {
    result.evaluated = false;
    result.failure = err.what();
    return result;
  }
  result.drf = static_cast<double>(matched_count) /
               static_cast<double>(claims.claims.size());
  return result;
}

// -----------------------------------------------------------------------------
// Transcript parsing
// -----------------------------------------------------------------------------

enum class SchemaMode { kStructured, kFreeform };

class ParseError : public Error {
 public:
  ParseError(int line, const std::string& what)
      : Error(concat("line ", line, ": ", what)), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string current;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(current);
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  lines.push_back(current);
  return lines;
}

inline std::optional<int> parse_int(const std::string& text) {
  if (text.empty()) return std::nullopt;
  int value = 0;
  for (char c : text) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
    value = value * 10 + (c - '0');
    if (value > 1000000) return std::nullopt;
  }
  return value;
}

// Parses one `DIFF <idx>: type=... category=... detail="..."` line.
inline Claim parse_diff_line(const std::string& line, int line_no) {
  const auto colon = line.find(':');
  require(colon != std::string::npos, "DIFF line missing ':'");
  const std::string index_part = trim(line.substr(4, colon - 4));
  if (!parse_int(index_part)) {
    throw ParseError(line_no, "DIFF index is not a number: '" + index_part +
                                  "'");
  }
  const std::string payload = trim(line.substr(colon + 1));
  const auto frag = judge::parse_fragment(payload);
  if (!frag) {
    throw ParseError(line_no, "malformed DIFF payload: '" + payload + "'");
  }
  const auto kind = parse_kind(frag->kind);
  if (!kind) {
    throw ParseError(line_no, "unknown modification type: '" + frag->kind +
                                  "'");
  }
  Claim claim;
  claim.kind = *kind;
  claim.category = frag->category;
  claim.detail = frag->detail;
  claim.raw_text = payload;
  return claim;
}

}  // namespace detail

inline Claim make_placeholder_claim() {
  Claim claim;
  claim.raw_text = "(unsubstantiated claim)";
  claim.placeholder = true;
  return claim;
}

// Structured mode parses a COUNT header plus DIFF lines; a count larger than
// the claim list is honored by padding with placeholder claims so the
// reported count stays a claim-level quantity. Freeform mode extracts the
// count from the first integer following a count-marker phrase and treats
// enumerated lines as raw claims.
inline ClaimSet parse_claims(const std::string& text, SchemaMode mode) {
  ClaimSet set;
  const auto lines = detail::split_lines(text);
  if (mode == SchemaMode::kStructured) {
    bool saw_count = false;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const int line_no = static_cast<int>(i) + 1;
      const std::string line = detail::trim(lines[i]);
      if (line.empty()) continue;
      if (!saw_count) {
        if (line.rfind("COUNT:", 0) != 0) {
          throw ParseError(line_no, "expected COUNT header, got '" + line +
                                        "'");
        }
        const auto count = detail::parse_int(detail::trim(line.substr(6)));
        if (!count) {
          throw ParseError(line_no, "COUNT value is not a number");
        }
        set.reported_count = *count;
        saw_count = true;
        continue;
      }
      if (line.rfind("DIFF ", 0) != 0) {
        throw ParseError(line_no, "expected DIFF line, got '" + line + "'");
      }
      set.claims.push_back(detail::parse_diff_line(line, line_no));
    }
    if (!saw_count) throw ParseError(1, "empty structured response");
    if (set.reported_count > static_cast<int>(set.claims.size())) {
      set.count_mismatch = true;
      while (static_cast<int>(set.claims.size()) < set.reported_count) {
        set.claims.push_back(make_placeholder_claim());
      }
    } else if (set.reported_count < static_cast<int>(set.claims.size())) {
      set.count_mismatch = true;
      set.reported_count = static_cast<int>(set.claims.size());
    }
    return set;
  }

  // Freeform: enumerated lines become raw claims.
  for (const auto& raw_line : lines) {
    const std::string line = detail::trim(raw_line);
    if (line.size() < 2) continue;
    const bool bullet = line[0] == '-' || line[0] == '*';
    const bool numbered = std::isdigit(static_cast<unsigned char>(line[0])) &&
                          (line.find(". ") == 1 || line.find(") ") == 1);
    if (!bullet && !numbered) continue;
    Claim claim;
    claim.raw_text = detail::trim(line.substr(2));
    if (!claim.raw_text.empty()) set.claims.push_back(claim);
  }
  const std::string lowered = judge::normalize_text(text);
  static const char* kMarkers[] = {"there are", "count:", "i count",
                                   "i found", "i see"};
  std::optional<int> count;
  for (const char* marker : kMarkers) {
    const auto pos = lowered.find(marker);
    if (pos == std::string::npos) continue;
    std::size_t i = pos + std::string(marker).size();
    while (i < lowered.size() &&
           !std::isdigit(static_cast<unsigned char>(lowered[i]))) {
      ++i;
    }
    std::size_t j = i;
    while (j < lowered.size() &&
           std::isdigit(static_cast<unsigned char>(lowered[j]))) {
      ++j;
    }
    if (j > i) {
      count = detail::parse_int(lowered.substr(i, j - i));
      break;
    }
  }
  if (count) {
    set.reported_count = *count;
    if (set.reported_count > static_cast<int>(set.claims.size())) {
      set.count_mismatch = true;
      while (static_cast<int>(set.claims.size()) < set.reported_count) {
        set.claims.push_back(make_placeholder_claim());
      }
    } else if (set.reported_count < static_cast<int>(set.claims.size())) {
      set.count_mismatch = true;
      set.reported_count = static_cast<int>(set.claims.size());
    }
  } else {
    set.count_missing = true;
    set.reported_count = static_cast<int>(set.claims.size());
  }
  return set;
}

// Canonical emission of a structured claim set; parse-then-serialize is the
// normal form used by the round-trip property.
inline std::string serialize_claims(const ClaimSet& set) {
  std::string out = concat("COUNT: ", set.reported_count, "\n");
  int index = 1;
  for (const auto& claim : set.claims) {
    require(claim.structured() || claim.placeholder,
            "serialize_claims: claim ", index, " lacks structured fields");
    if (claim.placeholder) {
      ++index;
      continue;
    }
    out += concat("DIFF ", index, ": ", claim.canonical_text(), "\n");
    ++index;
  }
  return out;
}

// Extracts claim texts from one response for the paired-query comparison.
// Structured responses contribute their DIFF payloads (a leading yes/no line
// is ignored); freeform responses contribute enumerated lines.
inline std::vector<std::string> extract_claim_texts(const std::string& text,
                                                    SchemaMode mode) {
  std::vector<std::string> out;
  for (const auto& raw_line : detail::split_lines(text)) {
    const std::string line = detail::trim(raw_line);
    if (line.empty()) continue;
    if (mode == SchemaMode::kStructured) {
      if (line.rfind("DIFF ", 0) != 0) continue;
      const auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      out.push_back(detail::trim(line.substr(colon + 1)));
    } else {
      const bool bullet = line[0] == '-' || line[0] == '*';
      const bool numbered =
          std::isdigit(static_cast<unsigned char>(line[0])) &&
          (line.find(". ") == 1 || line.find(") ") == 1);
      if (bullet || numbered) out.push_back(detail::trim(line.substr(2)));
    }
  }
  return out;
}

// -----------------------------------------------------------------------------
// Reports
// -----------------------------------------------------------------------------

struct RecordScores {
  std::string id;
  std::string split;  // "easy" / "medium" / "hard" or "multi2".."multi5"
  std::optional<double> dqr, ds, tf1, cf1, cr, drf;
  std::map<ErrorCategory, int> error_counts;
  bool unevaluated = false;  // a judge failure voided CR/DRF for this record
  bool empty_claims = false;
  bool count_mismatch = false;
};

struct AggregateRow {
  std::string split_kind;  // "difficulty", "multi", or "overall"
  std::string key;
  int count = 0;
  int unevaluated = 0;
  std::map<std::string, double> means;  // metric name -> mean
};

struct MetricReport {
  std::vector<RecordScores> records;
  std::vector<AggregateRow> aggregates;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"dqr", "ds",  "tf1",
                                                 "cf1", "cr",  "drf"};
  return names;
}

inline std::optional<double> metric_value(const RecordScores& rec,
                                          const std::string& name) {
  if (name == "dqr") return rec.dqr;
  if (name == "ds") return rec.ds;
  if (name == "tf1") return rec.tf1;
  if (name == "cf1") return rec.cf1;
  if (name == "cr") return rec.cr;
  if (name == "drf") return rec.drf;
  return std::nullopt;
}

// Aggregate means per split plus an overall row. Records whose judge failed
// are excluded from the means and reported via the unevaluated counter.
inline std::vector<AggregateRow> aggregate_scores(
    const std::vector<RecordScores>& records) {
  std::map<std::pair<std::string, std::string>, std::vector<const RecordScores*>>
      groups;
  for (const auto& rec : records) {
    std::string kind = "difficulty";
    if (rec.split.rfind("multi", 0) == 0) kind = "multi";
    groups[{kind, rec.split}].push_back(&rec);
    groups[{"overall", "all"}].push_back(&rec);
  }
  std::vector<AggregateRow> rows;
  for (const auto& [key, members] : groups) {
    AggregateRow row;
    row.split_kind = key.first;
    row.key = key.second;
    row.count = static_cast<int>(members.size());
    for (const auto* rec : members) {
      if (rec->unevaluated) ++row.unevaluated;
    }
    for (const auto& name : metric_names()) {
      double sum = 0.0;
      int n = 0;
      for (const auto* rec : members) {
        if (rec->unevaluated && (name == "cr" || name == "drf")) continue;
        if (auto value = metric_value(*rec, name)) {
          sum += *value;
          ++n;
        }
      }
      if (n > 0) row.means[name] = sum / static_cast<double>(n);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace faithkit::metrics

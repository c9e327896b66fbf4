#pragma once

// Judge abstraction for semantic claim comparison. The rule judge is a pure
// deterministic predicate over canonical claim text, suitable for oracles and
// offline scoring; the remote chat-completions client lives in
// judge_remote.hpp.

#include <cctype>
#include <optional>
#include <string>

#include "faithkit/common.hpp"

namespace faithkit::judge {

enum class ConsistencyLabel { kConsistent, kContradictory, kAmbiguous };

inline const char* to_string(ConsistencyLabel label) {
  switch (label) {
    case ConsistencyLabel::kConsistent:
      return "consistent";
    case ConsistencyLabel::kContradictory:
      return "contradictory";
    case ConsistencyLabel::kAmbiguous:
      return "ambiguous";
  }
  return "ambiguous";
}

class JudgeError : public Error {
 public:
  using Error::Error;
};

class Judge {
 public:
  virtual ~Judge() = default;

  // Labels a cross-query claim pair as consistent / contradictory / ambiguous.
  virtual ConsistencyLabel consistency(const std::string& claim_same,
                                       const std::string& claim_diff) = 0;

  // True if the claim semantically corresponds to the ground-truth item.
  virtual bool match(const std::string& claim, const std::string& ground_truth,
                     const std::string& context) = 0;
};

// Lowercase, trim, collapse internal whitespace, drop trailing periods.
inline std::string normalize_text(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  while (!out.empty() && out.back() == '.') out.pop_back();
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

// A claim fragment in the canonical form
//   type=<kind> category=<name> detail="<text>"
// Fragments that do not parse are compared as plain text.
struct ClaimFragment {
  bool structured = false;
  std::string kind;
  std::string category;
  std::string detail;
};

inline std::optional<ClaimFragment> parse_fragment(const std::string& text) {
  const auto type_pos = text.find("type=");
  const auto cat_pos = text.find("category=");
  const auto detail_pos = text.find("detail=\"");
  if (type_pos == std::string::npos || cat_pos == std::string::npos ||
      detail_pos == std::string::npos || type_pos > cat_pos ||
      cat_pos > detail_pos) {
    return std::nullopt;
  }
  auto token_after = [&](std::size_t start) {
    std::size_t end = start;
    while (end < text.size() &&
           !std::isspace(static_cast<unsigned char>(text[end]))) {
      ++end;
    }
    return text.substr(start, end - start);
  };
  ClaimFragment frag;
  frag.structured = true;
  frag.kind = token_after(type_pos + 5);
  frag.category = token_after(cat_pos + 9);
  const std::size_t detail_start = detail_pos + 8;
  const std::size_t detail_end = text.find('"', detail_start);
  if (detail_end == std::string::npos) return std::nullopt;
  frag.detail = text.substr(detail_start, detail_end - detail_start);
  if (frag.kind.empty() || frag.category.empty()) return std::nullopt;
  return frag;
}

// Deterministic judge over canonical claim text. Consistency: normalized
// equality is consistent; same category with any remaining difference is
// contradictory; everything else is ambiguous. Matching: kind, category, and
// normalized detail must all agree.
class RuleJudge final : public Judge {
 public:
  ConsistencyLabel consistency(const std::string& claim_same,
                               const std::string& claim_diff) override {
    if (normalize_text(claim_same) == normalize_text(claim_diff)) {
      return ConsistencyLabel::kConsistent;
    }
    const auto a = parse_fragment(claim_same);
    const auto b = parse_fragment(claim_diff);
    if (a && b &&
        normalize_text(a->category) == normalize_text(b->category)) {
      return ConsistencyLabel::kContradictory;
    }
    return ConsistencyLabel::kAmbiguous;
  }

  bool match(const std::string& claim, const std::string& ground_truth,
             const std::string& /*context*/) override {
    const auto c = parse_fragment(claim);
    const auto g = parse_fragment(ground_truth);
    if (!c || !g) return false;
    return normalize_text(c->kind) == normalize_text(g->kind) &&
           normalize_text(c->category) == normalize_text(g->category) &&
           normalize_text(c->detail) == normalize_text(g->detail);
  }
};

}  // namespace faithkit::judge

#pragma once

// Manifest-driven orchestration: scene generation, the token-to-claim
// codebook that turns toy transcripts into structured responses, record
// evaluation with a bounded worker pool, stage ablations, perturbation
// experiments, and byte-stable report emission.

#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "faithkit/common.hpp"
#include "faithkit/judge.hpp"
#include "faithkit/metrics.hpp"
#include "faithkit/probes.hpp"
#include "faithkit/sage.hpp"
#include "faithkit/toymm.hpp"

namespace faithkit::harness {

using metrics::DiffKind;
using toymm::Cell;
using toymm::ScenePair;
using toymm::SceneDiff;

// -----------------------------------------------------------------------------
// Token-to-claim codebook
// -----------------------------------------------------------------------------
//
// Fixed vocabulary layout for the toy model. Claim content is spelled as
// token triples (kind, category[, color]) so a transcript maps onto
// structured claim lines without any captioner.

struct Codebook {
  static constexpr int kEos = 0;
  static constexpr int kSys = 1;
  static constexpr int kQuerySame = 2;
  static constexpr int kQueryDiff = 3;
  static constexpr int kQueryDescribe = 4;
  static constexpr int kQueryCount = 5;
  static constexpr int kHintSuffix = 6;
  static constexpr int kTagOpen = 7;
  static constexpr int kTagClose = 8;
  static constexpr int kYes = 9;
  static constexpr int kNo = 10;
  static constexpr int kKindColor = 11;
  static constexpr int kKindRemove = 12;
  static constexpr int kKindPosition = 13;
  static constexpr int kCategoryBase = 16;
  static constexpr int kCategoryCount = 16;
  static constexpr int kColorBase = 32;
  static constexpr int kColorCount = 8;
  static constexpr int kMinVocab = kColorBase + kColorCount;

  static const std::vector<std::string>& category_names() {
    static const std::vector<std::string> names = {
        "chair", "table", "dog",   "cat",    "bus",   "car",
        "person", "bird", "cup",   "bottle", "clock", "plant",
        "book",  "laptop", "pizza", "bench"};
    return names;
  }

  static const std::vector<std::string>& color_names() {
    static const std::vector<std::string> names = {
        "red",   "blue",  "green",  "yellow",
        "black", "white", "orange", "purple"};
    return names;
  }

  static void validate(const toymm::ModelConfig& config) {
    require(config.vocab_size >= kMinVocab, "Codebook: vocabulary of ",
            config.vocab_size, " is too small (needs >= ", kMinVocab, ")");
    require(config.eos_id == kEos, "Codebook: EOS id must be ", kEos);
  }

  static const std::string& category_name(int id) {
    require(id >= 0 && id < kCategoryCount, "Codebook: category id ", id,
            " out of range");
    return category_names()[static_cast<std::size_t>(id)];
  }

  static const std::string& color_name(int id) {
    require(id >= 0 && id < kColorCount, "Codebook: color id ", id,
            " out of range");
    return color_names()[static_cast<std::size_t>(id)];
  }

  static int kind_token(DiffKind kind) {
    switch (kind) {
      case DiffKind::kColor:
        return kKindColor;
      case DiffKind::kRemove:
        return kKindRemove;
      case DiffKind::kPosition:
        return kKindPosition;
    }
    return kKindColor;
  }

  // The faithful token spelling of one scene difference.
  static std::vector<int> claim_tokens(const SceneDiff& diff) {
    std::vector<int> tokens;
    tokens.push_back(kind_token(diff.record.kind));
    int category_id = -1;
    const auto& names = category_names();
    for (int i = 0; i < kCategoryCount; ++i) {
      if (names[static_cast<std::size_t>(i)] == diff.record.category) {
        category_id = i;
        break;
      }
    }
    require(category_id >= 0, "Codebook: unknown category '",
            diff.record.category, "'");
    tokens.push_back(kCategoryBase + category_id);
    if (diff.record.kind == DiffKind::kColor) {
      int color_id = -1;
      const auto& colors = color_names();
      for (int i = 0; i < kColorCount; ++i) {
        if (colors[static_cast<std::size_t>(i)] == diff.record.after) {
          color_id = i;
          break;
        }
      }
      require(color_id >= 0, "Codebook: unknown color '", diff.record.after,
              "'");
      tokens.push_back(kColorBase + color_id);
    }
    return tokens;
  }

  // The faithful full transcript for a scene: claim triples then EOS.
  static std::vector<int> oracle_tokens(const ScenePair& scene) {
    std::vector<int> tokens;
    for (const auto& diff : scene.differences) {
      const auto claim = claim_tokens(diff);
      tokens.insert(tokens.end(), claim.begin(), claim.end());
    }
    tokens.push_back(kEos);
    return tokens;
  }

  // Scans a transcript for claim triples: a kind token opens a claim, a
  // category token fills it, and color claims additionally take a color
  // token. Tokens that do not fit the pending claim are skipped; an
  // incomplete claim at the end is dropped.
  static std::vector<metrics::Claim> parse_transcript(
      const std::vector<int>& tokens) {
    std::vector<metrics::Claim> claims;
    std::optional<DiffKind> pending_kind;
    std::optional<int> pending_category;
    auto flush = [&](std::optional<int> color) {
      if (!pending_kind || !pending_category) return;
      metrics::Claim claim;
      claim.kind = *pending_kind;
      claim.category = category_name(*pending_category);
      switch (*pending_kind) {
        case DiffKind::kColor:
          if (!color) return;
          claim.detail = "to " + color_name(*color);
          break;
        case DiffKind::kRemove:
          claim.detail = "";
          break;
        case DiffKind::kPosition:
          claim.detail = "moved";
          break;
      }
      claim.raw_text = claim.canonical_text();
      claims.push_back(std::move(claim));
      pending_kind.reset();
      pending_category.reset();
    };
    for (int token : tokens) {
      if (token == kEos) break;
      if (token == kKindColor || token == kKindRemove ||
          token == kKindPosition) {
        pending_kind = token == kKindColor    ? DiffKind::kColor
                       : token == kKindRemove ? DiffKind::kRemove
                                              : DiffKind::kPosition;
        pending_category.reset();
        continue;
      }
      if (token >= kCategoryBase && token < kCategoryBase + kCategoryCount) {
        if (!pending_kind) continue;
        pending_category = token - kCategoryBase;
        if (*pending_kind != DiffKind::kColor) flush(std::nullopt);
        continue;
      }
      if (token >= kColorBase && token < kColorBase + kColorCount) {
        if (pending_kind == DiffKind::kColor && pending_category) {
          flush(token - kColorBase);
        }
        continue;
      }
    }
    return claims;
  }

  // Structured describe-phase response text for a transcript.
  static std::string describe_response(const std::vector<int>& tokens) {
    const auto claims = parse_transcript(tokens);
    std::string out = concat("COUNT: ", claims.size(), "\n");
    int index = 1;
    for (const auto& claim : claims) {
      out += concat("DIFF ", index++, ": ", claim.canonical_text(), "\n");
    }
    return out;
  }

  // Binary-phase response: a verdict line plus any claim lines found in the
  // transcript.
  static std::string binary_response(const std::vector<int>& tokens) {
    std::string verdict = "unclear";
    if (!tokens.empty()) {
      if (tokens.front() == kYes) verdict = "yes";
      if (tokens.front() == kNo) verdict = "no";
    }
    const auto claims = parse_transcript(tokens);
    std::string out = verdict + "\n";
    int index = 1;
    for (const auto& claim : claims) {
      out += concat("DIFF ", index++, ": ", claim.canonical_text(), "\n");
    }
    return out;
  }

  static std::string count_response(const std::vector<int>& tokens) {
    const auto claims = parse_transcript(tokens);
    return concat("There are ", claims.size(), " differences.\n");
  }
};

// -----------------------------------------------------------------------------
// Scene generation
// -----------------------------------------------------------------------------

struct SceneSpec {
  int grid_h = 4;
  int grid_w = 4;
  int occupied = 6;   // object-bearing cells in the base grid
  int num_diffs = 1;  // atomic edits applied to side B
  std::uint64_t seed = 0;
};

// Proportional difficulty bands over grid occupancy mirroring the source
// instance-count bands (sparse / moderate / dense scaled to the grid).
inline std::string difficulty_for(int occupied, int cell_count) {
  const double g = static_cast<double>(cell_count);
  const int easy_max = static_cast<int>(std::ceil(6.0 / 38.0 * g));
  const int medium_max = static_cast<int>(std::ceil(16.0 / 38.0 * g));
  if (occupied <= easy_max) return "easy";
  if (occupied <= medium_max) return "medium";
  return "hard";
}

inline ScenePair generate_scene(const SceneSpec& spec) {
  const int cells = spec.grid_h * spec.grid_w;
  require(spec.occupied >= spec.num_diffs,
          "generate_scene: needs at least one occupied cell per difference");
  require(spec.occupied <= cells, "generate_scene: too many occupied cells");
  require(spec.num_diffs >= 1, "generate_scene: needs at least one edit");
  Rng rng(mix_seed(spec.seed, 0x5343454EULL));

  ScenePair scene;
  scene.grid_h = spec.grid_h;
  scene.grid_w = spec.grid_w;
  scene.cells_a.assign(static_cast<std::size_t>(cells), Cell{});
  const auto occupied_cells = rng.sample_without_replacement(cells, spec.occupied);
  for (int cell : occupied_cells) {
    auto& c = scene.cells_a[static_cast<std::size_t>(cell)];
    c.occupancy = 1;
    c.category = static_cast<int>(rng.below(Codebook::kCategoryCount));
    c.color = static_cast<int>(rng.below(Codebook::kColorCount));
  }
  scene.cells_b = scene.cells_a;

  std::vector<int> free_cells;
  for (int c = 0; c < cells; ++c) {
    if (!scene.cells_a[static_cast<std::size_t>(c)].occupancy) {
      free_cells.push_back(c);
    }
  }
  auto cell_name = [&](int cell) {
    return concat("r", cell / spec.grid_w, "c", cell % spec.grid_w);
  };

  std::set<int> touched;
  for (int d = 0; d < spec.num_diffs; ++d) {
    const int target = occupied_cells[static_cast<std::size_t>(
        (d * 2654435761U) % occupied_cells.size())];
    if (touched.count(target)) continue;
    touched.insert(target);
    const Cell original = scene.cells_a[static_cast<std::size_t>(target)];
    int kind_pick = static_cast<int>(rng.below(3));
    if (kind_pick == 2 && free_cells.empty()) kind_pick = 0;

    SceneDiff diff;
    diff.cell = target;
    diff.record.category = Codebook::category_name(original.category);
    if (kind_pick == 0) {
      diff.record.kind = DiffKind::kColor;
      const int new_color =
          (original.color + 1 + static_cast<int>(rng.below(
                                    Codebook::kColorCount - 1))) %
          Codebook::kColorCount;
      scene.cells_b[static_cast<std::size_t>(target)].color = new_color;
      diff.record.before = Codebook::color_name(original.color);
      diff.record.after = Codebook::color_name(new_color);
    } else if (kind_pick == 1) {
      diff.record.kind = DiffKind::kRemove;
      scene.cells_b[static_cast<std::size_t>(target)] = Cell{};
      diff.record.before = "present";
      diff.record.after = "absent";
    } else {
      diff.record.kind = DiffKind::kPosition;
      const auto slot = rng.below(free_cells.size());
      const int destination = free_cells[static_cast<std::size_t>(slot)];
      free_cells.erase(free_cells.begin() + static_cast<long>(slot));
      touched.insert(destination);
      scene.cells_b[static_cast<std::size_t>(destination)] = original;
      scene.cells_b[static_cast<std::size_t>(target)] = Cell{};
      diff.cell_to = destination;
      diff.record.before = cell_name(target);
      diff.record.after = cell_name(destination);
    }
    scene.differences.push_back(std::move(diff));
  }
  scene.validate();
  return scene;
}

// -----------------------------------------------------------------------------
// Manifests
// -----------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::optional<std::string> difficulty;  // easy | medium | hard
  std::optional<int> multi_count;         // 2..5
  metrics::GroundTruth gt;
  std::map<std::string, std::string> transcripts;  // same/diff/count/describe
  std::optional<ScenePair> scene;

  std::string split() const {
    if (difficulty) return *difficulty;
    return concat("multi", multi_count.value_or(0));
  }

  void validate() const {
    require(!id.empty(), "manifest record: empty id");
    require(difficulty.has_value() != multi_count.has_value(),
            "manifest record: exactly one of difficulty and multi_count is "
            "required");
    if (difficulty) {
      require(*difficulty == "easy" || *difficulty == "medium" ||
                  *difficulty == "hard",
              "manifest record: unknown difficulty '", *difficulty, "'");
    }
    if (multi_count) {
      require(*multi_count >= 2 && *multi_count <= 5,
              "manifest record: multi_count must be in [2,5]");
    }
  }
};

inline nlohmann::json record_to_json(const ManifestRecord& record) {
  nlohmann::json j;
  j["id"] = record.id;
  if (record.difficulty) j["difficulty"] = *record.difficulty;
  if (record.multi_count) j["multi_count"] = *record.multi_count;
  j["ground_truth"] = nlohmann::json::array();
  for (const auto& gt : record.gt.records) {
    j["ground_truth"].push_back({{"kind", metrics::to_string(gt.kind)},
                                 {"category", gt.category},
                                 {"before", gt.before},
                                 {"after", gt.after}});
  }
  j["transcripts"] = record.transcripts;
  if (record.scene) j["scene"] = toymm::scene_to_json(*record.scene);
  return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  ManifestRecord record;
  record.id = j.at("id").get<std::string>();
  if (j.contains("difficulty")) {
    record.difficulty = j.at("difficulty").get<std::string>();
  }
  if (j.contains("multi_count")) {
    record.multi_count = j.at("multi_count").get<int>();
  }
  for (const auto& gt : j.at("ground_truth")) {
    metrics::DifferenceRecord diff;
    const auto kind = metrics::parse_kind(gt.at("kind").get<std::string>());
    require(kind.has_value(), "ground truth has unknown kind");
    diff.kind = *kind;
    diff.category = gt.at("category").get<std::string>();
    diff.before = gt.value("before", std::string());
    diff.after = gt.value("after", std::string());
    record.gt.records.push_back(std::move(diff));
  }
  if (j.contains("transcripts")) {
    for (const auto& [key, value] : j.at("transcripts").items()) {
      record.transcripts[key] = value.get<std::string>();
    }
  }
  if (j.contains("scene")) {
    record.scene = toymm::scene_from_json(j.at("scene"));
  }
  record.validate();
  return record;
}

struct ManifestLoad {
  std::vector<ManifestRecord> records;
  std::vector<std::string> line_errors;
};

// One self-describing JSON record per line; invalid lines are collected as
// diagnostics and valid records kept. Zero valid records aborts the load.
inline ManifestLoad load_manifest(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "load_manifest: cannot open ", path);
  ManifestLoad result;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (metrics::detail::trim(line).empty()) continue;
    try {
      result.records.push_back(
          record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& err) {
      result.line_errors.push_back(concat("line ", line_no, ": ", err.what()));
    }
  }
  require(!result.records.empty(), "load_manifest: no valid records in ",
          path, " (", result.line_errors.size(), " rejected)");
  return result;
}

inline void save_manifest(const std::vector<ManifestRecord>& records,
                          const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "save_manifest: cannot write ", path);
  for (const auto& record : records) {
    out << record_to_json(record).dump() << '\n';
  }
}

// -----------------------------------------------------------------------------
// Record evaluation
// -----------------------------------------------------------------------------

struct MetricSelection {
  bool dqr = true, ds = true, tf1 = true, cf1 = true, cr = true, drf = true;

  static MetricSelection all() { return MetricSelection{}; }

  static MetricSelection parse(const std::string& text) {
    if (text == "all" || text.empty()) return all();
    MetricSelection sel{false, false, false, false, false, false};
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = metrics::detail::trim(item);
      if (item == "dqr") sel.dqr = true;
      else if (item == "ds") sel.ds = true;
      else if (item == "tf1") sel.tf1 = true;
      else if (item == "cf1") sel.cf1 = true;
      else if (item == "cr") sel.cr = true;
      else if (item == "drf") sel.drf = true;
      else throw Error(concat("unknown metric '", item, "'"));
    }
    return sel;
  }

  bool needs_describe() const { return dqr || ds || tf1 || cf1 || drf; }
  bool needs_paired() const { return cr; }
};

inline std::string ground_truth_context(const metrics::GroundTruth& gt) {
  std::string out;
  for (const auto& record : gt.records) {
    if (!out.empty()) out += "; ";
    out += record.canonical_text();
  }
  return out.empty() ? "(no differences)" : out;
}

inline metrics::RecordScores evaluate_record(const ManifestRecord& record,
                                             judge::Judge& the_judge,
                                             const MetricSelection& selection) {
  metrics::RecordScores scores;
  scores.id = record.id;
  scores.split = record.split();

  if (selection.needs_describe()) {
    const auto it = record.transcripts.find("describe");
    if (it == record.transcripts.end()) {
      scores.unevaluated = true;
    } else {
      try {
        const auto claims =
            metrics::parse_claims(it->second, metrics::SchemaMode::kStructured);
        scores.count_mismatch = claims.count_mismatch;
        if (selection.dqr) scores.dqr = metrics::dqr(claims.n(), record.gt.m());
        if (selection.ds) scores.ds = metrics::ds(claims.n(), record.gt.m());
        if (selection.tf1) scores.tf1 = metrics::type_f1(claims, record.gt);
        if (selection.cf1) {
          scores.cf1 = metrics::category_f1(claims, record.gt);
        }
        if (selection.drf) {
          const auto drf = metrics::drf_score(
              claims, record.gt, the_judge, ground_truth_context(record.gt));
          if (!drf.evaluated) {
            scores.unevaluated = true;
          } else {
            scores.drf = drf.drf;
            scores.error_counts = drf.error_counts();
            scores.empty_claims = drf.empty_claims;
          }
        }
      } catch (const metrics::ParseError&) {
        scores.unevaluated = true;
      }
    }
  }

  if (selection.needs_paired()) {
    const auto same_it = record.transcripts.find("same");
    const auto diff_it = record.transcripts.find("diff");
    if (same_it == record.transcripts.end() ||
        diff_it == record.transcripts.end()) {
      scores.unevaluated = true;
    } else {
      metrics::PairedClaims paired;
      paired.same_claims = metrics::extract_claim_texts(
          same_it->second, metrics::SchemaMode::kStructured);
      paired.diff_claims = metrics::extract_claim_texts(
          diff_it->second, metrics::SchemaMode::kStructured);
      const auto cr = metrics::consistency_ratio(paired, the_judge);
      if (!cr.evaluated) {
        scores.unevaluated = true;
      } else {
        scores.cr = cr.cr;
      }
    }
  }
  return scores;
}

// Scores records on a bounded worker pool (judge calls are the only
// effectful step; the judge client serializes its own cache) and merges the
// results ordered by record id.
inline metrics::MetricReport evaluate_records(
    const std::vector<ManifestRecord>& records, judge::Judge& the_judge,
    const MetricSelection& selection, int workers = 4) {
  require(workers >= 1, "evaluate_records: needs at least one worker");
  metrics::MetricReport report;
  report.records.resize(records.size());
  std::atomic<std::size_t> next{0};
  auto run = [&]() {
    while (true) {
      const std::size_t index = next.fetch_add(1);
      if (index >= records.size()) break;
      report.records[index] =
          evaluate_record(records[index], the_judge, selection);
    }
  };
  if (workers == 1 || records.size() <= 1) {
    run();
  } else {
    std::vector<std::thread> pool;
    const int n = std::min<int>(workers, static_cast<int>(records.size()));
    pool.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool.emplace_back(run);
    for (auto& t : pool) t.join();
  }
  std::sort(report.records.begin(), report.records.end(),
            [](const metrics::RecordScores& a, const metrics::RecordScores& b) {
              return a.id < b.id;
            });
  report.aggregates = metrics::aggregate_scores(report.records);
  return report;
}

// -----------------------------------------------------------------------------
// Toy-model transcript generation
// -----------------------------------------------------------------------------

struct DecodeSetup {
  toymm::ModelConfig model_config;
  int system_len = 4;
  int max_len = 12;
};

inline toymm::SequenceLayout layout_for(const DecodeSetup& setup,
                                        const ScenePair& scene,
                                        int prompt_len = 1) {
  return toymm::make_layout(setup.system_len, scene.cell_count(), prompt_len);
}

inline std::vector<int> system_tokens_for(const DecodeSetup& setup) {
  return std::vector<int>(static_cast<std::size_t>(setup.system_len),
                          Codebook::kSys);
}

// Runs the three query phases (same? / different? / describe) through one
// engine and converts the emitted tokens into response texts.
template <typename DecodeFn>
std::map<std::string, std::string> run_query_phases(const ScenePair& scene,
                                                    DecodeFn&& decode) {
  std::map<std::string, std::string> transcripts;
  const auto same_tokens = decode(Codebook::kQuerySame);
  const auto diff_tokens = decode(Codebook::kQueryDiff);
  const auto describe_tokens = decode(Codebook::kQueryDescribe);
  transcripts["same"] = Codebook::binary_response(same_tokens);
  transcripts["diff"] = Codebook::binary_response(diff_tokens);
  transcripts["describe"] = Codebook::describe_response(describe_tokens);
  transcripts["count"] = Codebook::count_response(describe_tokens);
  return transcripts;
}

// -----------------------------------------------------------------------------
// Ablation
// -----------------------------------------------------------------------------

struct StageCombo {
  std::string tag;
  bool s1 = false, s2 = false, s3 = false;
};

struct AblationPlan {
  std::vector<StageCombo> combos;  // defaults to the stage ladder
  sage::SageConfig base;           // hyper-parameter defaults for every row
  // One-at-a-time sweeps: parameter name -> values. Each value adds one
  // full-stack row. Supported names: alpha0, beta, eta, tau, topk.
  std::vector<std::pair<std::string, std::vector<double>>> sweeps;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int grid_h = 4;
  int grid_w = 4;
  std::uint64_t model_seed = 3;
  int system_len = 4;
  int max_len = 12;

  static std::vector<StageCombo> default_combos() {
    return {{"baseline", false, false, false},
            {"stage1", true, false, false},
            {"stage1+2", true, true, false},
            {"full", true, true, true}};
  }
};

inline AblationPlan plan_from_json(const nlohmann::json& j) {
  AblationPlan plan;
  if (j.contains("combos")) {
    for (const auto& c : j.at("combos")) {
      StageCombo combo;
      combo.tag = c.at("tag").get<std::string>();
      combo.s1 = c.value("stage1", false);
      combo.s2 = c.value("stage2", false);
      combo.s3 = c.value("stage3", false);
      plan.combos.push_back(std::move(combo));
    }
  }
  if (j.contains("alpha0")) plan.base.alpha0 = j.at("alpha0").get<double>();
  if (j.contains("beta")) plan.base.beta = j.at("beta").get<double>();
  if (j.contains("eta")) plan.base.eta = j.at("eta").get<double>();
  if (j.contains("tau")) plan.base.tau = j.at("tau").get<double>();
  if (j.contains("topk")) plan.base.top_k = j.at("topk").get<int>();
  if (j.contains("sweeps")) {
    for (const auto& [name, values] : j.at("sweeps").items()) {
      require(name == "alpha0" || name == "beta" || name == "eta" ||
                  name == "tau" || name == "topk",
              "ablation plan: unknown sweep parameter '", name, "'");
      plan.sweeps.emplace_back(name, values.get<std::vector<double>>());
    }
  }
  if (j.contains("seeds")) {
    plan.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  }
  if (j.contains("grid_h")) plan.grid_h = j.at("grid_h").get<int>();
  if (j.contains("grid_w")) plan.grid_w = j.at("grid_w").get<int>();
  if (j.contains("model_seed")) {
    plan.model_seed = j.at("model_seed").get<std::uint64_t>();
  }
  if (j.contains("system_len")) plan.system_len = j.at("system_len").get<int>();
  if (j.contains("max_len")) plan.max_len = j.at("max_len").get<int>();
  require(!plan.seeds.empty(), "ablation plan: empty seed list");
  return plan;
}

struct AblationRow {
  std::string tag;
  bool s1 = false, s2 = false, s3 = false;
  std::string swept;        // swept parameter name, or "-"
  double swept_value = 0.0;
  std::map<std::string, double> means;   // six metric means
  std::map<std::string, double> deltas;  // vs the baseline row
  double visual_share = 0.0;
  double visual_share_delta = 0.0;
  double gate_rate = 0.0;   // fraction of (step, layer) gates fired
  double mean_mask = 0.0;   // mean discrepancy-mask size per step
  int scenes = 0;
  int failures = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

namespace detail {

struct SceneBundle {
  ScenePair scene;
  toymm::SequenceLayout layout;
  std::vector<int> system_tokens;
};

inline std::vector<SceneBundle> build_scene_suite(const AblationPlan& plan) {
  std::vector<SceneBundle> suite;
  const int cells = plan.grid_h * plan.grid_w;
  for (std::size_t i = 0; i < plan.seeds.size(); ++i) {
    SceneSpec spec;
    spec.grid_h = plan.grid_h;
    spec.grid_w = plan.grid_w;
    spec.num_diffs = 1 + static_cast<int>(i % 3);
    spec.occupied =
        std::min(cells, spec.num_diffs + 3 + static_cast<int>(i % 5));
    spec.seed = plan.seeds[i];
    SceneBundle bundle{generate_scene(spec), {}, {}};
    bundle.layout = toymm::make_layout(plan.system_len, cells, 1);
    bundle.system_tokens.assign(static_cast<std::size_t>(plan.system_len),
                                Codebook::kSys);
    suite.push_back(std::move(bundle));
  }
  return suite;
}

struct EngineOutcome {
  std::map<std::string, std::string> transcripts;
  double visual_share = 0.0;
  double gate_rate = 0.0;
  double mean_mask = 0.0;
};

}  // namespace detail

// For each stage combination and sweep point: decode the scene suite with
// the baseline and intervention engines, convert transcripts through the
// codebook, score them with the rule judge, and report per-row metric means
// and deltas against the all-stages-off baseline.
inline AblationReport run_ablation(const AblationPlan& plan) {
  toymm::ModelConfig model_config;
  model_config.seed = plan.model_seed;
  Codebook::validate(model_config);
  const auto params = toymm::build_model(model_config);
  const auto suite = detail::build_scene_suite(plan);
  judge::RuleJudge rule;
  const auto selection = MetricSelection::all();

  auto score_scene = [&](const detail::SceneBundle& bundle,
                         const std::map<std::string, std::string>& transcripts) {
    ManifestRecord record;
    record.id = "scene";
    const int diffs = static_cast<int>(bundle.scene.differences.size());
    if (diffs >= 2) {
      record.multi_count = std::min(diffs, 5);
    } else {
      int occupied = 0;
      for (const auto& cell : bundle.scene.cells_a) occupied += cell.occupancy;
      record.difficulty = difficulty_for(occupied, bundle.scene.cell_count());
    }
    record.gt = bundle.scene.ground_truth();
    record.transcripts = transcripts;
    return evaluate_record(record, rule, selection);
  };

  auto run_engine = [&](const detail::SceneBundle& bundle,
                        const std::optional<sage::SageConfig>& config)
      -> detail::EngineOutcome {
    detail::EngineOutcome outcome;
    double share_sum = 0.0;
    int share_count = 0;
    double gates_fired = 0.0;
    double gates_total = 0.0;
    double mask_sum = 0.0;
    int mask_count = 0;
    auto decode = [&](int query_token) {
      const std::vector<int> prompt = {query_token};
      if (!config) {
        const auto result = toymm::greedy_decode(
            params, bundle.layout, bundle.scene, bundle.system_tokens, prompt,
            toymm::InterventionHooks{}, plan.max_len);
        const auto alloc = probes::attention_allocation(result.trace);
        for (int t = 0; t < alloc.steps(); ++t) {
          share_sum += alloc.visual_share(t);
          ++share_count;
        }
        return result.tokens;
      }
      const auto tam = probes::make_tam_callback(params, bundle.scene.grid_h,
                                                 bundle.scene.grid_w);
      const auto result =
          sage::sage_decode(params, bundle.layout, bundle.scene,
                            bundle.system_tokens, prompt, *config,
                            plan.max_len, tam);
      const auto alloc = probes::attention_allocation(result.trace);
      for (int t = 0; t < alloc.steps(); ++t) {
        share_sum += alloc.visual_share(t);
        ++share_count;
      }
      for (const auto& step : result.sage.steps) {
        for (const auto& layer : step.layers) {
          gates_total += 1.0;
          if (layer.gate_fired) gates_fired += 1.0;
        }
        mask_sum += step.mask.count();
        ++mask_count;
      }
      return result.tokens;
    };
    outcome.transcripts = run_query_phases(bundle.scene, decode);
    outcome.visual_share =
        share_count > 0 ? share_sum / static_cast<double>(share_count) : 0.0;
    outcome.gate_rate =
        gates_total > 0 ? gates_fired / gates_total : 0.0;
    outcome.mean_mask =
        mask_count > 0 ? mask_sum / static_cast<double>(mask_count) : 0.0;
    return outcome;
  };

  auto run_row = [&](const std::string& tag, const StageCombo& combo,
                     const sage::SageConfig& base, const std::string& swept,
                     double swept_value) {
    AblationRow row;
    row.tag = tag;
    row.s1 = combo.s1;
    row.s2 = combo.s2;
    row.s3 = combo.s3;
    row.swept = swept;
    row.swept_value = swept_value;
    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    for (const auto& bundle : suite) {
      try {
        sage::SageConfig config = base;
        config.stage1 = combo.s1;
        config.stage2 = combo.s2;
        config.stage3 = combo.s3;
        const auto outcome = run_engine(bundle, config);
        const auto scores = score_scene(bundle, outcome.transcripts);
        for (const auto& name : metrics::metric_names()) {
          if (auto value = metrics::metric_value(scores, name)) {
            sums[name] += *value;
            ++counts[name];
          }
        }
        row.visual_share += outcome.visual_share;
        row.gate_rate += outcome.gate_rate;
        row.mean_mask += outcome.mean_mask;
        ++row.scenes;
      } catch (const Error&) {
        ++row.failures;
      }
    }
    if (row.scenes > 0) {
      row.visual_share /= static_cast<double>(row.scenes);
      row.gate_rate /= static_cast<double>(row.scenes);
      row.mean_mask /= static_cast<double>(row.scenes);
    }
    for (const auto& [name, sum] : sums) {
      row.means[name] = sum / static_cast<double>(counts[name]);
    }
    return row;
  };

  AblationReport report;
  const auto combos =
      plan.combos.empty() ? AblationPlan::default_combos() : plan.combos;
  for (const auto& combo : combos) {
    report.rows.push_back(run_row(combo.tag, combo, plan.base, "-", 0.0));
  }
  const StageCombo full{"full", true, true, true};
  for (const auto& [name, values] : plan.sweeps) {
    for (double value : values) {
      sage::SageConfig config = plan.base;
      if (name == "alpha0") config.alpha0 = value;
      else if (name == "beta") config.beta = value;
      else if (name == "eta") config.eta = value;
      else if (name == "tau") config.tau = value;
      else if (name == "topk") config.top_k = static_cast<int>(value);
      report.rows.push_back(run_row(concat(name, "=", format_fixed(value, 2)),
                                    full, config, name, value));
    }
  }

  // Deltas against the first all-stages-off row, when present.
  const AblationRow* baseline = nullptr;
  for (const auto& row : report.rows) {
    if (!row.s1 && !row.s2 && !row.s3) {
      baseline = &row;
      break;
    }
  }
  if (baseline != nullptr) {
    for (auto& row : report.rows) {
      for (const auto& [name, mean] : row.means) {
        const auto it = baseline->means.find(name);
        if (it != baseline->means.end()) {
          row.deltas[name] = mean - it->second;
        }
      }
      row.visual_share_delta = row.visual_share - baseline->visual_share;
    }
  }
  return report;
}

// -----------------------------------------------------------------------------
// Perturbations
// -----------------------------------------------------------------------------

enum class HintMode { kNone, kExplicit, kImplicit };

inline HintMode parse_hint_mode(const std::string& text) {
  if (text == "none") return HintMode::kNone;
  if (text == "hint-explicit" || text == "explicit") return HintMode::kExplicit;
  if (text == "hint-implicit" || text == "implicit") return HintMode::kImplicit;
  throw Error(concat("unknown hint mode '", text, "'"));
}

// Explicit mode appends the answer-suffix block; implicit mode wraps the
// query in metadata tag tokens. Both are pure and invertible.
inline std::vector<int> perturb_hint(const std::vector<int>& prompt,
                                     HintMode mode) {
  switch (mode) {
    case HintMode::kNone:
      return prompt;
    case HintMode::kExplicit: {
      std::vector<int> out = prompt;
      out.push_back(Codebook::kHintSuffix);
      return out;
    }
    case HintMode::kImplicit: {
      std::vector<int> out;
      out.reserve(prompt.size() + 2);
      out.push_back(Codebook::kTagOpen);
      out.insert(out.end(), prompt.begin(), prompt.end());
      out.push_back(Codebook::kTagClose);
      return out;
    }
  }
  return prompt;
}

inline std::vector<int> invert_hint(const std::vector<int>& prompt,
                                    HintMode mode) {
  switch (mode) {
    case HintMode::kNone:
      return prompt;
    case HintMode::kExplicit: {
      require(!prompt.empty() && prompt.back() == Codebook::kHintSuffix,
              "invert_hint: prompt does not carry the explicit suffix");
      return std::vector<int>(prompt.begin(), prompt.end() - 1);
    }
    case HintMode::kImplicit: {
      require(prompt.size() >= 2 && prompt.front() == Codebook::kTagOpen &&
                  prompt.back() == Codebook::kTagClose,
              "invert_hint: prompt is not tag-wrapped");
      return std::vector<int>(prompt.begin() + 1, prompt.end() - 1);
    }
  }
  return prompt;
}

struct MaskedScene {
  ScenePair scene;
  std::vector<int> sampled_cells;   // the seeded uniform sample
  std::vector<int> occluded_cells;  // sample plus difference closure
};

inline bool allowed_mask_ratio(double ratio) {
  return ratio == 0.0 || ratio == 0.25 || ratio == 0.5 || ratio == 0.75 ||
         ratio == 1.0;
}

// Replaces round(ratio * cells) seeded-uniformly sampled cells with the
// neutral cell value in both grids. A difference touching a masked cell has
// its remaining cells neutralized too (the whole difference region is
// occluded) and its record dropped, keeping the scene invariant intact.
inline MaskedScene perturb_mask(const ScenePair& scene, double ratio,
                                std::uint64_t seed) {
  require(allowed_mask_ratio(ratio),
          "perturb_mask: ratio must be one of {0, 0.25, 0.5, 0.75, 1.0}");
  const int cells = scene.cell_count();
  const int count = static_cast<int>(
      std::llround(ratio * static_cast<double>(cells)));
  Rng rng(mix_seed(seed, 0x4D41534BULL));
  MaskedScene result;
  result.sampled_cells = rng.sample_without_replacement(cells, count);

  std::vector<bool> masked(static_cast<std::size_t>(cells), false);
  for (int cell : result.sampled_cells) {
    masked[static_cast<std::size_t>(cell)] = true;
  }
  result.scene = scene;
  result.scene.differences.clear();
  for (const auto& diff : scene.differences) {
    const bool head_masked = masked[static_cast<std::size_t>(diff.cell)];
    const bool tail_masked =
        diff.cell_to >= 0 && masked[static_cast<std::size_t>(diff.cell_to)];
    if (head_masked || tail_masked) {
      masked[static_cast<std::size_t>(diff.cell)] = true;
      if (diff.cell_to >= 0) {
        masked[static_cast<std::size_t>(diff.cell_to)] = true;
      }
    } else {
      result.scene.differences.push_back(diff);
    }
  }
  for (int c = 0; c < cells; ++c) {
    if (masked[static_cast<std::size_t>(c)]) {
      result.scene.cells_a[static_cast<std::size_t>(c)] = Cell{};
      result.scene.cells_b[static_cast<std::size_t>(c)] = Cell{};
      result.occluded_cells.push_back(c);
    }
  }
  result.scene.validate();
  return result;
}

// -----------------------------------------------------------------------------
// Report emission
// -----------------------------------------------------------------------------

enum class ReportFormat { kLines, kCsv };

inline ReportFormat parse_format(const std::string& text) {
  if (text == "lines") return ReportFormat::kLines;
  if (text == "csv") return ReportFormat::kCsv;
  throw Error(concat("unknown report format '", text, "'"));
}

namespace detail {

inline std::string opt_field(const std::optional<double>& value) {
  return value ? format_fixed(*value) : "-";
}

inline const std::vector<metrics::ErrorCategory>& error_order() {
  static const std::vector<metrics::ErrorCategory> order = {
      metrics::ErrorCategory::kTypeCategoryMismatch,
      metrics::ErrorCategory::kTypeConfusion,
      metrics::ErrorCategory::kAttributeError,
      metrics::ErrorCategory::kQuantityError,
      metrics::ErrorCategory::kFabrication};
  return order;
}

inline std::string record_flags(const metrics::RecordScores& rec) {
  std::string flags;
  auto add = [&flags](const char* flag) {
    if (!flags.empty()) flags += ',';
    flags += flag;
  };
  if (rec.unevaluated) add("unevaluated");
  if (rec.empty_claims) add("empty_claims");
  if (rec.count_mismatch) add("count_mismatch");
  return flags.empty() ? "-" : flags;
}

}  // namespace detail

inline void write_report_lines(const metrics::MetricReport& report,
                               std::ostream& os) {
  for (const auto& rec : report.records) {
    os << "record id=" << rec.id << " split=" << rec.split;
    for (const auto& name : metrics::metric_names()) {
      os << ' ' << name << '=' << detail::opt_field(metric_value(rec, name));
    }
    for (const auto& cat : detail::error_order()) {
      int count = 0;
      if (auto it = rec.error_counts.find(cat); it != rec.error_counts.end()) {
        count = it->second;
      }
      os << " err_" << metrics::to_string(cat) << '=' << count;
    }
    os << " flags=" << detail::record_flags(rec) << '\n';
  }
  for (const auto& agg : report.aggregates) {
    os << "aggregate kind=" << agg.split_kind << " key=" << agg.key
       << " n=" << agg.count << " unevaluated=" << agg.unevaluated;
    for (const auto& name : metrics::metric_names()) {
      const auto it = agg.means.find(name);
      os << ' ' << name << '='
         << (it != agg.means.end() ? format_fixed(it->second) : "-");
    }
    os << '\n';
  }
}

inline void write_report_csv(const metrics::MetricReport& report,
                             std::ostream& os) {
  os << "row,id,split,n,unevaluated,dqr,ds,tf1,cf1,cr,drf";
  for (const auto& cat : detail::error_order()) {
    os << ",err_" << metrics::to_string(cat);
  }
  os << ",flags\n";
  for (const auto& rec : report.records) {
    os << "record," << rec.id << ',' << rec.split << ",1,"
       << (rec.unevaluated ? 1 : 0);
    for (const auto& name : metrics::metric_names()) {
      os << ',' << detail::opt_field(metric_value(rec, name));
    }
    for (const auto& cat : detail::error_order()) {
      int count = 0;
      if (auto it = rec.error_counts.find(cat); it != rec.error_counts.end()) {
        count = it->second;
      }
      os << ',' << count;
    }
    os << ',' << detail::record_flags(rec) << '\n';
  }
  for (const auto& agg : report.aggregates) {
    os << "aggregate," << agg.split_kind << ',' << agg.key << ',' << agg.count
       << ',' << agg.unevaluated;
    for (const auto& name : metrics::metric_names()) {
      const auto it = agg.means.find(name);
      os << ','
         << (it != agg.means.end() ? format_fixed(it->second) : "-");
    }
    for (std::size_t i = 0; i < detail::error_order().size(); ++i) os << ",0";
    os << ",-\n";
  }
}

inline void emit_report(const metrics::MetricReport& report,
                        ReportFormat format, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "emit_report: cannot write ", path);
  if (format == ReportFormat::kLines) {
    write_report_lines(report, out);
  } else {
    write_report_csv(report, out);
  }
  require(static_cast<bool>(out), "emit_report: write to ", path, " failed");
}

inline void write_ablation_lines(const AblationReport& report,
                                 std::ostream& os) {
  for (const auto& row : report.rows) {
    os << "ablation tag=" << row.tag << " stages=" << (row.s1 ? 1 : 0)
       << (row.s2 ? 1 : 0) << (row.s3 ? 1 : 0) << " swept=" << row.swept
       << " swept_value=" << format_fixed(row.swept_value);
    for (const auto& name : metrics::metric_names()) {
      const auto it = row.means.find(name);
      os << ' ' << name << '='
         << (it != row.means.end() ? format_fixed(it->second) : "-");
    }
    for (const auto& name : metrics::metric_names()) {
      const auto it = row.deltas.find(name);
      os << " d_" << name << '='
         << (it != row.deltas.end() ? format_fixed(it->second) : "-");
    }
    os << " visual_share=" << format_fixed(row.visual_share)
       << " d_visual_share=" << format_fixed(row.visual_share_delta)
       << " gate_rate=" << format_fixed(row.gate_rate)
       << " mean_mask=" << format_fixed(row.mean_mask)
       << " scenes=" << row.scenes << " failures=" << row.failures << '\n';
  }
}

inline void write_ablation_csv(const AblationReport& report,
                               std::ostream& os) {
  os << "tag,stage1,stage2,stage3,swept,swept_value";
  for (const auto& name : metrics::metric_names()) os << ',' << name;
  for (const auto& name : metrics::metric_names()) os << ",d_" << name;
  os << ",visual_share,d_visual_share,gate_rate,mean_mask,scenes,failures\n";
  for (const auto& row : report.rows) {
    os << row.tag << ',' << (row.s1 ? 1 : 0) << ',' << (row.s2 ? 1 : 0) << ','
       << (row.s3 ? 1 : 0) << ',' << row.swept << ','
       << format_fixed(row.swept_value);
    for (const auto& name : metrics::metric_names()) {
      const auto it = row.means.find(name);
      os << ','
         << (it != row.means.end() ? format_fixed(it->second) : "-");
    }
    for (const auto& name : metrics::metric_names()) {
      const auto it = row.deltas.find(name);
      os << ','
         << (it != row.deltas.end() ? format_fixed(it->second) : "-");
    }
    os << ',' << format_fixed(row.visual_share) << ','
       << format_fixed(row.visual_share_delta) << ','
       << format_fixed(row.gate_rate) << ',' << format_fixed(row.mean_mask)
       << ',' << row.scenes << ',' << row.failures << '\n';
  }
}

inline void emit_ablation(const AblationReport& report, ReportFormat format,
                          const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "emit_ablation: cannot write ", path);
  if (format == ReportFormat::kLines) {
    write_ablation_lines(report, out);
  } else {
    write_ablation_csv(report, out);
  }
}

// -----------------------------------------------------------------------------
// Trace serialization (for the probe subcommand)
// -----------------------------------------------------------------------------

inline nlohmann::json vector_to_json(const numkit::Vector& v) {
  return nlohmann::json(v.values());
}

inline numkit::Vector vector_from_json(const nlohmann::json& j) {
  return numkit::Vector(j.get<std::vector<double>>());
}

inline nlohmann::json trace_to_json(const toymm::DecodeTrace& trace) {
  nlohmann::json j;
  j["config"] = {{"layers", trace.config.layers},
                 {"hidden_dim", trace.config.hidden_dim},
                 {"ffn_dim", trace.config.ffn_dim},
                 {"heads", trace.config.heads},
                 {"vocab_size", trace.config.vocab_size},
                 {"max_seq_len", trace.config.max_seq_len},
                 {"eos_id", trace.config.eos_id},
                 {"seed", trace.config.seed}};
  j["layout"] = {{"system_begin", trace.layout.system_begin},
                 {"system_end", trace.layout.system_end},
                 {"visual_begin", trace.layout.visual_begin},
                 {"visual_end", trace.layout.visual_end},
                 {"prompt_begin", trace.layout.prompt_begin},
                 {"prompt_end", trace.layout.prompt_end},
                 {"gen_start", trace.layout.gen_start}};
  j["truncated"] = trace.truncated;
  j["final_hidden"] = nlohmann::json::array();
  for (const auto& h : trace.final_hidden) {
    j["final_hidden"].push_back(vector_to_json(h));
  }
  j["steps"] = nlohmann::json::array();
  for (const auto& step : trace.steps) {
    nlohmann::json s;
    s["token"] = step.token;
    s["logits"] = vector_to_json(step.logits);
    s["layers"] = nlohmann::json::array();
    for (const auto& layer : step.layers) {
      nlohmann::json l;
      l["x_in"] = vector_to_json(layer.x_in);
      l["x_mid"] = vector_to_json(layer.x_mid);
      l["x_out"] = vector_to_json(layer.x_out);
      l["delta_attn"] = vector_to_json(layer.delta_attn);
      l["delta_ffn"] = vector_to_json(layer.delta_ffn);
      l["gate_preact"] = vector_to_json(layer.gate_preact);
      l["attn_row"] = layer.attn_row;
      l["attn_visual_raw"] = layer.attn_visual_raw;
      l["ffn_scale"] = layer.ffn_scale;
      s["layers"].push_back(std::move(l));
    }
    j["steps"].push_back(std::move(s));
  }
  return j;
}

inline toymm::DecodeTrace trace_from_json(const nlohmann::json& j) {
  toymm::DecodeTrace trace;
  const auto& c = j.at("config");
  trace.config.layers = c.at("layers").get<int>();
  trace.config.hidden_dim = c.at("hidden_dim").get<int>();
  trace.config.ffn_dim = c.at("ffn_dim").get<int>();
  trace.config.heads = c.at("heads").get<int>();
  trace.config.vocab_size = c.at("vocab_size").get<int>();
  trace.config.max_seq_len = c.at("max_seq_len").get<int>();
  trace.config.eos_id = c.at("eos_id").get<int>();
  trace.config.seed = c.at("seed").get<std::uint64_t>();
  const auto& l = j.at("layout");
  trace.layout.system_begin = l.at("system_begin").get<int>();
  trace.layout.system_end = l.at("system_end").get<int>();
  trace.layout.visual_begin = l.at("visual_begin").get<int>();
  trace.layout.visual_end = l.at("visual_end").get<int>();
  trace.layout.prompt_begin = l.at("prompt_begin").get<int>();
  trace.layout.prompt_end = l.at("prompt_end").get<int>();
  trace.layout.gen_start = l.at("gen_start").get<int>();
  trace.truncated = j.at("truncated").get<bool>();
  for (const auto& h : j.at("final_hidden")) {
    trace.final_hidden.push_back(vector_from_json(h));
  }
  for (const auto& s : j.at("steps")) {
    toymm::StepTrace step;
    step.token = s.at("token").get<int>();
    step.logits = vector_from_json(s.at("logits"));
    for (const auto& layer : s.at("layers")) {
      toymm::LayerTraceEntry entry;
      entry.x_in = vector_from_json(layer.at("x_in"));
      entry.x_mid = vector_from_json(layer.at("x_mid"));
      entry.x_out = vector_from_json(layer.at("x_out"));
      entry.delta_attn = vector_from_json(layer.at("delta_attn"));
      entry.delta_ffn = vector_from_json(layer.at("delta_ffn"));
      entry.gate_preact = vector_from_json(layer.at("gate_preact"));
      entry.attn_row = layer.at("attn_row").get<std::vector<double>>();
      entry.attn_visual_raw =
          layer.at("attn_visual_raw").get<std::vector<double>>();
      entry.ffn_scale = layer.at("ffn_scale").get<double>();
      step.layers.push_back(std::move(entry));
    }
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

}  // namespace faithkit::harness

#pragma once

// A deterministic toy multimodal decoder-only transformer. The input sequence
// is explicitly partitioned into system / visual / prompt / generated
// segments, the decode loop exposes hook points for inference-time
// interventions, and every decode captures a full trace for the probes.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "faithkit/common.hpp"
#include "faithkit/metrics.hpp"
#include "faithkit/numkit.hpp"

namespace faithkit::toymm {

using numkit::Matrix;
using numkit::Vector;

// -----------------------------------------------------------------------------
// Configuration and parameters
// -----------------------------------------------------------------------------

struct ModelConfig {
  int layers = 4;
  int hidden_dim = 32;
  int ffn_dim = 128;
  int heads = 4;
  int vocab_size = 64;
  int max_seq_len = 96;
  int eos_id = 0;
  std::uint64_t seed = 0;

  void validate() const {
    require(layers >= 1 && hidden_dim >= 1 && ffn_dim >= 1 && heads >= 1 &&
                vocab_size >= 1 && max_seq_len >= 1,
            "ModelConfig: all counts must be >= 1");
    require(hidden_dim % heads == 0, "ModelConfig: hidden_dim ", hidden_dim,
            " not divisible by heads ", heads);
    require(ffn_dim >= hidden_dim, "ModelConfig: ffn_dim ", ffn_dim,
            " must be >= hidden_dim ", hidden_dim);
    require(eos_id >= 0 && eos_id < vocab_size,
            "ModelConfig: eos_id out of vocabulary");
  }

  int head_dim() const { return hidden_dim / heads; }
};

struct LayerParams {
  Matrix wq, wk, wv, wo;            // hidden_dim x hidden_dim
  Vector ln1_gain, ln1_bias;        // attention-sublayer norm
  Vector ln2_gain, ln2_bias;        // ffn-sublayer norm
  Matrix w_gate, w_up;              // ffn_dim x hidden_dim
  Matrix w_down;                    // hidden_dim x ffn_dim
};

struct ModelParams {
  ModelConfig config;
  std::vector<LayerParams> layers;
  Matrix embedding;   // vocab_size x hidden_dim
  Matrix positional;  // max_seq_len x hidden_dim
  Matrix w_head;      // hidden_dim x vocab_size

  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto fold = [&h](const std::vector<double>& values) {
      h = fnv1a64(values.data(), values.size() * sizeof(double), h);
    };
    fold(embedding.values());
    fold(positional.values());
    fold(w_head.values());
    for (const auto& layer : layers) {
      fold(layer.wq.values());
      fold(layer.wk.values());
      fold(layer.wv.values());
      fold(layer.wo.values());
      fold(layer.ln1_gain.values());
      fold(layer.ln1_bias.values());
      fold(layer.ln2_gain.values());
      fold(layer.ln2_bias.values());
      fold(layer.w_gate.values());
      fold(layer.w_up.values());
      fold(layer.w_down.values());
    }
    return h;
  }
};

namespace detail {

inline constexpr std::uint64_t kTagLayer = 0x4C415945;
inline constexpr std::uint64_t kTagEmbedding = 0x454D4244;
inline constexpr std::uint64_t kTagPositional = 0x504F5345;
inline constexpr std::uint64_t kTagHead = 0x48454144;
inline constexpr std::uint64_t kTagCell = 0x43454C4C;

inline Matrix random_matrix(std::uint64_t seed, std::size_t rows,
                            std::size_t cols, double scale) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (double& v : m.values()) v = rng.normal() * scale;
  return m;
}

}  // namespace detail

// Seeded parameter initialization; identical seed and config produce
// bit-identical parameters.
inline ModelParams build_model(const ModelConfig& config) {
  config.validate();
  ModelParams params;
  params.config = config;
  const auto d = static_cast<std::size_t>(config.hidden_dim);
  const auto d_ffn = static_cast<std::size_t>(config.ffn_dim);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double ffn_scale = 1.0 / std::sqrt(static_cast<double>(d_ffn));

  params.embedding = detail::random_matrix(
      mix_seed(config.seed, detail::kTagEmbedding),
      static_cast<std::size_t>(config.vocab_size), d, 1.0);
  params.positional = detail::random_matrix(
      mix_seed(config.seed, detail::kTagPositional),
      static_cast<std::size_t>(config.max_seq_len), d, 0.3);
  params.w_head = detail::random_matrix(
      mix_seed(config.seed, detail::kTagHead), d,
      static_cast<std::size_t>(config.vocab_size), proj_scale);

  for (int l = 0; l < config.layers; ++l) {
    LayerParams layer;
    const auto lt = static_cast<std::uint64_t>(l);
    layer.wq = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 0ULL), d, d, proj_scale);
    layer.wk = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 1ULL), d, d, proj_scale);
    layer.wv = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 2ULL), d, d, proj_scale);
    layer.wo = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 3ULL), d, d, proj_scale);
    layer.w_gate = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 4ULL), d_ffn, d,
        proj_scale);
    layer.w_up = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 5ULL), d_ffn, d,
        proj_scale);
    layer.w_down = detail::random_matrix(
        mix_seed(config.seed, detail::kTagLayer, lt, 6ULL), d, d_ffn,
        ffn_scale);
    layer.ln1_gain = Vector(d, 1.0);
    layer.ln1_bias = Vector(d, 0.0);
    layer.ln2_gain = Vector(d, 1.0);
    layer.ln2_bias = Vector(d, 0.0);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

// -----------------------------------------------------------------------------
// Scenes
// -----------------------------------------------------------------------------

// A grid cell carries category/color ids plus an occupancy bit; an empty cell
// is the neutral value {0, 0, 0}.
struct Cell {
  int category = 0;
  int color = 0;
  int occupancy = 0;

  friend bool operator==(const Cell& a, const Cell& b) {
    return a.category == b.category && a.color == b.color &&
           a.occupancy == b.occupancy;
  }
};

struct SceneDiff {
  metrics::DifferenceRecord record;
  int cell = -1;
  int cell_to = -1;  // second cell for position edits
};

struct ScenePair {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<Cell> cells_a;
  std::vector<Cell> cells_b;
  std::vector<SceneDiff> differences;

  int cell_count() const { return grid_h * grid_w; }

  metrics::GroundTruth ground_truth() const {
    metrics::GroundTruth gt;
    for (const auto& diff : differences) gt.records.push_back(diff.record);
    return gt;
  }

  // The grids must differ exactly at the cells implied by the difference
  // records: the edited cell, plus the destination cell for position edits.
  void validate() const {
    require(grid_h >= 1 && grid_w >= 1, "ScenePair: empty grid");
    const auto cells = static_cast<std::size_t>(cell_count());
    require(cells_a.size() == cells && cells_b.size() == cells,
            "ScenePair: grid size mismatch");
    std::vector<bool> implied(cells, false);
    for (const auto& diff : differences) {
      require(diff.cell >= 0 && diff.cell < cell_count(),
              "ScenePair: difference cell out of range");
      implied[static_cast<std::size_t>(diff.cell)] = true;
      if (diff.record.kind == metrics::DiffKind::kPosition) {
        require(diff.cell_to >= 0 && diff.cell_to < cell_count(),
                "ScenePair: position edit missing destination cell");
        implied[static_cast<std::size_t>(diff.cell_to)] = true;
      }
    }
    for (std::size_t i = 0; i < cells; ++i) {
      const bool differs = !(cells_a[i] == cells_b[i]);
      require(differs == implied[i], "ScenePair: cell ", i,
              differs ? " differs without a difference record"
                      : " implied by a record but identical");
    }
  }
};

inline nlohmann::json cell_to_json(const Cell& cell) {
  return nlohmann::json::array({cell.category, cell.color, cell.occupancy});
}

inline Cell cell_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 3, "scene cell must be a 3-array");
  return Cell{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline nlohmann::json scene_to_json(const ScenePair& scene) {
  nlohmann::json j;
  j["grid_h"] = scene.grid_h;
  j["grid_w"] = scene.grid_w;
  j["cells_a"] = nlohmann::json::array();
  j["cells_b"] = nlohmann::json::array();
  for (const auto& cell : scene.cells_a) j["cells_a"].push_back(cell_to_json(cell));
  for (const auto& cell : scene.cells_b) j["cells_b"].push_back(cell_to_json(cell));
  j["differences"] = nlohmann::json::array();
  for (const auto& diff : scene.differences) {
    nlohmann::json d;
    d["kind"] = metrics::to_string(diff.record.kind);
    d["category"] = diff.record.category;
    d["before"] = diff.record.before;
    d["after"] = diff.record.after;
    d["cell"] = diff.cell;
    if (diff.cell_to >= 0) d["cell_to"] = diff.cell_to;
    j["differences"].push_back(std::move(d));
  }
  return j;
}

inline ScenePair scene_from_json(const nlohmann::json& j) {
  ScenePair scene;
  scene.grid_h = j.at("grid_h").get<int>();
  scene.grid_w = j.at("grid_w").get<int>();
  for (const auto& cell : j.at("cells_a")) {
    scene.cells_a.push_back(cell_from_json(cell));
  }
  for (const auto& cell : j.at("cells_b")) {
    scene.cells_b.push_back(cell_from_json(cell));
  }
  for (const auto& d : j.at("differences")) {
    SceneDiff diff;
    const auto kind = metrics::parse_kind(d.at("kind").get<std::string>());
    require(kind.has_value(), "scene difference has unknown kind");
    diff.record.kind = *kind;
    diff.record.category = d.at("category").get<std::string>();
    diff.record.before = d.value("before", std::string());
    diff.record.after = d.value("after", std::string());
    diff.cell = d.at("cell").get<int>();
    diff.cell_to = d.value("cell_to", -1);
    scene.differences.push_back(std::move(diff));
  }
  scene.validate();
  return scene;
}

// -----------------------------------------------------------------------------
// Sequence layout
// -----------------------------------------------------------------------------

enum class Segment { kSystem, kVisual, kPrompt, kGenerated };

// Contiguous, ordered index ranges (half-open) for the four segments.
struct SequenceLayout {
  int system_begin = 0;
  int system_end = 0;
  int visual_begin = 0;
  int visual_end = 0;
  int prompt_begin = 0;
  int prompt_end = 0;
  int gen_start = 0;

  int system_len() const { return system_end - system_begin; }
  int visual_len() const { return visual_end - visual_begin; }
  int prompt_len() const { return prompt_end - prompt_begin; }

  Segment segment_of(int pos) const {
    if (pos < system_end) return Segment::kSystem;
    if (pos < visual_end) return Segment::kVisual;
    if (pos < prompt_end) return Segment::kPrompt;
    return Segment::kGenerated;
  }

  void validate() const {
    require(system_begin == 0 && system_end > system_begin &&
                visual_begin == system_end && visual_end > visual_begin &&
                prompt_begin == visual_end && prompt_end > prompt_begin &&
                gen_start == prompt_end,
            "SequenceLayout: spans must be contiguous, ordered, and nonempty");
  }
};

inline SequenceLayout make_layout(int system_len, int visual_len,
                                  int prompt_len) {
  SequenceLayout layout;
  layout.system_begin = 0;
  layout.system_end = system_len;
  layout.visual_begin = system_len;
  layout.visual_end = system_len + visual_len;
  layout.prompt_begin = layout.visual_end;
  layout.prompt_end = layout.visual_end + prompt_len;
  layout.gen_start = layout.prompt_end;
  layout.validate();
  return layout;
}

// -----------------------------------------------------------------------------
// Scene encoding
// -----------------------------------------------------------------------------

enum class Side { kA, kB };

// The embedding of a cell is a pure function of that cell's attributes, so
// two grids differing at one cell produce embedding sequences differing at
// exactly that cell.
inline Vector encode_cell(const ModelParams& params, const Cell& cell) {
  Rng rng(mix_seed(params.config.seed, detail::kTagCell,
                   static_cast<std::uint64_t>(cell.category),
                   static_cast<std::uint64_t>(cell.color),
                   static_cast<std::uint64_t>(cell.occupancy)));
  Vector out(static_cast<std::size_t>(params.config.hidden_dim));
  for (double& v : out) v = rng.normal();
  return out;
}

inline std::vector<Vector> encode_scene(const ModelParams& params,
                                        const ScenePair& scene, Side side) {
  const auto& cells = side == Side::kA ? scene.cells_a : scene.cells_b;
  std::vector<Vector> out;
  out.reserve(cells.size());
  for (const auto& cell : cells) out.push_back(encode_cell(params, cell));
  return out;
}

// Per-cell view of the scene pair fed to the visual span: an average of the
// two sides plus their difference, so unedited cells look identical across
// scenes and edited cells carry the change signal.
inline std::vector<Vector> scene_pair_view(const ModelParams& params,
                                           const ScenePair& scene) {
  const auto ea = encode_scene(params, scene, Side::kA);
  const auto eb = encode_scene(params, scene, Side::kB);
  std::vector<Vector> out;
  out.reserve(ea.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    Vector v = 0.5 * (ea[i] + eb[i]);
    v += ea[i] - eb[i];
    out.push_back(std::move(v));
  }
  return out;
}

inline Vector mean_embedding(const std::vector<Vector>& embeddings) {
  require(!embeddings.empty(), "mean_embedding: empty input");
  Vector acc(embeddings.front().size());
  for (const auto& e : embeddings) acc += e;
  acc *= 1.0 / static_cast<double>(embeddings.size());
  return acc;
}

// Assembles the prefill embedding sequence (system + visual + prompt) for a
// layout. Visual embeddings may be overridden (used by occlusion paths).
inline std::vector<Vector> build_input_embeddings(
    const ModelParams& params, const SequenceLayout& layout,
    const std::vector<int>& system_tokens, const std::vector<Vector>& visual,
    const std::vector<int>& prompt_tokens) {
  require(static_cast<int>(system_tokens.size()) == layout.system_len(),
          "build_input_embeddings: system token count does not match layout");
  require(static_cast<int>(visual.size()) == layout.visual_len(),
          "build_input_embeddings: visual span does not match layout");
  require(static_cast<int>(prompt_tokens.size()) == layout.prompt_len(),
          "build_input_embeddings: prompt token count does not match layout");
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(layout.gen_start));
  auto token_embedding = [&](int token) {
    require(token >= 0 && token < params.config.vocab_size,
            "token id out of vocabulary: ", token);
    Vector row(static_cast<std::size_t>(params.config.hidden_dim));
    for (int c = 0; c < params.config.hidden_dim; ++c) {
      row[static_cast<std::size_t>(c)] =
          params.embedding.at(static_cast<std::size_t>(token),
                              static_cast<std::size_t>(c));
    }
    return row;
  };
  for (int token : system_tokens) out.push_back(token_embedding(token));
  for (const auto& v : visual) out.push_back(v);
  for (int token : prompt_tokens) out.push_back(token_embedding(token));
  return out;
}

// -----------------------------------------------------------------------------
// Decode machinery
// -----------------------------------------------------------------------------

struct LayerKV {
  std::vector<Vector> keys;
  std::vector<Vector> values;
};

// Hook bundle applied inside the decode loop. `step` is the generation step
// index, or -1 while prefilling the prompt.
struct InterventionHooks {
  std::function<void(int layer, int step,
                     std::vector<std::vector<double>>& head_rows,
                     const SequenceLayout& layout)>
      attn;
  std::function<void(int layer, int step, std::vector<Vector>& head_scores,
                     const SequenceLayout& layout)>
      attn_scores;  // pre-softmax variant
  std::function<double(int layer, int step, const Vector& delta_attn,
                       const Vector& delta_ffn)>
      ffn_scale;
  std::function<void(int step, Vector& logits)> logits;
};

// Per-block overrides as seen by a single residual block: a post-softmax
// attention callback and an FFN-scale callback (defaults: identity, 1.0).
struct BlockOverrides {
  std::function<void(std::vector<std::vector<double>>& head_rows)> attn;
  std::function<void(std::vector<Vector>& head_scores)> attn_scores;
  std::function<double(const Vector& delta_attn, const Vector& delta_ffn)>
      ffn_scale;
};

struct LayerTraceEntry {
  Vector x_in, x_mid, x_out;      // x_l, x_{l+1/2}, x_{l+1}
  Vector delta_attn, delta_ffn;   // raw sublayer updates
  Vector gate_preact;             // W_gate * LN(x_{l+1/2})
  std::vector<double> attn_row;   // head-averaged post-override row
  std::vector<double> attn_visual_raw;  // head-averaged raw row, visual span
  double ffn_scale = 1.0;
};

// Gated FFN: W_down(silu(W_gate h) * (W_up h)); the gate preactivation is
// returned alongside for the neuron probe.
inline std::pair<Vector, Vector> gated_ffn(const LayerParams& layer,
                                           const Vector& h) {
  require(h.size() == layer.w_gate.cols(), "gated_ffn: expected length ",
          layer.w_gate.cols(), ", got ", h.size());
  Vector gate = layer.w_gate.matvec(h);
  const Vector up = layer.w_up.matvec(h);
  Vector mixed(gate.size());
  for (std::size_t i = 0; i < gate.size(); ++i) {
    mixed[i] = numkit::silu(gate[i]) * up[i];
  }
  return {layer.w_down.matvec(mixed), std::move(gate)};
}

// One pre-norm residual block at a single position. Keys/values for the
// position are appended to `kv` before attention, so the causal support is
// [0, position]. Returns all intermediates for the trace.
inline LayerTraceEntry residual_block(const ModelConfig& config,
                                      const LayerParams& layer,
                                      const Vector& x_in, LayerKV& kv,
                                      const SequenceLayout& layout,
                                      int position,
                                      const BlockOverrides& overrides) {
  const int heads = config.heads;
  const int head_dim = config.head_dim();

  const Vector normed = numkit::layer_norm(x_in, layer.ln1_gain, layer.ln1_bias);
  const Vector q = layer.wq.matvec(normed);
  kv.keys.push_back(layer.wk.matvec(normed));
  kv.values.push_back(layer.wv.matvec(normed));
  require(static_cast<int>(kv.keys.size()) == position + 1,
          "residual_block: KV cache out of sync at position ", position);

  const int prefix = position + 1;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Vector> head_scores(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Vector scores(static_cast<std::size_t>(prefix));
    for (int p = 0; p < prefix; ++p) {
      double acc = 0.0;
      const auto base = static_cast<std::size_t>(h * head_dim);
      for (int d = 0; d < head_dim; ++d) {
        acc += q[base + static_cast<std::size_t>(d)] *
               kv.keys[static_cast<std::size_t>(p)]
                      [base + static_cast<std::size_t>(d)];
      }
      scores[static_cast<std::size_t>(p)] = acc * inv_sqrt;
    }
    head_scores[static_cast<std::size_t>(h)] = std::move(scores);
  }
  if (overrides.attn_scores) overrides.attn_scores(head_scores);
  std::vector<std::vector<double>> head_rows(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    head_rows[static_cast<std::size_t>(h)] =
        numkit::softmax(head_scores[static_cast<std::size_t>(h)]).values();
  }

  // Raw (pre-override) head-averaged slice over the visual span, kept for
  // saliency extraction.
  std::vector<double> visual_raw;
  if (layout.visual_end <= prefix) {
    visual_raw.assign(static_cast<std::size_t>(layout.visual_len()), 0.0);
    for (const auto& row : head_rows) {
      for (int v = 0; v < layout.visual_len(); ++v) {
        visual_raw[static_cast<std::size_t>(v)] +=
            row[static_cast<std::size_t>(layout.visual_begin + v)];
      }
    }
    for (double& v : visual_raw) v /= static_cast<double>(heads);
  }

  if (overrides.attn) overrides.attn(head_rows);

  Vector mixed(static_cast<std::size_t>(config.hidden_dim));
  for (int h = 0; h < heads; ++h) {
    const auto& row = head_rows[static_cast<std::size_t>(h)];
    const auto base = static_cast<std::size_t>(h * head_dim);
    for (int p = 0; p < prefix; ++p) {
      const double w = row[static_cast<std::size_t>(p)];
      for (int d = 0; d < head_dim; ++d) {
        mixed[base + static_cast<std::size_t>(d)] +=
            w * kv.values[static_cast<std::size_t>(p)]
                         [base + static_cast<std::size_t>(d)];
      }
    }
  }
  const Vector delta_attn = layer.wo.matvec(mixed);
  const Vector x_mid = x_in + delta_attn;

  const Vector normed2 =
      numkit::layer_norm(x_mid, layer.ln2_gain, layer.ln2_bias);
  auto [delta_ffn, gate_preact] = gated_ffn(layer, normed2);
  double scale = 1.0;
  if (overrides.ffn_scale) scale = overrides.ffn_scale(delta_attn, delta_ffn);
  const Vector x_out = x_mid + scale * delta_ffn;
  require(x_out.all_finite(), "residual_block: non-finite state at position ",
          position);

  LayerTraceEntry entry;
  entry.x_in = x_in;
  entry.x_mid = x_mid;
  entry.x_out = x_out;
  entry.delta_attn = delta_attn;
  entry.delta_ffn = delta_ffn;
  entry.gate_preact = std::move(gate_preact);
  entry.attn_row.assign(static_cast<std::size_t>(prefix), 0.0);
  for (const auto& row : head_rows) {
    for (int p = 0; p < prefix; ++p) {
      entry.attn_row[static_cast<std::size_t>(p)] +=
          row[static_cast<std::size_t>(p)];
    }
  }
  for (double& v : entry.attn_row) v /= static_cast<double>(heads);
  entry.attn_visual_raw = std::move(visual_raw);
  entry.ffn_scale = scale;
  return entry;
}

struct StepTrace {
  int token = -1;
  std::vector<LayerTraceEntry> layers;
  Vector logits;  // the logits that selected `token`
};

struct DecodeTrace {
  ModelConfig config;
  SequenceLayout layout;
  std::vector<StepTrace> steps;
  std::vector<Vector> final_hidden;  // final-layer state per processed position
  bool truncated = false;

  std::vector<int> tokens() const {
    std::vector<int> out;
    out.reserve(steps.size());
    for (const auto& step : steps) out.push_back(step.token);
    return out;
  }
};

struct DecodeResult {
  std::vector<int> tokens;
  DecodeTrace trace;
};

// Greedy argmax with deterministic lowest-id tie-break.
inline int argmax_lowest(const Vector& logits) {
  require(!logits.empty(), "argmax_lowest: empty logits");
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<std::size_t>(best)]) {
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Per-step logit rewrite applied after the forward pass (used by the
// contrastive-decoding stage). The trace argument exposes the step's layer
// intermediates and all final-layer hidden states computed so far.
using LogitFinalizer =
    std::function<Vector(int step, const Vector& logits,
                         const DecodeTrace& trace)>;

// The shared autoregressive loop. Positions [0, gen_start-1) are prefilled
// with hooks seeing step = -1; generation step t then processes position
// gen_start-1+t, whose logits select token t. When `forced_tokens` is
// nonempty its prefix overrides argmax selection (EOS does not stop a forced
// step), which is how a path is replayed against edited inputs.
inline DecodeResult run_decode(const ModelParams& params,
                               const SequenceLayout& layout,
                               const std::vector<Vector>& input_embeddings,
                               const InterventionHooks& hooks, int max_len,
                               const LogitFinalizer& finalize = {},
                               const std::vector<int>& forced_tokens = {}) {
  layout.validate();
  require(static_cast<int>(input_embeddings.size()) == layout.gen_start,
          "run_decode: expected ", layout.gen_start, " prefill embeddings, got ",
          input_embeddings.size());
  require(max_len >= 1, "run_decode: max_len must be >= 1");
  require(layout.gen_start + max_len <= params.config.max_seq_len,
          "run_decode: sequence would exceed max_seq_len");

  const auto d = static_cast<std::size_t>(params.config.hidden_dim);
  std::vector<LayerKV> kv(static_cast<std::size_t>(params.config.layers));
  DecodeResult result;
  result.trace.config = params.config;
  result.trace.layout = layout;

  auto embed_position = [&](const Vector& base, int position) {
    Vector x = base;
    for (std::size_t c = 0; c < d; ++c) {
      x[c] += params.positional.at(static_cast<std::size_t>(position), c);
    }
    return x;
  };

  auto process_position = [&](const Vector& embedded, int position, int step,
                              std::vector<LayerTraceEntry>* capture) {
    Vector x = embedded;
    for (int l = 0; l < params.config.layers; ++l) {
      BlockOverrides overrides;
      if (hooks.attn) {
        overrides.attn = [&, l](std::vector<std::vector<double>>& rows) {
          hooks.attn(l, step, rows, layout);
        };
      }
      if (hooks.attn_scores) {
        overrides.attn_scores = [&, l](std::vector<Vector>& scores) {
          hooks.attn_scores(l, step, scores, layout);
        };
      }
      if (hooks.ffn_scale) {
        overrides.ffn_scale = [&, l](const Vector& da, const Vector& df) {
          return hooks.ffn_scale(l, step, da, df);
        };
      }
      LayerTraceEntry entry = residual_block(
          params.config, params.layers[static_cast<std::size_t>(l)], x,
          kv[static_cast<std::size_t>(l)], layout, position, overrides);
      x = entry.x_out;
      if (capture) capture->push_back(std::move(entry));
    }
    result.trace.final_hidden.push_back(x);
    return x;
  };

  // Prefill everything before the last prompt position; that position itself
  // is processed as generation step 0.
  for (int p = 0; p + 1 < layout.gen_start; ++p) {
    process_position(
        embed_position(input_embeddings[static_cast<std::size_t>(p)], p), p,
        -1, nullptr);
  }

  int step = 0;
  while (true) {
    const int position = layout.gen_start - 1 + step;
    Vector base;
    if (step == 0) {
      base = input_embeddings[static_cast<std::size_t>(layout.gen_start - 1)];
    } else {
      const int prev = result.tokens[static_cast<std::size_t>(step - 1)];
      base = Vector(d);
      for (std::size_t c = 0; c < d; ++c) {
        base[c] = params.embedding.at(static_cast<std::size_t>(prev), c);
      }
    }
    StepTrace step_trace;
    const Vector hidden =
        process_position(embed_position(base, position), position, step,
                         &step_trace.layers);
    Vector logits = params.w_head.transpose_matvec(hidden);
    if (hooks.logits) hooks.logits(step, logits);
    step_trace.logits = logits;
    result.trace.steps.push_back(std::move(step_trace));
    if (finalize) {
      logits = finalize(step, logits, result.trace);
      result.trace.steps.back().logits = logits;
    }

    const bool forced = step < static_cast<int>(forced_tokens.size());
    const int token =
        forced ? forced_tokens[static_cast<std::size_t>(step)]
               : argmax_lowest(logits);
    require(token >= 0 && token < params.config.vocab_size,
            "run_decode: selected token out of vocabulary");
    result.trace.steps.back().token = token;
    result.tokens.push_back(token);
    ++step;

    if (!forced && token == params.config.eos_id) break;
    if (step >= max_len) {
      if (token != params.config.eos_id) result.trace.truncated = true;
      break;
    }
  }
  return result;
}

// Baseline greedy decoding over a scene: prefill system + pair-view visual +
// prompt embeddings, then argmax decode with the supplied hook bundle.
inline DecodeResult greedy_decode(const ModelParams& params,
                                  const SequenceLayout& layout,
                                  const ScenePair& scene,
                                  const std::vector<int>& system_tokens,
                                  const std::vector<int>& prompt_tokens,
                                  const InterventionHooks& hooks, int max_len) {
  scene.validate();
  require(scene.cell_count() == layout.visual_len(),
          "greedy_decode: scene cells (", scene.cell_count(),
          ") do not match the visual span (", layout.visual_len(), ")");
  const auto embeddings = build_input_embeddings(
      params, layout, system_tokens, scene_pair_view(params, scene),
      prompt_tokens);
  return run_decode(params, layout, embeddings, hooks, max_len);
}

}  // namespace faithkit::toymm

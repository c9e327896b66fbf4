#pragma once

// Three-stage inference-time intervention over the toy model's decode loop:
//   Stage I   dynamic visual attention routing (static below the shallow/deep
//             boundary, decay-adaptive above it),
//   Stage II  KL-gated FFN rectification,
//   Stage III visual-anchored contrastive decoding against a saliency-masked
//             auxiliary pass.
// Each stage is independently enableable, and a fully disabled bundle
// reproduces the baseline decode bit for bit.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <vector>

#include "faithkit/common.hpp"
#include "faithkit/numkit.hpp"
#include "faithkit/toymm.hpp"

namespace faithkit::sage {

using numkit::Vector;
using toymm::ModelParams;
using toymm::ScenePair;
using toymm::SequenceLayout;

struct SageConfig {
  double alpha0 = 0.1;        // base enhancement
  int shallow_boundary = 2;   // first deep layer index (l_s)
  double decay_gain = 0.2;    // slope of the decay-to-enhancement map
  double alpha_max = 0.5;     // adaptive enhancement cap
  std::optional<double> tau;  // KL gate threshold; calibrated when unset
  double beta = 0.9;          // FFN suppression coefficient
  double eta = 0.5;           // contrastive strength
  int top_k = 0;              // saliency count; 0 derives ceil(0.25 * cells)
  bool stage1 = true;
  bool stage2 = true;
  bool stage3 = true;
  bool presoftmax_modulation = false;  // Stage I acts on scores when set
  bool aux_shares_stages = true;       // aux path runs Stages I-II too

  void validate(int model_layers) const {
    require(alpha0 >= 0.0, "SageConfig: alpha0 must be >= 0");
    require(beta >= 0.0 && beta <= 1.0, "SageConfig: beta must be in [0,1]");
    require(eta >= 0.0, "SageConfig: eta must be >= 0");
    require(shallow_boundary >= 0 && shallow_boundary <= model_layers,
            "SageConfig: shallow boundary must be in [0, layers]");
    require(decay_gain >= 0.0, "SageConfig: decay gain must be >= 0");
    require(alpha_max >= 0.0, "SageConfig: alpha cap must be >= 0");
    require(top_k >= 0, "SageConfig: top_k must be >= 0 (0 = derived)");
  }

  int effective_top_k(int cell_count) const {
    if (top_k > 0) return std::min(top_k, cell_count);
    return static_cast<int>(
        std::ceil(0.25 * static_cast<double>(cell_count)));
  }
};

// Per-layer running mean of visual attention from the previous step; a
// negative entry means no previous observation.
struct DecayState {
  explicit DecayState(int layers)
      : prev_mu(static_cast<std::size_t>(layers), -1.0) {}
  std::vector<double> prev_mu;
};

struct SaliencyMask {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> omega_attn;  // top-k cells of the attention map
  std::vector<int> omega_tam;   // top-k cells of the activation map
  std::vector<std::uint8_t> mask;  // indicator of their intersection
  bool k_clamped = false;

  int count() const {
    int c = 0;
    for (auto m : mask) c += m;
    return c;
  }
};

struct LogitTriple {
  Vector main, aux, fused;
};

// -----------------------------------------------------------------------------
// Stage primitives
// -----------------------------------------------------------------------------

// Eq-style segment modulation of a post-softmax attention row: visual weight
// (1 + alpha), system weight (1 - alpha), prompt and generated weight 1,
// then renormalization so the row stays a distribution. alpha = 0 is an
// exact identity. A row whose modulated mass vanishes (alpha = 1 on a pure
// system row) falls back to the unmodulated row.
struct ModulationOutcome {
  bool fell_back = false;
};

inline ModulationOutcome modulate_attention_row(std::vector<double>& row,
                                                const SequenceLayout& layout,
                                                double alpha) {
  ModulationOutcome outcome;
  if (alpha == 0.0) return outcome;
  const std::vector<double> original = row;
  double sum = 0.0;
  for (std::size_t p = 0; p < row.size(); ++p) {
    switch (layout.segment_of(static_cast<int>(p))) {
      case toymm::Segment::kVisual:
        row[p] *= 1.0 + alpha;
        break;
      case toymm::Segment::kSystem:
        row[p] *= 1.0 - alpha;
        break;
      case toymm::Segment::kPrompt:
      case toymm::Segment::kGenerated:
        break;
    }
    sum += row[p];
  }
  if (sum <= 1e-300) {
    row = original;
    outcome.fell_back = true;
    return outcome;
  }
  for (double& v : row) v /= sum;
  return outcome;
}

// Pre-softmax form of the same modulation: adds log coefficients to the
// scores, so the subsequent softmax applies them multiplicatively.
inline void modulate_attention_scores(Vector& scores,
                                      const SequenceLayout& layout,
                                      double alpha) {
  if (alpha == 0.0) return;
  require(alpha < 1.0,
          "modulate_attention_scores: alpha must be < 1 in log space");
  const double log_vis = std::log(1.0 + alpha);
  const double log_sys = std::log(1.0 - alpha);
  for (std::size_t p = 0; p < scores.size(); ++p) {
    switch (layout.segment_of(static_cast<int>(p))) {
      case toymm::Segment::kVisual:
        scores[p] += log_vis;
        break;
      case toymm::Segment::kSystem:
        scores[p] += log_sys;
        break;
      case toymm::Segment::kPrompt:
      case toymm::Segment::kGenerated:
        break;
    }
  }
}

// Decay-adaptive enhancement: alpha0 + gain * max(0, -delta), clamped to
// [0, alpha_max], with delta guarded to 0 when no previous mean exists.
inline double adaptive_alpha(double mu_t, double mu_prev,
                             const SageConfig& config,
                             double* delta_out = nullptr) {
  double delta = 0.0;
  if (mu_prev > 0.0) delta = (mu_t - mu_prev) / mu_prev;
  if (delta_out) *delta_out = delta;
  const double alpha =
      config.alpha0 + config.decay_gain * std::max(0.0, -delta);
  return std::clamp(alpha, 0.0, config.alpha_max);
}

struct RectifyResult {
  bool gate_fired = false;
  double d_kl = 0.0;
  double scale = 1.0;
};

// KL divergence between the softmax-normalized sublayer updates; the gate
// fires when it exceeds tau and the FFN update is scaled by beta.
inline RectifyResult rectify_ffn(const Vector& delta_attn,
                                 const Vector& delta_ffn, double tau,
                                 double beta) {
  require(delta_attn.size() == delta_ffn.size(),
          "rectify_ffn: update length mismatch");
  require(delta_attn.all_finite() && delta_ffn.all_finite(),
          "rectify_ffn: non-finite updates");
  RectifyResult result;
  result.d_kl = numkit::kl_divergence(numkit::softmax(delta_attn),
                                      numkit::softmax(delta_ffn));
  result.gate_fired = result.d_kl > tau;
  result.scale = result.gate_fired ? beta : 1.0;
  return result;
}

// Top-k cells of each saliency map (ties broken in row-major order) and the
// indicator of their intersection. k larger than the grid is clamped.
inline SaliencyMask build_discrepancy_mask(const std::vector<double>& attn_map,
                                           const std::vector<double>& tam_map,
                                           int grid_h, int grid_w, int k) {
  const int cells = grid_h * grid_w;
  require(static_cast<int>(attn_map.size()) == cells &&
              static_cast<int>(tam_map.size()) == cells,
          "build_discrepancy_mask: map size does not match grid");
  require(k >= 1, "build_discrepancy_mask: k must be >= 1");
  SaliencyMask mask;
  mask.grid_h = grid_h;
  mask.grid_w = grid_w;
  if (k > cells) {
    mask.k_clamped = true;
    k = cells;
  }
  auto top_k_cells = [&](const std::vector<double>& map) {
    std::vector<int> order(static_cast<std::size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return map[static_cast<std::size_t>(a)] >
             map[static_cast<std::size_t>(b)];
    });
    std::vector<int> cells_out(order.begin(), order.begin() + k);
    std::sort(cells_out.begin(), cells_out.end());
    return cells_out;
  };
  mask.omega_attn = top_k_cells(attn_map);
  mask.omega_tam = top_k_cells(tam_map);
  mask.mask.assign(static_cast<std::size_t>(cells), 0);
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < mask.omega_attn.size() && j < mask.omega_tam.size()) {
    if (mask.omega_attn[i] == mask.omega_tam[j]) {
      mask.mask[static_cast<std::size_t>(mask.omega_attn[i])] = 1;
      ++i;
      ++j;
    } else if (mask.omega_attn[i] < mask.omega_tam[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return mask;
}

// L_final = L_main + eta * relu(L_main - L_aux), elementwise.
inline Vector contrastive_logits(const Vector& l_main, const Vector& l_aux,
                                 double eta) {
  require(l_main.size() == l_aux.size(),
          "contrastive_logits: length mismatch");
  Vector out(l_main.size());
  for (std::size_t i = 0; i < l_main.size(); ++i) {
    out[i] = l_main[i] + eta * std::max(0.0, l_main[i] - l_aux[i]);
  }
  return out;
}

// -----------------------------------------------------------------------------
// Traces
// -----------------------------------------------------------------------------

struct SageLayerRecord {
  double alpha = 0.0;
  double delta = 0.0;
  double d_kl = 0.0;
  bool gate_fired = false;
};

struct SageStepRecord {
  int step = 0;
  std::vector<SageLayerRecord> layers;
  SaliencyMask mask;
  std::optional<LogitTriple> logits;
};

struct SageTrace {
  std::vector<SageStepRecord> steps;
  double tau_used = std::numeric_limits<double>::infinity();
  bool tau_calibrated = false;

  // Columnar export: one row per (step, layer) for external plotting.
  void export_columns(std::ostream& os) const {
    os << "step layer alpha delta d_kl gate_fired mask_size\n";
    for (const auto& step : steps) {
      const int mask_size = step.mask.count();
      for (std::size_t l = 0; l < step.layers.size(); ++l) {
        const auto& rec = step.layers[l];
        os << step.step << ' ' << l << ' ' << format_fixed(rec.alpha) << ' '
           << format_fixed(rec.delta) << ' ' << format_fixed(rec.d_kl) << ' '
           << (rec.gate_fired ? 1 : 0) << ' ' << mask_size << '\n';
      }
    }
  }
};

struct SageResult {
  std::vector<int> tokens;
  toymm::DecodeTrace trace;
  SageTrace sage;
};

// Per-visual-cell activation map for a candidate token, computed from the
// decode trace (supplied by the probes module).
using TamFn =
    std::function<std::vector<double>(const toymm::DecodeTrace& trace,
                                      int token)>;

// -----------------------------------------------------------------------------
// Gate-threshold calibration
// -----------------------------------------------------------------------------

// Nearest-rank percentile.
inline double percentile(std::vector<double> values, double p) {
  require(!values.empty(), "percentile: empty sample");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p * n));
  rank = std::min(std::max<std::size_t>(rank, 1), values.size());
  return values[rank - 1];
}

// Default tau: the 90th percentile of the KL conflict signal observed on a
// plain greedy decode of the same input.
inline double calibrate_tau(const ModelParams& params,
                            const SequenceLayout& layout,
                            const ScenePair& scene,
                            const std::vector<int>& system_tokens,
                            const std::vector<int>& prompt_tokens,
                            int max_len) {
  const auto baseline = toymm::greedy_decode(params, layout, scene,
                                             system_tokens, prompt_tokens,
                                             toymm::InterventionHooks{}, max_len);
  std::vector<double> kls;
  for (const auto& step : baseline.trace.steps) {
    for (const auto& layer : step.layers) {
      kls.push_back(numkit::kl_divergence(numkit::softmax(layer.delta_attn),
                                          numkit::softmax(layer.delta_ffn)));
    }
  }
  return percentile(std::move(kls), 0.9);
}

// -----------------------------------------------------------------------------
// Intervention decode
// -----------------------------------------------------------------------------

namespace detail {

struct StageScratch {
  explicit StageScratch(int layers)
      : records(static_cast<std::size_t>(layers)) {}
  std::vector<SageLayerRecord> records;
};

inline double visual_attention_mean(
    const std::vector<std::vector<double>>& head_rows,
    const SequenceLayout& layout) {
  if (head_rows.empty()) return 0.0;
  const int prefix = static_cast<int>(head_rows.front().size());
  if (layout.visual_end > prefix) return 0.0;
  double acc = 0.0;
  for (const auto& row : head_rows) {
    for (int v = layout.visual_begin; v < layout.visual_end; ++v) {
      acc += row[static_cast<std::size_t>(v)];
    }
  }
  return acc / (static_cast<double>(head_rows.size()) *
                static_cast<double>(layout.visual_len()));
}

inline double visual_attention_mean_scores(
    const std::vector<Vector>& head_scores, const SequenceLayout& layout) {
  std::vector<std::vector<double>> rows;
  rows.reserve(head_scores.size());
  for (const auto& scores : head_scores) {
    rows.push_back(numkit::softmax(scores).values());
  }
  return visual_attention_mean(rows, layout);
}

// Builds the Stage I + Stage II hook bundle over shared scratch/decay state.
inline toymm::InterventionHooks make_stage_hooks(const SageConfig& config,
                                                 double tau,
                                                 DecayState* decay,
                                                 StageScratch* scratch) {
  toymm::InterventionHooks hooks;
  if (config.stage1 && !config.presoftmax_modulation) {
    hooks.attn = [&config, decay, scratch](
                     int layer, int step,
                     std::vector<std::vector<double>>& head_rows,
                     const SequenceLayout& layout) {
      if (step < 0) return;
      const double mu = visual_attention_mean(head_rows, layout);
      auto& record = scratch->records[static_cast<std::size_t>(layer)];
      double alpha = config.alpha0;
      double delta = 0.0;
      if (layer >= config.shallow_boundary) {
        alpha = adaptive_alpha(
            mu, decay->prev_mu[static_cast<std::size_t>(layer)], config,
            &delta);
      }
      decay->prev_mu[static_cast<std::size_t>(layer)] = mu;
      record.alpha = alpha;
      record.delta = delta;
      for (auto& row : head_rows) {
        modulate_attention_row(row, layout, alpha);
      }
    };
  } else if (config.stage1 && config.presoftmax_modulation) {
    hooks.attn_scores = [&config, decay, scratch](
                            int layer, int step,
                            std::vector<Vector>& head_scores,
                            const SequenceLayout& layout) {
      if (step < 0) return;
      const double mu = visual_attention_mean_scores(head_scores, layout);
      auto& record = scratch->records[static_cast<std::size_t>(layer)];
      double alpha = config.alpha0;
      double delta = 0.0;
      if (layer >= config.shallow_boundary) {
        alpha = adaptive_alpha(
            mu, decay->prev_mu[static_cast<std::size_t>(layer)], config,
            &delta);
      }
      decay->prev_mu[static_cast<std::size_t>(layer)] = mu;
      record.alpha = alpha;
      record.delta = delta;
      for (auto& scores : head_scores) {
        modulate_attention_scores(scores, layout, alpha);
      }
    };
  }
  if (config.stage2) {
    hooks.ffn_scale = [&config, tau, scratch](int layer, int step,
                                              const Vector& delta_attn,
                                              const Vector& delta_ffn) {
      if (step < 0) return 1.0;
      const RectifyResult result =
          rectify_ffn(delta_attn, delta_ffn, tau, config.beta);
      auto& record = scratch->records[static_cast<std::size_t>(layer)];
      record.d_kl = result.d_kl;
      record.gate_fired = result.gate_fired;
      return result.scale;
    };
  }
  return hooks;
}

}  // namespace detail

// Full three-stage decode. Stage III needs a TAM callback; the probes module
// provides one. The auxiliary path re-runs the masked input with the main
// path's token history each step (and, by default, the same Stage I-II
// hooks over its own decay state). A nonempty `forced_tokens` replays that
// transcript under the intervention, which is how paired attention
// comparisons align their token streams.
inline SageResult sage_decode(const ModelParams& params,
                              const SequenceLayout& layout,
                              const ScenePair& scene,
                              const std::vector<int>& system_tokens,
                              const std::vector<int>& prompt_tokens,
                              const SageConfig& config, int max_len,
                              const TamFn& tam = {},
                              const std::vector<int>& forced_tokens = {}) {
  config.validate(params.config.layers);
  scene.validate();
  require(scene.cell_count() == layout.visual_len(),
          "sage_decode: scene cells do not match the visual span");
  require(!config.stage3 || static_cast<bool>(tam),
          "sage_decode: Stage III requires a TAM callback");

  SageResult result;
  double tau = std::numeric_limits<double>::infinity();
  if (config.stage2) {
    if (config.tau) {
      tau = *config.tau;
    } else {
      tau = calibrate_tau(params, layout, scene, system_tokens, prompt_tokens,
                          max_len);
      result.sage.tau_calibrated = true;
    }
  }
  result.sage.tau_used = tau;

  const auto visual = toymm::scene_pair_view(params, scene);
  const auto embeddings = toymm::build_input_embeddings(
      params, layout, system_tokens, visual, prompt_tokens);
  const int cells = scene.cell_count();
  const int k_eff = config.effective_top_k(cells);

  DecayState decay(params.config.layers);
  detail::StageScratch scratch(params.config.layers);
  const toymm::InterventionHooks hooks =
      detail::make_stage_hooks(config, tau, &decay, &scratch);

  auto finalize = [&](int step, const Vector& l_main,
                      const toymm::DecodeTrace& trace) -> Vector {
    SageStepRecord record;
    record.step = step;
    record.layers = scratch.records;
    scratch = detail::StageScratch(params.config.layers);

    Vector l_final = l_main;
    if (config.stage3) {
      const int candidate = toymm::argmax_lowest(l_main);
      const std::vector<double> tam_map = tam(trace, candidate);
      const auto& attn_map = trace.steps.back().layers.back().attn_visual_raw;
      record.mask = build_discrepancy_mask(attn_map, tam_map, scene.grid_h,
                                           scene.grid_w, k_eff);

      auto aux_visual = visual;
      const Vector neutral = toymm::mean_embedding(visual);
      for (int c = 0; c < cells; ++c) {
        if (record.mask.mask[static_cast<std::size_t>(c)]) {
          aux_visual[static_cast<std::size_t>(c)] = neutral;
        }
      }
      const auto aux_embeddings = toymm::build_input_embeddings(
          params, layout, system_tokens, aux_visual, prompt_tokens);

      std::vector<int> history;
      history.reserve(static_cast<std::size_t>(step));
      for (int s = 0; s < step; ++s) {
        history.push_back(trace.steps[static_cast<std::size_t>(s)].token);
      }
      DecayState aux_decay(params.config.layers);
      detail::StageScratch aux_scratch(params.config.layers);
      toymm::InterventionHooks aux_hooks;
      if (config.aux_shares_stages) {
        aux_hooks =
            detail::make_stage_hooks(config, tau, &aux_decay, &aux_scratch);
      }
      const auto aux = toymm::run_decode(params, layout, aux_embeddings,
                                         aux_hooks, step + 1, {}, history);
      const Vector& l_aux = aux.trace.steps.back().logits;
      l_final = contrastive_logits(l_main, l_aux, config.eta);
      record.logits = LogitTriple{l_main, l_aux, l_final};
    }
    result.sage.steps.push_back(std::move(record));
    return l_final;
  };

  auto decoded = toymm::run_decode(params, layout, embeddings, hooks, max_len,
                                   finalize, forced_tokens);
  result.tokens = std::move(decoded.tokens);
  result.trace = std::move(decoded.trace);
  return result;
}

}  // namespace faithkit::sage

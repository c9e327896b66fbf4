#pragma once

// Mechanistic measurement suite over decode traces: token activation maps,
// attention allocation dynamics, residual-stream similarity, sublayer
// contribution analysis, and neuron activation ratios. All probes are pure
// functions over immutable traces.

#include <ostream>
#include <utility>
#include <vector>

#include "faithkit/common.hpp"
#include "faithkit/numkit.hpp"
#include "faithkit/sage.hpp"
#include "faithkit/toymm.hpp"

namespace faithkit::probes {

using numkit::Vector;
using toymm::DecodeTrace;
using toymm::SequenceLayout;

// -----------------------------------------------------------------------------
// Token activation map
// -----------------------------------------------------------------------------

struct TamMap {
  int token = -1;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> values;  // one activation per visual position
};

// Logit-lens attribution: the dot product of each visual position's
// final-layer hidden state with the target token's unembedding column,
// reshaped to the visual grid.
inline TamMap token_activation_map(const std::vector<Vector>& final_hidden,
                                   const Vector& unembedding_column, int token,
                                   const SequenceLayout& layout, int grid_h,
                                   int grid_w) {
  require(grid_h * grid_w == layout.visual_len(),
          "token_activation_map: grid does not match the visual span");
  require(static_cast<int>(final_hidden.size()) >= layout.visual_end,
          "token_activation_map: hidden states do not cover the visual span");
  TamMap map;
  map.token = token;
  map.grid_h = grid_h;
  map.grid_w = grid_w;
  map.values.reserve(static_cast<std::size_t>(layout.visual_len()));
  for (int pos = layout.visual_begin; pos < layout.visual_end; ++pos) {
    const auto& h = final_hidden[static_cast<std::size_t>(pos)];
    require(h.size() == unembedding_column.size(),
            "token_activation_map: hidden/column dimension mismatch");
    map.values.push_back(h.dot(unembedding_column));
  }
  return map;
}

inline TamMap token_activation_map(const DecodeTrace& trace,
                                   const toymm::ModelParams& params, int token,
                                   int grid_h, int grid_w) {
  require(token >= 0 && token < params.config.vocab_size,
          "token_activation_map: token out of vocabulary");
  return token_activation_map(trace.final_hidden,
                              params.w_head.column(static_cast<std::size_t>(token)),
                              token, trace.layout, grid_h, grid_w);
}

// Adapter for the intervention engine's Stage III.
inline sage::TamFn make_tam_callback(const toymm::ModelParams& params,
                                     int grid_h, int grid_w) {
  return [&params, grid_h, grid_w](const DecodeTrace& trace, int token) {
    return token_activation_map(trace, params, token, grid_h, grid_w).values;
  };
}

// -----------------------------------------------------------------------------
// Attention allocation dynamics
// -----------------------------------------------------------------------------

struct AllocationPoint {
  double system = 0.0;
  double visual = 0.0;
  double prompt = 0.0;
  double generated = 0.0;

  double total() const { return system + visual + prompt + generated; }
};

// Fraction of attention mass per segment, from the head-averaged rows,
// indexed [layer][step].
struct AllocationSeries {
  std::vector<std::vector<AllocationPoint>> values;

  int layers() const { return static_cast<int>(values.size()); }
  int steps() const {
    return values.empty() ? 0 : static_cast<int>(values.front().size());
  }

  // Mean visual fraction across layers at one step.
  double visual_share(int step) const {
    double acc = 0.0;
    for (const auto& layer : values) {
      acc += layer[static_cast<std::size_t>(step)].visual;
    }
    return acc / static_cast<double>(values.size());
  }
};

inline AllocationSeries attention_allocation(const DecodeTrace& trace) {
  const auto& layout = trace.layout;
  AllocationSeries series;
  series.values.resize(static_cast<std::size_t>(trace.config.layers));
  for (auto& per_layer : series.values) {
    per_layer.resize(trace.steps.size());
  }
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& step = trace.steps[t];
    require(static_cast<int>(step.layers.size()) == trace.config.layers,
            "attention_allocation: trace is missing layers at step ", t);
    for (std::size_t l = 0; l < step.layers.size(); ++l) {
      const auto& row = step.layers[l].attn_row;
      AllocationPoint point;
      for (std::size_t p = 0; p < row.size(); ++p) {
        switch (layout.segment_of(static_cast<int>(p))) {
          case toymm::Segment::kSystem:
            point.system += row[p];
            break;
          case toymm::Segment::kVisual:
            point.visual += row[p];
            break;
          case toymm::Segment::kPrompt:
            point.prompt += row[p];
            break;
          case toymm::Segment::kGenerated:
            point.generated += row[p];
            break;
        }
      }
      series.values[l][t] = point;
    }
  }
  return series;
}

// -----------------------------------------------------------------------------
// Residual-stream similarity
// -----------------------------------------------------------------------------

// Per-layer cosine similarity of the residual checkpoints of two runs,
// aligned at the first generated position. Returns layers+1 values: the
// layer inputs x_0..x_{L-1} plus the final output x_L.
inline std::vector<double> paired_hidden_similarity(const DecodeTrace& same,
                                                    const DecodeTrace& diff) {
  require(same.config.layers == diff.config.layers,
          "paired_hidden_similarity: layer count mismatch");
  require(!same.steps.empty() && !diff.steps.empty(),
          "paired_hidden_similarity: empty trace");
  const auto& step_a = same.steps.front();
  const auto& step_b = diff.steps.front();
  std::vector<double> out;
  out.reserve(step_a.layers.size() + 1);
  for (std::size_t l = 0; l < step_a.layers.size(); ++l) {
    out.push_back(numkit::cosine_similarity(step_a.layers[l].x_in,
                                            step_b.layers[l].x_in));
  }
  out.push_back(numkit::cosine_similarity(step_a.layers.back().x_out,
                                          step_b.layers.back().x_out));
  return out;
}

// Input-output cosine similarity of the two sublayers, indexed
// [layer][step] as {attention transition, ffn transition}.
struct SublayerSimilarity {
  std::vector<std::vector<std::pair<double, double>>> values;
};

inline SublayerSimilarity sublayer_similarity(const DecodeTrace& trace) {
  require(!trace.steps.empty(), "sublayer_similarity: empty trace");
  SublayerSimilarity result;
  result.values.resize(static_cast<std::size_t>(trace.config.layers));
  for (auto& per_layer : result.values) per_layer.resize(trace.steps.size());
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& step = trace.steps[t];
    require(static_cast<int>(step.layers.size()) == trace.config.layers,
            "sublayer_similarity: trace is missing layers at step ", t);
    for (std::size_t l = 0; l < step.layers.size(); ++l) {
      const auto& entry = step.layers[l];
      result.values[l][t] = {
          numkit::cosine_similarity(entry.x_in, entry.x_mid),
          numkit::cosine_similarity(entry.x_mid, entry.x_out)};
    }
  }
  return result;
}

// -----------------------------------------------------------------------------
// Neuron activation analysis
// -----------------------------------------------------------------------------

// Binary activation state per FFN neuron: the SiLU of its gate preactivation
// summed over the generated steps must be strictly positive.
inline std::vector<std::uint8_t> neuron_activation_state(
    const std::vector<Vector>& gate_preacts) {
  require(!gate_preacts.empty(),
          "neuron_activation_state: empty generated span");
  const std::size_t width = gate_preacts.front().size();
  std::vector<double> sums(width, 0.0);
  for (const auto& preact : gate_preacts) {
    require(preact.size() == width,
            "neuron_activation_state: inconsistent preactivation widths");
    for (std::size_t i = 0; i < width; ++i) {
      sums[i] += numkit::silu(preact[i]);
    }
  }
  std::vector<std::uint8_t> state(width, 0);
  for (std::size_t i = 0; i < width; ++i) state[i] = sums[i] > 0.0 ? 1 : 0;
  return state;
}

inline std::vector<std::uint8_t> neuron_activation_state(
    const DecodeTrace& trace, int layer) {
  require(layer >= 0 && layer < trace.config.layers,
          "neuron_activation_state: layer out of range");
  std::vector<Vector> preacts;
  preacts.reserve(trace.steps.size());
  for (const auto& step : trace.steps) {
    preacts.push_back(step.layers[static_cast<std::size_t>(layer)].gate_preact);
  }
  return neuron_activation_state(preacts);
}

inline double activation_ratio(const std::vector<std::uint8_t>& state) {
  require(!state.empty(), "activation_ratio: empty state");
  double acc = 0.0;
  for (auto bit : state) acc += bit;
  return acc / static_cast<double>(state.size());
}

// Per-layer activation ratios for one sample.
inline std::vector<double> layer_activation_ratios(const DecodeTrace& trace) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(trace.config.layers));
  for (int l = 0; l < trace.config.layers; ++l) {
    out.push_back(activation_ratio(neuron_activation_state(trace, l)));
  }
  return out;
}

// Mean activation ratio of the unfaithful group minus the faithful group,
// per layer. Inputs are [sample][layer] ratio tables.
inline std::vector<double> activation_difference_ratio(
    const std::vector<std::vector<double>>& unfaithful,
    const std::vector<std::vector<double>>& faithful) {
  require(!unfaithful.empty() && !faithful.empty(),
          "activation_difference_ratio: empty group");
  const std::size_t layers = unfaithful.front().size();
  auto mean_per_layer = [layers](const std::vector<std::vector<double>>& group) {
    std::vector<double> mean(layers, 0.0);
    for (const auto& sample : group) {
      require(sample.size() == layers,
              "activation_difference_ratio: inconsistent layer counts");
      for (std::size_t l = 0; l < layers; ++l) mean[l] += sample[l];
    }
    for (double& v : mean) v /= static_cast<double>(group.size());
    return mean;
  };
  const auto mean_unfaithful = mean_per_layer(unfaithful);
  const auto mean_faithful = mean_per_layer(faithful);
  std::vector<double> out(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    out[l] = mean_unfaithful[l] - mean_faithful[l];
  }
  return out;
}

// -----------------------------------------------------------------------------
// Exports
// -----------------------------------------------------------------------------

inline void export_allocation(const AllocationSeries& series,
                              std::ostream& os) {
  os << "layer step system visual prompt generated\n";
  for (std::size_t l = 0; l < series.values.size(); ++l) {
    for (std::size_t t = 0; t < series.values[l].size(); ++t) {
      const auto& p = series.values[l][t];
      os << l << ' ' << t << ' ' << format_fixed(p.system) << ' '
         << format_fixed(p.visual) << ' ' << format_fixed(p.prompt) << ' '
         << format_fixed(p.generated) << '\n';
    }
  }
}

inline void export_layer_values(const std::vector<double>& values,
                                std::ostream& os) {
  os << "layer value\n";
  for (std::size_t l = 0; l < values.size(); ++l) {
    os << l << ' ' << format_fixed(values[l]) << '\n';
  }
}

inline void export_sublayer(const SublayerSimilarity& sim, std::ostream& os) {
  os << "layer step mha_similarity ffn_similarity\n";
  for (std::size_t l = 0; l < sim.values.size(); ++l) {
    for (std::size_t t = 0; t < sim.values[l].size(); ++t) {
      os << l << ' ' << t << ' ' << format_fixed(sim.values[l][t].first) << ' '
         << format_fixed(sim.values[l][t].second) << '\n';
    }
  }
}

inline void export_grid(const TamMap& map, std::ostream& os) {
  for (int r = 0; r < map.grid_h; ++r) {
    for (int c = 0; c < map.grid_w; ++c) {
      if (c > 0) os << ' ';
      os << format_fixed(map.values[static_cast<std::size_t>(r * map.grid_w + c)]);
    }
    os << '\n';
  }
}

}  // namespace faithkit::probes

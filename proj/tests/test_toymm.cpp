#include "faithkit/toymm.hpp"

#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "faithkit/common.hpp"
#include "faithkit/harness.hpp"

namespace toymm = faithkit::toymm;
namespace nk = faithkit::numkit;
using faithkit::Rng;
using faithkit::harness::generate_scene;
using faithkit::harness::SceneSpec;

namespace {

toymm::ModelConfig small_config(std::uint64_t seed = 7) {
  toymm::ModelConfig config;
  config.seed = seed;
  return config;
}

struct DecodeFixture {
  toymm::ModelParams params;
  toymm::ScenePair scene;
  toymm::SequenceLayout layout;
  std::vector<int> system_tokens;
  std::vector<int> prompt;

  explicit DecodeFixture(std::uint64_t model_seed = 3,
                         std::uint64_t scene_seed = 3)
      : params(toymm::build_model(small_config(model_seed))) {
    SceneSpec spec;
    spec.seed = scene_seed;
    scene = generate_scene(spec);
    layout = toymm::make_layout(4, scene.cell_count(), 1);
    system_tokens.assign(4, faithkit::harness::Codebook::kSys);
    prompt = {faithkit::harness::Codebook::kQueryDescribe};
  }
};

TEST(BuildModel, SameSeedGivesIdenticalChecksums) {
  const auto a = toymm::build_model(small_config(42));
  const auto b = toymm::build_model(small_config(42));
  EXPECT_EQ(a.checksum(), b.checksum());
}

TEST(BuildModel, DistinctSeedsGiveDistinctChecksums) {
  std::set<std::uint64_t> checksums;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    checksums.insert(toymm::build_model(small_config(seed)).checksum());
  }
  EXPECT_EQ(checksums.size(), 100u);
}

TEST(BuildModel, RejectsInconsistentConfig) {
  toymm::ModelConfig bad = small_config();
  bad.heads = 5;  // does not divide hidden_dim = 32
  EXPECT_THROW(toymm::build_model(bad), faithkit::Error);
  bad = small_config();
  bad.ffn_dim = 8;
  EXPECT_THROW(toymm::build_model(bad), faithkit::Error);
  bad = small_config();
  bad.layers = 0;
  EXPECT_THROW(toymm::build_model(bad), faithkit::Error);
}

TEST(EncodeScene, IdenticalGridsGiveIdenticalEmbeddings) {
  DecodeFixture fx;
  toymm::ScenePair clone = fx.scene;
  clone.cells_b = clone.cells_a;
  clone.differences.clear();
  const auto ea = toymm::encode_scene(fx.params, clone, toymm::Side::kA);
  const auto eb = toymm::encode_scene(fx.params, clone, toymm::Side::kB);
  ASSERT_EQ(ea.size(), eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    EXPECT_EQ(ea[i], eb[i]);
  }
}

TEST(EncodeScene, SingleColorEditChangesOneEmbedding) {
  DecodeFixture fx;
  toymm::ScenePair scene = fx.scene;
  scene.cells_b = scene.cells_a;
  scene.differences.clear();
  int target = -1;
  for (std::size_t i = 0; i < scene.cells_a.size(); ++i) {
    if (scene.cells_a[i].occupancy) {
      target = static_cast<int>(i);
      break;
    }
  }
  ASSERT_GE(target, 0);
  auto& cell = scene.cells_b[static_cast<std::size_t>(target)];
  cell.color = (cell.color + 1) % faithkit::harness::Codebook::kColorCount;

  const auto ea = toymm::encode_scene(fx.params, scene, toymm::Side::kA);
  const auto eb = toymm::encode_scene(fx.params, scene, toymm::Side::kB);
  int differing = 0;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (!(ea[i] == eb[i])) ++differing;
  }
  EXPECT_EQ(differing, 1);
  EXPECT_FALSE(ea[static_cast<std::size_t>(target)] ==
               eb[static_cast<std::size_t>(target)]);
}

TEST(EncodeScene, RemovalEditChangesOneEmbedding) {
  DecodeFixture fx;
  toymm::ScenePair scene = fx.scene;
  scene.cells_b = scene.cells_a;
  scene.differences.clear();
  int target = -1;
  for (std::size_t i = 0; i < scene.cells_a.size(); ++i) {
    if (scene.cells_a[i].occupancy) {
      target = static_cast<int>(i);
      break;
    }
  }
  ASSERT_GE(target, 0);
  scene.cells_b[static_cast<std::size_t>(target)] = toymm::Cell{};
  const auto ea = toymm::encode_scene(fx.params, scene, toymm::Side::kA);
  const auto eb = toymm::encode_scene(fx.params, scene, toymm::Side::kB);
  int differing = 0;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (!(ea[i] == eb[i])) ++differing;
  }
  EXPECT_EQ(differing, 1);
}

// Hamming distance between embedding sequences equals the edited cell count.
TEST(EncodeScene, LocalityOverGeneratedScenes) {
  DecodeFixture fx;
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    SceneSpec spec;
    spec.seed = seed;
    spec.num_diffs = 1 + static_cast<int>(seed % 3);
    spec.occupied = 8;
    const auto scene = generate_scene(spec);
    std::size_t edited = 0;
    for (std::size_t i = 0; i < scene.cells_a.size(); ++i) {
      if (!(scene.cells_a[i] == scene.cells_b[i])) ++edited;
    }
    const auto ea = toymm::encode_scene(fx.params, scene, toymm::Side::kA);
    const auto eb = toymm::encode_scene(fx.params, scene, toymm::Side::kB);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
      if (!(ea[i] == eb[i])) ++differing;
    }
    EXPECT_EQ(differing, edited);
  }
}

TEST(GatedFfn, ZeroInputGivesZeroOutput) {
  const auto params = toymm::build_model(small_config());
  const auto [out, gate] =
      toymm::gated_ffn(params.layers[0], nk::Vector(32, 0.0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_DOUBLE_EQ(out[i], 0.0);
  }
  for (std::size_t i = 0; i < gate.size(); ++i) {
    EXPECT_DOUBLE_EQ(gate[i], 0.0);
  }
}

TEST(GatedFfn, MatchesNaiveTripleLoop) {
  // Small instance evaluated with explicit loops.
  toymm::LayerParams layer;
  const int d = 4, d_ffn = 8;
  layer.w_gate = nk::Matrix(d_ffn, d);
  layer.w_up = nk::Matrix(d_ffn, d);
  layer.w_down = nk::Matrix(d, d_ffn);
  Rng rng(5);
  for (double& v : layer.w_gate.values()) v = rng.normal();
  for (double& v : layer.w_up.values()) v = rng.normal();
  for (double& v : layer.w_down.values()) v = rng.normal();
  nk::Vector h(d);
  for (double& v : h.values()) v = rng.normal();

  std::vector<double> gate(d_ffn, 0.0), up(d_ffn, 0.0);
  for (int i = 0; i < d_ffn; ++i) {
    for (int j = 0; j < d; ++j) {
      gate[i] += layer.w_gate.at(i, j) * h[static_cast<std::size_t>(j)];
      up[i] += layer.w_up.at(i, j) * h[static_cast<std::size_t>(j)];
    }
  }
  std::vector<double> expected(d, 0.0);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d_ffn; ++j) {
      const double activated = gate[j] / (1.0 + std::exp(-gate[j]));
      expected[i] += layer.w_down.at(i, j) * activated * up[j];
    }
  }

  const auto [out, preact] = toymm::gated_ffn(layer, h);
  for (int i = 0; i < d; ++i) {
    EXPECT_NEAR(out[static_cast<std::size_t>(i)], expected[i], 1e-10);
  }
  for (int i = 0; i < d_ffn; ++i) {
    EXPECT_NEAR(preact[static_cast<std::size_t>(i)], gate[i], 1e-12);
  }
}

TEST(GatedFfn, DownProjectionIsLinear) {
  auto params = toymm::build_model(small_config());
  const nk::Vector h = [&] {
    nk::Vector v(32);
    Rng rng(9);
    for (double& x : v) x = rng.normal();
    return v;
  }();
  const auto [base, gate_base] = toymm::gated_ffn(params.layers[0], h);
  auto doubled = params.layers[0];
  for (double& v : doubled.w_down.values()) v *= 2.0;
  const auto [twice, gate_twice] = toymm::gated_ffn(doubled, h);
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_NEAR(twice[i], 2.0 * base[i], 1e-9);
  }
}

TEST(GatedFfn, RejectsShapeMismatch) {
  const auto params = toymm::build_model(small_config());
  EXPECT_THROW(toymm::gated_ffn(params.layers[0], nk::Vector(16, 0.0)),
               faithkit::Error);
}

TEST(ResidualBlock, IdentityOverridesSatisfyFfnReconstruction) {
  DecodeFixture fx;
  const auto result =
      toymm::greedy_decode(fx.params, fx.layout, fx.scene, fx.system_tokens,
                        fx.prompt, toymm::InterventionHooks{}, 6);
  ASSERT_FALSE(result.trace.steps.empty());
  for (const auto& step : result.trace.steps) {
    for (const auto& layer : step.layers) {
      // x_{l+1/2} plus the gated-ffn output reconstructs x_{l+1} exactly.
      for (std::size_t i = 0; i < layer.x_out.size(); ++i) {
        EXPECT_DOUBLE_EQ(layer.x_mid[i] + layer.delta_ffn[i], layer.x_out[i]);
        EXPECT_DOUBLE_EQ(layer.x_in[i] + layer.delta_attn[i], layer.x_mid[i]);
      }
    }
  }
}

TEST(ResidualBlock, ZeroFfnScaleSuppressesUpdate) {
  DecodeFixture fx;
  toymm::InterventionHooks hooks;
  hooks.ffn_scale = [](int, int, const nk::Vector&, const nk::Vector&) {
    return 0.0;
  };
  const auto result = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                        fx.system_tokens, fx.prompt, hooks, 4);
  for (const auto& step : result.trace.steps) {
    for (const auto& layer : step.layers) {
      for (std::size_t i = 0; i < layer.x_out.size(); ++i) {
        EXPECT_DOUBLE_EQ(layer.x_out[i], layer.x_mid[i]);
      }
    }
  }
}

// Attention rows stay distributions under random renormalizing overrides.
TEST(ResidualBlock, OverriddenRowsRemainDistributions) {
  DecodeFixture fx;
  Rng rng(21);
  toymm::InterventionHooks hooks;
  hooks.attn = [&rng](int, int, std::vector<std::vector<double>>& rows,
                      const toymm::SequenceLayout&) {
    for (auto& row : rows) {
      double sum = 0.0;
      for (double& v : row) {
        v *= rng.uniform(0.25, 4.0);
        sum += v;
      }
      for (double& v : row) v /= sum;
    }
  };
  const auto result = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                        fx.system_tokens, fx.prompt, hooks, 6);
  for (const auto& step : result.trace.steps) {
    for (const auto& layer : step.layers) {
      double sum = 0.0;
      for (double v : layer.attn_row) {
        EXPECT_GE(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(GreedyDecode, DeterministicAcrossRuns) {
  DecodeFixture fx;
  const auto a = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                   fx.system_tokens, fx.prompt,
                                   toymm::InterventionHooks{}, 12);
  const auto b = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                   fx.system_tokens, fx.prompt,
                                   toymm::InterventionHooks{}, 12);
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.trace.steps.size(), b.trace.steps.size());
  for (std::size_t t = 0; t < a.trace.steps.size(); ++t) {
    EXPECT_EQ(a.trace.steps[t].logits.values(),
              b.trace.steps[t].logits.values());
  }
}

TEST(GreedyDecode, TieBreakSelectsLowestId) {
  DecodeFixture fx;
  toymm::InterventionHooks hooks;
  hooks.logits = [](int, nk::Vector& logits) {
    for (double& v : logits) v = 0.0;
    logits[7] = 5.0;
    logits[3] = 5.0;
  };
  const auto result = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                        fx.system_tokens, fx.prompt, hooks, 3);
  EXPECT_EQ(result.tokens.front(), 3);
}

TEST(GreedyDecode, TraceStepCountEqualsEmittedTokens) {
  DecodeFixture fx;
  const auto result = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                        fx.system_tokens, fx.prompt,
                                        toymm::InterventionHooks{}, 9);
  EXPECT_EQ(result.trace.steps.size(), result.tokens.size());
  EXPECT_EQ(result.trace.final_hidden.size(),
            static_cast<std::size_t>(fx.layout.gen_start - 1) +
                result.tokens.size());
}

TEST(GreedyDecode, TruncationFlagSetWithoutEos) {
  DecodeFixture fx;
  toymm::InterventionHooks hooks;
  hooks.logits = [](int, nk::Vector& logits) {
    for (double& v : logits) v = 0.0;
    logits[5] = 1.0;  // never EOS
  };
  const auto result = toymm::greedy_decode(fx.params, fx.layout, fx.scene,
                                        fx.system_tokens, fx.prompt, hooks, 4);
  EXPECT_TRUE(result.trace.truncated);
  EXPECT_EQ(result.tokens.size(), 4u);

  toymm::InterventionHooks eos_hooks;
  eos_hooks.logits = [](int, nk::Vector& logits) {
    for (double& v : logits) v = 0.0;
    logits[0] = 1.0;  // immediate EOS
  };
  const auto stopped =
      toymm::greedy_decode(fx.params, fx.layout, fx.scene, fx.system_tokens,
                        fx.prompt, eos_hooks, 4);
  EXPECT_FALSE(stopped.trace.truncated);
  EXPECT_EQ(stopped.tokens.size(), 1u);
}

// Masking a visual position's attention column at every layer makes the
// logits independent of that cell's content.
TEST(GreedyDecode, MaskedColumnCausality) {
  DecodeFixture fx;
  // Pick an edited cell so the two scenes differ there.
  toymm::ScenePair scene_a = fx.scene;
  toymm::ScenePair scene_b = fx.scene;
  const int cell = fx.scene.differences.front().cell;
  // Give scene_b a different content at that cell in BOTH grids, so the two
  // inputs differ exactly at one visual position.
  auto bump = [](toymm::Cell& c) {
    c.category = (c.category + 1) % faithkit::harness::Codebook::kCategoryCount;
    c.occupancy = 1;
  };
  bump(scene_b.cells_a[static_cast<std::size_t>(cell)]);
  bump(scene_b.cells_b[static_cast<std::size_t>(cell)]);
  scene_b.differences = scene_a.differences;
  // The edited grids no longer satisfy the record invariant, so embeddings
  // are built directly instead of going through greedy_decode's validation.
  const int masked_pos = fx.layout.visual_begin + cell;

  toymm::InterventionHooks mask_hooks;
  mask_hooks.attn = [masked_pos](int, int,
                                 std::vector<std::vector<double>>& rows,
                                 const toymm::SequenceLayout&) {
    for (auto& row : rows) {
      if (static_cast<std::size_t>(masked_pos) >= row.size()) continue;
      double sum = 0.0;
      row[static_cast<std::size_t>(masked_pos)] = 0.0;
      for (double v : row) sum += v;
      if (sum > 0.0) {
        for (double& v : row) v /= sum;
      }
    }
  };

  auto decode_embeddings = [&](const toymm::ScenePair& scene) {
    const auto embeddings = toymm::build_input_embeddings(
        fx.params, fx.layout, fx.system_tokens,
        toymm::scene_pair_view(fx.params, scene), fx.prompt);
    return toymm::run_decode(fx.params, fx.layout, embeddings, mask_hooks, 6);
  };
  const auto result_a = decode_embeddings(scene_a);
  const auto result_b = decode_embeddings(scene_b);
  ASSERT_EQ(result_a.trace.steps.size(), result_b.trace.steps.size());
  for (std::size_t t = 0; t < result_a.trace.steps.size(); ++t) {
    const auto& la = result_a.trace.steps[t].logits;
    const auto& lb = result_b.trace.steps[t].logits;
    for (std::size_t i = 0; i < la.size(); ++i) {
      EXPECT_NEAR(la[i], lb[i], 1e-9);
    }
  }
  EXPECT_EQ(result_a.tokens, result_b.tokens);
}

TEST(GreedyDecode, RejectsSceneLayoutMismatch) {
  DecodeFixture fx;
  const auto bad_layout = toymm::make_layout(4, 9, 1);
  EXPECT_THROW(
      toymm::greedy_decode(fx.params, bad_layout, fx.scene, fx.system_tokens,
                        fx.prompt, toymm::InterventionHooks{}, 4),
      faithkit::Error);
}

TEST(ScenePair, ValidatesImpliedCells) {
  SceneSpec spec;
  spec.seed = 77;
  spec.num_diffs = 2;
  spec.occupied = 8;
  auto scene = generate_scene(spec);
  EXPECT_NO_THROW(scene.validate());
  // Damage: grid edit without a record.
  auto broken = scene;
  for (std::size_t i = 0; i < broken.cells_b.size(); ++i) {
    bool implied = false;
    for (const auto& diff : broken.differences) {
      if (diff.cell == static_cast<int>(i) ||
          diff.cell_to == static_cast<int>(i)) {
        implied = true;
      }
    }
    if (!implied) {
      broken.cells_b[i].category =
          (broken.cells_b[i].category + 1) %
          faithkit::harness::Codebook::kCategoryCount;
      broken.cells_b[i].occupancy = 1;
      break;
    }
  }
  EXPECT_THROW(broken.validate(), faithkit::Error);
}

TEST(ScenePair, JsonRoundTrip) {
  SceneSpec spec;
  spec.seed = 99;
  spec.num_diffs = 3;
  spec.occupied = 9;
  const auto scene = generate_scene(spec);
  const auto restored = toymm::scene_from_json(toymm::scene_to_json(scene));
  EXPECT_EQ(restored.grid_h, scene.grid_h);
  EXPECT_EQ(restored.grid_w, scene.grid_w);
  ASSERT_EQ(restored.cells_a.size(), scene.cells_a.size());
  for (std::size_t i = 0; i < scene.cells_a.size(); ++i) {
    EXPECT_TRUE(restored.cells_a[i] == scene.cells_a[i]);
    EXPECT_TRUE(restored.cells_b[i] == scene.cells_b[i]);
  }
  ASSERT_EQ(restored.differences.size(), scene.differences.size());
  for (std::size_t i = 0; i < scene.differences.size(); ++i) {
    EXPECT_EQ(restored.differences[i].cell, scene.differences[i].cell);
    EXPECT_EQ(restored.differences[i].record.category,
              scene.differences[i].record.category);
  }
}

TEST(SequenceLayout, SegmentClassification) {
  const auto layout = toymm::make_layout(2, 4, 3);
  EXPECT_EQ(layout.segment_of(0), toymm::Segment::kSystem);
  EXPECT_EQ(layout.segment_of(1), toymm::Segment::kSystem);
  EXPECT_EQ(layout.segment_of(2), toymm::Segment::kVisual);
  EXPECT_EQ(layout.segment_of(5), toymm::Segment::kVisual);
  EXPECT_EQ(layout.segment_of(6), toymm::Segment::kPrompt);
  EXPECT_EQ(layout.segment_of(8), toymm::Segment::kPrompt);
  EXPECT_EQ(layout.segment_of(9), toymm::Segment::kGenerated);
  EXPECT_EQ(layout.gen_start, 9);
}

}  // namespace

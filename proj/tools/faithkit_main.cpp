// faithkit command-line harness: manifest evaluation, stage ablations,
// probe exports over saved traces, and perturbation utilities.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "faithkit/harness.hpp"
#include "faithkit/judge_remote.hpp"

namespace fk = faithkit;

namespace {

struct SageOverrides {
  std::optional<double> alpha0, beta, eta, tau;
  std::optional<int> topk;

  void attach(CLI::App* cmd) {
    cmd->add_option("--alpha0", alpha0, "Base visual enhancement");
    cmd->add_option("--beta", beta, "FFN suppression coefficient");
    cmd->add_option("--eta", eta, "Contrastive strength");
    cmd->add_option("--tau", tau, "KL gate threshold");
    cmd->add_option("--topk", topk, "Saliency top-k cell count");
  }

  void apply(fk::sage::SageConfig& config) const {
    if (alpha0) config.alpha0 = *alpha0;
    if (beta) config.beta = *beta;
    if (eta) config.eta = *eta;
    if (tau) config.tau = *tau;
    if (topk) config.top_k = *topk;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  fk::require(static_cast<bool>(in), "cannot open ", path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  fk::require(static_cast<bool>(out), "cannot write ", path);
  out << content;
}

int run_eval(const std::string& manifest_path, const std::string& judge_name,
             const std::string& metric_list, const std::string& out_path,
             const std::string& format_name, int workers,
             const std::string& cache_dir) {
  const auto loaded = fk::harness::load_manifest(manifest_path);
  for (const auto& err : loaded.line_errors) {
    std::cerr << "manifest: " << err << '\n';
  }
  const auto selection = fk::harness::MetricSelection::parse(metric_list);

  fk::metrics::MetricReport report;
  if (judge_name == "rule") {
    fk::judge::RuleJudge rule;
    report = fk::harness::evaluate_records(loaded.records, rule, selection,
                                           workers);
  } else if (judge_name == "remote") {
    fk::judge::RemoteJudge remote(fk::judge::RemoteConfig::from_env(cache_dir));
    report = fk::harness::evaluate_records(loaded.records, remote, selection,
                                           workers);
  } else {
    throw fk::Error("judge must be 'rule' or 'remote'");
  }
  fk::harness::emit_report(report, fk::harness::parse_format(format_name),
                           out_path);
  std::cout << "evaluated " << report.records.size() << " records -> "
            << out_path << '\n';
  return 0;
}

int run_ablate(const std::string& plan_path, std::optional<std::uint64_t> seed,
               const std::string& out_path, const std::string& format_name,
               const SageOverrides& overrides) {
  fk::harness::AblationPlan plan;
  if (!plan_path.empty()) {
    plan = fk::harness::plan_from_json(nlohmann::json::parse(read_file(plan_path)));
  }
  if (seed) {
    plan.model_seed = *seed;
    plan.seeds.clear();
    for (std::uint64_t i = 1; i <= 5; ++i) plan.seeds.push_back(*seed + i);
  }
  overrides.apply(plan.base);
  const auto report = fk::harness::run_ablation(plan);
  fk::harness::emit_ablation(report, fk::harness::parse_format(format_name),
                             out_path);
  std::cout << "ablation rows: " << report.rows.size() << " -> " << out_path
            << '\n';
  return 0;
}

int run_decode_cmd(std::uint64_t model_seed, std::uint64_t scene_seed,
                   int diffs, int occupied, bool use_sage,
                   const SageOverrides& overrides,
                   const std::string& trace_out,
                   const std::string& sage_trace_out) {
  fk::toymm::ModelConfig config;
  config.seed = model_seed;
  fk::harness::Codebook::validate(config);
  const auto params = fk::toymm::build_model(config);

  fk::harness::SceneSpec spec;
  spec.seed = scene_seed;
  spec.num_diffs = diffs;
  spec.occupied = occupied;
  const auto scene = fk::harness::generate_scene(spec);
  const auto layout = fk::toymm::make_layout(4, scene.cell_count(), 1);
  const std::vector<int> system_tokens(4, fk::harness::Codebook::kSys);
  const std::vector<int> prompt = {fk::harness::Codebook::kQueryDescribe};

  fk::toymm::DecodeTrace trace;
  std::vector<int> tokens;
  if (use_sage) {
    fk::sage::SageConfig sage_config;
    overrides.apply(sage_config);
    const auto tam =
        fk::probes::make_tam_callback(params, scene.grid_h, scene.grid_w);
    auto result = fk::sage::sage_decode(params, layout, scene, system_tokens,
                                        prompt, sage_config, 12, tam);
    trace = std::move(result.trace);
    tokens = std::move(result.tokens);
    if (!sage_trace_out.empty()) {
      std::ofstream out(sage_trace_out);
      fk::require(static_cast<bool>(out), "cannot write ", sage_trace_out);
      result.sage.export_columns(out);
    }
  } else {
    auto result = fk::toymm::greedy_decode(params, layout, scene,
                                           system_tokens, prompt,
                                           fk::toymm::InterventionHooks{}, 12);
    trace = std::move(result.trace);
    tokens = std::move(result.tokens);
  }
  if (!trace_out.empty()) {
    write_file(trace_out, fk::harness::trace_to_json(trace).dump());
  }
  std::cout << "tokens:";
  for (int token : tokens) std::cout << ' ' << token;
  std::cout << '\n';
  std::cout << "transcript:\n"
            << fk::harness::Codebook::describe_response(tokens);
  return 0;
}

int run_probe(const std::string& trace_path, const std::string& probe_name,
              const std::string& out_path, std::optional<int> token,
              const std::string& trace_b_path) {
  const auto trace = fk::harness::trace_from_json(
      nlohmann::json::parse(read_file(trace_path)));
  std::ofstream out(out_path);
  fk::require(static_cast<bool>(out), "cannot write ", out_path);

  if (probe_name == "tam") {
    const auto params = fk::toymm::build_model(trace.config);
    const int target =
        token.value_or(trace.steps.empty() ? 0 : trace.steps.front().token);
    // Square-ish grid recovery from the visual span.
    const int cells = trace.layout.visual_len();
    int grid_w = static_cast<int>(std::round(std::sqrt(cells)));
    while (grid_w > 1 && cells % grid_w != 0) --grid_w;
    const auto map = fk::probes::token_activation_map(
        trace, params, target, cells / grid_w, grid_w);
    fk::probes::export_grid(map, out);
  } else if (probe_name == "alloc") {
    fk::probes::export_allocation(fk::probes::attention_allocation(trace), out);
  } else if (probe_name == "residual") {
    fk::require(!trace_b_path.empty(),
                "residual probe needs --trace-b with the paired trace");
    const auto trace_b = fk::harness::trace_from_json(
        nlohmann::json::parse(read_file(trace_b_path)));
    fk::probes::export_layer_values(
        fk::probes::paired_hidden_similarity(trace, trace_b), out);
  } else if (probe_name == "sublayer") {
    fk::probes::export_sublayer(fk::probes::sublayer_similarity(trace), out);
  } else if (probe_name == "neuron") {
    fk::probes::export_layer_values(fk::probes::layer_activation_ratios(trace),
                                    out);
  } else {
    throw fk::Error("probe must be tam|alloc|residual|sublayer|neuron");
  }
  std::cout << "probe " << probe_name << " -> " << out_path << '\n';
  return 0;
}

int run_perturb(const std::string& mode_name, double ratio,
                std::uint64_t seed, const std::string& scene_path,
                const std::string& out_path) {
  if (mode_name == "mask") {
    fk::toymm::ScenePair scene;
    if (!scene_path.empty()) {
      scene = fk::toymm::scene_from_json(
          nlohmann::json::parse(read_file(scene_path)));
    } else {
      fk::harness::SceneSpec spec;
      spec.seed = seed;
      scene = fk::harness::generate_scene(spec);
    }
    const auto masked = fk::harness::perturb_mask(scene, ratio, seed);
    if (!out_path.empty()) {
      write_file(out_path, fk::toymm::scene_to_json(masked.scene).dump());
    }
    std::cout << "masked " << masked.sampled_cells.size() << " cells ("
              << masked.occluded_cells.size() << " occluded with closure)\n";
    return 0;
  }
  const auto mode = fk::harness::parse_hint_mode(mode_name);
  const std::vector<int> prompt = {fk::harness::Codebook::kQueryDescribe};
  const auto perturbed = fk::harness::perturb_hint(prompt, mode);
  std::cout << "prompt tokens:";
  for (int token : perturbed) std::cout << ' ' << token;
  std::cout << '\n';
  if (!out_path.empty()) {
    nlohmann::json j = perturbed;
    write_file(out_path, j.dump());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"faithkit: faithfulness instrumentation toolkit"};
  app.require_subcommand(1);

  // eval
  std::string manifest_path, judge_name = "rule", metric_list = "all";
  std::string eval_out = "report.txt", eval_format = "lines";
  std::string cache_dir;
  int workers = 4;
  auto* eval_cmd = app.add_subcommand("eval", "Score a transcript manifest");
  eval_cmd->add_option("--manifest", manifest_path, "Manifest path (JSONL)")
      ->required();
  eval_cmd->add_option("--judge", judge_name, "rule|remote");
  eval_cmd->add_option("--metrics", metric_list, "all or a comma list");
  eval_cmd->add_option("--out", eval_out, "Report output path");
  eval_cmd->add_option("--format", eval_format, "lines|csv");
  eval_cmd->add_option("--workers", workers, "Worker pool size");
  eval_cmd->add_option("--cache-dir", cache_dir, "Judge response cache dir");

  // ablate
  std::string plan_path, ablate_out = "ablation.txt", ablate_format = "lines";
  std::optional<std::uint64_t> ablate_seed;
  SageOverrides ablate_overrides;
  auto* ablate_cmd =
      app.add_subcommand("ablate", "Run stage ablations on the toy model");
  ablate_cmd->add_option("--plan", plan_path, "Ablation plan (JSON)");
  ablate_cmd->add_option("--seed", ablate_seed, "Base seed for model/scenes");
  ablate_cmd->add_option("--out", ablate_out, "Report output path");
  ablate_cmd->add_option("--format", ablate_format, "lines|csv");
  ablate_overrides.attach(ablate_cmd);

  // decode
  std::uint64_t model_seed = 3, scene_seed = 1;
  int diffs = 1, occupied = 6;
  bool use_sage = false;
  std::string trace_out = "trace.json", sage_trace_out;
  SageOverrides decode_overrides;
  auto* decode_cmd =
      app.add_subcommand("decode", "Decode one seeded scene and save a trace");
  decode_cmd->add_option("--seed", model_seed, "Model seed");
  decode_cmd->add_option("--scene-seed", scene_seed, "Scene seed");
  decode_cmd->add_option("--diffs", diffs, "Edits in the scene");
  decode_cmd->add_option("--occupied", occupied, "Occupied cells");
  decode_cmd->add_flag("--sage", use_sage, "Decode with the intervention on");
  decode_cmd->add_option("--trace-out", trace_out, "Trace output (JSON)");
  decode_cmd->add_option("--sage-trace-out", sage_trace_out,
                         "Columnar intervention trace output");
  decode_overrides.attach(decode_cmd);

  // probe
  std::string probe_trace, probe_name, probe_out = "probe.txt", trace_b;
  std::optional<int> probe_token;
  auto* probe_cmd =
      app.add_subcommand("probe", "Compute a probe over a saved trace");
  probe_cmd->add_option("--trace", probe_trace, "Trace path (JSON)")
      ->required();
  probe_cmd->add_option("--probe", probe_name,
                        "tam|alloc|residual|sublayer|neuron")
      ->required();
  probe_cmd->add_option("--out", probe_out, "Probe output path");
  probe_cmd->add_option("--token", probe_token, "Target token for tam");
  probe_cmd->add_option("--trace-b", trace_b, "Paired trace for residual");

  // perturb
  std::string perturb_mode, perturb_scene, perturb_out;
  double ratio = 0.5;
  std::uint64_t perturb_seed = 1;
  auto* perturb_cmd =
      app.add_subcommand("perturb", "Apply hint or mask perturbations");
  perturb_cmd
      ->add_option("--mode", perturb_mode, "hint-explicit|hint-implicit|mask")
      ->required();
  perturb_cmd->add_option("--ratio", ratio, "Mask ratio");
  perturb_cmd->add_option("--seed", perturb_seed, "Mask sampling seed");
  perturb_cmd->add_option("--scene", perturb_scene, "Scene path (JSON)");
  perturb_cmd->add_option("--out", perturb_out, "Output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (eval_cmd->parsed()) {
      return run_eval(manifest_path, judge_name, metric_list, eval_out,
                      eval_format, workers, cache_dir);
    }
    if (ablate_cmd->parsed()) {
      return run_ablate(plan_path, ablate_seed, ablate_out, ablate_format,
                        ablate_overrides);
    }
    if (decode_cmd->parsed()) {
      return run_decode_cmd(model_seed, scene_seed, diffs, occupied, use_sage,
                            decode_overrides, trace_out, sage_trace_out);
    }
    if (probe_cmd->parsed()) {
      return run_probe(probe_trace, probe_name, probe_out, probe_token,
                       trace_b);
    }
    if (perturb_cmd->parsed()) {
      return run_perturb(perturb_mode, ratio, perturb_seed, perturb_scene,
                         perturb_out);
    }
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}

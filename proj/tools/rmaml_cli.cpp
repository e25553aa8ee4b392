#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "rmaml/experiment.hpp"
#include "rmaml/intrinsic_dim.hpp"

using namespace rmaml;
namespace fs = std::filesystem;

namespace {

/// Loads and validates a plan, printing every issue; nullopt on failure.
std::optional<ExperimentPlan> load_plan(const fs::path& config) {
  const ConfigResult res = validate_config(config);
  for (const auto& e : res.errors) std::cerr << config.string() << ": " << e.path << ": " << e.message << "\n";
  if (!res.ok()) return std::nullopt;
  return res.plan;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

ModelSpec model_for(const ExperimentPlan& plan, const Dataset& ds) {
  ModelSpec spec = plan.model;
  if (spec.input_shape.empty()) spec.input_shape = ds.sample_shape();
  spec.ways = plan.trainer.task.ways;
  spec.validate();
  return spec;
}

int cmd_config_validate(const fs::path& config) {
  const ConfigResult res = validate_config(config);
  if (!res.ok()) {
    for (const auto& e : res.errors) std::cerr << e.path << ": " << e.message << "\n";
    return 1;
  }
  std::cout << plan_to_yaml(res.plan);
  return 0;
}

int cmd_train(const fs::path& config, std::uint64_t seed, const fs::path& out, bool quiet) {
  const auto plan = load_plan(config);
  if (!plan) return 1;
  const Dataset ds = load_dataset(plan->dataset);
  const ModelSpec spec = model_for(*plan, ds);
  TrainerConfig cfg = plan->trainer;
  cfg.seed = seed;
  fs::create_directories(out);
  TrainOptions opts;
  opts.checkpoint_dir = out;
  if (!quiet) {
    opts.on_step = [&](std::size_t epoch, std::size_t step, double loss) {
      if ((step + 1) % 10 == 0) std::fprintf(stderr, "epoch %zu step %zu meta_loss %.6f\n", epoch, step + 1, loss);
    };
  }
  const TrainResult res = train(cfg, spec, ds, opts);
  save_params(out / "model", res.params);
  std::vector<std::string> names;
  for (const auto& a : cfg.eval_attacks) names.push_back(attack_column(a));
  std::string csv = metrics_csv_header(names) + "\n";
  std::string jsonl;
  for (const auto& m : res.metrics) {
    csv += metrics_csv_row(m) + "\n";
    jsonl += metrics_json_line(m) + "\n";
  }
  write_text(out / "metrics.csv", csv);
  write_text(out / "metrics.jsonl", jsonl);
  std::cout << "trained " << res.meta_steps << " meta-steps; checkpoint " << (out / "model").string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& config, const fs::path& model, std::size_t episodes, std::uint64_t seed,
             const fs::path& out) {
  const auto plan = load_plan(config);
  if (!plan) return 1;
  const Dataset ds = load_dataset(plan->dataset);
  const ModelSpec spec = model_for(*plan, ds);
  const ParamSet params = load_params(model);
  const std::size_t n = episodes > 0 ? episodes : plan->eval.episodes;
  const TrainerConfig& t = plan->trainer;
  const EvalResult ev = meta_test(spec, params, ds, t.task, t.test_inner_steps, t.inner_lr, plan->eval.attacks, n, seed);
  std::printf("episodes %zu\nclean %.4f +- %.4f\n", ev.episodes, ev.clean_mean, ev.clean_ci95);
  for (const auto& r : ev.robust) std::printf("robust_%s %.4f +- %.4f\n", r.name.c_str(), r.mean, r.ci95);
  if (!out.empty()) {
    std::string csv = "episode,clean";
    for (const auto& r : ev.robust) csv += ",robust_" + r.name;
    csv += "\n";
    for (std::size_t e = 0; e < ev.episodes; ++e) {
      csv += std::to_string(e) + "," + std::to_string(ev.clean_per_episode[e]);
      for (const auto& r : ev.robust) csv += "," + std::to_string(r.per_episode[e]);
      csv += "\n";
    }
    write_text(out, csv);
  }
  return 0;
}

int cmd_id_probe(const fs::path& config, const fs::path& model, std::uint64_t seed, const fs::path& out,
                 const fs::path& features) {
  const auto plan = load_plan(config);
  if (!plan) return 1;
  const Dataset ds = load_dataset(plan->dataset);
  const ModelSpec spec = model_for(*plan, ds);
  const ParamSet params = load_params(model);
  const EvalSettings& ev = plan->eval;
  Rng clean_rng = make_stream(seed, 101);
  Rng noise_rng = make_stream(seed, 102);
  const FeatureMatrix clean = collect_clean_features(spec, params, ds, ev.id_samples, clean_rng);
  const FeatureMatrix noise = collect_noise_features(spec, params, ds, ev.id_attack, ev.id_samples, noise_rng, ev.id_space);
  std::string csv = "source,d_hat,target,rows,cols,degenerate\n";
  for (const FeatureMatrix* f : {&clean, &noise}) {
    const IdEstimate est = estimate_id(*f, ev.id_target);
    std::printf("%s d_hat %zu%s\n", to_string(f->source).c_str(), est.d_hat, est.degenerate ? " (degenerate)" : "");
    csv += to_string(f->source) + "," + std::to_string(est.d_hat) + "," + std::to_string(est.target) + "," +
           std::to_string(f->rows) + "," + std::to_string(f->cols) + "," + (est.degenerate ? "1" : "0") + "\n";
  }
  if (!out.empty()) write_text(out, csv);
  if (!features.empty()) {
    save_features(features.string() + "_clean", clean);
    save_features(features.string() + "_noise", noise);
  }
  return 0;
}

int cmd_plan_run(const fs::path& config, std::size_t workers, const std::string& output) {
  auto plan = load_plan(config);
  if (!plan) return 1;
  if (workers > 0) plan->workers = workers;
  if (!output.empty()) plan->output_dir = output;
  const RunReport rep = run_plan(*plan);
  std::printf("cells %zu trained %zu skipped %zu failed %zu meta-steps %zu\n", rep.cells, rep.trained, rep.skipped,
              rep.failed, rep.meta_steps);
  for (const auto& [id, err] : rep.failures) std::fprintf(stderr, "failed %s: %s\n", id.c_str(), err.c_str());
  return rep.failed == 0 ? 0 : 1;
}

int cmd_plan_emit(const std::vector<std::string>& dirs, const std::string& figure, const fs::path& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  try {
    emit_plot_data(paths, figure, out);
  } catch (const MissingCellsError& e) {
    std::cerr << "missing cells:\n";
    for (const auto& c : e.cells()) std::cerr << "  " << c << "\n";
    return 1;
  }
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust few-shot meta-learning laboratory"};
  app.require_subcommand(1);

  std::string config;
  std::string model;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t episodes = 0;
  bool quiet = false;
  int rc = 0;

  auto* train = app.add_subcommand("train", "Meta-train one model from a plan's trainer settings");
  train->add_option("-c,--config", config, "Plan YAML")->required()->check(CLI::ExistingFile);
  train->add_option("-s,--seed", seed, "Training seed");
  train->add_option("-o,--out", out, "Output directory (model, metrics, epoch checkpoints)")->required();
  train->add_flag("-q,--quiet", quiet, "No per-step progress");
  train->callback([&] { rc = cmd_train(config, seed, out, quiet); });

  auto* eval = app.add_subcommand("eval", "Meta-test a checkpoint on test-split episodes");
  eval->add_option("-c,--config", config, "Plan YAML")->required()->check(CLI::ExistingFile);
  eval->add_option("-m,--model", model, "Checkpoint stem (without .bin/.json)")->required();
  eval->add_option("-n,--episodes", episodes, "Episodes (default: evaluation.episodes)");
  eval->add_option("-s,--seed", seed, "Episode seed");
  eval->add_option("-o,--out", out, "Per-episode CSV");
  eval->callback([&] { rc = cmd_eval(config, model, episodes, seed, out); });

  std::string features;
  auto* probe = app.add_subcommand("id-probe", "Intrinsic dimension of clean features and adversarial noise");
  probe->add_option("-c,--config", config, "Plan YAML")->required()->check(CLI::ExistingFile);
  probe->add_option("-m,--model", model, "Checkpoint stem")->required();
  probe->add_option("-s,--seed", seed, "Sampling seed");
  probe->add_option("-o,--out", out, "ID table CSV");
  probe->add_option("--save-features", features, "Stem for the raw feature matrices");
  probe->callback([&] { rc = cmd_id_probe(config, model, seed, out, features); });

  auto* plan = app.add_subcommand("plan", "Run sweeps and emit plot data");
  plan->require_subcommand(1);
  std::size_t workers = 0;
  std::string output_dir;
  auto* run = plan->add_subcommand("run", "Run every incomplete cell of a plan");
  run->add_option("-c,--config", config, "Plan YAML")->required()->check(CLI::ExistingFile);
  run->add_option("-j,--workers", workers, "Parallel cells (default: plan workers)");
  run->add_option("-o,--output", output_dir, "Override output_dir");
  run->callback([&] { rc = cmd_plan_run(config, workers, output_dir); });

  std::vector<std::string> dirs;
  std::string figure;
  auto* emit = plan->add_subcommand("emit", "Write tidy plot-data CSV for a figure");
  emit->add_option("-d,--dir", dirs, "Plan output directory (repeatable)")->required();
  emit->add_option("-f,--figure", figure, "shots | tradeoff | steps | id")
      ->required()
      ->check(CLI::IsMember({"shots", "tradeoff", "steps", "id"}));
  emit->add_option("-o,--out", out, "Output CSV")->required();
  emit->callback([&] { rc = cmd_plan_emit(dirs, figure, out); });

  auto* cfg = app.add_subcommand("config", "Configuration utilities");
  cfg->require_subcommand(1);
  auto* validate = cfg->add_subcommand("validate", "Check a plan and print its fully-defaulted form");
  validate->add_option("file", config, "Plan YAML")->required();
  validate->callback([&] { rc = cmd_config_validate(config); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}

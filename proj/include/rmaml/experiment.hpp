#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rmaml/attacks.hpp"
#include "rmaml/data.hpp"
#include "rmaml/intrinsic_dim.hpp"
#include "rmaml/model.hpp"
#include "rmaml/trainer.hpp"

namespace rmaml {

/// Where the data comes from. `style` only affects the default query count.
struct DatasetRef {
  std::string kind = "synthetic";  // synthetic | files
  std::filesystem::path path;      // IDX directory or PGM class tree when kind == files
  std::string style = "standard";  // standard | omniglot
  SynthSpec synth;
  std::size_t train_classes = 0;   // 0 = two thirds of the classes
};

Dataset load_dataset(const DatasetRef& ref);

struct EvalSettings {
  std::size_t episodes = 2000;
  std::vector<AttackConfig> attacks{AttackConfig::pgd(2.0, 10)};
  std::size_t id_samples = 1000;
  double id_target = 0.9;
  /// Attack used to produce the noise matrix of the intrinsic-dimension probe.
  AttackConfig id_attack = AttackConfig::fgsm(2.0);
  NoiseSpace id_space = NoiseSpace::Feature;
};

enum class SweepAxis { None, TrainShots, WeightRatio, InnerSteps, Epsilon };

std::string to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(const std::string& text);

struct SweepValue {
  double value = 0.0;                    // train_shots, inner_steps or epsilon
  std::pair<double, double> ratio{1, 1};  // wc, wa for the weight-ratio axis
  /// "2", "0.5" or, on the weight-ratio axis, "1:0.2".
  std::string label(SweepAxis axis) const;
};

struct ExperimentPlan {
  std::string id = "experiment";
  DatasetRef dataset;
  ModelSpec model;
  /// Preset name as written in the config (may be an alias such as its-maml-1shot).
  std::string preset = "maml";
  TrainerConfig trainer = make_trainer_config("maml");
  EvalSettings eval;
  SweepAxis axis = SweepAxis::None;
  std::vector<SweepValue> sweep;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "runs/experiment";
  std::size_t workers = 1;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct ConfigIssue {
  std::string path;
  std::string message;
};

struct ConfigResult {
  ExperimentPlan plan;
  std::vector<ConfigIssue> errors;
  bool ok() const { return errors.empty(); }
};

/// Parses a YAML plan with a strict schema: unknown keys and wrong types are errors
/// reported with their dotted path. Missing keys take their defaults.
ConfigResult parse_config_text(const std::string& yaml_text);
ConfigResult validate_config(const std::filesystem::path& file);

/// Fully defaulted YAML echo of a plan; parsing it back yields the same plan.
std::string plan_to_yaml(const ExperimentPlan& plan);

/// Default query count per class for a dataset style and meta-test shot count.
std::size_t default_queries(const std::string& style, std::size_t test_shots);

/// One (sweep value, seed) job of a plan.
struct Cell {
  std::string id;
  SweepValue value;
  std::uint64_t seed = 0;
  TrainerConfig trainer;
  EvalSettings eval;
};

std::vector<Cell> expand_cells(const ExperimentPlan& plan);

/// Canonical JSON of everything that determines a cell's results.
std::string cell_fingerprint(const ExperimentPlan& plan, const Cell& cell);
std::uint64_t fnv1a64(const std::string& text);
extern const char* const kCodeVersion;

struct RunReport {
  std::size_t cells = 0;
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::size_t meta_steps = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // cell id, error text
};

/**
 * Runs every cell not already completed with the same fingerprint hash.
 *
 * Layout under plan.output_dir:
 *   plan.yaml                 normalized config echo
 *   manifest.json             {"code_version", "cells": {id: {"hash","status","error"}}}
 *   cells/<id>/model.{bin,json}   final checkpoint
 *   cells/<id>/metrics.csv, metrics.jsonl   per-epoch training records
 *   cells/<id>/episodes.csv   per-episode meta-test accuracies
 *   cells/<id>/id.csv         intrinsic-dimension table
 *   summary.json              per sweep value: means and 95% CIs over seeds
 */
RunReport run_plan(const ExperimentPlan& plan);

/// Recomputes summary.json from the cell CSVs of a plan directory.
void write_summary(const std::filesystem::path& dir);

class MissingCellsError : public std::runtime_error {
 public:
  explicit MissingCellsError(std::vector<std::string> cells);
  const std::vector<std::string>& cells() const noexcept { return cells_; }

 private:
  std::vector<std::string> cells_;
};

/**
 * Tidy plot data for one figure, written to `out` (CSV):
 *   shots, steps, id:  x,series,mean,ci_low,ci_high,n
 *   tradeoff:          method,setting,clean_mean,clean_ci_low,clean_ci_high,
 *                      robust_mean,robust_ci_low,robust_ci_high
 * `dirs` are plan directories; tradeoff accepts several (one per method).
 */
void emit_plot_data(const std::vector<std::filesystem::path>& dirs, const std::string& figure,
                    const std::filesystem::path& out);

}  // namespace rmaml

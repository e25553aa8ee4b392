#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmaml/attacks.hpp"
#include "rmaml/data.hpp"
#include "rmaml/model.hpp"

namespace rmaml {

enum class Variant { Clean, Adversarial };

struct QueryTerm {
  Variant variant = Variant::Clean;
  double weight = 1.0;
};

/// One fine-tune -> meta-loss route: which support set the inner loop adapts on, and
/// which weighted query losses the adapted model contributes.
struct PathwaySpec {
  Variant support = Variant::Clean;
  std::vector<QueryTerm> query_terms;

  void validate() const;
};

/// Pathway tables of the named methods:
///   maml      {clean -> [clean 1]}
///   aq        {clean -> [adv 1]}
///   adml      {adv -> [clean 1]}, {clean -> [adv 1]}
///   rmaml     {clean -> [clean wc, adv wa]}
///   its-maml  same as rmaml; differs only in training with more support shots
std::vector<PathwaySpec> preset_pathways(const std::string& preset, double wc = 1.0, double wa = 1.0);
bool is_known_preset(const std::string& preset);

struct TrainerConfig {
  std::string name = "maml";
  std::vector<PathwaySpec> pathways = preset_pathways("maml");
  double wc = 1.0;
  double wa = 1.0;
  TaskSpec task;
  double inner_lr = 0.01;
  double outer_lr = 0.001;
  std::size_t inner_steps = 5;
  std::size_t test_inner_steps = 10;
  AttackConfig train_attack = AttackConfig::fgsm(2.0);
  bool second_order = true;
  std::size_t epochs = 12;
  std::size_t steps_per_epoch = 100;
  std::uint64_t seed = 0;
  /// Per-epoch evaluation on the test split (0 disables it).
  std::size_t eval_episodes = 0;
  std::vector<AttackConfig> eval_attacks;

  void validate() const;
};

/// Preset name plus weights expanded into a full config with default hyperparameters.
TrainerConfig make_trainer_config(const std::string& preset, double wc = 1.0, double wa = 1.0);

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string trainer;
  std::size_t train_shots = 0;
  double wc = 0.0;
  double wa = 0.0;
  double clean_acc = 0.0;
  std::vector<std::pair<std::string, double>> robust_acc;  // attack name -> accuracy
  double meta_loss = 0.0;
  double wall_clock_s = 0.0;
};

/// Everything except wall-clock time.
bool same_results(const MetricsRecord& a, const MetricsRecord& b);

std::string metrics_csv_header(const std::vector<std::string>& attack_names);
std::string metrics_csv_row(const MetricsRecord& m);
std::string metrics_json_line(const MetricsRecord& m);

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, std::size_t step, const std::string& what);
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t epoch_;
  std::size_t step_;
};

/**
 * M plain gradient steps on the support loss starting from `params`.
 *
 * With `track`, `params` must be tracked and the result stays differentiable with respect
 * to them; `create_graph` additionally keeps second-order terms (off = first-order MAML).
 * Without `track` every step runs on detached values.
 */
ParamSet inner_finetune(const ModelSpec& spec, const ParamSet& params, const Tensor& support_x,
                        std::span<const int> support_y, double inner_lr, std::size_t steps, bool track,
                        bool create_graph = true);

/// Same loop for an arbitrary support loss of the parameters.
using SupportLoss = std::function<Tensor(const ParamSet&)>;
ParamSet inner_finetune(const SupportLoss& support_loss, const ParamSet& params, double inner_lr, std::size_t steps,
                        bool track, bool create_graph = true);

struct MetaStepResult {
  ParamSet params;
  double meta_loss = 0.0;
  std::size_t finetunes = 0;
};

/// One outer update on `episodes` (the T tasks of a meta-batch). Adversarial support sets are
/// generated against the current meta-parameters, adversarial query sets against each adapted
/// model; neither carries gradient back to the parameters.
MetaStepResult meta_step(const TrainerConfig& cfg, const ModelSpec& spec, const ParamSet& params,
                         std::span<const Episode> episodes, Rng& attack_rng);

struct AttackSummary {
  std::string name;
  double mean = 0.0;
  double ci95 = 0.0;
  std::vector<double> per_episode;
};

struct EvalResult {
  std::size_t episodes = 0;
  double clean_mean = 0.0;
  double clean_ci95 = 0.0;
  std::vector<double> clean_per_episode;
  std::vector<AttackSummary> robust;
};

/// Column name for an attack config in metric tables.
std::string attack_column(const AttackConfig& cfg);

/// For each of `episodes` test-split tasks: fine-tune `steps` times on the clean test_shots
/// support set without graph tracking, then score clean and attacked query accuracy.
/// Episode e draws from make_stream(seed, e).
EvalResult meta_test(const ModelSpec& spec, const ParamSet& params, const Dataset& ds, const TaskSpec& task,
                     std::size_t steps, double inner_lr, std::span<const AttackConfig> attacks, std::size_t episodes,
                     std::uint64_t seed);

struct TrainOptions {
  /// Checkpoint stem prefix per epoch ("<dir>/epoch_<n>"); empty disables checkpoints.
  std::filesystem::path checkpoint_dir;
  /// Called after each meta-step with (epoch, step, meta_loss).
  std::function<void(std::size_t, std::size_t, double)> on_step;
  /// Starting point; defaults to init_params(spec, cfg.seed).
  const ParamSet* initial = nullptr;
};

struct TrainResult {
  ParamSet params;
  std::vector<MetricsRecord> metrics;
  std::size_t meta_steps = 0;
};

TrainResult train(const TrainerConfig& cfg, const ModelSpec& spec, const Dataset& ds, const TrainOptions& options = {});

/// Mean and 1.96 * standard error.
std::pair<double, double> mean_ci95(std::span<const double> values);

}  // namespace rmaml

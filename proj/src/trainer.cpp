#include "rmaml/trainer.hpp"

#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "rmaml/graph.hpp"
#include "rmaml/ops.hpp"

namespace rmaml {

void PathwaySpec::validate() const {
  if (query_terms.empty()) throw std::invalid_argument("pathway: at least one query term is required");
  for (const auto& t : query_terms) {
    if (!(t.weight >= 0.0) || !std::isfinite(t.weight)) throw std::invalid_argument("pathway: weights must be >= 0");
  }
}

bool is_known_preset(const std::string& preset) {
  return preset == "maml" || preset == "aq" || preset == "adml" || preset == "rmaml" || preset == "its-maml";
}

std::vector<PathwaySpec> preset_pathways(const std::string& preset, double wc, double wa) {
  using V = Variant;
  if (preset == "maml") return {{V::Clean, {{V::Clean, 1.0}}}};
  if (preset == "aq") return {{V::Clean, {{V::Adversarial, 1.0}}}};
  if (preset == "adml") return {{V::Adversarial, {{V::Clean, 1.0}}}, {V::Clean, {{V::Adversarial, 1.0}}}};
  if (preset == "rmaml" || preset == "its-maml") return {{V::Clean, {{V::Clean, wc}, {V::Adversarial, wa}}}};
  throw std::invalid_argument("unknown trainer preset '" + preset + "'");
}

void TrainerConfig::validate() const {
  if (pathways.empty()) throw std::invalid_argument("trainer: no pathways");
  for (const auto& p : pathways) p.validate();
  task.validate();
  if (!(inner_lr > 0.0)) throw std::invalid_argument("trainer: inner_lr must be > 0");
  if (!(outer_lr > 0.0)) throw std::invalid_argument("trainer: outer_lr must be > 0");
  train_attack.validate();
  for (const auto& a : eval_attacks) a.validate();
}

TrainerConfig make_trainer_config(const std::string& preset, double wc, double wa) {
  TrainerConfig cfg;
  cfg.name = preset;
  cfg.wc = wc;
  cfg.wa = wa;
  cfg.pathways = preset_pathways(preset, wc, wa);
  return cfg;
}

bool same_results(const MetricsRecord& a, const MetricsRecord& b) {
  auto same = [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); };
  if (a.epoch != b.epoch || a.trainer != b.trainer || a.train_shots != b.train_shots) return false;
  if (!same(a.wc, b.wc) || !same(a.wa, b.wa) || !same(a.clean_acc, b.clean_acc) || !same(a.meta_loss, b.meta_loss)) {
    return false;
  }
  if (a.robust_acc.size() != b.robust_acc.size()) return false;
  for (std::size_t i = 0; i < a.robust_acc.size(); ++i) {
    if (a.robust_acc[i].first != b.robust_acc[i].first || !same(a.robust_acc[i].second, b.robust_acc[i].second)) {
      return false;
    }
  }
  return true;
}

namespace {
std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
}  // namespace

std::string metrics_csv_header(const std::vector<std::string>& attack_names) {
  std::string out = "epoch,trainer,train_shots,wc,wa,clean_acc";
  for (const auto& n : attack_names) out += ",robust_" + n;
  return out + ",meta_loss,wall_clock_s";
}

std::string metrics_csv_row(const MetricsRecord& m) {
  std::string out = std::to_string(m.epoch) + "," + m.trainer + "," + std::to_string(m.train_shots) + "," + num(m.wc) +
                    "," + num(m.wa) + "," + num(m.clean_acc);
  for (const auto& [name, acc] : m.robust_acc) out += "," + num(acc);
  return out + "," + num(m.meta_loss) + "," + num(m.wall_clock_s);
}

std::string metrics_json_line(const MetricsRecord& m) {
  nlohmann::json j{{"epoch", m.epoch},         {"trainer", m.trainer},   {"train_shots", m.train_shots},
                   {"wc", m.wc},               {"wa", m.wa},             {"clean_acc", m.clean_acc},
                   {"meta_loss", m.meta_loss}, {"wall_clock_s", m.wall_clock_s}};
  j["robust_acc"] = nlohmann::json::object();
  for (const auto& [name, acc] : m.robust_acc) j["robust_acc"][name] = acc;
  return j.dump();
}

TrainingError::TrainingError(std::size_t epoch, std::size_t step, const std::string& what)
    : std::runtime_error("epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " + what),
      epoch_(epoch),
      step_(step) {}

ParamSet inner_finetune(const SupportLoss& support_loss, const ParamSet& params, double inner_lr, std::size_t steps,
                        bool track, bool create_graph) {
  if (steps == 0) return params;
  if (track) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params.value(i).tracked()) throw GradError("inner_finetune: parameter '" + params[i].name + "' is not tracked");
    }
    GradModeGuard on(true);
    ParamSet current = params;
    for (std::size_t m = 0; m < steps; ++m) {
      const auto values = current.values();
      const auto grads = grad(support_loss(current), values, create_graph);
      std::vector<Tensor> next;
      next.reserve(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) next.push_back(sub(values[i], scale(grads[i], inner_lr)));
      current = current.with_values(next);
    }
    return current;
  }

  ParamSet current = params.detached();
  for (std::size_t m = 0; m < steps; ++m) {
    GradModeGuard on(true);
    auto graph = Graph::create();
    const ParamSet leaves = current.tracked(*graph);
    const auto grads = grad(support_loss(leaves), leaves.values());
    NoGradGuard off;
    std::vector<Tensor> next;
    next.reserve(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) next.push_back(sub(current.value(i), scale(grads[i], inner_lr)));
    current = current.with_values(next);
  }
  return current;
}

ParamSet inner_finetune(const ModelSpec& spec, const ParamSet& params, const Tensor& support_x,
                        std::span<const int> support_y, double inner_lr, std::size_t steps, bool track,
                        bool create_graph) {
  const Tensor x = track ? support_x : support_x.detach();
  const std::vector<int> y(support_y.begin(), support_y.end());
  const SupportLoss loss = [&spec, &x, &y](const ParamSet& p) {
    return softmax_cross_entropy(forward(spec, p, x), y);
  };
  return inner_finetune(loss, params, inner_lr, steps, track, create_graph);
}

MetaStepResult meta_step(const TrainerConfig& cfg, const ModelSpec& spec, const ParamSet& params,
                         std::span<const Episode> episodes, Rng& attack_rng) {
  if (episodes.empty()) throw std::invalid_argument("meta_step: no tasks");
  const std::size_t expected_support = cfg.task.ways * cfg.task.train_shots;
  GradModeGuard on(true);
  auto graph = Graph::create();
  const ParamSet base = params.detached();
  const ParamSet theta = base.tracked(*graph);

  MetaStepResult result;
  Tensor total;
  bool have_total = false;
  for (const auto& ep : episodes) {
    if (ep.support_y.size() != expected_support) {
      throw std::logic_error("meta_step: support set has " + std::to_string(ep.support_y.size()) +
                             " samples, expected ways x train_shots = " + std::to_string(expected_support));
    }
    for (const auto& pathway : cfg.pathways) {
      Tensor support_x = ep.support_x;
      if (pathway.support == Variant::Adversarial) {
        support_x = run_attack(spec, base, ep.support_x, ep.support_y, cfg.train_attack, &attack_rng).x_adv;
      }
      const ParamSet adapted = inner_finetune(spec, theta, support_x, ep.support_y, cfg.inner_lr, cfg.inner_steps, true,
                                              cfg.second_order);
      ++result.finetunes;
      const ParamSet frozen = adapted.detached();
      for (const auto& term : pathway.query_terms) {
        Tensor query_x = ep.query_x;
        if (term.variant == Variant::Adversarial) {
          query_x = run_attack(spec, frozen, ep.query_x, ep.query_y, cfg.train_attack, &attack_rng).x_adv;
        }
        const Tensor loss = softmax_cross_entropy(forward(spec, adapted, query_x), ep.query_y);
        const Tensor contribution = scale(loss, term.weight);
        total = have_total ? add(total, contribution) : contribution;
        have_total = true;
      }
    }
  }
  const Tensor meta_loss = scale(total, 1.0 / static_cast<double>(episodes.size()));
  result.meta_loss = meta_loss.item();

  const auto grads = grad(meta_loss, theta.values());
  NoGradGuard off;
  std::vector<Tensor> next;
  next.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) next.push_back(sub(base.value(i), scale(grads[i], cfg.outer_lr)));
  result.params = base.with_values(next);
  return result;
}

std::pair<double, double> mean_ci95(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double total = 0.0;
  for (double v : values) total += v;
  const double mean = total / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return {mean, 1.96 * sd / std::sqrt(static_cast<double>(values.size()))};
}

std::string attack_column(const AttackConfig& cfg) { return to_string(cfg.family); }

EvalResult meta_test(const ModelSpec& spec, const ParamSet& params, const Dataset& ds, const TaskSpec& task,
                     std::size_t steps, double inner_lr, std::span<const AttackConfig> attacks, std::size_t episodes,
                     std::uint64_t seed) {
  task.validate();
  const std::size_t expected_support = task.ways * task.test_shots;
  const ParamSet meta = params.detached();
  EvalResult out;
  out.episodes = episodes;
  out.robust.resize(attacks.size());
  for (std::size_t a = 0; a < attacks.size(); ++a) out.robust[a].name = attack_column(attacks[a]);

  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng = make_stream(seed, e);
    const Episode ep = sample_episode(ds, task, Phase::MetaTest, rng);
    if (ep.support_y.size() != expected_support) {
      throw std::logic_error("meta_test: support set has " + std::to_string(ep.support_y.size()) +
                             " samples, expected ways x test_shots = " + std::to_string(expected_support));
    }
    const ParamSet adapted = inner_finetune(spec, meta, ep.support_x, ep.support_y, inner_lr, steps, false);
    {
      NoGradGuard off;
      out.clean_per_episode.push_back(accuracy(forward(spec, adapted, ep.query_x), ep.query_y));
    }
    for (std::size_t a = 0; a < attacks.size(); ++a) {
      out.robust[a].per_episode.push_back(robust_accuracy(spec, adapted, ep, attacks[a], &rng));
    }
  }
  std::tie(out.clean_mean, out.clean_ci95) = mean_ci95(out.clean_per_episode);
  for (auto& r : out.robust) std::tie(r.mean, r.ci95) = mean_ci95(r.per_episode);
  return out;
}

namespace {
bool all_finite(const ParamSet& p) {
  for (const auto& e : p) {
    for (double v : e.value.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}
}  // namespace

TrainResult train(const TrainerConfig& cfg, const ModelSpec& spec, const Dataset& ds, const TrainOptions& options) {
  cfg.validate();
  spec.validate();
  if (spec.ways != cfg.task.ways) throw std::invalid_argument("train: model ways differ from task ways");

  Rng episode_rng = make_stream(cfg.seed, 1);
  Rng attack_rng = make_stream(cfg.seed, 2);
  // Fixed evaluation tasks so per-epoch numbers are comparable.
  const std::uint64_t eval_seed = cfg.seed ^ 0x9e3779b97f4a7c15ull;

  TrainResult result;
  result.params = options.initial ? *options.initial : init_params(spec, cfg.seed);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (std::size_t step = 1; step <= cfg.steps_per_epoch; ++step) {
      std::vector<Episode> batch;
      batch.reserve(cfg.task.tasks);
      for (std::size_t t = 0; t < cfg.task.tasks; ++t) batch.push_back(sample_episode(ds, cfg.task, Phase::MetaTrain, episode_rng));
      auto stepped = meta_step(cfg, spec, result.params, batch, attack_rng);
      if (!std::isfinite(stepped.meta_loss)) throw TrainingError(epoch, step, "non-finite meta-loss");
      if (!all_finite(stepped.params)) throw TrainingError(epoch, step, "non-finite parameters after meta-update");
      result.params = std::move(stepped.params);
      loss_sum += stepped.meta_loss;
      ++result.meta_steps;
      if (options.on_step) options.on_step(epoch, step, stepped.meta_loss);
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.trainer = cfg.name;
    rec.train_shots = cfg.task.train_shots;
    rec.wc = cfg.wc;
    rec.wa = cfg.wa;
    rec.meta_loss = cfg.steps_per_epoch ? loss_sum / static_cast<double>(cfg.steps_per_epoch) : 0.0;
    if (cfg.eval_episodes > 0) {
      const auto ev = meta_test(spec, result.params, ds, cfg.task, cfg.test_inner_steps, cfg.inner_lr, cfg.eval_attacks,
                                cfg.eval_episodes, eval_seed);
      rec.clean_acc = ev.clean_mean;
      for (const auto& r : ev.robust) rec.robust_acc.emplace_back(r.name, r.mean);
    }
    rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.metrics.push_back(rec);

    if (!options.checkpoint_dir.empty()) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "epoch_%03zu", epoch);
      save_params(options.checkpoint_dir / stem, result.params);
    }
  }
  return result;
}

}  // namespace rmaml

#include "rmaml/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rmaml/graph.hpp"
#include "rmaml/ops.hpp"

namespace rmaml {

std::string to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::Fgsm:
      return "fgsm";
    case AttackFamily::Pgd:
      return "pgd";
    case AttackFamily::CwMarginPgd:
      return "cw_margin_pgd";
  }
  return "?";
}

AttackFamily parse_attack_family(const std::string& text) {
  if (text == "fgsm") return AttackFamily::Fgsm;
  if (text == "pgd") return AttackFamily::Pgd;
  if (text == "cw_margin_pgd" || text == "cw") return AttackFamily::CwMarginPgd;
  throw std::invalid_argument("unknown attack family '" + text + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
  if (!std::isfinite(step_size)) throw std::invalid_argument("attack: step_size must be finite");
  if (family == AttackFamily::Fgsm && steps != 1) throw std::invalid_argument("attack: fgsm takes exactly one step");
}

AttackConfig AttackConfig::normalized() const {
  AttackConfig out = *this;
  if (out.family == AttackFamily::Fgsm) {
    out.steps = 1;
    out.step_size = out.epsilon;
    out.random_start = false;
  }
  if (out.family == AttackFamily::CwMarginPgd) out.loss = AttackLoss::Margin;
  out.validate();
  return out;
}

AttackConfig AttackConfig::fgsm(double epsilon) {
  AttackConfig cfg;
  cfg.family = AttackFamily::Fgsm;
  cfg.epsilon = epsilon;
  return cfg.normalized();
}

AttackConfig AttackConfig::pgd(double epsilon, std::size_t steps) {
  AttackConfig cfg;
  cfg.family = AttackFamily::Pgd;
  cfg.epsilon = epsilon;
  cfg.steps = steps;
  cfg.random_start = true;
  return cfg.normalized();
}

AttackConfig AttackConfig::cw_margin(double epsilon, std::size_t steps) {
  AttackConfig cfg = pgd(epsilon, steps);
  cfg.family = AttackFamily::CwMarginPgd;
  return cfg.normalized();
}

namespace {

// Gradient of the loss to be ascended, with parameters held constant.
std::vector<double> input_gradient(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                                   std::span<const int> y, AttackLoss loss) {
  GradModeGuard on(true);
  auto graph = Graph::create();
  const Tensor input = graph->track(x);
  const Tensor logits = forward(spec, params, input);
  const Tensor objective =
      loss == AttackLoss::CrossEntropy ? softmax_cross_entropy(logits, y) : neg(margin_loss(logits, y, 0.0));
  const Tensor g = grad(objective, input);
  return {g.data().begin(), g.data().end()};
}

// One ascent step from `current`, projected onto [x - r, x + r] and then [0, 1].
std::vector<double> ascent_step(std::span<const double> clean, std::span<const double> current,
                                std::span<const double> gradient, double step, double radius) {
  std::vector<double> out(clean.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = gradient[i];
    const double s = static_cast<double>((g > 0.0) - (g < 0.0));
    const double moved = current[i] + step * s;
    out[i] = std::clamp(std::clamp(moved, clean[i] - radius, clean[i] + radius), 0.0, 1.0);
  }
  return out;
}

AdvBatch finish(const Tensor& x, std::vector<double> adv) {
  std::vector<double> delta(adv.size());
  const auto clean = x.data();
  for (std::size_t i = 0; i < adv.size(); ++i) delta[i] = adv[i] - clean[i];
  return AdvBatch{Tensor(x.shape(), std::move(adv)), Tensor(x.shape(), std::move(delta))};
}

AdvBatch projected_ascent(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
                          const AttackConfig& cfg, Rng* rng) {
  const ParamSet fixed = params.detached();
  const Tensor clean = x.detach();
  const double radius = cfg.radius();
  const auto base = clean.data();
  std::vector<double> current(base.begin(), base.end());
  if (cfg.random_start) {
    if (!rng) throw std::invalid_argument("attack: random_start requires a random stream");
    std::uniform_real_distribution<double> jitter(-radius, radius);
    for (std::size_t i = 0; i < current.size(); ++i) current[i] = std::clamp(base[i] + jitter(*rng), 0.0, 1.0);
  }
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const Tensor at(clean.shape(), current);
    const auto g = input_gradient(spec, fixed, at, y, cfg.loss);
    current = ascent_step(base, current, g, cfg.step(), radius);
  }
  return finish(clean, std::move(current));
}

}  // namespace

AdvBatch fgsm(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
              const AttackConfig& cfg) {
  if (cfg.family != AttackFamily::Fgsm) throw std::invalid_argument("fgsm: config family is " + to_string(cfg.family));
  return projected_ascent(spec, params, x, y, cfg.normalized(), nullptr);
}

AdvBatch pgd(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
             const AttackConfig& cfg, Rng* rng) {
  if (cfg.family != AttackFamily::Pgd) throw std::invalid_argument("pgd: config family is " + to_string(cfg.family));
  return projected_ascent(spec, params, x, y, cfg.normalized(), rng);
}

AdvBatch cw_margin_pgd(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
                       const AttackConfig& cfg, Rng* rng) {
  if (cfg.family != AttackFamily::CwMarginPgd) {
    throw std::invalid_argument("cw_margin_pgd: config family is " + to_string(cfg.family));
  }
  return projected_ascent(spec, params, x, y, cfg.normalized(), rng);
}

AdvBatch run_attack(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
                    const AttackConfig& cfg, Rng* rng) {
  switch (cfg.family) {
    case AttackFamily::Fgsm:
      return fgsm(spec, params, x, y, cfg);
    case AttackFamily::Pgd:
      return pgd(spec, params, x, y, cfg, rng);
    case AttackFamily::CwMarginPgd:
      return cw_margin_pgd(spec, params, x, y, cfg, rng);
  }
  throw std::invalid_argument("unknown attack family");
}

double robust_accuracy(const ModelSpec& spec, const ParamSet& params, const Episode& episode, const AttackConfig& cfg,
                       Rng* rng) {
  const AdvBatch adv = run_attack(spec, params, episode.query_x, episode.query_y, cfg, rng);
  NoGradGuard off;
  return accuracy(forward(spec, params.detached(), adv.x_adv), episode.query_y);
}

}  // namespace rmaml

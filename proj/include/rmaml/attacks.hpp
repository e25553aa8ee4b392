#pragma once

#include <span>
#include <string>

#include "rmaml/data.hpp"
#include "rmaml/model.hpp"

namespace rmaml {

enum class AttackFamily { Fgsm, Pgd, CwMarginPgd };
enum class AttackLoss { CrossEntropy, Margin };

std::string to_string(AttackFamily family);
AttackFamily parse_attack_family(const std::string& text);

/**
 * L-infinity attack settings. `epsilon` and `step_size` are in 0..255 pixel units and
 * are divided by 255 internally. A negative step_size means epsilon / 4.
 */
struct AttackConfig {
  AttackFamily family = AttackFamily::Fgsm;
  double epsilon = 2.0;
  std::size_t steps = 1;
  double step_size = -1.0;
  AttackLoss loss = AttackLoss::CrossEntropy;
  bool random_start = false;

  /// Applies the family's fixed settings (FGSM: one step of size epsilon, no random start;
  /// CW-style: margin loss) and checks ranges.
  AttackConfig normalized() const;
  void validate() const;
  double radius() const { return epsilon / 255.0; }
  double step() const { return (step_size < 0.0 ? epsilon / 4.0 : step_size) / 255.0; }

  static AttackConfig fgsm(double epsilon);
  /// Evaluation default: random start on, step epsilon / 4.
  static AttackConfig pgd(double epsilon, std::size_t steps = 10);
  static AttackConfig cw_margin(double epsilon, std::size_t steps = 10);
};

struct AdvBatch {
  Tensor x_adv;
  Tensor delta;  // x_adv - x
};

/// x_adv = clip01(x + eps * sign(grad_x loss)). Parameters are treated as constants.
AdvBatch fgsm(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
              const AttackConfig& cfg);

/// Projected sign-gradient ascent on the configured loss inside the eps-ball intersected
/// with [0,1]. `rng` is only consulted when random_start is set.
AdvBatch pgd(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
             const AttackConfig& cfg, Rng* rng = nullptr);

/// PGD on the margin max(z_y - max_{j != y} z_j, -kappa) with kappa = 0.
AdvBatch cw_margin_pgd(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
                       const AttackConfig& cfg, Rng* rng = nullptr);

/// Dispatch on cfg.family.
AdvBatch run_attack(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> y,
                    const AttackConfig& cfg, Rng* rng = nullptr);

/// Accuracy of `params` on the episode's attacked query set.
double robust_accuracy(const ModelSpec& spec, const ParamSet& params, const Episode& episode, const AttackConfig& cfg,
                       Rng* rng = nullptr);

}  // namespace rmaml

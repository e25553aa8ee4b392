#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rmaml/attacks.hpp"
#include "rmaml/data.hpp"
#include "rmaml/model.hpp"

namespace rmaml {

enum class FeatureSource { CleanFeatures, Noise };

std::string to_string(FeatureSource source);

/// Row-major samples x features.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  FeatureSource source = FeatureSource::CleanFeatures;

  static FeatureMatrix from_tensor(const Tensor& t, FeatureSource source);
  Tensor to_tensor() const;
  /// At least two rows and all entries finite.
  void validate() const;
};

struct IdEstimate {
  std::size_t d_hat = 1;
  double target = 0.9;
  /// Covariance eigenvalues (1/(n-1) normalisation), descending, clamped at zero.
  std::vector<double> spectrum;
  /// Set when the matrix has no variance at all; d_hat is then 1.
  bool degenerate = false;
};

/// Number of principal components whose cumulative share of the variance first reaches `target`.
IdEstimate estimate_id(const FeatureMatrix& features, double target = 0.9);

/// Same rule applied directly to a spectrum (any order; sorted internally).
std::size_t components_for_variance(std::vector<double> spectrum, double target);

/// Penultimate features of `count` test-split samples (all of them if fewer), drawn without
/// replacement from `rng`.
FeatureMatrix collect_clean_features(const ModelSpec& spec, const ParamSet& params, const Dataset& ds,
                                     std::size_t count, Rng& rng);

enum class NoiseSpace { Feature, Input };

/**
 * Adversarial noise of `count` test-split samples. The attack targets the model's own
 * predicted label. Feature mode returns f(x_adv) - f(x) in penultimate space; input mode
 * returns x_adv - x flattened.
 */
FeatureMatrix collect_noise_features(const ModelSpec& spec, const ParamSet& params, const Dataset& ds,
                                     const AttackConfig& attack, std::size_t count, Rng& rng,
                                     NoiseSpace space = NoiseSpace::Feature);

/// Uses the checkpoint tensor format with one tensor named "features".
void save_features(const std::filesystem::path& stem, const FeatureMatrix& features);
FeatureMatrix load_features(const std::filesystem::path& stem);

}  // namespace rmaml

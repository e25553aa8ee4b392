#include "rmaml/intrinsic_dim.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <json.hpp>
#include <stdexcept>

#include "rmaml/graph.hpp"
#include "rmaml/ops.hpp"

namespace rmaml {

std::string to_string(FeatureSource source) {
  return source == FeatureSource::CleanFeatures ? "clean_features" : "noise";
}

FeatureMatrix FeatureMatrix::from_tensor(const Tensor& t, FeatureSource source) {
  if (t.rank() != 2) throw ShapeError("feature matrix", t.shape(), {}, "expected [rows, cols]");
  return FeatureMatrix{t.dim(0), t.dim(1), {t.data().begin(), t.data().end()}, source};
}

Tensor FeatureMatrix::to_tensor() const { return Tensor({rows, cols}, values); }

void FeatureMatrix::validate() const {
  if (rows < 2) throw std::invalid_argument("feature matrix: need at least two rows");
  if (cols < 1 || values.size() != rows * cols) throw std::invalid_argument("feature matrix: inconsistent size");
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("feature matrix: non-finite entry");
  }
}

std::size_t components_for_variance(std::vector<double> spectrum, double target) {
  std::sort(spectrum.begin(), spectrum.end(), std::greater<>());
  double total = 0.0;
  for (double v : spectrum) total += std::max(v, 0.0);
  if (!(total > 0.0)) return 1;
  double running = 0.0;
  for (std::size_t k = 0; k < spectrum.size(); ++k) {
    running += std::max(spectrum[k], 0.0);
    if (running / total >= target) return k + 1;
  }
  return spectrum.size();
}

IdEstimate estimate_id(const FeatureMatrix& features, double target) {
  if (!(target > 0.0 && target < 1.0)) throw std::invalid_argument("estimate_id: target must lie in (0,1)");
  features.validate();
  const auto n = static_cast<Eigen::Index>(features.rows);
  const auto d = static_cast<Eigen::Index>(features.cols);
  Eigen::MatrixXd x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      features.values.data(), n, d);
  x.rowwise() -= x.colwise().mean();

  // Covariance and Gram matrix share their non-zero spectrum; decompose the smaller one.
  const Eigen::MatrixXd scatter = d <= n ? Eigen::MatrixXd(x.transpose() * x) : Eigen::MatrixXd(x * x.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(scatter / static_cast<double>(n - 1), Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw std::runtime_error("estimate_id: eigendecomposition failed");

  IdEstimate out;
  out.target = target;
  const auto& ev = solver.eigenvalues();
  out.spectrum.reserve(static_cast<std::size_t>(ev.size()));
  for (Eigen::Index i = ev.size(); i-- > 0;) out.spectrum.push_back(std::max(ev[i], 0.0));

  double total = 0.0;
  for (double v : out.spectrum) total += v;
  if (!(total > std::numeric_limits<double>::min())) {
    out.degenerate = true;
    out.d_hat = 1;
    return out;
  }
  const std::size_t cap = std::min(features.rows - 1, features.cols);
  out.d_hat = std::min(components_for_variance(out.spectrum, target), cap);
  return out;
}

namespace {

std::vector<std::size_t> draw_test_samples(const Dataset& ds, std::size_t count, Rng& rng) {
  auto pool = ds.split_indices(Split::Test);
  if (pool.empty()) throw DataError(DataError::Kind::InsufficientSamples, "feature probe: empty test split");
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

constexpr std::size_t kChunk = 256;

}  // namespace

FeatureMatrix collect_clean_features(const ModelSpec& spec, const ParamSet& params, const Dataset& ds,
                                     std::size_t count, Rng& rng) {
  const auto picked = draw_test_samples(ds, count, rng);
  const ParamSet fixed = params.detached();
  FeatureMatrix out;
  out.rows = picked.size();
  out.cols = spec.feature_dim();
  out.source = FeatureSource::CleanFeatures;
  out.values.reserve(out.rows * out.cols);
  NoGradGuard off;
  for (std::size_t start = 0; start < picked.size(); start += kChunk) {
    const std::span<const std::size_t> part(picked.data() + start, std::min(kChunk, picked.size() - start));
    const Tensor f = penultimate_features(spec, fixed, ds.batch(part));
    out.values.insert(out.values.end(), f.data().begin(), f.data().end());
  }
  return out;
}

FeatureMatrix collect_noise_features(const ModelSpec& spec, const ParamSet& params, const Dataset& ds,
                                     const AttackConfig& attack, std::size_t count, Rng& rng, NoiseSpace space) {
  const auto picked = draw_test_samples(ds, count, rng);
  const ParamSet fixed = params.detached();
  FeatureMatrix out;
  out.rows = picked.size();
  out.cols = space == NoiseSpace::Feature ? spec.feature_dim() : ds.sample_numel();
  out.source = FeatureSource::Noise;
  out.values.reserve(out.rows * out.cols);
  for (std::size_t start = 0; start < picked.size(); start += kChunk) {
    const std::span<const std::size_t> part(picked.data() + start, std::min(kChunk, picked.size() - start));
    const Tensor x = ds.batch(part);
    std::vector<int> pseudo;
    {
      NoGradGuard off;
      pseudo = argmax_rows(forward(spec, fixed, x));
    }
    const AdvBatch adv = run_attack(spec, fixed, x, pseudo, attack, &rng);
    if (space == NoiseSpace::Input) {
      out.values.insert(out.values.end(), adv.delta.data().begin(), adv.delta.data().end());
      continue;
    }
    NoGradGuard off;
    const Tensor diff = sub(penultimate_features(spec, fixed, adv.x_adv), penultimate_features(spec, fixed, x));
    out.values.insert(out.values.end(), diff.data().begin(), diff.data().end());
  }
  return out;
}

void save_features(const std::filesystem::path& stem, const FeatureMatrix& features) {
  const std::vector<NamedTensor> tensors{{"features", features.to_tensor()}};
  nlohmann::json attrs{{"kind", "features"}, {"source", to_string(features.source)}};
  save_tensors(stem, tensors, attrs.dump());
}

FeatureMatrix load_features(const std::filesystem::path& stem) {
  std::string attrs_text;
  const auto tensors = load_tensors(stem, &attrs_text);
  const auto it = std::find_if(tensors.begin(), tensors.end(), [](const NamedTensor& t) { return t.name == "features"; });
  if (it == tensors.end()) throw std::runtime_error(stem.string() + ": no tensor named 'features'");
  const auto attrs = nlohmann::json::parse(attrs_text);
  const auto source = attrs.value("source", "clean_features") == "noise" ? FeatureSource::Noise : FeatureSource::CleanFeatures;
  return FeatureMatrix::from_tensor(it->value, source);
}

}  // namespace rmaml

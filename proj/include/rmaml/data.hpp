#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmaml/tensor.hpp"

namespace rmaml {

/// Per-worker random stream. Streams derived from (seed, id) never share state.
using Rng = std::mt19937_64;
Rng make_stream(std::uint64_t seed, std::uint64_t stream_id);

class DataError : public std::runtime_error {
 public:
  enum class Kind { NotFound, BadMagic, Truncated, InconsistentShape, BadFormat, InsufficientSamples };

  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

enum class Split { Train, Test };

/**
 * Labelled images (or feature vectors) with values in [0,1].
 *
 * Samples are stored contiguously; each has `sample_shape` (C,H,W for images,
 * D for vectors). Classes are partitioned into disjoint train and test sets.
 */
class Dataset {
 public:
  Dataset() = default;
  Dataset(Shape sample_shape, std::vector<double> values, std::vector<int> labels);

  const Shape& sample_shape() const noexcept { return sample_shape_; }
  std::size_t sample_numel() const noexcept { return numel_of(sample_shape_); }
  std::size_t size() const noexcept { return labels_.size(); }
  std::span<const int> labels() const noexcept { return labels_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<const double> sample(std::size_t i) const;

  /// Sorted distinct class ids.
  const std::vector<int>& classes() const noexcept { return classes_; }
  const std::vector<std::size_t>& indices_of(int cls) const;

  /// Lowest `train_classes` class ids go to the train split, the rest to test.
  void assign_split(std::size_t train_classes);
  const std::vector<int>& split_classes(Split split) const noexcept {
    return split == Split::Train ? train_classes_ : test_classes_;
  }
  /// All sample indices belonging to classes of `split`, ascending.
  std::vector<std::size_t> split_indices(Split split) const;

  /// Stacks the given samples into [n, sample_shape...].
  Tensor batch(std::span<const std::size_t> indices) const;

 private:
  Shape sample_shape_;
  std::vector<double> values_;
  std::vector<int> labels_;
  std::vector<int> classes_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<int> train_classes_;
  std::vector<int> test_classes_;
};

/// IDX pair (magic 0x00000803 images, 0x00000801 labels); pixels scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Directory of class sub-folders holding binary PGM (P5) images; classes and files
/// are ordered by name, pixels scaled by 1/maxval.
Dataset load_pgm_tree(const std::filesystem::path& root);
/// Dispatches to load_idx (a directory containing *images*idx3* and *labels*idx1*)
/// or load_pgm_tree. The split puts roughly two thirds of the classes in train.
Dataset load_idx_dataset(const std::filesystem::path& path);

struct SynthSpec {
  std::size_t classes = 20;
  std::size_t per_class = 30;
  Shape sample_shape{32};
  double spread = 0.1;
  /// Class means live in a random subspace of this dimension (0 = full space).
  std::size_t latent_dim = 0;
  /// Distance of each class mean from the centre 0.5.
  double separation = 0.25;
  std::uint64_t seed = 0;
  std::size_t train_classes = 0;  // 0 = two thirds of classes
};

/// Gaussian blobs clipped to [0,1] around per-class means at random directions.
Dataset synth_gaussian_dataset(const SynthSpec& spec);

enum class Phase { MetaTrain, MetaTest };

/// N-way task layout. train_shots is the support size per class during meta-training,
/// test_shots during meta-testing; the two are independent fields.
struct TaskSpec {
  std::size_t ways = 5;
  std::size_t test_shots = 1;
  std::size_t train_shots = 1;
  std::size_t queries = 15;
  std::size_t tasks = 4;

  void validate() const;
  std::size_t shots(Phase phase) const { return phase == Phase::MetaTrain ? train_shots : test_shots; }
};

struct Episode {
  Tensor support_x;
  std::vector<int> support_y;
  Tensor query_x;
  std::vector<int> query_y;
  /// class_map[episode label] = original class id.
  std::vector<int> class_map;
  std::vector<std::size_t> support_indices;
  std::vector<std::size_t> query_indices;
  std::size_t shots = 0;
};

/// Samples `ways` distinct classes from the phase's split, then shots + queries distinct
/// samples per class without replacement. Meta-training draws from the train split with
/// train_shots; meta-testing from the test split with test_shots.
Episode sample_episode(const Dataset& ds, const TaskSpec& spec, Phase phase, Rng& rng);

}  // namespace rmaml

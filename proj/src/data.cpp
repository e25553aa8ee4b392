#include "rmaml/data.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace rmaml {

Rng make_stream(std::uint64_t seed, std::uint64_t stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32), 0x6d616d6cu};
  return Rng(seq);
}

Dataset::Dataset(Shape sample_shape, std::vector<double> values, std::vector<int> labels)
    : sample_shape_(std::move(sample_shape)), values_(std::move(values)), labels_(std::move(labels)) {
  if (sample_shape_.empty() || numel_of(sample_shape_) == 0) {
    throw DataError(DataError::Kind::InconsistentShape, "dataset: empty sample shape");
  }
  if (values_.size() != labels_.size() * sample_numel()) {
    throw DataError(DataError::Kind::InconsistentShape, "dataset: value count does not match labels x sample size");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels_.size(); ++i) groups[labels_[i]].push_back(i);
  for (auto& [cls, idx] : groups) {
    classes_.push_back(cls);
    by_class_.push_back(std::move(idx));
  }
  assign_split((classes_.size() * 2 + 2) / 3);
}

std::span<const double> Dataset::sample(std::size_t i) const {
  return std::span<const double>(values_).subspan(i * sample_numel(), sample_numel());
}

const std::vector<std::size_t>& Dataset::indices_of(int cls) const {
  const auto it = std::lower_bound(classes_.begin(), classes_.end(), cls);
  if (it == classes_.end() || *it != cls) {
    throw DataError(DataError::Kind::InsufficientSamples, "dataset: unknown class " + std::to_string(cls));
  }
  return by_class_[static_cast<std::size_t>(it - classes_.begin())];
}

void Dataset::assign_split(std::size_t train_classes) {
  train_classes = std::min(train_classes, classes_.size());
  train_classes_.assign(classes_.begin(), classes_.begin() + static_cast<std::ptrdiff_t>(train_classes));
  test_classes_.assign(classes_.begin() + static_cast<std::ptrdiff_t>(train_classes), classes_.end());
}

std::vector<std::size_t> Dataset::split_indices(Split split) const {
  std::vector<std::size_t> out;
  for (int cls : split_classes(split)) {
    const auto& idx = indices_of(cls);
    out.insert(out.end(), idx.begin(), idx.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = sample_numel();
  std::vector<double> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = sample(indices[i]);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
  return Tensor(std::move(shape), std::move(out));
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::NotFound, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > bytes.size()) throw DataError(DataError::Kind::Truncated, path.string() + ": truncated header");
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;
};

PgmImage parse_pgm(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw DataError(DataError::Kind::BadMagic, path.string() + ": not a binary PGM (P5)");
  }
  std::size_t pos = 2;
  auto next_number = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size()) throw DataError(DataError::Kind::Truncated, path.string() + ": truncated header");
    if (!std::isdigit(bytes[pos])) throw DataError(DataError::Kind::BadFormat, path.string() + ": malformed header");
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) value = value * 10 + (bytes[pos++] - '0');
    return value;
  };
  PgmImage img;
  img.width = next_number();
  img.height = next_number();
  const std::size_t maxval = next_number();
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) {
    throw DataError(DataError::Kind::BadFormat, path.string() + ": invalid dimensions or maxval");
  }
  ++pos;  // single whitespace before the raster
  const std::size_t depth = maxval < 256 ? 1 : 2;
  const std::size_t count = img.width * img.height;
  if (pos + count * depth > bytes.size()) throw DataError(DataError::Kind::Truncated, path.string() + ": truncated raster");
  img.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t raw = depth == 1 ? bytes[pos + i] : (std::size_t{bytes[pos + 2 * i]} << 8) | bytes[pos + 2 * i + 1];
    img.pixels[i] = static_cast<double>(raw) / static_cast<double>(maxval);
  }
  return img;
}

std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir, bool directories) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_all(images);
  const auto lab = read_all(labels);
  if (read_be32(img, 0, images) != 0x00000803u) {
    throw DataError(DataError::Kind::BadMagic, images.string() + ": expected magic 0x00000803");
  }
  if (read_be32(lab, 0, labels) != 0x00000801u) {
    throw DataError(DataError::Kind::BadMagic, labels.string() + ": expected magic 0x00000801");
  }
  const std::size_t n = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t n_labels = read_be32(lab, 4, labels);
  if (n != n_labels) {
    throw DataError(DataError::Kind::InconsistentShape,
                    "idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  if (rows == 0 || cols == 0) throw DataError(DataError::Kind::InconsistentShape, images.string() + ": zero image size");
  if (img.size() < 16 + n * rows * cols) throw DataError(DataError::Kind::Truncated, images.string() + ": truncated data");
  if (lab.size() < 8 + n) throw DataError(DataError::Kind::Truncated, labels.string() + ": truncated data");

  std::vector<double> values(n * rows * cols);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(img[16 + i]) / 255.0;
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = lab[8 + i];
  return Dataset({1, rows, cols}, std::move(values), std::move(y));
}

Dataset load_pgm_tree(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw DataError(DataError::Kind::NotFound, root.string() + ": not a directory");
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t width = 0, height = 0;
  int cls = 0;
  for (const auto& class_dir : sorted_entries(root, true)) {
    bool any = false;
    for (const auto& file : sorted_entries(class_dir, false)) {
      if (file.extension() != ".pgm") continue;
      auto img = parse_pgm(file);
      if (width == 0) {
        width = img.width;
        height = img.height;
      } else if (img.width != width || img.height != height) {
        throw DataError(DataError::Kind::InconsistentShape,
                        file.string() + ": size " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                            " differs from " + std::to_string(width) + "x" + std::to_string(height));
      }
      values.insert(values.end(), img.pixels.begin(), img.pixels.end());
      labels.push_back(cls);
      any = true;
    }
    if (any) ++cls;
  }
  if (labels.empty()) throw DataError(DataError::Kind::NotFound, root.string() + ": no PGM images found");
  return Dataset({1, height, width}, std::move(values), std::move(labels));
}

Dataset load_idx_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError(DataError::Kind::NotFound, path.string() + ": does not exist");
  std::filesystem::path images, labels;
  for (const auto& file : sorted_entries(path, false)) {
    const auto name = file.filename().string();
    if (images.empty() && name.find("images") != std::string::npos && name.find("idx3") != std::string::npos) images = file;
    if (labels.empty() && name.find("labels") != std::string::npos && name.find("idx1") != std::string::npos) labels = file;
  }
  if (!images.empty() && !labels.empty()) return load_idx(images, labels);
  return load_pgm_tree(path);
}

Dataset synth_gaussian_dataset(const SynthSpec& spec) {
  if (!(spec.spread > 0.0)) throw std::invalid_argument("synth: spread must be positive");
  if (spec.classes < 2 || spec.per_class == 0) throw std::invalid_argument("synth: need >= 2 classes and samples");
  const std::size_t dim = numel_of(spec.sample_shape);
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t latent = spec.latent_dim == 0 ? dim : std::min(spec.latent_dim, dim);
  std::vector<double> basis(dim * latent);  // columns span the subspace of class means
  if (spec.latent_dim == 0) {
    for (std::size_t i = 0; i < dim; ++i) basis[i * latent + i] = 1.0;
  } else {
    for (auto& b : basis) b = normal(rng);
  }

  std::vector<double> means(spec.classes * dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<double> coeff(latent);
    for (auto& v : coeff) v = normal(rng);
    std::vector<double> dir(dim, 0.0);
    double norm = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t k = 0; k < latent; ++k) dir[i] += basis[i * latent + k] * coeff[k];
      norm += dir[i] * dir[i];
    }
    norm = std::sqrt(norm);
    // Per-coordinate RMS offset from the centre equals `separation`.
    const double radius = spec.separation * std::sqrt(static_cast<double>(dim));
    for (std::size_t i = 0; i < dim; ++i) means[c * dim + i] = 0.5 + radius * dir[i] / norm;
  }

  std::vector<double> values;
  std::vector<int> labels;
  values.reserve(spec.classes * spec.per_class * dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t s = 0; s < spec.per_class; ++s) {
      for (std::size_t i = 0; i < dim; ++i) {
        values.push_back(std::clamp(means[c * dim + i] + spec.spread * normal(rng), 0.0, 1.0));
      }
      labels.push_back(static_cast<int>(c));
    }
  }
  Dataset ds(spec.sample_shape, std::move(values), std::move(labels));
  if (spec.train_classes != 0) ds.assign_split(spec.train_classes);
  return ds;
}

void TaskSpec::validate() const {
  if (ways < 2) throw std::invalid_argument("task: ways must be at least 2");
  if (train_shots < 1 || test_shots < 1) throw std::invalid_argument("task: shots must be at least 1");
  if (queries < 1) throw std::invalid_argument("task: queries must be at least 1");
  if (tasks < 1) throw std::invalid_argument("task: tasks per meta-batch must be at least 1");
}

Episode sample_episode(const Dataset& ds, const TaskSpec& spec, Phase phase, Rng& rng) {
  spec.validate();
  const Split split = phase == Phase::MetaTrain ? Split::Train : Split::Test;
  const std::size_t shots = spec.shots(phase);
  std::vector<int> pool = ds.split_classes(split);
  if (pool.size() < spec.ways) {
    throw DataError(DataError::Kind::InsufficientSamples,
                    "episode: split has " + std::to_string(pool.size()) + " classes, need " + std::to_string(spec.ways));
  }
  // Partial Fisher-Yates: the first `ways` entries become the episode classes.
  for (std::size_t i = 0; i < spec.ways; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }

  Episode ep;
  ep.shots = shots;
  ep.class_map.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.ways));
  const std::size_t need = shots + spec.queries;
  for (std::size_t label = 0; label < spec.ways; ++label) {
    std::vector<std::size_t> members = ds.indices_of(ep.class_map[label]);
    if (members.size() < need) {
      throw DataError(DataError::Kind::InsufficientSamples,
                      "episode: class " + std::to_string(ep.class_map[label]) + " has " +
                          std::to_string(members.size()) + " samples, need " + std::to_string(need));
    }
    for (std::size_t i = 0; i < need; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
      std::swap(members[i], members[pick(rng)]);
    }
    for (std::size_t i = 0; i < shots; ++i) {
      ep.support_indices.push_back(members[i]);
      ep.support_y.push_back(static_cast<int>(label));
    }
    for (std::size_t i = shots; i < need; ++i) {
      ep.query_indices.push_back(members[i]);
      ep.query_y.push_back(static_cast<int>(label));
    }
  }
  ep.support_x = ds.batch(ep.support_indices);
  ep.query_x = ds.batch(ep.query_indices);
  return ep;
}

}  // namespace rmaml

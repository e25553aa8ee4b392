#include "rmaml/params.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <set>
#include <stdexcept>

#include "rmaml/graph.hpp"

namespace rmaml {

using json = nlohmann::json;

void ParamSet::add(std::string name, Tensor value) {
  if (find(name)) throw std::invalid_argument("ParamSet: duplicate name '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
}

const Tensor* ParamSet::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.value;
  }
  return nullptr;
}

std::vector<Tensor> ParamSet::values() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

ParamSet ParamSet::with_values(std::span<const Tensor> values) const {
  if (values.size() != entries_.size()) throw std::invalid_argument("ParamSet::with_values: count mismatch");
  ParamSet out;
  out.entries_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (values[i].shape() != entries_[i].value.shape()) {
      throw ShapeError("with_values", entries_[i].value.shape(), values[i].shape(), entries_[i].name);
    }
    out.entries_.push_back({entries_[i].name, values[i]});
  }
  return out;
}

ParamSet ParamSet::detached() const {
  ParamSet out = *this;
  for (auto& e : out.entries_) e.value = e.value.detach();
  return out;
}

ParamSet ParamSet::tracked(Graph& graph) const {
  ParamSet out = *this;
  for (auto& e : out.entries_) e.value = graph.track(e.value);
  return out;
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& e : entries_) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
  return out;
}

ParamSet ParamSet::unflatten(std::span<const double> flat) const {
  if (flat.size() != total_size()) throw std::invalid_argument("ParamSet::unflatten: length mismatch");
  ParamSet out;
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    const auto n = e.value.numel();
    out.entries_.push_back({e.name, Tensor(e.value.shape(), {flat.begin() + offset, flat.begin() + offset + n})});
    offset += n;
  }
  return out;
}

bool bit_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !bit_equal(a.value(i), b.value(i))) return false;
  }
  return true;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

void put_le(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) {
    bytes[i] = static_cast<char>(bits & 0xffu);
    bits >>= 8;
  }
  out.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | bytes[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_tensors(const std::filesystem::path& stem, std::span<const NamedTensor> tensors,
                  const std::string& attributes_json) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + with_suffix(stem, ".bin").string());
  json index;
  index["format"] = "f64le";
  index["tensors"] = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    for (double v : t.value.data()) put_le(bin, v);
    index["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
    offset += t.value.numel() * sizeof(double);
  }
  index["bytes"] = offset;
  index["attributes"] = json::parse(attributes_json);
  std::ofstream side(with_suffix(stem, ".json"), std::ios::trunc);
  if (!side) throw std::runtime_error("cannot write " + with_suffix(stem, ".json").string());
  side << index.dump(2) << '\n';
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& stem, std::string* attributes_json) {
  std::ifstream side(with_suffix(stem, ".json"));
  if (!side) throw std::runtime_error("cannot read " + with_suffix(stem, ".json").string());
  const json index = json::parse(side);
  if (index.value("format", "") != "f64le") throw std::runtime_error("unsupported tensor file format");

  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + with_suffix(stem, ".bin").string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (const auto& entry : index.at("tensors")) {
    auto name = entry.at("name").get<std::string>();
    if (!seen.insert(name).second) throw std::runtime_error("duplicate tensor name " + name);
    auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto n = numel_of(shape);
    if (offset % sizeof(double) != 0 || offset + n * sizeof(double) > bytes.size()) {
      throw std::runtime_error("tensor " + name + " lies outside the data file");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = get_le(bytes.data() + offset + i * sizeof(double));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (attributes_json) *attributes_json = index.value("attributes", json::object()).dump();
  return out;
}

void save_params(const std::filesystem::path& stem, const ParamSet& params) {
  std::vector<NamedTensor> tensors(params.begin(), params.end());
  save_tensors(stem, tensors, R"({"kind":"params"})");
}

ParamSet load_params(const std::filesystem::path& stem) {
  ParamSet out;
  for (auto& t : load_tensors(stem)) out.add(std::move(t.name), std::move(t.value));
  return out;
}

}  // namespace rmaml

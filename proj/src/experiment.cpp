#include "rmaml/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rmaml/intrinsic_dim.hpp"

namespace rmaml {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* const kCodeVersion = "rmaml-0.1.0";

namespace {

constexpr std::uint64_t kEvalSalt = 0x00000000e7a15eedULL;
constexpr std::uint64_t kIdCleanStream = 101;
constexpr std::uint64_t kIdNoiseStream = 102;

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
    if (!out) throw std::runtime_error("short write to " + p.string());
  }
  fs::rename(tmp, p);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::runtime_error("bad number '" + s + "'");
  return v;
}

// ---------------------------------------------------------------- config parsing

class Reader {
 public:
  explicit Reader(std::vector<ConfigIssue>& issues) : issues_(issues) {}

  void issue(const std::string& path, const std::string& message) { issues_.push_back({path, message}); }

  /// True when `node` is a mapping whose keys are all in `allowed`; null means "use defaults".
  bool mapping(const YAML::Node& node, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!node || node.IsNull()) return false;
    if (!node.IsMap()) {
      issue(path.empty() ? "<root>" : path, "expected mapping");
      return false;
    }
    for (const auto& kv : node) {
      const std::string key = kv.first.IsScalar() ? kv.first.Scalar() : "?";
      const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
      if (!known) issue(join_path(path, key), "unknown key");
    }
    return true;
  }

  bool scalar(const YAML::Node& n, const std::string& path, const char* type, std::string& out) {
    if (!n.IsScalar()) {
      issue(path, std::string("expected ") + type);
      return false;
    }
    out = n.Scalar();
    return true;
  }

  void integer(const YAML::Node& n, const std::string& path, std::size_t& out, std::size_t min = 0) {
    std::string s;
    if (!scalar(n, path, "non-negative integer", s)) return;
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || v < 0) {
      issue(path, "expected non-negative integer, got '" + s + "'");
      return;
    }
    if (static_cast<std::size_t>(v) < min) {
      issue(path, "must be >= " + std::to_string(min));
      return;
    }
    out = static_cast<std::size_t>(v);
  }

  void seed(const YAML::Node& n, const std::string& path, std::uint64_t& out) {
    std::string s;
    if (!scalar(n, path, "non-negative integer", s)) return;
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      issue(path, "expected non-negative integer, got '" + s + "'");
      return;
    }
    out = v;
  }

  /// Finite number >= `min` (and <= `max`).
  void number(const YAML::Node& n, const std::string& path, double& out, double min = -HUGE_VAL,
              double max = HUGE_VAL, bool strict_min = false) {
    std::string s;
    if (!scalar(n, path, "number", s)) return;
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
      issue(path, "expected number, got '" + s + "'");
      return;
    }
    if (strict_min ? v <= min : v < min) {
      issue(path, std::string("must be ") + (strict_min ? "> " : ">= ") + num(min));
      return;
    }
    if (v > max) {
      issue(path, "must be <= " + num(max));
      return;
    }
    out = v;
  }

  void boolean(const YAML::Node& n, const std::string& path, bool& out) {
    bool v = false;
    if (!n.IsScalar() || !YAML::convert<bool>::decode(n, v)) {
      issue(path, "expected boolean");
      return;
    }
    out = v;
  }

  void string(const YAML::Node& n, const std::string& path, std::string& out) {
    std::string s;
    if (scalar(n, path, "string", s)) out = s;
  }

  void integer_list(const YAML::Node& n, const std::string& path, std::vector<std::size_t>& out, std::size_t min) {
    if (!n.IsSequence()) {
      issue(path, "expected list of integers");
      return;
    }
    std::vector<std::size_t> values;
    const std::size_t before = issues_.size();
    for (std::size_t i = 0; i < n.size(); ++i) {
      std::size_t v = 0;
      integer(n[i], path + "[" + std::to_string(i) + "]", v, min);
      values.push_back(v);
    }
    if (issues_.size() == before) out = values;
  }

 private:
  std::vector<ConfigIssue>& issues_;
};

/// Calls fn(node, path) when `key` is present in `map`.
template <class Fn>
void with(const YAML::Node& map, const std::string& parent, const char* key, Fn&& fn) {
  if (!map) return;
  const YAML::Node n = map[key];
  if (n) fn(n, join_path(parent, key));
}

void read_attack(Reader& r, const YAML::Node& node, const std::string& path, AttackConfig& cfg) {
  if (!r.mapping(node, path, {"family", "epsilon", "steps", "step_size", "random_start"})) return;
  with(node, path, "family", [&](const YAML::Node& n, const std::string& p) {
    std::string s;
    r.string(n, p, s);
    if (s.empty()) return;
    try {
      // A family switch starts from that family's defaults; explicit fields below override them.
      const AttackFamily family = parse_attack_family(s);
      if (family != cfg.family) {
        cfg = family == AttackFamily::Fgsm  ? AttackConfig::fgsm(cfg.epsilon)
              : family == AttackFamily::Pgd ? AttackConfig::pgd(cfg.epsilon)
                                            : AttackConfig::cw_margin(cfg.epsilon);
      }
    } catch (const std::exception&) {
      r.issue(p, "expected one of fgsm, pgd, cw_margin_pgd");
    }
  });
  with(node, path, "epsilon", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, cfg.epsilon, 0.0, 255.0); });
  with(node, path, "steps", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, cfg.steps, 1); });
  with(node, path, "step_size", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, cfg.step_size); });
  with(node, path, "random_start", [&](const YAML::Node& n, const std::string& p) { r.boolean(n, p, cfg.random_start); });
  cfg = cfg.normalized();
}

bool parse_ratio(const std::string& text, std::pair<double, double>& out) {
  const auto parts = split(text, ':');
  if (parts.size() != 2) return false;
  try {
    out = {parse_double(parts[0]), parse_double(parts[1])};
  } catch (const std::exception&) {
    return false;
  }
  return std::isfinite(out.first) && std::isfinite(out.second) && out.first >= 0 && out.second >= 0;
}

struct PresetAlias {
  const char* name;
  const char* base;
  std::size_t test_shots;
  std::size_t train_shots;
};

constexpr PresetAlias kAliases[] = {
    {"its-maml-1shot", "its-maml", 1, 2},
    {"its-maml-5shot", "its-maml", 5, 6},
};

const PresetAlias* find_alias(const std::string& name) {
  for (const auto& a : kAliases) {
    if (name == a.name) return &a;
  }
  return nullptr;
}

std::string base_preset(const std::string& preset) {
  const PresetAlias* a = find_alias(preset);
  return a ? a->base : preset;
}

void parse_plan(Reader& r, const YAML::Node& root, ExperimentPlan& plan) {
  plan = ExperimentPlan{};
  if (root && !root.IsNull() && !root.IsMap()) {
    r.issue("<root>", "expected mapping");
    return;
  }
  r.mapping(root, "", {"id", "dataset", "model", "trainer", "task", "attacks", "evaluation", "sweep", "seeds",
                       "output_dir", "workers"});
  with(root, "", "id", [&](const YAML::Node& n, const std::string& p) { r.string(n, p, plan.id); });

  DatasetRef& ds = plan.dataset;
  const YAML::Node dnode = root ? root["dataset"] : YAML::Node();
  if (r.mapping(dnode, "dataset", {"kind", "path", "style", "train_classes", "synthetic"})) {
    with(dnode, "dataset", "kind", [&](const YAML::Node& n, const std::string& p) {
      r.string(n, p, ds.kind);
      if (ds.kind != "synthetic" && ds.kind != "files") r.issue(p, "expected one of synthetic, files");
    });
    with(dnode, "dataset", "path", [&](const YAML::Node& n, const std::string& p) {
      std::string s;
      r.string(n, p, s);
      ds.path = s;
    });
    with(dnode, "dataset", "style", [&](const YAML::Node& n, const std::string& p) {
      r.string(n, p, ds.style);
      if (ds.style != "standard" && ds.style != "omniglot") r.issue(p, "expected one of standard, omniglot");
    });
    with(dnode, "dataset", "train_classes",
         [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, ds.train_classes); });
    const YAML::Node s = dnode["synthetic"];
    const std::string sp = "dataset.synthetic";
    if (r.mapping(s, sp, {"classes", "per_class", "shape", "spread", "separation", "latent_dim", "seed"})) {
      with(s, sp, "classes", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, ds.synth.classes, 2); });
      with(s, sp, "per_class", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, ds.synth.per_class, 1); });
      with(s, sp, "shape", [&](const YAML::Node& n, const std::string& p) {
        r.integer_list(n, p, ds.synth.sample_shape, 1);
        if (ds.synth.sample_shape.empty()) r.issue(p, "must not be empty");
      });
      with(s, sp, "spread", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, ds.synth.spread, 0.0); });
      with(s, sp, "separation",
           [&](const YAML::Node& n, const std::string& p) { r.number(n, p, ds.synth.separation, 0.0, 0.5); });
      with(s, sp, "latent_dim", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, ds.synth.latent_dim); });
      with(s, sp, "seed", [&](const YAML::Node& n, const std::string& p) { r.seed(n, p, ds.synth.seed); });
    }
  }
  if (ds.kind == "files" && ds.path.empty()) r.issue("dataset.path", "required when kind is files");
  ds.synth.train_classes = ds.train_classes;

  ModelSpec& model = plan.model;
  bool shape_given = false;
  const YAML::Node mnode = root ? root["model"] : YAML::Node();
  if (r.mapping(mnode, "model", {"arch", "input_shape", "hidden"})) {
    with(mnode, "model", "arch", [&](const YAML::Node& n, const std::string& p) {
      std::string s;
      r.string(n, p, s);
      if (s.empty()) return;
      try {
        model.arch = parse_arch(s);
      } catch (const std::exception&) {
        r.issue(p, "expected one of mlp, conv4");
      }
    });
    with(mnode, "model", "input_shape", [&](const YAML::Node& n, const std::string& p) {
      r.integer_list(n, p, model.input_shape, 1);
      shape_given = true;
    });
    with(mnode, "model", "hidden", [&](const YAML::Node& n, const std::string& p) {
      r.integer_list(n, p, model.hidden, 1);
      if (model.hidden.empty()) r.issue(p, "must not be empty");
    });
  }
  if (!shape_given) {
    if (ds.kind == "synthetic") {
      model.input_shape = ds.synth.sample_shape;
    } else {
      model.input_shape.clear();
    }
  }

  TrainerConfig& tc = plan.trainer;
  TaskSpec& task = tc.task;
  const YAML::Node tnode = root ? root["trainer"] : YAML::Node();
  const bool have_trainer = r.mapping(tnode, "trainer",
                                      {"preset", "wc", "wa", "inner_lr", "outer_lr", "inner_steps",
                                       "test_inner_steps", "second_order", "epochs", "steps_per_epoch",
                                       "eval_episodes"});
  if (have_trainer) {
    with(tnode, "trainer", "preset", [&](const YAML::Node& n, const std::string& p) {
      std::string s;
      r.string(n, p, s);
      if (s.empty()) return;
      if (!find_alias(s) && !is_known_preset(s)) {
        r.issue(p, "expected one of maml, aq, adml, rmaml, its-maml, its-maml-1shot, its-maml-5shot");
        return;
      }
      plan.preset = s;
    });
  }
  tc = make_trainer_config(base_preset(plan.preset));
  if (const PresetAlias* a = find_alias(plan.preset)) {
    task.test_shots = a->test_shots;
    task.train_shots = a->train_shots;
  }
  if (have_trainer) {
    const std::string p0 = "trainer";
    with(tnode, p0, "wc", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, tc.wc, 0.0); });
    with(tnode, p0, "wa", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, tc.wa, 0.0); });
    with(tnode, p0, "inner_lr", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, tc.inner_lr, 0.0, HUGE_VAL, true); });
    with(tnode, p0, "outer_lr", [&](const YAML::Node& n, const std::string& p) { r.number(n, p, tc.outer_lr, 0.0, HUGE_VAL, true); });
    with(tnode, p0, "inner_steps", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, tc.inner_steps); });
    with(tnode, p0, "test_inner_steps",
         [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, tc.test_inner_steps); });
    with(tnode, p0, "second_order", [&](const YAML::Node& n, const std::string& p) { r.boolean(n, p, tc.second_order); });
    with(tnode, p0, "epochs", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, tc.epochs, 1); });
    with(tnode, p0, "steps_per_epoch",
         [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, tc.steps_per_epoch, 1); });
    with(tnode, p0, "eval_episodes", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, tc.eval_episodes); });
  }
  if (tc.wc == 0.0 && tc.wa == 0.0) r.issue("trainer.wa", "wc and wa must not both be zero");

  bool queries_given = false;
  const YAML::Node knode = root ? root["task"] : YAML::Node();
  if (r.mapping(knode, "task", {"ways", "test_shots", "train_shots", "queries", "tasks"})) {
    with(knode, "task", "ways", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, task.ways, 2); });
    with(knode, "task", "test_shots", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, task.test_shots, 1); });
    with(knode, "task", "train_shots",
         [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, task.train_shots, 1); });
    with(knode, "task", "queries", [&](const YAML::Node& n, const std::string& p) {
      r.integer(n, p, task.queries, 1);
      queries_given = true;
    });
    with(knode, "task", "tasks", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, task.tasks, 1); });
  }
  if (!queries_given) task.queries = default_queries(ds.style, task.test_shots);
  model.ways = task.ways;

  const YAML::Node anode = root ? root["attacks"] : YAML::Node();
  read_attack(r, anode, "attacks", tc.train_attack);

  EvalSettings& ev = plan.eval;
  const YAML::Node enode = root ? root["evaluation"] : YAML::Node();
  if (r.mapping(enode, "evaluation", {"episodes", "attacks", "id_samples", "id_target", "id_attack", "id_space"})) {
    const std::string p0 = "evaluation";
    with(enode, p0, "episodes", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, ev.episodes, 1); });
    with(enode, p0, "attacks", [&](const YAML::Node& n, const std::string& p) {
      if (!n.IsSequence()) {
        r.issue(p, "expected list of attack mappings");
        return;
      }
      ev.attacks.clear();
      for (std::size_t i = 0; i < n.size(); ++i) {
        AttackConfig cfg = AttackConfig::pgd(2.0, 10);
        read_attack(r, n[i], p + "[" + std::to_string(i) + "]", cfg);
        ev.attacks.push_back(cfg);
      }
    });
    with(enode, p0, "id_samples", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, ev.id_samples, 2); });
    with(enode, p0, "id_target",
         [&](const YAML::Node& n, const std::string& p) { r.number(n, p, ev.id_target, 0.0, 1.0, true); });
    with(enode, p0, "id_attack", [&](const YAML::Node& n, const std::string& p) { read_attack(r, n, p, ev.id_attack); });
    with(enode, p0, "id_space", [&](const YAML::Node& n, const std::string& p) {
      std::string s;
      r.string(n, p, s);
      if (s == "feature") {
        ev.id_space = NoiseSpace::Feature;
      } else if (s == "input") {
        ev.id_space = NoiseSpace::Input;
      } else {
        r.issue(p, "expected one of feature, input");
      }
    });
  }

  const YAML::Node snode = root ? root["sweep"] : YAML::Node();
  if (r.mapping(snode, "sweep", {"axis", "values"})) {
    with(snode, "sweep", "axis", [&](const YAML::Node& n, const std::string& p) {
      std::string s;
      r.string(n, p, s);
      try {
        plan.axis = parse_sweep_axis(s);
      } catch (const std::exception&) {
        r.issue(p, "expected one of none, train_shots, w_ratio, inner_steps, epsilon");
      }
    });
    with(snode, "sweep", "values", [&](const YAML::Node& n, const std::string& p) {
      if (!n.IsSequence()) {
        r.issue(p, "expected list");
        return;
      }
      for (std::size_t i = 0; i < n.size(); ++i) {
        const std::string ip = p + "[" + std::to_string(i) + "]";
        SweepValue v;
        switch (plan.axis) {
          case SweepAxis::WeightRatio: {
            std::string s;
            if (n[i].IsSequence() && n[i].size() == 2) {
              r.number(n[i][0], ip + "[0]", v.ratio.first, 0.0);
              r.number(n[i][1], ip + "[1]", v.ratio.second, 0.0);
            } else if (r.scalar(n[i], ip, "ratio 'wc:wa'", s) && !parse_ratio(s, v.ratio)) {
              r.issue(ip, "expected ratio 'wc:wa' with non-negative numbers, got '" + s + "'");
            }
            if (v.ratio.first == 0.0 && v.ratio.second == 0.0) r.issue(ip, "wc and wa must not both be zero");
            break;
          }
          case SweepAxis::TrainShots:
          case SweepAxis::InnerSteps: {
            std::size_t k = 0;
            r.integer(n[i], ip, k, plan.axis == SweepAxis::TrainShots ? 1 : 0);
            v.value = static_cast<double>(k);
            break;
          }
          case SweepAxis::Epsilon:
            r.number(n[i], ip, v.value, 0.0, 255.0);
            break;
          case SweepAxis::None:
            r.issue(ip, "values require a sweep axis");
            break;
        }
        plan.sweep.push_back(v);
      }
    });
  }
  if (plan.axis != SweepAxis::None && plan.sweep.empty()) r.issue("sweep.values", "must not be empty for this axis");

  with(root, "", "seeds", [&](const YAML::Node& n, const std::string& p) {
    if (!n.IsSequence()) {
      r.issue(p, "expected list of integers");
      return;
    }
    plan.seeds.clear();
    for (std::size_t i = 0; i < n.size(); ++i) {
      std::uint64_t s = 0;
      r.seed(n[i], p + "[" + std::to_string(i) + "]", s);
      plan.seeds.push_back(s);
    }
    if (plan.seeds.empty()) r.issue(p, "must not be empty");
  });
  with(root, "", "output_dir", [&](const YAML::Node& n, const std::string& p) {
    std::string s;
    r.string(n, p, s);
    plan.output_dir = s;
  });
  with(root, "", "workers", [&](const YAML::Node& n, const std::string& p) { r.integer(n, p, plan.workers, 1); });

  tc.pathways = preset_pathways(tc.name, tc.wc, tc.wa);
  tc.eval_attacks = ev.attacks;
}

// ---------------------------------------------------------------- yaml echo

void emit_attack(YAML::Emitter& e, const AttackConfig& a) {
  e << YAML::BeginMap;
  e << YAML::Key << "family" << YAML::Value << to_string(a.family);
  e << YAML::Key << "epsilon" << YAML::Value << num(a.epsilon);
  e << YAML::Key << "steps" << YAML::Value << a.steps;
  e << YAML::Key << "step_size" << YAML::Value << num(a.step_size);
  e << YAML::Key << "random_start" << YAML::Value << a.random_start;
  e << YAML::EndMap;
}

void emit_list(YAML::Emitter& e, const std::vector<std::size_t>& v) {
  e << YAML::Flow << YAML::BeginSeq;
  for (auto x : v) e << x;
  e << YAML::EndSeq;
}

// ---------------------------------------------------------------- json helpers

json attack_json(const AttackConfig& a) {
  return {{"family", to_string(a.family)}, {"epsilon", a.epsilon},         {"steps", a.steps},
          {"step_size", a.step_size},     {"random_start", a.random_start}, {"loss", a.loss == AttackLoss::Margin ? "margin" : "ce"}};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Unique column names for a list of evaluation attacks.
std::vector<std::string> attack_columns(const std::vector<AttackConfig>& attacks) {
  std::vector<std::string> names;
  for (const auto& a : attacks) {
    std::string name = attack_column(a);
    if (std::count(names.begin(), names.end(), name) > 0 ||
        std::count_if(attacks.begin(), attacks.end(), [&](const AttackConfig& b) { return attack_column(b) == name; }) > 1) {
      name += "_eps" + num(a.epsilon);
    }
    while (std::count(names.begin(), names.end(), name) > 0) name += "_";
    names.push_back(name);
  }
  return names;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '-';
  return out;
}

double axis_x(SweepAxis axis, const SweepValue& v) {
  if (axis == SweepAxis::WeightRatio) return v.ratio.first == 0.0 ? HUGE_VAL : v.ratio.second / v.ratio.first;
  return v.value;
}

// ---------------------------------------------------------------- manifest

struct ManifestEntry {
  std::string id;
  std::string hash;
  std::string status = "pending";  // pending | complete | failed
  std::string error;
  std::string label;
  double x = 0.0;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::string plan_id;
  std::string preset;
  std::string axis;
  std::vector<ManifestEntry> cells;
};

json manifest_json(const Manifest& m) {
  json cells = json::array();
  for (const auto& c : m.cells) {
    cells.push_back({{"id", c.id},
                     {"hash", c.hash},
                     {"status", c.status},
                     {"error", c.error},
                     {"value", c.label},
                     {"x", std::isfinite(c.x) ? json(c.x) : json(nullptr)},
                     {"seed", c.seed}});
  }
  return {{"plan_id", m.plan_id}, {"preset", m.preset}, {"axis", m.axis}, {"code_version", kCodeVersion}, {"cells", cells}};
}

Manifest read_manifest(const fs::path& dir) {
  const json j = json::parse(read_file(dir / "manifest.json"));
  Manifest m;
  m.plan_id = j.value("plan_id", "");
  m.preset = j.value("preset", "");
  m.axis = j.value("axis", "none");
  for (const auto& c : j.at("cells")) {
    ManifestEntry e;
    e.id = c.at("id").get<std::string>();
    e.hash = c.value("hash", "");
    e.status = c.value("status", "pending");
    e.error = c.value("error", "");
    e.label = c.value("value", "");
    e.x = c.at("x").is_null() ? HUGE_VAL : c.at("x").get<double>();
    e.seed = c.value("seed", std::uint64_t{0});
    m.cells.push_back(e);
  }
  return m;
}

// ---------------------------------------------------------------- aggregation

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

Csv read_csv(const fs::path& p) {
  std::istringstream in(read_file(p));
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(p.string() + ": empty csv");
  csv.header = split(line, ',');
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split(line, ',');
    if (row.size() != csv.header.size()) throw std::runtime_error(p.string() + ": ragged row");
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

struct Stat {
  double mean = 0.0;
  double ci95 = 0.0;
  std::size_t n = 0;
};

Stat make_stat(const std::vector<double>& v) {
  const auto [m, c] = mean_ci95(v);
  return {m, c, v.size()};
}

struct Group {
  std::string label;
  double x = 0.0;
  std::vector<std::string> cells;
  std::vector<std::uint64_t> seeds;
  std::vector<std::pair<std::string, Stat>> metrics;
};

struct Aggregate {
  Manifest manifest;
  std::vector<Group> groups;
  std::vector<std::string> incomplete;
};

Aggregate aggregate(const fs::path& dir) {
  Aggregate agg;
  agg.manifest = read_manifest(dir);
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ManifestEntry*>> by_label;
  for (const auto& c : agg.manifest.cells) {
    if (c.status != "complete") {
      agg.incomplete.push_back(c.id);
      continue;
    }
    if (!by_label.count(c.label)) order.push_back(c.label);
    by_label[c.label].push_back(&c);
  }
  for (const auto& label : order) {
    Group g;
    g.label = label;
    std::vector<std::string> columns;
    std::map<std::string, std::vector<double>> pooled;
    std::vector<double> id_clean, id_noise;
    for (const ManifestEntry* c : by_label[label]) {
      g.x = c->x;
      g.cells.push_back(c->id);
      g.seeds.push_back(c->seed);
      const fs::path cdir = dir / "cells" / c->id;
      const Csv ep = read_csv(cdir / "episodes.csv");
      if (columns.empty()) {
        columns.assign(ep.header.begin() + 1, ep.header.end());
      } else if (!std::equal(columns.begin(), columns.end(), ep.header.begin() + 1, ep.header.end())) {
        throw std::runtime_error(c->id + ": episodes.csv columns differ within a sweep value");
      }
      for (const auto& row : ep.rows) {
        for (std::size_t k = 1; k < row.size(); ++k) pooled[ep.header[k]].push_back(parse_double(row[k]));
      }
      const Csv id = read_csv(cdir / "id.csv");
      for (const auto& row : id.rows) {
        const double d = parse_double(row.at(1));
        if (row.at(0) == to_string(FeatureSource::CleanFeatures)) id_clean.push_back(d);
        if (row.at(0) == to_string(FeatureSource::Noise)) id_noise.push_back(d);
      }
    }
    for (const auto& col : columns) g.metrics.emplace_back(col, make_stat(pooled[col]));
    g.metrics.emplace_back("id_clean", make_stat(id_clean));
    g.metrics.emplace_back("id_noise", make_stat(id_noise));
    agg.groups.push_back(std::move(g));
  }
  std::stable_sort(agg.groups.begin(), agg.groups.end(), [](const Group& a, const Group& b) { return a.x < b.x; });
  return agg;
}

const Stat* find_metric(const Group& g, const std::string& name) {
  for (const auto& [n, s] : g.metrics) {
    if (n == name) return &s;
  }
  return nullptr;
}

// ---------------------------------------------------------------- cell execution

struct CellOutcome {
  std::size_t index = 0;
  bool ok = false;
  std::string error;
  std::size_t meta_steps = 0;
};

ModelSpec resolve_model(const ExperimentPlan& plan, const Dataset& ds) {
  ModelSpec spec = plan.model;
  if (spec.input_shape.empty()) spec.input_shape = ds.sample_shape();
  if (numel_of(spec.input_shape) != ds.sample_numel()) {
    throw std::invalid_argument("model.input_shape does not match the dataset sample size");
  }
  spec.ways = plan.trainer.task.ways;
  spec.validate();
  return spec;
}

std::size_t run_cell(const ModelSpec& spec, const Dataset& ds, const Cell& cell,
                     const fs::path& cdir) {
  fs::create_directories(cdir);
  for (const char* stale : {"episodes.csv", "id.csv", "metrics.csv", "metrics.jsonl"}) fs::remove(cdir / stale);

  const TrainResult tr = train(cell.trainer, spec, ds);
  save_params(cdir / "model", tr.params);

  const std::vector<std::string> names = attack_columns(cell.trainer.eval_attacks);
  std::string metrics = metrics_csv_header(names) + "\n";
  std::string jsonl;
  for (const auto& m : tr.metrics) {
    metrics += metrics_csv_row(m) + "\n";
    jsonl += metrics_json_line(m) + "\n";
  }
  write_file(cdir / "metrics.csv", metrics);
  write_file(cdir / "metrics.jsonl", jsonl);

  const EvalResult ev = meta_test(spec, tr.params, ds, cell.trainer.task, cell.trainer.test_inner_steps,
                                  cell.trainer.inner_lr, cell.eval.attacks, cell.eval.episodes, cell.seed ^ kEvalSalt);
  const std::vector<std::string> eval_names = attack_columns(cell.eval.attacks);
  std::string episodes = "episode,clean";
  for (const auto& n : eval_names) episodes += ",robust_" + n;
  episodes += "\n";
  for (std::size_t e = 0; e < ev.episodes; ++e) {
    episodes += std::to_string(e) + "," + num(ev.clean_per_episode[e]);
    for (const auto& r : ev.robust) episodes += "," + num(r.per_episode[e]);
    episodes += "\n";
  }

  Rng clean_rng = make_stream(cell.seed, kIdCleanStream);
  Rng noise_rng = make_stream(cell.seed, kIdNoiseStream);
  const FeatureMatrix clean = collect_clean_features(spec, tr.params, ds, cell.eval.id_samples, clean_rng);
  const FeatureMatrix noise = collect_noise_features(spec, tr.params, ds, cell.eval.id_attack, cell.eval.id_samples,
                                                     noise_rng, cell.eval.id_space);
  std::string id = "source,d_hat,target,rows,cols,degenerate\n";
  for (const FeatureMatrix* f : {&clean, &noise}) {
    const IdEstimate est = estimate_id(*f, cell.eval.id_target);
    id += to_string(f->source) + "," + std::to_string(est.d_hat) + "," + num(est.target) + "," +
          std::to_string(f->rows) + "," + std::to_string(f->cols) + "," + (est.degenerate ? "1" : "0") + "\n";
  }
  // Written last: their presence marks a finished cell.
  write_file(cdir / "id.csv", id);
  write_file(cdir / "episodes.csv", episodes);
  return tr.meta_steps;
}

}  // namespace

// ---------------------------------------------------------------- public API

Dataset load_dataset(const DatasetRef& ref) {
  if (ref.kind == "synthetic") {
    SynthSpec s = ref.synth;
    s.train_classes = ref.train_classes;
    return synth_gaussian_dataset(s);
  }
  if (ref.kind == "files") {
    Dataset ds = load_idx_dataset(ref.path);
    if (ref.train_classes > 0) ds.assign_split(ref.train_classes);
    return ds;
  }
  throw std::invalid_argument("dataset.kind must be synthetic or files");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::None: return "none";
    case SweepAxis::TrainShots: return "train_shots";
    case SweepAxis::WeightRatio: return "w_ratio";
    case SweepAxis::InnerSteps: return "inner_steps";
    case SweepAxis::Epsilon: return "epsilon";
  }
  return "none";
}

SweepAxis parse_sweep_axis(const std::string& text) {
  for (SweepAxis a : {SweepAxis::None, SweepAxis::TrainShots, SweepAxis::WeightRatio, SweepAxis::InnerSteps,
                      SweepAxis::Epsilon}) {
    if (to_string(a) == text) return a;
  }
  throw std::invalid_argument("unknown sweep axis '" + text + "'");
}

std::string SweepValue::label(SweepAxis axis) const {
  if (axis == SweepAxis::WeightRatio) return num(ratio.first) + ":" + num(ratio.second);
  return num(value);
}

void ExperimentPlan::validate() const {
  if (seeds.empty()) throw std::invalid_argument("seeds: must not be empty");
  if (workers == 0) throw std::invalid_argument("workers: must be >= 1");
  if (axis == SweepAxis::None && !sweep.empty()) throw std::invalid_argument("sweep.values: require a sweep axis");
  if (axis != SweepAxis::None && sweep.empty()) throw std::invalid_argument("sweep.values: must not be empty");
  for (const auto& v : sweep) {
    switch (axis) {
      case SweepAxis::TrainShots:
        if (v.value < 1 || v.value != std::floor(v.value)) throw std::invalid_argument("sweep.values: shots must be positive integers");
        break;
      case SweepAxis::InnerSteps:
        if (v.value < 0 || v.value != std::floor(v.value)) throw std::invalid_argument("sweep.values: steps must be integers >= 0");
        break;
      case SweepAxis::Epsilon:
        if (!(v.value >= 0 && v.value <= 255)) throw std::invalid_argument("sweep.values: epsilon must be in [0,255]");
        break;
      case SweepAxis::WeightRatio:
        if (v.ratio.first < 0 || v.ratio.second < 0 || v.ratio.first + v.ratio.second == 0) {
          throw std::invalid_argument("sweep.values: weights must be non-negative and not both zero");
        }
        break;
      case SweepAxis::None: break;
    }
  }
  if (dataset.kind != "synthetic" && dataset.kind != "files") throw std::invalid_argument("dataset.kind: unknown");
  if (dataset.kind == "files" && dataset.path.empty()) throw std::invalid_argument("dataset.path: required");
  if (!model.input_shape.empty()) model.validate();
  trainer.validate();
  for (const auto& a : eval.attacks) a.validate();
  eval.id_attack.validate();
  if (eval.episodes == 0) throw std::invalid_argument("evaluation.episodes: must be >= 1");
  if (eval.id_samples < 2) throw std::invalid_argument("evaluation.id_samples: must be >= 2");
  if (!(eval.id_target > 0.0 && eval.id_target <= 1.0)) throw std::invalid_argument("evaluation.id_target: must be in (0,1]");
}

std::size_t default_queries(const std::string& style, std::size_t test_shots) {
  if (style == "omniglot") return test_shots >= 5 ? 5 : 9;
  return 15;
}

ConfigResult parse_config_text(const std::string& yaml_text) {
  ConfigResult out;
  Reader r(out.errors);
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    out.errors.push_back({"<root>", std::string("YAML syntax error: ") + e.what()});
    return out;
  }
  parse_plan(r, root, out.plan);
  if (out.ok()) {
    try {
      out.plan.validate();
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      const auto colon = msg.find(": ");
      if (colon != std::string::npos && msg.find(' ') > colon) {
        out.errors.push_back({msg.substr(0, colon), msg.substr(colon + 2)});
      } else {
        out.errors.push_back({"<plan>", msg});
      }
    }
  }
  return out;
}

ConfigResult validate_config(const fs::path& file) {
  std::string text;
  try {
    text = read_file(file);
  } catch (const std::exception& e) {
    ConfigResult out;
    out.errors.push_back({"<file>", e.what()});
    return out;
  }
  return parse_config_text(text);
}

std::string plan_to_yaml(const ExperimentPlan& plan) {
  const TrainerConfig& t = plan.trainer;
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "id" << YAML::Value << plan.id;

  e << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << plan.dataset.kind;
  e << YAML::Key << "path" << YAML::Value << plan.dataset.path.string();
  e << YAML::Key << "style" << YAML::Value << plan.dataset.style;
  e << YAML::Key << "train_classes" << YAML::Value << plan.dataset.train_classes;
  const SynthSpec& s = plan.dataset.synth;
  e << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "classes" << YAML::Value << s.classes;
  e << YAML::Key << "per_class" << YAML::Value << s.per_class;
  e << YAML::Key << "shape" << YAML::Value;
  emit_list(e, s.sample_shape);
  e << YAML::Key << "spread" << YAML::Value << num(s.spread);
  e << YAML::Key << "separation" << YAML::Value << num(s.separation);
  e << YAML::Key << "latent_dim" << YAML::Value << s.latent_dim;
  e << YAML::Key << "seed" << YAML::Value << s.seed;
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "arch" << YAML::Value << to_string(plan.model.arch);
  e << YAML::Key << "input_shape" << YAML::Value;
  emit_list(e, plan.model.input_shape);
  e << YAML::Key << "hidden" << YAML::Value;
  emit_list(e, plan.model.hidden);
  e << YAML::EndMap;

  e << YAML::Key << "trainer" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "preset" << YAML::Value << plan.preset;
  e << YAML::Key << "wc" << YAML::Value << num(t.wc);
  e << YAML::Key << "wa" << YAML::Value << num(t.wa);
  e << YAML::Key << "inner_lr" << YAML::Value << num(t.inner_lr);
  e << YAML::Key << "outer_lr" << YAML::Value << num(t.outer_lr);
  e << YAML::Key << "inner_steps" << YAML::Value << t.inner_steps;
  e << YAML::Key << "test_inner_steps" << YAML::Value << t.test_inner_steps;
  e << YAML::Key << "second_order" << YAML::Value << t.second_order;
  e << YAML::Key << "epochs" << YAML::Value << t.epochs;
  e << YAML::Key << "steps_per_epoch" << YAML::Value << t.steps_per_epoch;
  e << YAML::Key << "eval_episodes" << YAML::Value << t.eval_episodes;
  e << YAML::EndMap;

  e << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "ways" << YAML::Value << t.task.ways;
  e << YAML::Key << "test_shots" << YAML::Value << t.task.test_shots;
  e << YAML::Key << "train_shots" << YAML::Value << t.task.train_shots;
  e << YAML::Key << "queries" << YAML::Value << t.task.queries;
  e << YAML::Key << "tasks" << YAML::Value << t.task.tasks;
  e << YAML::EndMap;

  e << YAML::Key << "attacks" << YAML::Value;
  emit_attack(e, t.train_attack);

  e << YAML::Key << "evaluation" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "episodes" << YAML::Value << plan.eval.episodes;
  e << YAML::Key << "attacks" << YAML::Value << YAML::BeginSeq;
  for (const auto& a : plan.eval.attacks) emit_attack(e, a);
  e << YAML::EndSeq;
  e << YAML::Key << "id_samples" << YAML::Value << plan.eval.id_samples;
  e << YAML::Key << "id_target" << YAML::Value << num(plan.eval.id_target);
  e << YAML::Key << "id_attack" << YAML::Value;
  emit_attack(e, plan.eval.id_attack);
  e << YAML::Key << "id_space" << YAML::Value << (plan.eval.id_space == NoiseSpace::Feature ? "feature" : "input");
  e << YAML::EndMap;

  e << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "axis" << YAML::Value << to_string(plan.axis);
  e << YAML::Key << "values" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (const auto& v : plan.sweep) {
    if (plan.axis == SweepAxis::WeightRatio) {
      e << YAML::DoubleQuoted << (num(v.ratio.first) + ":" + num(v.ratio.second));
    } else {
      e << num(v.value);
    }
  }
  e << YAML::EndSeq << YAML::EndMap;

  e << YAML::Key << "seeds" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (auto sd : plan.seeds) e << sd;
  e << YAML::EndSeq;
  e << YAML::Key << "output_dir" << YAML::Value << plan.output_dir.string();
  e << YAML::Key << "workers" << YAML::Value << plan.workers;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

std::vector<Cell> expand_cells(const ExperimentPlan& plan) {
  plan.validate();
  std::vector<SweepValue> values = plan.sweep;
  if (plan.axis == SweepAxis::None) values = {SweepValue{}};
  std::vector<Cell> cells;
  for (const auto& v : values) {
    for (std::uint64_t seed : plan.seeds) {
      Cell c;
      c.value = v;
      c.seed = seed;
      c.eval = plan.eval;
      c.trainer = plan.trainer;
      c.trainer.seed = seed;
      switch (plan.axis) {
        case SweepAxis::None: break;
        case SweepAxis::TrainShots: c.trainer.task.train_shots = static_cast<std::size_t>(v.value); break;
        case SweepAxis::InnerSteps: c.trainer.inner_steps = static_cast<std::size_t>(v.value); break;
        case SweepAxis::Epsilon: c.trainer.train_attack.epsilon = v.value; break;
        case SweepAxis::WeightRatio:
          c.trainer.wc = v.ratio.first;
          c.trainer.wa = v.ratio.second;
          c.trainer.pathways = preset_pathways(c.trainer.name, v.ratio.first, v.ratio.second);
          break;
      }
      c.id = (plan.axis == SweepAxis::None ? "" : to_string(plan.axis) + "-" + sanitize(v.label(plan.axis)) + "_") +
             "seed-" + std::to_string(seed);
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

std::string cell_fingerprint(const ExperimentPlan& plan, const Cell& cell) {
  const TrainerConfig& t = cell.trainer;
  json pathways = json::array();
  for (const auto& p : t.pathways) {
    json terms = json::array();
    for (const auto& q : p.query_terms) terms.push_back({q.variant == Variant::Clean ? "clean" : "adv", q.weight});
    pathways.push_back({{"support", p.support == Variant::Clean ? "clean" : "adv"}, {"terms", terms}});
  }
  json eval_attacks = json::array();
  for (const auto& a : cell.eval.attacks) eval_attacks.push_back(attack_json(a));
  const SynthSpec& s = plan.dataset.synth;
  const json j = {
      {"dataset",
       {{"kind", plan.dataset.kind},
        {"path", plan.dataset.path.string()},
        {"train_classes", plan.dataset.train_classes},
        {"synthetic",
         {{"classes", s.classes}, {"per_class", s.per_class}, {"shape", s.sample_shape}, {"spread", s.spread},
          {"separation", s.separation}, {"latent_dim", s.latent_dim}, {"seed", s.seed}}}}},
      {"model", {{"arch", to_string(plan.model.arch)}, {"input_shape", plan.model.input_shape}, {"hidden", plan.model.hidden}}},
      {"trainer",
       {{"name", t.name},
        {"pathways", pathways},
        {"task", {{"ways", t.task.ways}, {"test_shots", t.task.test_shots}, {"train_shots", t.task.train_shots},
                  {"queries", t.task.queries}, {"tasks", t.task.tasks}}},
        {"inner_lr", t.inner_lr},
        {"outer_lr", t.outer_lr},
        {"inner_steps", t.inner_steps},
        {"test_inner_steps", t.test_inner_steps},
        {"train_attack", attack_json(t.train_attack)},
        {"second_order", t.second_order},
        {"epochs", t.epochs},
        {"steps_per_epoch", t.steps_per_epoch},
        {"eval_episodes", t.eval_episodes},
        {"seed", t.seed}}},
      {"evaluation",
       {{"episodes", cell.eval.episodes},
        {"attacks", eval_attacks},
        {"id_samples", cell.eval.id_samples},
        {"id_target", cell.eval.id_target},
        {"id_attack", attack_json(cell.eval.id_attack)},
        {"id_space", cell.eval.id_space == NoiseSpace::Feature ? "feature" : "input"}}},
      {"cell", cell.id}};
  return j.dump();
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RunReport run_plan(const ExperimentPlan& plan) {
  const std::vector<Cell> cells = expand_cells(plan);
  const Dataset ds = load_dataset(plan.dataset);
  const ModelSpec spec = resolve_model(plan, ds);
  const fs::path out = plan.output_dir;
  fs::create_directories(out / "cells");
  write_file(out / "plan.yaml", plan_to_yaml(plan));

  std::map<std::string, ManifestEntry> previous;
  if (fs::exists(out / "manifest.json")) {
    for (auto& e : read_manifest(out).cells) previous[e.id] = e;
  }

  Manifest manifest;
  manifest.plan_id = plan.id;
  manifest.preset = plan.preset;
  manifest.axis = to_string(plan.axis);
  RunReport report;
  report.cells = cells.size();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    ManifestEntry e;
    e.id = cells[i].id;
    e.hash = hex64(fnv1a64(cell_fingerprint(plan, cells[i]) + kCodeVersion));
    e.label = plan.axis == SweepAxis::None ? "" : cells[i].value.label(plan.axis);
    e.x = axis_x(plan.axis, cells[i].value);
    e.seed = cells[i].seed;
    const auto it = previous.find(e.id);
    const fs::path cdir = out / "cells" / e.id;
    const bool done = it != previous.end() && it->second.status == "complete" && it->second.hash == e.hash &&
                      fs::exists(cdir / "episodes.csv") && fs::exists(cdir / "id.csv");
    if (done) {
      e.status = "complete";
      ++report.skipped;
    } else {
      todo.push_back(i);
    }
    manifest.cells.push_back(e);
  }
  write_file(out / "manifest.json", manifest_json(manifest).dump(2) + "\n");

  std::mutex mu;
  std::condition_variable cv;
  std::deque<CellOutcome> finished;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      CellOutcome o;
      o.index = todo[k];
      try {
        o.meta_steps = run_cell(spec, ds, cells[o.index], out / "cells" / cells[o.index].id);
        o.ok = true;
      } catch (const std::exception& ex) {
        o.error = ex.what();
      }
      {
        std::lock_guard<std::mutex> lock(mu);
        finished.push_back(std::move(o));
      }
      cv.notify_one();
    }
  };
  const std::size_t n_workers = std::min(plan.workers, todo.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);

  // This thread is the only manifest writer.
  for (std::size_t done = 0; done < todo.size(); ++done) {
    CellOutcome o;
    {
      std::unique_lock<std::mutex> lock(mu);
      cv.wait(lock, [&] { return !finished.empty(); });
      o = std::move(finished.front());
      finished.pop_front();
    }
    ManifestEntry& e = manifest.cells[o.index];
    report.meta_steps += o.meta_steps;
    if (o.ok) {
      e.status = "complete";
      e.error.clear();
      ++report.trained;
    } else {
      e.status = "failed";
      e.error = o.error;
      ++report.failed;
      report.failures.emplace_back(e.id, o.error);
    }
    write_file(out / "manifest.json", manifest_json(manifest).dump(2) + "\n");
  }
  for (auto& t : pool) t.join();
  write_summary(out);
  return report;
}

void write_summary(const fs::path& dir) {
  const Aggregate agg = aggregate(dir);
  json groups = json::array();
  for (const auto& g : agg.groups) {
    json metrics = json::object();
    for (const auto& [name, s] : g.metrics) metrics[name] = {{"mean", s.mean}, {"ci95", s.ci95}, {"n", s.n}};
    groups.push_back({{"value", g.label},
                      {"x", std::isfinite(g.x) ? json(g.x) : json(nullptr)},
                      {"cells", g.cells},
                      {"seeds", g.seeds},
                      {"metrics", metrics}});
  }
  json failed = json::array();
  for (const auto& c : agg.manifest.cells) {
    if (c.status == "failed") failed.push_back({{"cell", c.id}, {"error", c.error}});
  }
  const json j = {{"plan_id", agg.manifest.plan_id},
                  {"preset", agg.manifest.preset},
                  {"axis", agg.manifest.axis},
                  {"code_version", kCodeVersion},
                  {"groups", groups},
                  {"incomplete", agg.incomplete},
                  {"failed", failed}};
  write_file(dir / "summary.json", j.dump(2) + "\n");
}

MissingCellsError::MissingCellsError(std::vector<std::string> cells)
    : std::runtime_error([&] {
        std::string msg = "incomplete cells:";
        for (const auto& c : cells) msg += " " + c;
        return msg;
      }()),
      cells_(std::move(cells)) {}

void emit_plot_data(const std::vector<fs::path>& dirs, const std::string& figure, const fs::path& out) {
  if (dirs.empty()) throw std::invalid_argument("emit_plot_data: no plan directories");
  if (figure != "shots" && figure != "tradeoff" && figure != "steps" && figure != "id") {
    throw std::invalid_argument("unknown figure '" + figure + "' (expected shots, tradeoff, steps or id)");
  }
  std::vector<Aggregate> aggs;
  std::vector<std::string> missing;
  for (const auto& d : dirs) {
    aggs.push_back(aggregate(d));
    for (const auto& c : aggs.back().incomplete) missing.push_back(aggs.back().manifest.plan_id + "/" + c);
  }
  if (!missing.empty()) throw MissingCellsError(missing);

  std::ostringstream csv;
  if (figure == "tradeoff") {
    csv << "method,setting,clean_mean,clean_ci_low,clean_ci_high,robust_mean,robust_ci_low,robust_ci_high\n";
    for (const auto& a : aggs) {
      for (const auto& g : a.groups) {
        const Stat* clean = find_metric(g, "clean");
        const Stat* robust = nullptr;
        for (const auto& [name, s] : g.metrics) {
          if (name.rfind("robust_", 0) == 0) {
            robust = &s;
            break;
          }
        }
        if (!clean || !robust) throw std::runtime_error(a.manifest.plan_id + ": no robust accuracy column");
        const std::string setting = a.manifest.axis == "none" ? "default" : a.manifest.axis + "=" + g.label;
        csv << a.manifest.preset << "," << setting << "," << num(clean->mean) << "," << num(clean->mean - clean->ci95)
            << "," << num(clean->mean + clean->ci95) << "," << num(robust->mean) << ","
            << num(robust->mean - robust->ci95) << "," << num(robust->mean + robust->ci95) << "\n";
      }
    }
  } else {
    const std::string needed = figure == "shots" ? "train_shots" : figure == "steps" ? "inner_steps" : "";
    csv << "x,series,mean,ci_low,ci_high,n\n";
    for (const auto& a : aggs) {
      if (!needed.empty() && a.manifest.axis != needed) {
        throw std::invalid_argument(a.manifest.plan_id + ": figure " + figure + " needs a " + needed + " sweep");
      }
      if (a.manifest.axis == "none" || a.manifest.axis == "w_ratio") {
        throw std::invalid_argument(a.manifest.plan_id + ": figure " + figure + " needs a numeric sweep axis");
      }
      for (std::size_t i = 1; i < a.groups.size(); ++i) {
        if (!(a.groups[i].x > a.groups[i - 1].x)) {
          throw std::runtime_error(a.manifest.plan_id + ": sweep values are not strictly increasing");
        }
      }
      const std::string prefix = aggs.size() > 1 ? a.manifest.plan_id + ":" : "";
      std::vector<std::string> series;
      for (const auto& [name, s] : a.groups.front().metrics) {
        const bool is_id = name.rfind("id_", 0) == 0;
        if ((figure == "id") == is_id) series.push_back(name);
      }
      for (const auto& name : series) {
        for (const auto& g : a.groups) {
          const Stat* s = find_metric(g, name);
          csv << num(g.x) << "," << prefix << a.manifest.preset << "/" << name << "," << num(s->mean) << ","
              << num(s->mean - s->ci95) << "," << num(s->mean + s->ci95) << "," << s->n << "\n";
        }
      }
    }
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file(out, csv.str());
}

}  // namespace rmaml

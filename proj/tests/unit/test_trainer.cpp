#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "rmaml/graph.hpp"
#include "rmaml/ops.hpp"
#include "rmaml/trainer.hpp"

using namespace rmaml;

namespace {

struct Setup {
  ModelSpec spec;
  Dataset ds;

  explicit Setup(double spread = 0.15, double separation = 0.15, std::size_t classes = 15) {
    spec.input_shape = {12};
    spec.hidden = {16, 8};
    SynthSpec s;
    s.classes = classes;
    s.per_class = 25;
    s.sample_shape = {12};
    s.spread = spread;
    s.separation = separation;
    s.seed = 21;
    ds = synth_gaussian_dataset(s);
  }

  TrainerConfig config(const std::string& preset, double wc = 1.0, double wa = 1.0) const {
    TrainerConfig cfg = make_trainer_config(preset, wc, wa);
    cfg.task.queries = 5;
    cfg.task.tasks = 2;
    cfg.inner_lr = 0.1;
    cfg.outer_lr = 0.05;
    cfg.inner_steps = 2;
    cfg.train_attack = AttackConfig::fgsm(8);
    cfg.epochs = 1;
    cfg.steps_per_epoch = 5;
    cfg.seed = 3;
    return cfg;
  }

  std::vector<Episode> episodes(const TaskSpec& task, std::size_t count, std::uint64_t seed) const {
    Rng rng = make_stream(seed, 0);
    std::vector<Episode> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(sample_episode(ds, task, Phase::MetaTrain, rng));
    return out;
  }
};

ParamSet scalar_param(double v) {
  ParamSet p;
  p.add("theta", Tensor::scalar(v));
  return p;
}

bool same_trajectory(const TrainResult& a, const TrainResult& b) {
  if (!bit_equal(a.params, b.params) || a.metrics.size() != b.metrics.size()) return false;
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    MetricsRecord x = a.metrics[i];
    MetricsRecord y = b.metrics[i];
    x.trainer = y.trainer;
    x.wc = y.wc;
    x.wa = y.wa;
    if (!same_results(x, y)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("preset pathway tables") {
  CHECK(preset_pathways("maml").size() == 1);
  CHECK(preset_pathways("adml").size() == 2);
  const auto r = preset_pathways("rmaml", 1.0, 0.2);
  REQUIRE(r[0].query_terms.size() == 2);
  CHECK(r[0].query_terms[1].variant == Variant::Adversarial);
  CHECK(r[0].query_terms[1].weight == 0.2);
  CHECK(is_known_preset("its-maml"));
  CHECK_FALSE(is_known_preset("reptile"));
  CHECK_THROWS(preset_pathways("reptile"));
  CHECK_THROWS(PathwaySpec{Variant::Clean, {}}.validate());
  CHECK_THROWS(PathwaySpec{Variant::Clean, {{Variant::Clean, -1.0}}}.validate());
}

TEST_CASE("zero inner steps return the parameters unchanged") {
  const Setup s;
  const ParamSet p = init_params(s.spec, 1);
  const auto ep = s.episodes(TaskSpec{}, 1, 1).front();
  CHECK(bit_equal(inner_finetune(s.spec, p, ep.support_x, ep.support_y, 0.1, 0, false), p));
  GradModeGuard on(true);
  auto graph = Graph::create();
  const ParamSet tracked = p.tracked(*graph);
  CHECK(bit_equal(inner_finetune(s.spec, tracked, ep.support_x, ep.support_y, 0.1, 0, true), p));
}

TEST_CASE("two steps on a quadratic") {
  const SupportLoss quadratic = [](const ParamSet& p) { return mul(p.value(0), p.value(0)); };
  const ParamSet plain = inner_finetune(quadratic, scalar_param(1.0), 0.1, 2, false);
  CHECK(plain.value(0).item() == doctest::Approx(0.64).epsilon(1e-15));

  GradModeGuard on(true);
  auto graph = Graph::create();
  const ParamSet theta = scalar_param(1.0).tracked(*graph);
  const ParamSet adapted = inner_finetune(quadratic, theta, 0.1, 2, true);
  CHECK(adapted.value(0).item() == doctest::Approx(0.64).epsilon(1e-15));
  // d theta' / d theta = (1 - 2 alpha)^2
  CHECK(grad(adapted.value(0), theta.value(0)).item() == doctest::Approx(0.64).epsilon(1e-15));
}

TEST_CASE("one-step meta-gradient carries the Hessian term") {
  const double alpha = 0.3;
  const double b = -0.4;
  const SupportLoss support = [](const ParamSet& p) { return exp(p.value(0)); };
  for (double t0 : {-1.0, 0.2, 0.9}) {
    for (bool second_order : {true, false}) {
      GradModeGuard on(true);
      auto graph = Graph::create();
      const ParamSet theta = scalar_param(t0).tracked(*graph);
      const ParamSet adapted = inner_finetune(support, theta, alpha, 1, true, second_order);
      const Tensor d = sub(adapted.value(0), Tensor::scalar(b));
      const double g = grad(mul(d, d), theta.value(0)).item();
      const double t1 = t0 - alpha * std::exp(t0);
      const double query_slope = 2.0 * (t1 - b);
      const double expected = second_order ? (1.0 - alpha * std::exp(t0)) * query_slope : query_slope;
      CHECK(std::abs(g - expected) <= 1e-6 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST_CASE("meta-step gradient matches finite differences of the meta-loss") {
  const Setup s;
  TrainerConfig cfg = s.config("maml");
  cfg.outer_lr = 1.0;
  const auto eps = s.episodes(cfg.task, 2, 7);
  const ParamSet p = init_params(s.spec, 5);
  Rng unused = make_stream(0, 0);
  const MetaStepResult r = meta_step(cfg, s.spec, p, eps, unused);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(p.total_size());
  for (auto& x : v) x = normal(rng);
  const auto base = p.flatten();
  const auto stepped = r.params.flatten();
  double analytic = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) analytic += (base[i] - stepped[i]) * v[i];

  auto loss_at = [&](double h) {
    std::vector<double> moved(base);
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += h * v[i];
    Rng a = make_stream(0, 0);
    return meta_step(cfg, s.spec, p.unflatten(moved), eps, a).meta_loss;
  };
  const double h = 1e-5;
  const double numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
  CHECK(std::abs(analytic - numeric) <= 1e-5 * std::max(1.0, std::abs(numeric)));

  cfg.second_order = false;
  Rng again = make_stream(0, 0);
  const auto first = meta_step(cfg, s.spec, p, eps, again).params.flatten();
  double first_order = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) first_order += (base[i] - first[i]) * v[i];
  CHECK(std::abs(first_order - numeric) > 1e-4 * std::abs(numeric));
}

TEST_CASE("maml without inner steps is a supervised step on the query set") {
  const Setup s;
  TrainerConfig cfg = s.config("maml");
  cfg.inner_steps = 0;
  cfg.task.tasks = 1;
  const auto eps = s.episodes(cfg.task, 1, 2);
  const ParamSet p = init_params(s.spec, 8);
  Rng rng = make_stream(0, 0);
  const MetaStepResult r = meta_step(cfg, s.spec, p, eps, rng);

  GradModeGuard on(true);
  auto graph = Graph::create();
  const ParamSet t = p.tracked(*graph);
  const Tensor loss = softmax_cross_entropy(forward(s.spec, t, eps[0].query_x), eps[0].query_y);
  const auto g = grad(loss, t.values());
  CHECK(r.meta_loss == loss.item());
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(bit_equal(r.params.value(i), sub(p.value(i), scale(g[i], cfg.outer_lr)).detach()));
  }
}

TEST_CASE("adml fine-tunes twice per task") {
  const Setup s;
  const TrainerConfig cfg = s.config("adml");
  const auto eps = s.episodes(cfg.task, 3, 3);
  Rng rng = make_stream(0, 0);
  CHECK(meta_step(cfg, s.spec, init_params(s.spec, 1), eps, rng).finetunes == 6);
  Rng rng2 = make_stream(0, 0);
  CHECK(meta_step(s.config("rmaml"), s.spec, init_params(s.spec, 1), eps, rng2).finetunes == 3);
}

TEST_CASE("robust presets collapse onto their special cases") {
  const Setup s;
  auto run = [&](TrainerConfig cfg) {
    cfg.epochs = 5;
    cfg.steps_per_epoch = 10;
    cfg.eval_episodes = 10;
    cfg.eval_attacks = {AttackConfig::fgsm(8)};
    return train(cfg, s.spec, s.ds);
  };
  CHECK(same_trajectory(run(s.config("its-maml", 1.0, 0.0)), run(s.config("maml"))));
  CHECK(same_trajectory(run(s.config("its-maml", 0.0, 1.0)), run(s.config("aq"))));
  CHECK_FALSE(same_trajectory(run(s.config("its-maml", 1.0, 1.0)), run(s.config("maml"))));
}

TEST_CASE("scaling the weights up and the outer rate down leaves the trajectory unchanged") {
  const Setup s;
  TrainerConfig a = s.config("rmaml", 1.0, 0.5);
  TrainerConfig b = s.config("rmaml", 4.0, 2.0);
  b.outer_lr = a.outer_lr / 4.0;
  CHECK(bit_equal(train(a, s.spec, s.ds).params, train(b, s.spec, s.ds).params));
}

TEST_CASE("training is deterministic and writes checkpoints") {
  const Setup s;
  TrainerConfig cfg = s.config("rmaml");
  cfg.epochs = 2;
  cfg.eval_episodes = 5;
  cfg.eval_attacks = {AttackConfig::pgd(4, 3)};
  const auto dir = std::filesystem::temp_directory_path() / "rmaml_train";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::size_t calls = 0;
  TrainOptions opts;
  opts.checkpoint_dir = dir;
  opts.on_step = [&](std::size_t, std::size_t, double) { ++calls; };
  const TrainResult a = train(cfg, s.spec, s.ds, opts);
  const TrainResult b = train(cfg, s.spec, s.ds);
  CHECK(calls == 10);
  CHECK(a.meta_steps == 10);
  CHECK(same_trajectory(a, b));
  CHECK(a.metrics[1].robust_acc.at(0).first == "pgd");
  CHECK(bit_equal(load_params(dir / "epoch_002"), a.params));
  CHECK(std::filesystem::exists(dir / "epoch_001.json"));

  cfg.seed = 4;
  CHECK_FALSE(bit_equal(train(cfg, s.spec, s.ds).params, a.params));
}

TEST_CASE("maml learns separable tasks") {
  Setup s(0.03, 0.25, 30);
  s.spec.hidden = {32, 32};
  TrainerConfig cfg = s.config("maml");
  cfg.inner_lr = 0.5;
  cfg.outer_lr = 0.1;
  cfg.inner_steps = 3;
  cfg.steps_per_epoch = 200;
  const TrainResult r = train(cfg, s.spec, s.ds);
  const EvalResult ev = meta_test(s.spec, r.params, s.ds, cfg.task, 10, cfg.inner_lr, {}, 100, 9);
  CHECK(ev.clean_mean > 0.9);
}

TEST_CASE("untrained models score at chance and intervals shrink with episodes") {
  const Setup s;
  const ParamSet p = init_params(s.spec, 77);
  TaskSpec task;
  task.queries = 5;
  const std::vector<AttackConfig> attacks{AttackConfig::fgsm(0)};
  const EvalResult small = meta_test(s.spec, p, s.ds, task, 0, 0.1, attacks, 100, 1);
  const EvalResult large = meta_test(s.spec, p, s.ds, task, 0, 0.1, attacks, 400, 1);
  CHECK(std::abs(large.clean_mean - 0.2) < 3.0 * large.clean_ci95 / 1.96);
  CHECK(large.clean_per_episode == large.robust[0].per_episode);
  const double ratio = large.clean_ci95 / small.clean_ci95;
  CHECK(ratio > 0.4);
  CHECK(ratio < 0.6);
  // Episode e is the same task in both runs.
  for (std::size_t e = 0; e < 100; ++e) CHECK(small.clean_per_episode[e] == large.clean_per_episode[e]);
}

TEST_CASE("support sizes are checked") {
  const Setup s;
  TrainerConfig cfg = s.config("maml");
  TaskSpec other = cfg.task;
  other.train_shots = 2;
  const auto eps = s.episodes(other, 1, 1);
  Rng rng = make_stream(0, 0);
  CHECK_THROWS_AS(meta_step(cfg, s.spec, init_params(s.spec, 1), eps, rng), std::logic_error);
  CHECK_THROWS_AS(meta_step(cfg, s.spec, init_params(s.spec, 1), {}, rng), std::invalid_argument);
}

TEST_CASE("divergence raises a training error") {
  const Setup s;
  TrainerConfig cfg = s.config("maml");
  cfg.outer_lr = 1e300;
  try {
    train(cfg, s.spec, s.ds);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() == 1);
    CHECK(e.step() >= 1);
  }
}

TEST_CASE("metric rows") {
  MetricsRecord m;
  m.epoch = 3;
  m.trainer = "rmaml";
  m.train_shots = 2;
  m.wc = 1;
  m.wa = 0.2;
  m.clean_acc = 0.5;
  m.robust_acc = {{"pgd", 0.25}};
  m.meta_loss = 1.5;
  CHECK(metrics_csv_header({"pgd"}) == "epoch,trainer,train_shots,wc,wa,clean_acc,robust_pgd,meta_loss,wall_clock_s");
  CHECK(metrics_csv_row(m) == "3,rmaml,2,1,0.2,0.5,0.25,1.5,0");
  CHECK(metrics_json_line(m).find("\"pgd\":0.25") != std::string::npos);
  const auto [mean, ci] = mean_ci95(std::vector<double>{1, 2, 3});
  CHECK(mean == 2.0);
  CHECK(ci == doctest::Approx(1.96 / std::sqrt(3.0)));
}

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rmaml/attacks.hpp"
#include "rmaml/graph.hpp"
#include "rmaml/ops.hpp"

using namespace rmaml;

namespace {

struct Fixture {
  ModelSpec spec;
  Dataset ds;
  ParamSet params;

  Fixture() {
    spec.input_shape = {16};
    spec.hidden = {24, 12};
    SynthSpec s;
    s.classes = 10;
    s.per_class = 20;
    s.sample_shape = {16};
    s.seed = 3;
    ds = synth_gaussian_dataset(s);
    params = init_params(spec, 4);
  }

  Episode episode(Rng& rng, std::size_t queries = 15) const {
    TaskSpec t;
    t.queries = queries;
    return sample_episode(ds, t, Phase::MetaTrain, rng);
  }

  double loss(const Tensor& x, std::span<const int> y) const {
    NoGradGuard off;
    return softmax_cross_entropy(forward(spec, params, x), y).item();
  }
};

double max_abs_delta(const AdvBatch& adv) {
  double m = 0.0;
  for (double d : adv.delta.data()) m = std::max(m, std::abs(d));
  return m;
}

}  // namespace

TEST_CASE("config normalisation") {
  const AttackConfig f = AttackConfig::fgsm(8);
  CHECK(f.steps == 1);
  CHECK(f.step() == f.radius());
  CHECK(f.radius() == 8.0 / 255.0);
  const AttackConfig p = AttackConfig::pgd(8, 10);
  CHECK(p.random_start);
  CHECK(p.step() == doctest::Approx(2.0 / 255.0));
  CHECK(AttackConfig::cw_margin(8, 10).loss == AttackLoss::Margin);
  AttackConfig bad = p;
  bad.epsilon = -1;
  CHECK_THROWS(bad.validate());
  CHECK(parse_attack_family("cw_margin_pgd") == AttackFamily::CwMarginPgd);
  CHECK_THROWS(parse_attack_family("deepfool"));
}

TEST_CASE("zero budget is the identity") {
  const Fixture fx;
  Rng rng = make_stream(1, 0);
  const Episode ep = fx.episode(rng);
  for (const AttackConfig& cfg : {AttackConfig::fgsm(0), AttackConfig::pgd(0, 5), AttackConfig::cw_margin(0, 5)}) {
    const AdvBatch adv = run_attack(fx.spec, fx.params, ep.query_x, ep.query_y, cfg, &rng);
    CHECK(bit_equal(adv.x_adv, ep.query_x));
    for (double d : adv.delta.data()) CHECK(d == 0.0);
  }
}

TEST_CASE("fgsm perturbs every free coordinate by exactly epsilon") {
  const Fixture fx;
  Rng rng = make_stream(2, 0);
  const Episode ep = fx.episode(rng);
  const AttackConfig cfg = AttackConfig::fgsm(4);
  const AdvBatch adv = fgsm(fx.spec, fx.params, ep.query_x, ep.query_y, cfg);
  const auto x = ep.query_x.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = adv.delta[i];
    const bool interior = x[i] >= cfg.radius() && x[i] <= 1.0 - cfg.radius();
    if (interior) {
      CHECK((d == 0.0 || std::abs(std::abs(d) - cfg.radius()) < 1e-15));
    } else {
      CHECK(std::abs(d) <= cfg.radius());
    }
  }
}

TEST_CASE("fgsm raises the loss on almost every batch") {
  const Fixture fx;
  Rng rng = make_stream(3, 0);
  int raised = 0;
  for (int b = 0; b < 100; ++b) {
    const Episode ep = fx.episode(rng);
    const AdvBatch adv = fgsm(fx.spec, fx.params, ep.query_x, ep.query_y, AttackConfig::fgsm(2));
    raised += fx.loss(adv.x_adv, ep.query_y) >= fx.loss(ep.query_x, ep.query_y);
  }
  CHECK(raised >= 95);
}

TEST_CASE("single-step pgd without random start equals fgsm") {
  const Fixture fx;
  Rng rng = make_stream(4, 0);
  for (double eps : {1.0, 4.0, 16.0}) {
    const Episode ep = fx.episode(rng);
    AttackConfig p = AttackConfig::pgd(eps, 1);
    p.random_start = false;
    p.step_size = eps;
    const AdvBatch a = pgd(fx.spec, fx.params, ep.query_x, ep.query_y, p, nullptr);
    const AdvBatch b = fgsm(fx.spec, fx.params, ep.query_x, ep.query_y, AttackConfig::fgsm(eps));
    CHECK(bit_equal(a.x_adv, b.x_adv));
    CHECK(bit_equal(a.delta, b.delta));
  }
}

TEST_CASE("every family stays inside the ball and the unit box") {
  const Fixture fx;
  Rng rng = make_stream(5, 0);
  std::uniform_real_distribution<double> eps_dist(0.0, 32.0);
  for (int trial = 0; trial < 60; ++trial) {
    const Episode ep = fx.episode(rng, 4);
    const double eps = eps_dist(rng);
    const AttackConfig cfgs[] = {AttackConfig::fgsm(eps), AttackConfig::pgd(eps, 10), AttackConfig::cw_margin(eps, 10)};
    for (const auto& cfg : cfgs) {
      const AdvBatch adv = run_attack(fx.spec, fx.params, ep.query_x, ep.query_y, cfg, &rng);
      CHECK(max_abs_delta(adv) <= cfg.radius() + 1e-15);
      for (double v : adv.x_adv.data()) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("ten pgd steps are at least as strong as one") {
  const Fixture fx;
  Rng rng = make_stream(6, 0);
  int stronger = 0;
  for (int b = 0; b < 50; ++b) {
    const Episode ep = fx.episode(rng);
    AttackConfig one = AttackConfig::pgd(4, 1);
    one.random_start = false;
    AttackConfig ten = AttackConfig::pgd(4, 10);
    ten.random_start = false;
    const double l1 = fx.loss(pgd(fx.spec, fx.params, ep.query_x, ep.query_y, one, nullptr).x_adv, ep.query_y);
    const double l10 = fx.loss(pgd(fx.spec, fx.params, ep.query_x, ep.query_y, ten, nullptr).x_adv, ep.query_y);
    stronger += l10 >= l1;
  }
  CHECK(stronger >= 45);
}

TEST_CASE("margin attack leaves misclassified inputs misclassified") {
  const Fixture fx;
  Rng rng = make_stream(7, 0);
  const Episode ep = fx.episode(rng);
  std::vector<int> predicted;
  {
    NoGradGuard off;
    predicted = argmax_rows(forward(fx.spec, fx.params, ep.query_x));
  }
  AttackConfig cfg = AttackConfig::cw_margin(4, 10);
  cfg.random_start = false;
  const AdvBatch adv = cw_margin_pgd(fx.spec, fx.params, ep.query_x, ep.query_y, cfg, nullptr);
  NoGradGuard off;
  const auto after = argmax_rows(forward(fx.spec, fx.params, adv.x_adv));
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] != ep.query_y[i]) CHECK(after[i] != ep.query_y[i]);
  }
}

TEST_CASE("zero-budget robust accuracy equals clean accuracy") {
  const Fixture fx;
  Rng rng = make_stream(8, 0);
  for (int e = 0; e < 20; ++e) {
    const Episode ep = fx.episode(rng);
    const double clean = accuracy(forward(fx.spec, fx.params, ep.query_x), ep.query_y);
    for (const auto& cfg : {AttackConfig::fgsm(0), AttackConfig::pgd(0, 3), AttackConfig::cw_margin(0, 3)}) {
      CHECK(robust_accuracy(fx.spec, fx.params, ep, cfg, &rng) == clean);
    }
  }
}

TEST_CASE("random model sits at chance") {
  const Fixture fx;
  Rng rng = make_stream(9, 0);
  double total = 0.0;
  const int episodes = 200;
  for (int e = 0; e < episodes; ++e) {
    const ParamSet p = init_params(fx.spec, 100 + static_cast<std::uint64_t>(e));
    const Episode ep = fx.episode(rng);
    total += robust_accuracy(fx.spec, p, ep, AttackConfig::fgsm(0), &rng);
  }
  const double n = episodes * 75.0;
  const double sigma = std::sqrt(0.2 * 0.8 / n);
  // Episode-level correlation inflates the spread; allow it with the per-episode standard error.
  CHECK(std::abs(total / episodes - 0.2) < 3.0 * std::max(sigma, std::sqrt(0.2 * 0.8 / episodes)));
}

TEST_CASE("separable toy keeps perfect accuracy under a tiny budget") {
  ModelSpec spec;
  spec.input_shape = {2};
  spec.hidden = {2};
  spec.ways = 2;
  ParamSet p;
  p.add("layer0.weight", Tensor({2, 2}, {1, 0, 0, 1}));
  p.add("layer0.bias", Tensor::zeros({2}));
  p.add("head.weight", Tensor({2, 2}, {1, -1, -1, 1}));
  p.add("head.bias", Tensor::zeros({2}));
  const Tensor x({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.7});
  const std::vector<int> y{0, 0, 1, 1};
  Episode ep;
  ep.query_x = x;
  ep.query_y = y;
  CHECK(accuracy(forward(spec, p, x), y) == 1.0);
  Rng rng = make_stream(0, 0);
  CHECK(robust_accuracy(spec, p, ep, AttackConfig::pgd(1, 10), &rng) == 1.0);
  CHECK(robust_accuracy(spec, p, ep, AttackConfig::fgsm(255), &rng) < 1.0);
}

TEST_CASE("robust accuracy does not increase with the budget") {
  const Fixture fx;
  Rng rng = make_stream(10, 0);
  std::vector<Episode> episodes;
  for (int e = 0; e < 40; ++e) episodes.push_back(fx.episode(rng));
  double previous = 2.0;
  for (double eps : {0.0, 1.0, 2.0, 4.0, 8.0}) {
    AttackConfig cfg = AttackConfig::pgd(eps, 10);
    cfg.random_start = false;
    double acc = 0.0;
    for (const auto& ep : episodes) acc += robust_accuracy(fx.spec, fx.params, ep, cfg, nullptr);
    acc /= static_cast<double>(episodes.size());
    CHECK(acc <= previous + 0.005);
    previous = acc;
  }
}

TEST_CASE("attacks are deterministic given the stream") {
  const Fixture fx;
  Rng rng = make_stream(11, 0);
  const Episode ep = fx.episode(rng);
  Rng a = make_stream(5, 5);
  Rng b = make_stream(5, 5);
  const AttackConfig cfg = AttackConfig::pgd(6, 7);
  CHECK(bit_equal(pgd(fx.spec, fx.params, ep.query_x, ep.query_y, cfg, &a).x_adv,
                  pgd(fx.spec, fx.params, ep.query_x, ep.query_y, cfg, &b).x_adv));
  CHECK_THROWS(pgd(fx.spec, fx.params, ep.query_x, ep.query_y, cfg, nullptr));
  CHECK_THROWS(fgsm(fx.spec, fx.params, ep.query_x, ep.query_y, cfg));
}

TEST_CASE("attacks do not touch the parameters' graph") {
  const Fixture fx;
  Rng rng = make_stream(12, 0);
  const Episode ep = fx.episode(rng);
  GradModeGuard on(true);
  auto graph = Graph::create();
  const ParamSet tracked = fx.params.tracked(*graph);
  const std::size_t before = graph->size();
  const AdvBatch adv = run_attack(fx.spec, tracked, ep.query_x, ep.query_y, AttackConfig::fgsm(4), &rng);
  CHECK(graph->size() == before);
  CHECK_FALSE(adv.x_adv.tracked());
}

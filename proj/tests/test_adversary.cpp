#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "coc/adversary.hpp"

using namespace coc;

namespace {

std::vector<std::vector<double>> gaussian_rows(double mean, double sigma,
                                               int n, Rng& rng) {
  std::vector<std::vector<double>> rows;
  rows.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) rows.push_back({mean + sigma * rng.normal()});
  return rows;
}

// Simpson quadrature of the JS divergence between two 1-d Gaussians.
double js_gaussians_quadrature(double m1, double m2, double sigma) {
  auto pdf = [&](double x, double m) {
    const double z = (x - m) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * M_PI));
  };
  const double lo = std::min(m1, m2) - 10.0 * sigma;
  const double hi = std::max(m1, m2) + 10.0 * sigma;
  const int n = 20000;  // even
  const double h = (hi - lo) / n;
  auto integrand = [&](double x) {
    const double p = pdf(x, m1), q = pdf(x, m2);
    const double mix = 0.5 * (p + q);
    double acc = 0.0;
    if (p > 0 && mix > 0) acc += 0.5 * p * std::log(p / mix);
    if (q > 0 && mix > 0) acc += 0.5 * q * std::log(q / mix);
    return acc;
  };
  double s = integrand(lo) + integrand(hi);
  for (int i = 1; i < n; ++i)
    s += integrand(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  return s * h / 3.0;
}

// exact JS for discrete distributions by enumeration
double js_discrete(const std::vector<double>& p, const std::vector<double>& q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) acc += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) acc += 0.5 * q[i] * std::log(q[i] / m);
  }
  return acc;
}

std::vector<std::vector<double>> one_hot_rows(const std::vector<double>& dist,
                                              int n, Rng& rng) {
  std::vector<std::vector<double>> rows;
  rows.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t k = rng.categorical(dist);
    std::vector<double> row(dist.size(), 0.0);
    row[k] = 1.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

TEST_CASE("disc_forward basics") {
  Discriminator d = Discriminator::init(8, 16, 2, 5);
  Rng rng(1);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> r(8);
    for (auto& x : r) x = rng.uniform(-1, 1);
    rows.push_back(r);
  }
  FeatureBatch fb = make_feature_batch(rows, Domain::SIM, Role::TEACHER);
  Tensor logits = disc_forward(d, fb);
  CHECK(logits.shape() == Shape{6});

  SUBCASE("zero-weight head gives the bias for every row") {
    for (auto& x : d.logit_head.weight.values()) x = 0.0;
    d.logit_head.bias.values()[0] = 0.37;
    Tensor l2 = disc_forward(d, fb);
    for (double v : l2.values()) CHECK(v == doctest::Approx(0.37));
  }

  SUBCASE("disabled alignment equals the identity map bitwise") {
    Tensor a = disc_forward(d, fb, AlignmentMap::disabled_map());
    Tensor b = disc_forward(d, fb, AlignmentMap::identity(8));
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a.values()[i] == b.values()[i]);
  }

  SUBCASE("logits stay finite on wide-range inputs") {
    Rng wide(2);
    std::vector<std::vector<double>> big;
    for (int i = 0; i < 512; ++i) {
      std::vector<double> r(8);
      for (auto& x : r) x = wide.uniform(-10, 10);
      big.push_back(r);
    }
    FeatureBatch fbw = make_feature_batch(big, Domain::REAL, Role::STUDENT);
    Tensor lw = disc_forward(d, fbw);
    for (double v : lw.values()) CHECK(std::isfinite(v));
  }

  SUBCASE("dimension mismatch rejected") {
    Discriminator d4 = Discriminator::init(4, 8, 1, 1);
    CHECK_THROWS_AS(disc_forward(d4, fb), shape_error);
  }
}

TEST_CASE("disc_loss closed forms and oracle") {
  SUBCASE("zero logits give ln 2") {
    Tensor z = Tensor::zeros({5});
    std::vector<Domain> labels = {Domain::SIM, Domain::REAL, Domain::SIM,
                                  Domain::REAL, Domain::SIM};
    CHECK(disc_loss(z, labels).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("perfect separation saturates to ~0") {
    Tensor z = Tensor::from({4}, {20.0, -20.0, 20.0, -20.0});
    std::vector<Domain> labels = {Domain::SIM, Domain::REAL, Domain::SIM,
                                  Domain::REAL};
    CHECK(disc_loss(z, labels).item() < 1e-8);
  }
  SUBCASE("matches an independent scalar computation") {
    Rng rng(3);
    std::vector<double> zv(100);
    std::vector<Domain> labels;
    for (auto& x : zv) x = rng.uniform(-4, 4);
    double want = 0.0;
    for (int i = 0; i < 100; ++i) {
      const bool sim = rng.uniform() < 0.5;
      labels.push_back(sim ? Domain::SIM : Domain::REAL);
      const double y = sim ? 1.0 : 0.0;
      // -y log sigma(z) - (1-y) log(1-sigma(z)), computed stably
      const double z = zv[std::size_t(i)];
      want += (std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::fabs(z)))) / 100.0;
    }
    Tensor z = Tensor::from({100}, zv);
    CHECK(disc_loss(z, labels).item() == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("per-sample clamp engages at rho") {
    Tensor z = Tensor::from({2}, {-50.0, 0.0});
    std::vector<Domain> labels = {Domain::SIM, Domain::REAL};
    std::vector<double> per;
    const double loss = disc_loss(z, labels, 5.0, &per).item();
    CHECK(per[0] == doctest::Approx(5.0));  // 50 nats clamped to rho
    CHECK(loss == doctest::Approx((5.0 + std::log(2.0)) / 2.0));
  }
  SUBCASE("length mismatch rejected") {
    CHECK_THROWS_AS(disc_loss(Tensor::zeros({3}), {Domain::SIM}), shape_error);
  }
}

TEST_CASE("identical distributions estimate to ~zero") {
  Rng rng(7);
  auto sim = gaussian_rows(0.0, 1.0, 1200, rng);
  auto real = gaussian_rows(0.0, 1.0, 1200, rng);
  EstimateConfig cfg;
  cfg.steps = 200;
  cfg.seed = 11;
  auto e = train_and_estimate(sim, real, cfg);
  CHECK(e.value >= 0.0);
  CHECK(e.value <= 0.02);
}

TEST_CASE("separated gaussians approach the quadrature value") {
  Rng rng(9);
  auto sim = gaussian_rows(5.0, 1.0, 1500, rng);
  auto real = gaussian_rows(-5.0, 1.0, 1500, rng);
  EstimateConfig cfg;
  cfg.steps = 300;
  cfg.seed = 13;
  auto e = train_and_estimate(sim, real, cfg);
  const double truth = js_gaussians_quadrature(5.0, -5.0, 1.0);
  CHECK(truth == doctest::Approx(std::log(2.0)).epsilon(1e-4));
  CHECK(std::fabs(e.value - truth) < 0.05);
}

TEST_CASE("lower-bound property against exact discrete JS") {
  Rng rng(21);
  const std::vector<double> p = {0.5, 0.5};
  const std::vector<double> q = {0.9, 0.1};
  auto sim = one_hot_rows(p, 3000, rng);
  auto real = one_hot_rows(q, 3000, rng);
  EstimateConfig cfg;
  cfg.steps = 250;
  cfg.seed = 17;
  auto e = train_and_estimate(sim, real, cfg);
  const double exact = js_discrete(p, q);
  CHECK(e.value <= exact + 0.01);
  CHECK(e.value > 0.02);  // the gap is real and detected
}

TEST_CASE("monotone response to growing separation") {
  std::vector<double> estimates;
  for (double sep : {0.0, 1.0, 2.0, 4.0}) {
    Rng rng(31);
    auto sim = gaussian_rows(sep / 2.0, 1.0, 1000, rng);
    auto real = gaussian_rows(-sep / 2.0, 1.0, 1000, rng);
    EstimateConfig cfg;
    cfg.steps = 200;
    cfg.seed = 19;
    estimates.push_back(train_and_estimate(sim, real, cfg).value);
  }
  for (std::size_t i = 1; i < estimates.size(); ++i)
    CHECK(estimates[i] >= estimates[i - 1] - 1e-6);
  CHECK(estimates.back() > 0.5);
}

TEST_CASE("estimate on an untrained critic is flagged") {
  Rng rng(41);
  auto rows = gaussian_rows(0.0, 1.0, 64, rng);
  Discriminator d = Discriminator::init(1, 16, 1, 3);
  // identical rows on both sides: any critic sits at or above chance, so the
  // untrained flag must trip deterministically
  auto fs = make_feature_batch(rows, Domain::SIM, Role::TEACHER);
  auto fr = make_feature_batch(rows, Domain::REAL, Role::STUDENT);
  auto e = estimate_discrepancy(d, fs, fr);
  CHECK(e.value >= 0.0);
  CHECK(e.value <= 1e-9);
  CHECK(e.bound_kind == "lower-bound");
  CHECK_FALSE(e.critic_trained);
}

TEST_CASE("empty batches rejected") {
  Discriminator d = Discriminator::init(2, 8, 1, 1);
  FeatureBatch empty;
  FeatureBatch one = make_feature_batch({{0.0, 1.0}}, Domain::SIM,
                                        Role::TEACHER);
  CHECK_THROWS_AS(estimate_discrepancy(d, empty, one), contract_error);
}

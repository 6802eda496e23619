#include <gtest/gtest.h>

#include <set>

#include "enkode/planner.hpp"
#include "oracles.hpp"

using namespace enkode;

namespace {

/// Constant flow on [0,1]^2 with a random obstacle mask.
std::shared_ptr<GriddedField> masked_constant_field(std::mt19937_64& rng, double blocked_fraction) {
  const Lattice lat(0, 1, 0, 1, 2, 2);
  const Lattice mlat(0, 1, 0, 1, 21, 21);
  std::bernoulli_distribution blocked(blocked_fraction);
  std::vector<std::uint8_t> flags(mlat.size());
  for (auto& f : flags) f = blocked(rng) ? 1 : 0;
  return std::make_shared<GriddedField>(lat, std::vector<double>(4, 0.3), std::vector<double>(4, -0.1),
                                        std::make_shared<const ObstacleMask>(mlat, std::move(flags)));
}

CampaignConfig quick_gp(SamplerKind sampler, int n_total) {
  CampaignConfig c;
  c.estimator = EstimatorKind::gp;
  c.sampler = sampler;
  c.n_total = n_total;
  c.grid_nx = c.grid_ny = 20;
  c.gp.options.restarts = 2;
  c.gp.options.iterations = 40;
  c.measurement.dt = 0.01;
  c.measurement.noise_sigma = 0.01;
  return c;
}

CampaignConfig quick_enkode(SamplerKind sampler, int n_total) {
  CampaignConfig c;
  c.sampler = sampler;
  c.n_total = n_total;
  c.grid_nx = c.grid_ny = 20;
  c.enkode.members = 3;
  c.enkode.model.nu = 8;
  c.enkode.model.epochs_per_update = 30;
  c.measurement.dt = 0.01;
  c.measurement.noise_sigma = 0.01;
  return c;
}

}  // namespace

TEST(Argmax, Examples) {
  EXPECT_EQ(*argmax_free(Eigen::Vector4d(0.1, 0.9, 0.3, 0.2), {1, 1, 1, 1}), 1u);
  EXPECT_EQ(*argmax_free(Eigen::Vector4d(0.1, 0.9, 0.3, 0.2), {1, 0, 1, 1}), 2u);
  EXPECT_EQ(*argmax_free(Eigen::Vector4d(0.5, 0.2, 0.5, 0.5), {1, 1, 1, 1}), 0u);
  EXPECT_EQ(*argmax_free(Eigen::Vector4d(0.5, 0.2, 0.5, 0.5), {0, 1, 1, 1}), 2u);
  EXPECT_FALSE(argmax_free(Eigen::Vector4d(1, 2, 3, 4), {0, 0, 0, 0}).has_value());
}

TEST(Argmax, MatchesExhaustiveScan) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> levels(0, 4);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + t % 50;
    Eigen::VectorXd v(n);
    std::vector<std::uint8_t> free(n);
    std::vector<double> vals(n);
    for (int k = 0; k < n; ++k) {
      v(k) = vals[k] = t % 2 ? u(rng) : levels(rng);  // odd trials have ties
      free[k] = u(rng) < 0.7;
    }
    const long want = oracle::brute_argmax(vals, free);
    const auto got = argmax_free(v, free);
    if (want < 0)
      EXPECT_FALSE(got.has_value());
    else
      EXPECT_EQ(static_cast<long>(*got), want);
  }
}

TEST(Serpentine, Examples) {
  const Domain unit(0, 1, 0, 1);
  EXPECT_TRUE(serpentine_point(unit, 16, 0).isApprox(Point2(0.125, 0.125)));
  std::vector<Point2> p;
  for (int k = 0; k < 9; ++k) p.push_back(serpentine_point(unit, 9, k));
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(p[k].y(), 1.0 / 6);
  EXPECT_LT(p[0].x(), p[1].x());
  EXPECT_LT(p[1].x(), p[2].x());
  for (int k = 3; k < 6; ++k) EXPECT_DOUBLE_EQ(p[k].y(), 0.5);
  EXPECT_GT(p[3].x(), p[4].x());
  EXPECT_GT(p[4].x(), p[5].x());
  EXPECT_DOUBLE_EQ(p[6].x(), p[0].x());

  for (int n : {1, 4, 9, 16, 25, 36}) {
    std::set<std::pair<double, double>> seen;
    for (int k = 0; k < n; ++k) {
      const Point2 q = serpentine_point(Domain(-2, 5, 1, 3), n, k);
      seen.insert({q.x(), q.y()});
    }
    EXPECT_EQ(seen.size(), static_cast<std::size_t>(n));
  }
  EXPECT_THROW(serpentine_point(unit, 10, 0), Error);
  EXPECT_THROW(serpentine_point(unit, 9, 9), BudgetExhaustedError);
}

TEST(NextActive, MatchesOracleWithMasksAndVisits) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 20; ++t) {
    auto field = masked_constant_field(rng, 0.3);
    CampaignConfig c = quick_gp(SamplerKind::active, 36);
    c.grid_nx = 12;
    c.grid_ny = 9;
    Campaign camp(field, c);
    const Lattice& lat = camp.lattice();
    std::vector<Point2> visited;
    for (int v = 0; v < 5; ++v) {
      const Point2 p = lat.node(camp.evaluation_index()[static_cast<std::size_t>(u(rng) * camp.evaluation_index().size())]);
      camp.acquire(p);
      visited.push_back(p);
    }
    UncertaintyMap map;
    map.grid = lat.nodes();
    map.values.resize(static_cast<Eigen::Index>(lat.size()));
    std::vector<double> vals(lat.size());
    std::vector<std::uint8_t> free(lat.size());
    const double radius = camp.config().exclusion_radius;
    for (std::size_t k = 0; k < lat.size(); ++k) {
      map.values(static_cast<Eigen::Index>(k)) = vals[k] = u(rng);
      const Point2 q = lat.node(k);
      bool ok = !field->domain().mask()->blocked(q);
      for (const auto& p : visited) ok = ok && (q - p).norm() > radius;
      free[k] = ok;
    }
    const long want = oracle::brute_argmax(vals, free);
    ASSERT_GE(want, 0);
    EXPECT_EQ(camp.next_active(map), lat.node(static_cast<std::size_t>(want)));
  }
}

TEST(NextActive, SkipsVisitedMaximum) {
  auto field = std::make_shared<LinearField>(Eigen::Matrix2d::Identity(), Domain(0, 1, 0, 1));
  Campaign camp(field, quick_gp(SamplerKind::active, 4));
  const Lattice& lat = camp.lattice();
  UncertaintyMap map;
  map.grid = lat.nodes();
  map.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lat.size()));
  map.values(55) = 2.0;
  map.values(300) = 1.0;
  EXPECT_EQ(camp.next_active(map), lat.node(std::size_t{55}));
  camp.acquire(lat.node(std::size_t{55}));
  EXPECT_EQ(camp.next_active(map), lat.node(std::size_t{300}));
}

TEST(Campaign, SingleSample) {
  auto field = std::make_shared<BickleyField>();
  CampaignConfig c = quick_enkode(SamplerKind::active, 1);
  const CampaignResult r = run_campaign(field, c);
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  EXPECT_EQ(r.iterations.size(), 1u);
  EXPECT_EQ(r.visited.size(), 1u);
  EXPECT_FALSE(r.iterations[0].next.has_value());
}

TEST(Campaign, ActiveLoopInvariants) {
  auto field = std::make_shared<BickleyField>();
  CampaignConfig c = quick_enkode(SamplerKind::active, 12);
  c.keep_fields = true;
  c.measurement.dt = default_dt(*field, c.grid_nx, c.grid_ny);
  c.seed = 42;
  Campaign camp(field, c);
  const CampaignResult r = camp.run();
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  ASSERT_EQ(r.iterations.size(), 12u);
  EXPECT_EQ(r.dataset.size(), 12);
  EXPECT_EQ(r.visited.size(), 12u);
  const double radius = camp.config().exclusion_radius;
  for (std::size_t i = 0; i < r.iterations.size(); ++i) {
    EXPECT_EQ(r.iterations[i].n_samples, static_cast<int>(i + 1));
    EXPECT_EQ(r.iterations[i].sampled, r.visited[i]);
    for (std::size_t j = 0; j < i; ++j) EXPECT_GT((r.visited[i] - r.visited[j]).norm(), radius);
  }
  // Each choice is the argmax over the free part of the map that iteration exported.
  const Lattice& lat = camp.lattice();
  for (std::size_t i = 0; i + 1 < r.iterations.size(); ++i) {
    const auto& map = r.iterations[i].map;
    std::vector<double> vals(lat.size());
    std::vector<std::uint8_t> free(lat.size());
    for (std::size_t k = 0; k < lat.size(); ++k) {
      vals[k] = map.values(static_cast<Eigen::Index>(k));
      bool ok = std::isfinite(vals[k]);
      for (std::size_t j = 0; j <= i; ++j) ok = ok && (lat.node(k) - r.visited[j]).norm() > radius;
      free[k] = ok;
    }
    const long want = oracle::brute_argmax(vals, free);
    ASSERT_GE(want, 0);
    EXPECT_EQ(*r.iterations[i].next, lat.node(static_cast<std::size_t>(want)));
    EXPECT_EQ(r.visited[i + 1], *r.iterations[i].next);
  }
}

TEST(Campaign, ReproduciblePerSeed) {
  auto field = std::make_shared<BickleyField>();
  CampaignConfig c = quick_enkode(SamplerKind::active, 5);
  c.seed = 3;
  const CampaignResult a = run_campaign(field, c), b = run_campaign(field, c);
  ASSERT_EQ(a.visited.size(), b.visited.size());
  for (std::size_t i = 0; i < a.visited.size(); ++i) EXPECT_EQ(a.visited[i], b.visited[i]);
  for (std::size_t i = 0; i < a.iterations.size(); ++i)
    EXPECT_EQ(a.iterations[i].metrics.cs_mean, b.iterations[i].metrics.cs_mean);
  EXPECT_EQ(a.dataset.targets(), b.dataset.targets());
  c.seed = 4;
  EXPECT_NE(run_campaign(field, c).visited.front(), a.visited.front());
}

TEST(Campaign, UniformSubstitutesObstructedPoints) {
  auto field = std::make_shared<VortexTestField>();
  const CampaignResult r = run_campaign(field, quick_gp(SamplerKind::uniform, 9));
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  ASSERT_EQ(r.visited.size(), 9u);
  // The lattice centre (0.5, 0.5) sits on the cross.
  EXPECT_NE(r.visited[4], Point2(0.5, 0.5));
  EXPECT_FALSE(field->domain().blocked(r.visited[4]));
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_NE(r.log[0].find("substituted"), std::string::npos);
  for (const auto& p : r.visited) EXPECT_FALSE(field->domain().blocked(p));
}

TEST(Campaign, LinearFieldUniformIdentityLift) {
  Eigen::Matrix2d a;
  a << -0.3, 1.0, -1.0, 0.1;
  auto field = std::make_shared<LinearField>(a, Domain(-1, 1, -1, 1));
  CampaignConfig c;
  c.sampler = SamplerKind::uniform;
  c.n_total = 36;
  c.enkode.model.nu = 0;
  c.measurement.dt = default_dt(*field, 50, 50);
  c.measurement.noise_sigma = 0;
  const CampaignResult r = run_campaign(field, c);
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  EXPECT_GT(r.iterations.back().metrics.cs_mean, 0.99);
}

TEST(Campaign, GpActiveStaysInFreeSpace) {
  auto field = std::make_shared<VortexTestField>();
  CampaignConfig c = quick_gp(SamplerKind::active, 15);
  c.seed = 5;
  Campaign camp(field, c);
  const CampaignResult r = camp.run();
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  for (std::size_t i = 0; i < r.visited.size(); ++i) {
    EXPECT_FALSE(field->domain().blocked(r.visited[i]));
    std::vector<Point2> before(r.visited.begin(), r.visited.begin() + static_cast<long>(i));
    EXPECT_TRUE(is_free(field->domain(), r.visited[i], before, camp.config().exclusion_radius));
  }
}

TEST(Campaign, BudgetExhaustedAborts) {
  auto field = std::make_shared<LinearField>(Eigen::Matrix2d::Identity(), Domain(0, 1, 0, 1));
  CampaignConfig c = quick_gp(SamplerKind::active, 10);
  c.grid_nx = c.grid_ny = 2;
  c.exclusion_radius = 0.5;
  const CampaignResult r = run_campaign(field, c);
  EXPECT_TRUE(r.aborted);
  EXPECT_NE(r.abort_reason.find("no free candidate"), std::string::npos);
  EXPECT_EQ(r.iterations.size(), 4u);
  EXPECT_EQ(r.visited.size(), 4u);
}

TEST(Campaign, DivergenceAborts) {
  auto field = std::make_shared<BickleyField>();
  CampaignConfig c = quick_enkode(SamplerKind::active, 5);
  c.enkode.model.learning_rate = 1e300;
  const CampaignResult r = run_campaign(field, c);
  EXPECT_TRUE(r.aborted);
  EXPECT_NE(r.abort_reason.find("non-finite loss"), std::string::npos);
  EXPECT_TRUE(r.iterations.empty());
  EXPECT_EQ(r.visited.size(), 1u);
}

TEST(Campaign, Validation) {
  auto field = std::make_shared<BickleyField>();
  CampaignConfig c = quick_gp(SamplerKind::active, 0);
  EXPECT_THROW(Campaign(field, c), Error);
  c.n_total = 3;
  c.measurement.dt = -1;
  EXPECT_THROW(Campaign(field, c), DataError);
}

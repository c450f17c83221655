#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "coc/metrics.hpp"
#include "coc/sim.hpp"

using namespace coc;

namespace {

bool frames_equal(const Frame& a, const Frame& b) {
  if (a.views != b.views) return false;
  if (a.ego.x != b.ego.x || a.ego.speed != b.ego.speed) return false;
  if (a.gt_trajectory != b.gt_trajectory) return false;
  if (!(a.gt_answer == b.gt_answer)) return false;
  if (a.agents.size() != b.agents.size()) return false;
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    if (a.agents[i].pose.x != b.agents[i].pose.x) return false;
    if (a.agents[i].pixel_bbox != b.agents[i].pixel_bbox) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("clip generation is deterministic in the seed") {
  const auto mix = ScenarioMix::sim_default();
  for (std::uint64_t seed : {1ull, 77ull, 123456789ull}) {
    Clip a = generate_clip(seed, Domain::SIM, mix, 8);
    Clip b = generate_clip(seed, Domain::SIM, mix, 8);
    REQUIRE(a.frames.size() == b.frames.size());
    CHECK(a.category == b.category);
    for (std::size_t i = 0; i < a.frames.size(); ++i)
      CHECK(frames_equal(a.frames[i], b.frames[i]));
  }
  // REAL domain too (style transform must be seed-deterministic)
  Clip a = generate_clip(42, Domain::REAL, ScenarioMix::real_train_default(), 4);
  Clip b = generate_clip(42, Domain::REAL, ScenarioMix::real_train_default(), 4);
  for (std::size_t i = 0; i < a.frames.size(); ++i)
    CHECK(frames_equal(a.frames[i], b.frames[i]));
}

TEST_CASE("category frequencies follow the mix") {
  const auto mix = ScenarioMix::sim_default();
  std::array<int, kNumCategories> counts{};
  const int n = 4000;
  Rng seeder(5);
  for (int i = 0; i < n; ++i) {
    // sampling only needs the category; generate tiny clips
    Clip c = generate_clip(seeder.next_u64(), Domain::SIM, mix, 2);
    counts[std::size_t(c.category)]++;
  }
  for (int c = 0; c < kNumCategories; ++c) {
    const double freq = double(counts[std::size_t(c)]) / n;
    CHECK(std::fabs(freq - mix.p[std::size_t(c)]) < 0.03);
  }
}

TEST_CASE("frame structure contracts") {
  Clip c = generate_clip(9, Domain::SIM, ScenarioMix::sim_default(), 8);
  REQUIRE(c.frames.size() == 8);
  for (const auto& f : c.frames) {
    CHECK(f.views.size() == std::size_t(kNumViews) * kViewSize);
    for (float v : f.views) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(f.gt_answer.trajectory.size() == 6);
    CHECK(!f.agents.empty());
    for (const auto& a : f.agents) {
      CHECK(a.pixel_bbox[0] >= 0);
      CHECK(a.pixel_bbox[1] >= 0);
      CHECK(a.pixel_bbox[2] < kViewW);
      CHECK(a.pixel_bbox[3] < kViewH);
      CHECK(a.pixel_bbox[0] <= a.pixel_bbox[2]);
      CHECK(a.pixel_bbox[1] <= a.pixel_bbox[3]);
      CHECK(a.length > 0);
      CHECK(a.width > 0);
    }
    // rendered answers must satisfy the grammar invariants
    CHECK_NOTHROW(render_answer(f.gt_answer));
  }
}

TEST_CASE("trajectories are kinematically feasible") {
  Rng seeder(31);
  for (int i = 0; i < 60; ++i) {
    Clip c = generate_clip(seeder.next_u64(), Domain::SIM,
                           ScenarioMix::sim_default(), 8);
    for (const auto& f : c.frames) {
      // first waypoint within v*dt + 2 m of the origin
      const auto& [x0, y0] = f.gt_trajectory[0];
      CHECK(std::hypot(x0, y0) <= f.ego.speed * 0.5 + 2.0);
      // reconstruct speeds between consecutive waypoints
      double px = 0.0, py = 0.0;
      std::array<double, 6> v{};
      for (int k = 0; k < 6; ++k) {
        const auto& [x, y] = f.gt_trajectory[std::size_t(k)];
        v[std::size_t(k)] = std::hypot(x - px, y - py) / kFrameDt;
        px = x;
        py = y;
      }
      for (int k = 0; k + 1 < 6; ++k) {
        const double accel = (v[std::size_t(k) + 1] - v[std::size_t(k)]) / kFrameDt;
        CHECK(std::fabs(accel) <= 4.0 + 1e-9);
      }
      // heading change between segments bounded by the yaw-rate limit
      px = py = 0.0;
      double prev_heading = 0.0;
      bool have_heading = false;
      for (int k = 0; k < 6; ++k) {
        const auto& [x, y] = f.gt_trajectory[std::size_t(k)];
        const double seg = std::hypot(x - px, y - py);
        if (seg > 0.3) {
          const double heading = std::atan2(y - py, x - px);
          if (have_heading) {
            double dh = heading - prev_heading;
            while (dh > M_PI) dh -= 2 * M_PI;
            while (dh < -M_PI) dh += 2 * M_PI;
            CHECK(std::fabs(dh) <= 0.5 * kFrameDt + 1e-9);
          }
          prev_heading = heading;
          have_heading = true;
        }
        px = x;
        py = y;
      }
    }
  }
}

TEST_CASE("pedestrian intrusion crosses the ego lane") {
  Rng seeder(17);
  int found = 0;
  for (int i = 0; i < 400 && found < 8; ++i) {
    Clip c = generate_clip(seeder.next_u64(), Domain::SIM,
                           ScenarioMix::sim_default(), 8);
    if (c.category != ScenarioCategory::PedestrianIntrusion) continue;
    ++found;
    // the pedestrian's lateral distance to the lane centerline dips below
    // half the lane width at some frame
    double min_abs_y = 1e9;
    bool saw_ped = false;
    for (const auto& f : c.frames)
      for (std::size_t a = 0; a < f.agents.size(); ++a) {
        if (f.agents[a].kind != AgentKind::Pedestrian) continue;
        saw_ped = true;
        min_abs_y = std::min(min_abs_y, std::fabs(f.agents[a].pose.y));
        for (const auto& fut : f.agent_futures[a])
          min_abs_y = std::min(min_abs_y, std::fabs(fut.y));
      }
    CHECK(saw_ped);
    CHECK(min_abs_y < 1.75);
  }
  CHECK(found >= 8);
}

TEST_CASE("accident clips contain overlapping agent boxes, normal clips none") {
  Rng seeder(23);
  int accidents = 0, normals = 0;
  for (int i = 0; i < 2000 && (accidents < 5 || normals < 20); ++i) {
    Clip c = generate_clip(seeder.next_u64(), Domain::SIM,
                           ScenarioMix::sim_default(), 8);
    const bool is_acc = c.category == ScenarioCategory::Accident;
    const bool is_norm = c.category == ScenarioCategory::Normal;
    if (!is_acc && !is_norm) continue;
    bool any_overlap = false;
    for (const auto& f : c.frames) {
      for (std::size_t a = 0; a < f.agents.size(); ++a)
        for (std::size_t b = a + 1; b < f.agents.size(); ++b) {
          if (boxes_overlap(f.agents[a].pose, f.agents[a].length,
                            f.agents[a].width, f.agents[b].pose,
                            f.agents[b].length, f.agents[b].width))
            any_overlap = true;
        }
    }
    if (is_acc) {
      ++accidents;
      CHECK(any_overlap);
    } else {
      ++normals;
      CHECK_FALSE(any_overlap);
    }
  }
  CHECK(accidents >= 5);
  CHECK(normals >= 20);
}

TEST_CASE("high threat always pairs with a defensive plan") {
  Rng seeder(41);
  for (int i = 0; i < 150; ++i) {
    Clip c = generate_clip(seeder.next_u64(), Domain::SIM,
                           ScenarioMix::sim_default(), 8);
    for (const auto& f : c.frames) {
      if (f.gt_answer.threat == Threat::High) {
        const EgoAction a = f.gt_answer.ego_action;
        CHECK((a == EgoAction::Decelerate || a == EgoAction::Stop ||
               a == EgoAction::Yield));
      }
    }
  }
}

TEST_CASE("domain shift is a seeded affine-with-texture transform") {
  GenConfig cfg;
  SUBCASE("zero raster maps to the bias alone") {
    std::vector<float> zero(std::size_t(kNumViews) * kViewSize, 0.0f);
    auto out = domain_shift(zero, 7, 0, cfg);
    for (int v = 0; v < kNumViews; ++v)
      for (int c = 0; c < kViewC; ++c)
        for (int h = 0; h < kViewH; ++h)
          for (int w = 0; w < kViewW; ++w) {
            const std::size_t idx =
                std::size_t(((v * kViewC + c) * kViewH + h) * kViewW + w);
            CHECK(out[idx] == doctest::Approx(cfg.style_bias[std::size_t(c)])
                                  .epsilon(1e-6));
          }
  }
  SUBCASE("deterministic per seed and frame index") {
    std::vector<float> x(std::size_t(kNumViews) * kViewSize, 0.5f);
    CHECK(domain_shift(x, 3, 1, cfg) == domain_shift(x, 3, 1, cfg));
    CHECK(domain_shift(x, 3, 1, cfg) != domain_shift(x, 3, 2, cfg));
    CHECK(domain_shift(x, 3, 1, cfg) != domain_shift(x, 4, 1, cfg));
  }
  SUBCASE("constant input mean shifts exactly by the affine map") {
    // zero-mean multiplicative texture: mean(out) == gain*c + bias
    const double c0 = 0.5;
    std::vector<float> x(std::size_t(kNumViews) * kViewSize, float(c0));
    auto out = domain_shift(x, 11, 4, cfg);
    for (int v = 0; v < kNumViews; ++v)
      for (int c = 0; c < kViewC; ++c) {
        double mean = 0.0;
        for (int h = 0; h < kViewH; ++h)
          for (int w = 0; w < kViewW; ++w)
            mean += out[std::size_t(((v * kViewC + c) * kViewH + h) * kViewW +
                                    w)];
        mean /= double(kViewH * kViewW);
        const double want =
            cfg.style_gain[std::size_t(c)] * c0 + cfg.style_bias[std::size_t(c)];
        CHECK(mean == doctest::Approx(want).epsilon(1e-6));
      }
  }
  SUBCASE("out-of-range input rejected") {
    std::vector<float> bad(std::size_t(kNumViews) * kViewSize, 1.5f);
    CHECK_THROWS_AS(domain_shift(bad, 1, 0, cfg), contract_error);
  }
}

TEST_CASE("real training mix withholds rare events") {
  const auto mix = ScenarioMix::real_train_default();
  for (int c = 0; c < kNumCategories; ++c)
    if (is_rare_event(ScenarioCategory(c)))
      CHECK(mix.p[std::size_t(c)] == 0.0);
  // and the test mix carries the configured quota
  const auto test_mix = ScenarioMix::real_test_default(0.5);
  double rare = 0.0;
  for (int c = 0; c < kNumCategories; ++c)
    if (is_rare_event(ScenarioCategory(c))) rare += test_mix.p[std::size_t(c)];
  CHECK(rare == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("invalid generation inputs") {
  ScenarioMix bad;
  bad.p.fill(0.0);
  bad.p[0] = 0.5;
  CHECK_THROWS_AS(generate_clip(1, Domain::SIM, bad, 4), config_error);
  CHECK_THROWS_AS(generate_clip(1, Domain::SIM, ScenarioMix::sim_default(), 1),
                  contract_error);
}

TEST_CASE("dataset container round-trips bitwise") {
  Dataset ds = generate_dataset(99, Domain::REAL,
                                ScenarioMix::real_test_default(0.5), 3, 4);
  const std::string path = "/tmp/coc_test_dataset.ds";
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  CHECK(back.version == ds.version);
  CHECK(back.domain == ds.domain);
  CHECK(back.gen_seed == ds.gen_seed);
  CHECK(back.mix.p == ds.mix.p);
  REQUIRE(back.clips.size() == ds.clips.size());
  for (std::size_t c = 0; c < ds.clips.size(); ++c) {
    CHECK(back.clips[c].seed == ds.clips[c].seed);
    CHECK(back.clips[c].category == ds.clips[c].category);
    REQUIRE(back.clips[c].frames.size() == ds.clips[c].frames.size());
    for (std::size_t f = 0; f < ds.clips[c].frames.size(); ++f) {
      CHECK(frames_equal(back.clips[c].frames[f], ds.clips[c].frames[f]));
      CHECK(back.clips[c].frames[f].agent_futures ==
            ds.clips[c].frames[f].agent_futures);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("corrupted dataset bytes are rejected before parsing") {
  Dataset ds = generate_dataset(5, Domain::SIM, ScenarioMix::sim_default(), 2, 3);
  const std::string path = "/tmp/coc_test_corrupt.ds";
  write_dataset(ds, path);
  // flip one payload byte
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(200);
  char b;
  f.seekg(200);
  f.read(&b, 1);
  b = char(b ^ 0x40);
  f.seekp(200);
  f.write(&b, 1);
  f.close();
  CHECK_THROWS_AS(read_dataset(path), io_error);
  std::remove(path.c_str());
}

TEST_CASE("agent futures operator== helper sees pose fields") {
  // guard for the bitwise round-trip comparison above
  Pose a{1, 2, 3}, b{1, 2, 3};
  CHECK(a.x == b.x);
}

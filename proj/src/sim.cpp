#include "coc/sim.hpp"

#include <algorithm>
#include <cmath>

#include "coc/binio.hpp"

namespace coc {

namespace {

constexpr double kLaneHalf = 1.75;
constexpr double kLaneWidth = 3.5;
constexpr double kMaxAccel = 3.2;    // inside the 4 m/s^2 feasibility bound
constexpr double kMaxYawRate = 0.4;  // inside the 0.5 rad/s bound
constexpr double kViewRange = 32.0;
constexpr double kEgoLength = 4.2, kEgoWidth = 1.8;

double quantize01(double v) { return std::round(v * 10.0) / 10.0; }

struct WorldAgent {
  AgentKind kind = AgentKind::Car;
  double length = 4.2, width = 1.8;
  NextAction action = NextAction::Proceed;
  bool crossing = false;  // lateral-motion agents report crossing status
  std::vector<Pose> pose;     // world, per step 0..T
  std::vector<double> speed;  // per step
};

struct World {
  int T = 0;  // simulated steps, frames use 0..n_frames-1
  std::vector<EgoState> ego;       // 0..T
  std::vector<double> accel;       // 0..T-1 applied accel
  std::vector<double> yaw_cmd;     // 0..T-1 commanded yaw rate
  std::vector<bool> yielding;      // 0..T-1
  std::vector<WorldAgent> agents;
};

// ego integration toward a target-speed profile with clamped controls
void integrate_ego(World& w, double v0, const std::vector<double>& v_tgt,
                   const std::vector<double>& yaw) {
  const int T = w.T;
  w.ego.assign(std::size_t(T) + 1, EgoState{});
  w.accel.assign(std::size_t(T), 0.0);
  w.yaw_cmd = yaw;
  w.ego[0].speed = v0;
  for (int t = 0; t < T; ++t) {
    const EgoState& cur = w.ego[std::size_t(t)];
    double a = (v_tgt[std::size_t(t)] - cur.speed) / kFrameDt;
    a = std::clamp(a, -kMaxAccel, kMaxAccel);
    EgoState nxt;
    nxt.speed = std::max(0.0, cur.speed + a * kFrameDt);
    nxt.heading = cur.heading + yaw[std::size_t(t)] * kFrameDt;
    nxt.x = cur.x + nxt.speed * std::cos(nxt.heading) * kFrameDt;
    nxt.y = cur.y + nxt.speed * std::sin(nxt.heading) * kFrameDt;
    w.accel[std::size_t(t)] = (nxt.speed - cur.speed) / kFrameDt;
    w.ego[std::size_t(t) + 1] = nxt;
  }
}

// straight-line agent driving along +x in its own lane
WorldAgent make_cruiser(int T, AgentKind kind, double x0, double y0, double v,
                        NextAction action) {
  WorldAgent a;
  a.kind = kind;
  a.action = action;
  if (kind == AgentKind::Pedestrian) { a.length = 0.6; a.width = 0.6; }
  if (kind == AgentKind::Bicycle) { a.length = 1.8; a.width = 0.6; }
  if (kind == AgentKind::Obstacle) { a.length = 2.0; a.width = 2.0; }
  a.pose.resize(std::size_t(T) + 1);
  a.speed.assign(std::size_t(T) + 1, v);
  for (int t = 0; t <= T; ++t)
    a.pose[std::size_t(t)] = Pose{x0 + v * t * kFrameDt, y0, 0.0};
  return a;
}

// agent with an explicit per-step velocity plan (vx, vy)
WorldAgent make_planned(int T, AgentKind kind, double x0, double y0,
                        const std::vector<std::pair<double, double>>& vel,
                        NextAction action, bool crossing) {
  WorldAgent a;
  a.kind = kind;
  a.action = action;
  a.crossing = crossing;
  if (kind == AgentKind::Pedestrian) { a.length = 0.6; a.width = 0.6; }
  if (kind == AgentKind::Bicycle) { a.length = 1.8; a.width = 0.6; }
  if (kind == AgentKind::Obstacle) { a.length = 2.0; a.width = 2.0; }
  a.pose.resize(std::size_t(T) + 1);
  a.speed.resize(std::size_t(T) + 1);
  double x = x0, y = y0, heading = 0.0;
  for (int t = 0; t <= T; ++t) {
    const auto [vx, vy] = vel[std::size_t(std::min(t, T - 1))];
    const double sp = std::hypot(vx, vy);
    if (sp > 0.05) heading = std::atan2(vy, vx);
    a.pose[std::size_t(t)] = Pose{x, y, heading};
    a.speed[std::size_t(t)] = sp;
    x += vx * kFrameDt;
    y += vy * kFrameDt;
  }
  return a;
}

// ---- per-category scripts --------------------------------------------------

void script_normal(World& w, Rng& rng, ScenarioCategory cat) {
  const int T = w.T;
  double v0;
  if (cat == ScenarioCategory::Fog || cat == ScenarioCategory::Rain)
    v0 = rng.uniform(4.0, 6.0);
  else
    v0 = rng.uniform(6.0, 9.0);

  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  std::vector<double> yaw(std::size_t(T), 0.0);
  double drift = 0.0;
  for (int t = 0; t <= T; ++t) {
    drift = std::clamp(drift + rng.uniform(-0.2, 0.2), -0.9, 0.9);
    v_tgt[std::size_t(t)] = std::max(1.0, v0 + drift);
    if (cat == ScenarioCategory::Fog || cat == ScenarioCategory::Rain)
      v_tgt[std::size_t(t)] *= 1.0 - 0.15 * double(t) / double(T);
  }
  if (cat == ScenarioCategory::Normal) {
    const int variant = int(rng.below(3));
    if (variant > 0) {
      const double w0 = (variant == 1 ? 1.0 : -1.0) * rng.uniform(0.10, 0.20);
      const int t0 = 2, t1 = std::min(T, t0 + 3 + int(rng.below(5)));
      for (int t = t0; t < t1; ++t) yaw[std::size_t(t)] = w0;
    }
  }
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);

  const double lead_d = rng.uniform(18.0, 30.0);
  const double lead_v = v0 * rng.uniform(0.85, 1.1);
  w.agents.push_back(
      make_cruiser(T, AgentKind::Car, lead_d, 0.0, lead_v, NextAction::Proceed));
  if (rng.uniform() < 0.5) {
    const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
    w.agents.push_back(make_cruiser(T, AgentKind::Car,
                                    rng.uniform(-6.0, 14.0), side * kLaneWidth,
                                    v0 * rng.uniform(0.8, 1.05),
                                    NextAction::Proceed));
  }
}

void script_intrusion(World& w, Rng& rng, AgentKind kind) {
  const int T = w.T;
  const double v0 = rng.uniform(6.0, 8.0);
  const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
  const double x_p = rng.uniform(13.0, 19.0);
  const double y_p = side * rng.uniform(4.0, 6.0);
  double vy = (kind == AgentKind::Pedestrian ? rng.uniform(1.0, 1.6)
                                             : rng.uniform(2.5, 4.0));
  // pace the crossing so the lane is reached within the clip
  vy = std::max(vy, (std::fabs(y_p) + 0.5) / ((double(T) - 2.0) * kFrameDt));
  std::vector<std::pair<double, double>> vel(std::size_t(T),
                                             {0.0, -side * vy});
  w.agents.push_back(make_planned(T, kind, x_p, y_p, vel,
                                  NextAction::CrossRoad, true));
  // background lead far ahead
  w.agents.push_back(make_cruiser(T, AgentKind::Car, 36.0, 0.0, v0,
                                  NextAction::Proceed));

  // brake hard while the crosser is near the corridor, resume after
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  std::vector<double> yaw(std::size_t(T), 0.0);
  const auto& crosser = w.agents.front();
  for (int t = 0; t <= T; ++t) {
    const double y_now = crosser.pose[std::size_t(std::min(t, T))].y;
    const bool active = std::fabs(y_now) < 4.5;
    if (active) v_tgt[std::size_t(t)] = 0.4;
  }
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_cut_in(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(6.0, 8.5);
  const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
  const double vc = v0 * rng.uniform(0.72, 0.88);
  const int tm = 1 + int(rng.below(2));
  const int merge_steps = 4;
  std::vector<std::pair<double, double>> vel(std::size_t(T), {vc, 0.0});
  for (int t = tm; t < std::min(T, tm + merge_steps); ++t)
    vel[std::size_t(t)] = {vc, -side * kLaneWidth / (merge_steps * kFrameDt)};
  w.agents.push_back(make_planned(T, AgentKind::Car, rng.uniform(10.0, 16.0),
                                  side * kLaneWidth, vel, NextAction::Turn,
                                  false));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = tm + 1; t <= T; ++t)
    v_tgt[std::size_t(t)] = std::max(1.5, vc - 1.0);
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_near_miss(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(6.0, 8.0);
  // ego brakes over steps [2,6], recovers afterwards
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 2; t <= std::min(T, 6); ++t) v_tgt[std::size_t(t)] = 0.35 * v0;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);

  // crossing car passes just ahead of the braked ego at step 5
  const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
  const double vy = -side * rng.uniform(5.0, 7.0);
  const int t_c = std::min(5, T - 1);
  const double gap = rng.uniform(3.6, 5.0);
  const double x_c = w.ego[std::size_t(t_c)].x + gap + kEgoLength * 0.5;
  const double y0 = -vy * double(t_c) * kFrameDt;
  std::vector<std::pair<double, double>> vel(std::size_t(T), {0.0, vy});
  w.agents.push_back(make_planned(T, AgentKind::Car, x_c, y0, vel,
                                  NextAction::CrossRoad, true));
  w.agents.push_back(make_cruiser(T, AgentKind::Car, 34.0, 0.0, v0 * 0.9,
                                  NextAction::Proceed));
}

void script_traffic_jam(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(5.0, 7.0);
  const double vj = rng.uniform(0.5, 1.5);
  for (int i = 0; i < 3; ++i)
    w.agents.push_back(make_cruiser(T, AgentKind::Car, 10.0 + 8.0 * i,
                                    0.0, vj, NextAction::SlowDown));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 1; t <= T; ++t) v_tgt[std::size_t(t)] = vj;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_accident(World& w, Rng& rng, int n_frames) {
  const int T = w.T;
  const double v0 = rng.uniform(5.5, 7.5);
  const int t_crash = std::min(4, n_frames - 1);
  const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;

  // car A decelerates in the ego lane; car B merges into it and hits
  const double xa0 = rng.uniform(20.0, 26.0);
  const double va0 = rng.uniform(4.0, 6.0);
  WorldAgent a;
  a.kind = AgentKind::Car;
  a.action = NextAction::Stop;
  a.pose.resize(std::size_t(T) + 1);
  a.speed.resize(std::size_t(T) + 1);
  double xa = xa0, va = va0;
  for (int t = 0; t <= T; ++t) {
    a.pose[std::size_t(t)] = Pose{xa, 0.0, 0.0};
    a.speed[std::size_t(t)] = va;
    xa += va * kFrameDt;
    va = t + 1 >= t_crash ? 0.0 : std::max(0.0, va - 2.0);
  }
  // B scripted directly: merges and ends overlapping A
  WorldAgent b;
  b.kind = AgentKind::Car;
  b.action = NextAction::Stop;
  b.pose.resize(std::size_t(T) + 1);
  b.speed.resize(std::size_t(T) + 1);
  for (int t = 0; t <= T; ++t) {
    const double frac = std::min(1.0, double(t) / double(std::max(1, t_crash)));
    const Pose& pa = a.pose[std::size_t(t)];
    b.pose[std::size_t(t)] =
        Pose{pa.x - 1.2 - 3.0 * (1.0 - frac), side * kLaneWidth * (1.0 - frac),
             -side * 0.4 * frac};
    b.speed[std::size_t(t)] = t >= t_crash ? 0.0 : a.speed[std::size_t(t)] + 2.0;
  }
  w.agents.push_back(std::move(a));
  w.agents.push_back(std::move(b));

  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 1; t <= T; ++t) v_tgt[std::size_t(t)] = 0.0;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_opposite_intrusion(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(5.5, 7.5);
  const double vo = rng.uniform(5.0, 8.0);
  const double x0 = rng.uniform(30.0, 40.0);
  std::vector<std::pair<double, double>> vel(std::size_t(T), {-vo, 0.0});
  // drift into the ego lane and back
  for (int t = 2; t < std::min(T, 5); ++t) vel[std::size_t(t)] = {-vo, -1.6};
  for (int t = 5; t < std::min(T, 8); ++t) vel[std::size_t(t)] = {-vo, 1.6};
  w.agents.push_back(make_planned(T, AgentKind::Car, x0, kLaneWidth, vel,
                                  NextAction::Proceed, false));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 2; t <= std::min(T, 8); ++t) v_tgt[std::size_t(t)] = 2.0;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), true);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_u_turn(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(5.0, 7.0);
  const double xl = rng.uniform(14.0, 18.0);
  const double vl = rng.uniform(2.5, 4.0);
  WorldAgent a;
  a.kind = AgentKind::Car;
  a.action = NextAction::Turn;
  a.pose.resize(std::size_t(T) + 1);
  a.speed.resize(std::size_t(T) + 1);
  double x = xl, y = 0.0, h = 0.0;
  for (int t = 0; t <= T; ++t) {
    a.pose[std::size_t(t)] = Pose{x, y, h};
    a.speed[std::size_t(t)] = vl;
    if (t >= 2 && t < 12) h += 0.63 * kFrameDt;  // sweeps to ~pi
    x += vl * std::cos(h) * kFrameDt;
    y += vl * std::sin(h) * kFrameDt;
  }
  w.agents.push_back(std::move(a));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 1; t <= T; ++t) v_tgt[std::size_t(t)] = 1.5;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), true);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_construction(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(5.0, 7.0);
  const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;  // obstacle side
  w.agents.push_back(make_cruiser(T, AgentKind::Obstacle,
                                  rng.uniform(12.0, 16.0),
                                  side * rng.uniform(0.4, 1.2), 0.0,
                                  NextAction::Stop));
  w.agents.push_back(make_cruiser(T, AgentKind::Car, 30.0, 0.0, v0,
                                  NextAction::Proceed));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0 * 0.75);
  std::vector<double> yaw(std::size_t(T), 0.0);
  // brief swerve around the obstacle
  const int ts = 2;
  if (ts + 3 < T) {
    yaw[std::size_t(ts)] = -side * 0.3;
    yaw[std::size_t(ts) + 1] = -side * 0.1;
    yaw[std::size_t(ts) + 2] = side * 0.3;
    yaw[std::size_t(ts) + 3] = side * 0.1;
  }
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_lane_merge(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(5.5, 8.0);
  const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
  const double vm = v0 * rng.uniform(0.9, 1.05);
  std::vector<std::pair<double, double>> vel(std::size_t(T), {vm, 0.0});
  for (int t = 2; t < std::min(T, 6); ++t)
    vel[std::size_t(t)] = {vm, -side * kLaneWidth / (4 * kFrameDt)};
  w.agents.push_back(make_planned(T, AgentKind::Car, rng.uniform(8.0, 12.0),
                                  side * kLaneWidth, vel, NextAction::Turn,
                                  false));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 3; t <= T; ++t) v_tgt[std::size_t(t)] = v0 * 0.85;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_no_light_intersection(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(5.0, 7.0);
  const double xc = rng.uniform(22.0, 28.0);
  for (int i = 0; i < 2; ++i) {
    const double side = i == 0 ? 1.0 : -1.0;
    const double vy = -side * rng.uniform(4.0, 6.0);
    std::vector<std::pair<double, double>> vel(std::size_t(T), {0.0, vy});
    w.agents.push_back(make_planned(T, AgentKind::Car, xc + 4.0 * i,
                                    side * rng.uniform(10.0, 14.0), vel,
                                    NextAction::CrossRoad, true));
  }
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 1; t <= std::min(T, 9); ++t) v_tgt[std::size_t(t)] = 2.0;
  std::vector<double> yaw(std::size_t(T), 0.0);
  w.yielding.assign(std::size_t(T), true);
  integrate_ego(w, v0, v_tgt, yaw);
}

void script_left_merge(World& w, Rng& rng) {
  const int T = w.T;
  const double v0 = rng.uniform(4.0, 6.0);
  w.agents.push_back(make_cruiser(T, AgentKind::Car, rng.uniform(18.0, 24.0),
                                  kLaneWidth, 0.0, NextAction::Stop));
  std::vector<double> v_tgt(std::size_t(T) + 1, v0);
  for (int t = 6; t <= T; ++t) v_tgt[std::size_t(t)] = v0 + 2.0;
  std::vector<double> yaw(std::size_t(T), 0.0);
  const double w0 = rng.uniform(0.25, 0.38);
  for (int t = 2; t < std::min(T, 6); ++t) yaw[std::size_t(t)] = w0;
  w.yielding.assign(std::size_t(T), false);
  integrate_ego(w, v0, v_tgt, yaw);
}

World build_world(ScenarioCategory cat, Rng& rng, int n_frames) {
  World w;
  w.T = n_frames + 6;
  switch (cat) {
    case ScenarioCategory::Normal:
    case ScenarioCategory::Fog:
    case ScenarioCategory::Rain:
      script_normal(w, rng, cat);
      break;
    case ScenarioCategory::PedestrianIntrusion:
      script_intrusion(w, rng, AgentKind::Pedestrian);
      break;
    case ScenarioCategory::BicycleIntrusion:
      script_intrusion(w, rng, AgentKind::Bicycle);
      break;
    case ScenarioCategory::CutIn:
      script_cut_in(w, rng);
      break;
    case ScenarioCategory::NearMiss:
      script_near_miss(w, rng);
      break;
    case ScenarioCategory::TrafficJam:
      script_traffic_jam(w, rng);
      break;
    case ScenarioCategory::Accident:
      script_accident(w, rng, n_frames);
      break;
    case ScenarioCategory::OppositeIntrusion:
      script_opposite_intrusion(w, rng);
      break;
    case ScenarioCategory::UTurn:
      script_u_turn(w, rng);
      break;
    case ScenarioCategory::Construction:
      script_construction(w, rng);
      break;
    case ScenarioCategory::LaneMerge:
      script_lane_merge(w, rng);
      break;
    case ScenarioCategory::NoLightIntersection:
      script_no_light_intersection(w, rng);
      break;
    case ScenarioCategory::LeftMerge:
      script_left_merge(w, rng);
      break;
  }
  return w;
}

// ---- projection and rendering ------------------------------------------------

Pose to_ego_frame(const Pose& world, const EgoState& ego) {
  const double dx = world.x - ego.x;
  const double dy = world.y - ego.y;
  const double c = std::cos(-ego.heading), s = std::sin(-ego.heading);
  return Pose{dx * c - dy * s, dx * s + dy * c, world.heading - ego.heading};
}

// 60-degree sectors; front spans +-30 degrees
ViewTag sector_of(double azimuth) {
  const double deg = azimuth * 180.0 / M_PI;
  if (std::fabs(deg) <= 30.0) return ViewTag::CAM_FRONT;
  if (deg > 30.0 && deg <= 90.0) return ViewTag::CAM_FRONT_LEFT;
  if (deg < -30.0 && deg >= -90.0) return ViewTag::CAM_FRONT_RIGHT;
  if (deg > 90.0 && deg <= 150.0) return ViewTag::CAM_BACK_LEFT;
  if (deg < -90.0 && deg >= -150.0) return ViewTag::CAM_BACK_RIGHT;
  return ViewTag::CAM_BACK;
}

double sector_start_deg(ViewTag v) {
  switch (v) {
    case ViewTag::CAM_FRONT: return -30.0;
    case ViewTag::CAM_FRONT_LEFT: return 30.0;
    case ViewTag::CAM_FRONT_RIGHT: return -90.0;
    case ViewTag::CAM_BACK_LEFT: return 90.0;
    case ViewTag::CAM_BACK_RIGHT: return -150.0;
    case ViewTag::CAM_BACK: return 150.0;  // wraps through 180
  }
  return 0.0;
}

double kind_intensity(AgentKind k) {
  switch (k) {
    case AgentKind::Car: return 1.0;
    case AgentKind::Pedestrian: return 0.8;
    case AgentKind::Bicycle: return 0.7;
    case AgentKind::Obstacle: return 0.9;
  }
  return 1.0;
}

float& view_ref(std::vector<float>& views, int v, int c, int h, int w) {
  return views[std::size_t(((v * kViewC + c) * kViewH + h) * kViewW + w)];
}

// azimuth relative to sector start, wrapped into [0, 360)
double sector_col_deg(double az_deg, ViewTag v) {
  double rel = az_deg - sector_start_deg(v);
  while (rel < 0.0) rel += 360.0;
  while (rel >= 360.0) rel -= 360.0;
  return rel;  // in [0, 60) when the azimuth belongs to the sector
}

void render_lane_channel(std::vector<float>& views, const EgoState& ego) {
  (void)ego;  // lanes are painted in the ego frame directly
  for (int v = 0; v < kNumViews; ++v) {
    for (int row = 0; row < kViewH; ++row) {
      const double dist = (kViewH - row - 0.5) * (kViewRange / kViewH);
      for (int col = 0; col < kViewW; ++col) {
        const double rel = sector_start_deg(ViewTag(v)) +
                           (col + 0.5) * (60.0 / kViewW);
        const double az = rel * M_PI / 180.0;
        const double x = dist * std::cos(az);
        const double y = dist * std::sin(az);
        float& cell = view_ref(views, v, 0, row, col);
        if (std::fabs(y) < kLaneHalf && x > -8.0)
          cell = 0.65f;
        else if ((std::fabs(y - kLaneWidth) < kLaneHalf ||
                  std::fabs(y + kLaneWidth) < kLaneHalf) &&
                 x > -8.0)
          cell = 0.35f;
      }
    }
  }
}

void render_state_channel(std::vector<float>& views, double speed,
                          double yaw_cmd, ScenarioCategory cat) {
  const int sbar = std::clamp(int(std::lround(speed / 12.0 * (kViewW - 1))),
                              0, kViewW - 1);
  const int ybar = std::clamp(
      kViewW / 2 + int(std::lround(yaw_cmd / kMaxYawRate * 6.0)), 0,
      kViewW - 1);
  for (int v = 0; v < kNumViews; ++v) {
    for (int col = 0; col <= sbar; ++col)
      view_ref(views, v, 2, kViewH - 1, col) = 0.9f;
    view_ref(views, v, 2, kViewH - 2, ybar) = 0.8f;
    if (cat == ScenarioCategory::Fog) {
      for (int row = 0; row < kViewH - 2; ++row)
        for (int col = 0; col < kViewW; ++col) {
          float& c = view_ref(views, v, 2, row, col);
          c = std::min(1.0f, c + 0.5f);
        }
    } else if (cat == ScenarioCategory::Rain) {
      for (int row = 0; row < kViewH - 4; ++row)
        for (int col = 1; col < kViewW; col += 3)
          view_ref(views, v, 2, row, col) =
              std::max(view_ref(views, v, 2, row, col), 0.45f);
    }
  }
}

// paints the agent box into its sector, returns (view, bbox) when visible
bool render_agent(std::vector<float>& views, const Pose& rel, double length,
                  double width, AgentKind kind, ViewTag* out_view,
                  std::array<int, 4>* out_bbox) {
  const double dist = std::hypot(rel.x, rel.y);
  if (dist < 0.8 || dist > kViewRange - 0.5) return false;
  const double az = std::atan2(rel.y, rel.x);
  const ViewTag view = sector_of(az);
  const double az_deg = az * 180.0 / M_PI;
  const double col_deg = sector_col_deg(az_deg, view);
  const double half_ext = 0.5 * std::max(length, width);
  const double half_deg =
      std::atan2(half_ext, dist) * 180.0 / M_PI;

  int c0 = int(std::floor((col_deg - half_deg) / (60.0 / kViewW)));
  int c1 = int(std::floor((col_deg + half_deg) / (60.0 / kViewW)));
  const double row_center = kViewH - dist / (kViewRange / kViewH) - 0.5;
  int r0 = int(std::floor(row_center - half_ext / (kViewRange / kViewH)));
  int r1 = int(std::ceil(row_center + half_ext / (kViewRange / kViewH)));
  c0 = std::clamp(c0, 0, kViewW - 1);
  c1 = std::clamp(c1, 0, kViewW - 1);
  r0 = std::clamp(r0, 0, kViewH - 1);
  r1 = std::clamp(r1, 0, kViewH - 1);
  const float val = float(kind_intensity(kind));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      float& cell = view_ref(views, int(view), 1, r, c);
      cell = std::max(cell, val);
    }
  *out_view = view;
  *out_bbox = {c0, r0, c1, r1};
  return true;
}

}  // namespace

// ---- public API --------------------------------------------------------------

const char* to_string(Domain d) { return d == Domain::SIM ? "SIM" : "REAL"; }

const char* to_string(ScenarioCategory c) {
  switch (c) {
    case ScenarioCategory::Normal: return "normal";
    case ScenarioCategory::PedestrianIntrusion: return "pedestrian-intrusion";
    case ScenarioCategory::Fog: return "fog";
    case ScenarioCategory::Rain: return "rain";
    case ScenarioCategory::NearMiss: return "near-miss";
    case ScenarioCategory::TrafficJam: return "traffic-jam";
    case ScenarioCategory::Accident: return "accident";
    case ScenarioCategory::CutIn: return "cut-in";
    case ScenarioCategory::OppositeIntrusion: return "opposite-intrusion";
    case ScenarioCategory::UTurn: return "u-turn";
    case ScenarioCategory::Construction: return "construction";
    case ScenarioCategory::BicycleIntrusion: return "bicycle-intrusion";
    case ScenarioCategory::LaneMerge: return "lane-merge";
    case ScenarioCategory::NoLightIntersection: return "no-light-intersection";
    case ScenarioCategory::LeftMerge: return "left-merge";
  }
  return "?";
}

bool is_rare_event(ScenarioCategory c) {
  return c == ScenarioCategory::PedestrianIntrusion ||
         c == ScenarioCategory::CutIn || c == ScenarioCategory::Accident ||
         c == ScenarioCategory::NearMiss;
}

void ScenarioMix::validate() const {
  double total = 0.0;
  for (double x : p) {
    if (x < 0.0) throw config_error("scenario mix holds a negative probability");
    total += x;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw config_error("scenario mix must sum to 1, got " +
                       std::to_string(total));
}

ScenarioMix ScenarioMix::sim_default() {
  ScenarioMix m;
  m.p[std::size_t(ScenarioCategory::Normal)] = 0.616;
  m.p[std::size_t(ScenarioCategory::PedestrianIntrusion)] = 0.047;
  m.p[std::size_t(ScenarioCategory::Fog)] = 0.067;
  m.p[std::size_t(ScenarioCategory::Rain)] = 0.078;
  m.p[std::size_t(ScenarioCategory::NearMiss)] = 0.027;
  m.p[std::size_t(ScenarioCategory::TrafficJam)] = 0.045;
  m.p[std::size_t(ScenarioCategory::Accident)] = 0.018;
  m.p[std::size_t(ScenarioCategory::CutIn)] = 0.022;
  m.p[std::size_t(ScenarioCategory::OppositeIntrusion)] = 0.008;
  m.p[std::size_t(ScenarioCategory::UTurn)] = 0.005;
  m.p[std::size_t(ScenarioCategory::Construction)] = 0.040;
  m.p[std::size_t(ScenarioCategory::BicycleIntrusion)] = 0.005;
  m.p[std::size_t(ScenarioCategory::LaneMerge)] = 0.012;
  m.p[std::size_t(ScenarioCategory::NoLightIntersection)] = 0.007;
  m.p[std::size_t(ScenarioCategory::LeftMerge)] = 0.003;
  m.validate();
  return m;
}

ScenarioMix ScenarioMix::real_train_default() {
  ScenarioMix m;
  // normal / fog / rain only, renormalized from the sim table
  const double total = 0.616 + 0.067 + 0.078;
  m.p[std::size_t(ScenarioCategory::Normal)] = 0.616 / total;
  m.p[std::size_t(ScenarioCategory::Fog)] = 0.067 / total;
  m.p[std::size_t(ScenarioCategory::Rain)] =
      1.0 - m.p[std::size_t(ScenarioCategory::Normal)] -
      m.p[std::size_t(ScenarioCategory::Fog)];
  m.validate();
  return m;
}

ScenarioMix ScenarioMix::real_test_default(double rare_quota) {
  if (rare_quota < 0.0 || rare_quota > 1.0)
    throw config_error("rare-event quota must lie in [0,1]");
  ScenarioMix m;
  // rare mass in the sim-table proportions
  const double rare_total = 0.047 + 0.022 + 0.018 + 0.027;
  m.p[std::size_t(ScenarioCategory::PedestrianIntrusion)] =
      rare_quota * 0.047 / rare_total;
  m.p[std::size_t(ScenarioCategory::CutIn)] = rare_quota * 0.022 / rare_total;
  m.p[std::size_t(ScenarioCategory::Accident)] =
      rare_quota * 0.018 / rare_total;
  m.p[std::size_t(ScenarioCategory::NearMiss)] =
      rare_quota * 0.027 / rare_total;
  const double base_total = 0.616 + 0.067 + 0.078;
  m.p[std::size_t(ScenarioCategory::Normal)] =
      (1.0 - rare_quota) * 0.616 / base_total;
  m.p[std::size_t(ScenarioCategory::Fog)] =
      (1.0 - rare_quota) * 0.067 / base_total;
  m.p[std::size_t(ScenarioCategory::Rain)] =
      (1.0 - rare_quota) * 0.078 / base_total;
  // absorb rounding into the largest entry
  double total = 0.0;
  for (double x : m.p) total += x;
  m.p[std::size_t(ScenarioCategory::Normal)] += 1.0 - total;
  m.validate();
  return m;
}

std::vector<float> domain_shift(const std::vector<float>& views,
                                std::uint64_t seed, int frame_index,
                                const GenConfig& cfg) {
  if (views.size() != std::size_t(kNumViews) * kViewSize)
    throw contract_error("domain_shift expects a 6-view raster block");
  for (float x : views)
    if (x < 0.0f || x > 1.0f)
      throw contract_error("domain_shift input outside [0,1]");

  std::vector<float> out(views.size());
  for (int v = 0; v < kNumViews; ++v) {
    // smooth zero-mean field per (seed, frame, view): 4x4 lattice,
    // bilinear upsample, mean removed exactly
    Rng rng(seed * 0x9e3779b97f4a7c15ull + std::uint64_t(frame_index) * 1315423911ull +
            std::uint64_t(v));
    double lattice[5][5];
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) lattice[i][j] = rng.uniform(-1.0, 1.0);
    std::vector<double> field(std::size_t(kViewH) * kViewW);
    double mean = 0.0;
    for (int h = 0; h < kViewH; ++h)
      for (int w = 0; w < kViewW; ++w) {
        const double fy = h / double(kViewH) * 4.0;
        const double fx = w / double(kViewW) * 4.0;
        const int i0 = int(fy), j0 = int(fx);
        const double ty = fy - i0, tx = fx - j0;
        const double val =
            lattice[i0][j0] * (1 - ty) * (1 - tx) +
            lattice[i0 + 1][j0] * ty * (1 - tx) +
            lattice[i0][j0 + 1] * (1 - ty) * tx +
            lattice[i0 + 1][j0 + 1] * ty * tx;
        field[std::size_t(h) * kViewW + w] = val;
        mean += val;
      }
    mean /= double(field.size());
    for (double& f : field) f -= mean;

    for (int c = 0; c < kViewC; ++c) {
      const double gain = cfg.style_gain[std::size_t(c)];
      const double bias = cfg.style_bias[std::size_t(c)];
      for (int h = 0; h < kViewH; ++h)
        for (int w = 0; w < kViewW; ++w) {
          const std::size_t idx =
              std::size_t(((v * kViewC + c) * kViewH + h) * kViewW + w);
          const double x = double(views[idx]);
          const double y =
              x * (gain + cfg.style_noise_amp *
                              field[std::size_t(h) * kViewW + w]) +
              bias;
          out[idx] = float(std::clamp(y, 0.0, 1.0));
        }
    }
  }
  return out;
}

Clip generate_clip(std::uint64_t seed, Domain domain, const ScenarioMix& mix,
                   int n_frames, const GenConfig& cfg) {
  mix.validate();
  if (n_frames < 2)
    throw contract_error("generate_clip needs n_frames >= 2, got " +
                         std::to_string(n_frames));
  Rng rng(seed);
  const auto cat = ScenarioCategory(
      rng.categorical(std::vector<double>(mix.p.begin(), mix.p.end())));
  World w = build_world(cat, rng, n_frames);

  Clip clip;
  clip.seed = seed;
  clip.category = cat;
  clip.frames.reserve(std::size_t(n_frames));

  for (int t = 0; t < n_frames; ++t) {
    Frame f;
    f.timestamp_s = t * kFrameDt;
    f.domain = domain;
    f.category = cat;
    const EgoState& ego = w.ego[std::size_t(t)];
    f.ego = ego;

    // ground-truth trajectory: future ego positions in this frame's ego frame
    for (int k = 1; k <= 6; ++k) {
      const EgoState& fut = w.ego[std::size_t(t + k)];
      const Pose rel = to_ego_frame(Pose{fut.x, fut.y, fut.heading}, ego);
      f.gt_trajectory[std::size_t(k - 1)] = {rel.x, rel.y};
    }

    // agents visible from this frame
    f.views.assign(std::size_t(kNumViews) * kViewSize, 0.0f);
    render_lane_channel(f.views, ego);
    render_state_channel(f.views, ego.speed,
                         t < w.T ? w.yaw_cmd[std::size_t(t)] : 0.0, cat);

    struct Vis {
      std::size_t world_index;
      double dist;
    };
    std::vector<Vis> vis;
    for (std::size_t i = 0; i < w.agents.size(); ++i) {
      const WorldAgent& a = w.agents[i];
      const Pose rel = to_ego_frame(a.pose[std::size_t(t)], ego);
      const double dist = std::hypot(rel.x, rel.y);
      AgentState st;
      st.kind = a.kind;
      st.pose = rel;
      st.speed = a.speed[std::size_t(t)];
      st.length = a.length;
      st.width = a.width;
      ViewTag view{};
      std::array<int, 4> bbox{};
      if (!render_agent(f.views, rel, a.length, a.width, a.kind, &view,
                        &bbox))
        continue;
      st.view_tag = view;
      st.pixel_bbox = bbox;
      f.agents.push_back(st);
      f.agent_futures.push_back({});
      for (int k = 1; k <= 6; ++k) {
        const Pose fut =
            to_ego_frame(a.pose[std::size_t(t + k)], ego);
        f.agent_futures.back()[std::size_t(k - 1)] = fut;
      }
      vis.push_back({i, dist});
    }

    // answer: closest visible object, then threat/plan from world state
    CoCAnswer ans;
    if (!vis.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < vis.size(); ++i)
        if (vis[i].dist < vis[best].dist) best = i;
      const WorldAgent& wa = w.agents[vis[best].world_index];
      const AgentState& st = f.agents[best];

      PerceivedObject o;
      o.kind = st.kind;
      o.view = st.view_tag;
      o.bbox = st.pixel_bbox;
      // motion status from the relative range rate
      const Pose rel_now = st.pose;
      const Pose rel_next =
          to_ego_frame(wa.pose[std::size_t(t + 1)], w.ego[std::size_t(t + 1)]);
      const double rate =
          (std::hypot(rel_next.x, rel_next.y) - vis[best].dist) / kFrameDt;
      const double lat_rate = (rel_next.y - rel_now.y) / kFrameDt;
      if (wa.crossing && std::fabs(lat_rate) > 0.8)
        o.motion = MotionStatus::Crossing;
      else if (rate < -0.3)
        o.motion = MotionStatus::Approaching;
      else if (rate > 0.3)
        o.motion = MotionStatus::MovingAway;
      else
        o.motion = MotionStatus::Static;
      ans.perception.push_back(o);
      ans.closest_next_action = wa.action;
    } else {
      ans.has_perception = false;
      ans.has_prediction = false;
      ans.closest_next_action = NextAction::Proceed;
    }

    // threat from predicted corridor occupancy over the next 2 s
    Threat threat = Threat::None;
    for (std::size_t i = 0; i < f.agents.size(); ++i) {
      const Pose& rel = f.agents[i].pose;
      if (rel.x > -1.0 && rel.x < 25.0 && std::fabs(rel.y) < 5.0)
        threat = std::max(threat, Threat::Low);
      for (int k = 0; k < 4; ++k) {
        const Pose& fut = f.agent_futures[i][std::size_t(k)];
        if (fut.x > -1.0 && fut.x < 12.0 && std::fabs(fut.y) < 2.2) {
          threat = std::max(threat, Threat::High);
          break;
        }
      }
      if (f.agents[i].pose.x > -1.0 && f.agents[i].pose.x < 10.0 &&
          std::fabs(f.agents[i].pose.y) < 2.2)
        threat = std::max(threat, Threat::High);
    }
    ans.threat = threat;

    // plan from the applied controls
    const double a_now = w.accel[std::size_t(t)];
    const double yaw_now = w.yaw_cmd[std::size_t(t)];
    EgoAction act;
    if (yaw_now > 0.05) act = EgoAction::TurnLeft;
    else if (yaw_now < -0.05) act = EgoAction::TurnRight;
    else if (ego.speed < 0.45) act = EgoAction::Stop;
    else if (a_now < -0.55)
      act = w.yielding[std::size_t(t)] ? EgoAction::Yield
                                       : EgoAction::Decelerate;
    else if (a_now > 0.45) act = EgoAction::Accelerate;
    else act = EgoAction::KeepSpeed;
    if (threat == Threat::High && act != EgoAction::Decelerate &&
        act != EgoAction::Stop && act != EgoAction::Yield)
      act = EgoAction::Decelerate;
    ans.ego_action = act;

    for (const auto& [x, y] : f.gt_trajectory)
      ans.trajectory.emplace_back(quantize01(x), quantize01(y));

    f.gt_answer = ans;

    if (domain == Domain::REAL)
      f.views = domain_shift(f.views, seed, t, cfg);

    clip.frames.push_back(std::move(f));
  }
  return clip;
}

std::size_t Dataset::frame_count() const {
  std::size_t n = 0;
  for (const auto& c : clips) n += c.frames.size();
  return n;
}

Dataset generate_dataset(std::uint64_t gen_seed, Domain domain,
                         const ScenarioMix& mix, int clip_count, int n_frames,
                         const GenConfig& cfg) {
  Dataset ds;
  ds.domain = domain;
  ds.mix = mix;
  ds.gen_seed = gen_seed;
  ds.clips.reserve(std::size_t(clip_count));
  Rng seeder(gen_seed);
  for (int i = 0; i < clip_count; ++i) {
    const std::uint64_t clip_seed = seeder.next_u64();
    ds.clips.push_back(generate_clip(clip_seed, domain, mix, n_frames, cfg));
  }
  return ds;
}

// ---- container ---------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[8] = {'C', 'O', 'C', 'D', 'S', 'E', 'T', '1'};

void put_answer(ByteWriter& w, const CoCAnswer& a) {
  w.u8(std::uint8_t(a.perception.size()));
  for (const auto& o : a.perception) {
    w.u8(std::uint8_t(o.kind));
    w.u8(std::uint8_t(o.view));
    for (int v : o.bbox) w.i16(std::int16_t(v));
    w.u8(std::uint8_t(o.motion));
  }
  w.u8(std::uint8_t(a.closest_next_action));
  w.u8(std::uint8_t(a.threat));
  w.u8(std::uint8_t(a.ego_action));
  w.u8(std::uint8_t(a.trajectory.size()));
  for (const auto& [x, y] : a.trajectory) {
    w.f64(x);
    w.f64(y);
  }
  std::uint8_t flags = 0;
  if (a.has_perception) flags |= 1;
  if (a.has_prediction) flags |= 2;
  if (a.has_threat) flags |= 4;
  if (a.has_plan) flags |= 8;
  w.u8(flags);
}

CoCAnswer get_answer(ByteReader& r) {
  CoCAnswer a;
  const int n = r.u8();
  a.perception.clear();
  for (int i = 0; i < n; ++i) {
    PerceivedObject o;
    o.kind = AgentKind(r.u8());
    o.view = ViewTag(r.u8());
    for (int& v : o.bbox) v = r.i16();
    o.motion = MotionStatus(r.u8());
    a.perception.push_back(o);
  }
  a.closest_next_action = NextAction(r.u8());
  a.threat = Threat(r.u8());
  a.ego_action = EgoAction(r.u8());
  const int nt = r.u8();
  for (int i = 0; i < nt; ++i) {
    const double x = r.f64();
    const double y = r.f64();
    a.trajectory.emplace_back(x, y);
  }
  const std::uint8_t flags = r.u8();
  a.has_perception = flags & 1;
  a.has_prediction = flags & 2;
  a.has_threat = flags & 4;
  a.has_plan = flags & 8;
  return a;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  ByteWriter w;
  w.u32(ds.version);
  w.u8(std::uint8_t(ds.domain));
  w.u64(ds.gen_seed);
  w.u8(kNumCategories);
  for (double p : ds.mix.p) w.f64(p);
  w.u32(std::uint32_t(ds.clips.size()));
  for (const auto& clip : ds.clips) {
    w.u64(clip.seed);
    w.u8(std::uint8_t(clip.category));
    w.u16(std::uint16_t(clip.frames.size()));
    for (const auto& f : clip.frames) {
      w.f64(f.timestamp_s);
      w.f64(f.ego.x);
      w.f64(f.ego.y);
      w.f64(f.ego.heading);
      w.f64(f.ego.speed);
      w.u16(std::uint16_t(f.agents.size()));
      for (const auto& a : f.agents) {
        w.u8(std::uint8_t(a.kind));
        w.f64(a.pose.x);
        w.f64(a.pose.y);
        w.f64(a.pose.heading);
        w.f64(a.speed);
        w.f64(a.length);
        w.f64(a.width);
        w.u8(std::uint8_t(a.view_tag));
        for (int v : a.pixel_bbox) w.i16(std::int16_t(v));
      }
      w.f32s(f.views);
      for (const auto& [x, y] : f.gt_trajectory) {
        w.f64(x);
        w.f64(y);
      }
      for (const auto& futs : f.agent_futures)
        for (const auto& p : futs) {
          w.f64(p.x);
          w.f64(p.y);
          w.f64(p.heading);
        }
      put_answer(w, f.gt_answer);
      w.u8(std::uint8_t(f.domain));
      w.u8(std::uint8_t(f.category));
    }
  }
  write_container(path, kDatasetMagic, w.bytes());
}

Dataset read_dataset(const std::string& path) {
  const auto payload = read_container(path, kDatasetMagic);
  ByteReader r(payload);
  Dataset ds;
  ds.version = r.u32();
  if (ds.version != 1)
    throw io_error("dataset version " + std::to_string(ds.version) +
                   " unsupported");
  ds.domain = Domain(r.u8());
  ds.gen_seed = r.u64();
  const int ncat = r.u8();
  if (ncat != kNumCategories) throw io_error("dataset category table mismatch");
  for (double& p : ds.mix.p) p = r.f64();
  const std::uint32_t n_clips = r.u32();
  ds.clips.reserve(n_clips);
  for (std::uint32_t ci = 0; ci < n_clips; ++ci) {
    Clip clip;
    clip.seed = r.u64();
    clip.category = ScenarioCategory(r.u8());
    const int nf = r.u16();
    for (int fi = 0; fi < nf; ++fi) {
      Frame f;
      f.timestamp_s = r.f64();
      f.ego.x = r.f64();
      f.ego.y = r.f64();
      f.ego.heading = r.f64();
      f.ego.speed = r.f64();
      const int na = r.u16();
      for (int ai = 0; ai < na; ++ai) {
        AgentState a;
        a.kind = AgentKind(r.u8());
        a.pose.x = r.f64();
        a.pose.y = r.f64();
        a.pose.heading = r.f64();
        a.speed = r.f64();
        a.length = r.f64();
        a.width = r.f64();
        a.view_tag = ViewTag(r.u8());
        for (int& v : a.pixel_bbox) v = r.i16();
        f.agents.push_back(a);
      }
      f.views = r.f32s();
      for (auto& [x, y] : f.gt_trajectory) {
        x = r.f64();
        y = r.f64();
      }
      for (int ai = 0; ai < na; ++ai) {
        std::array<Pose, 6> futs;
        for (auto& p : futs) {
          p.x = r.f64();
          p.y = r.f64();
          p.heading = r.f64();
        }
        f.agent_futures.push_back(futs);
      }
      f.gt_answer = get_answer(r);
      f.domain = Domain(r.u8());
      f.category = ScenarioCategory(r.u8());
      clip.frames.push_back(std::move(f));
    }
    ds.clips.push_back(std::move(clip));
  }
  if (!r.exhausted()) throw io_error("dataset holds trailing bytes");
  return ds;
}

}  // namespace coc

#include "roadkf/sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <utility>

namespace roadkf::sim {

namespace {

constexpr double kMaxAccel = 2.0;       // m/s^2
constexpr double kSubStep = 0.05;       // s, trajectory integration step
constexpr double kMinCornerSpeed = 2.0; // m/s
constexpr double kShellRotation = geo::kTwoPi / 43200.0;  // rad/s, half-day orbit

struct RoadClass {
    const char* type;
    double max_speed;
    int lanes;
};

constexpr RoadClass kPrimary{"primary", 13.9, 2};
constexpr RoadClass kSecondary{"secondary", 11.1, 2};
constexpr RoadClass kResidential{"residential", 8.3, 1};

roadnet::RawRoad make_road(const geo::EnuPoint& a, const geo::EnuPoint& b,
                           const RoadClass& cls, std::mt19937_64& rng,
                           double oneway_fraction) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    roadnet::RawRoad r;
    r.a = a;
    r.b = b;
    r.road_type = cls.type;
    r.lanes = cls.lanes;
    r.max_speed = cls.max_speed;
    // Both draws happen unconditionally so the stream layout is fixed.
    const bool oneway = u01(rng) < oneway_fraction;
    const bool dir_ab = u01(rng) < 0.5;
    r.oneway = oneway;
    r.dir_ab = dir_ab;
    return r;
}

std::vector<roadnet::RawRoad> grid_roads(const ScenarioConfig& cfg,
                                         std::mt19937_64& rng) {
    const int k = std::max(1, static_cast<int>(std::llround(cfg.extent / cfg.block)));
    std::uniform_real_distribution<double> jit(-cfg.jitter, cfg.jitter);
    std::vector<std::vector<geo::EnuPoint>> node(k + 1,
                                                 std::vector<geo::EnuPoint>(k + 1));
    for (int j = 0; j <= k; ++j)
        for (int i = 0; i <= k; ++i) {
            const double je = jit(rng);
            const double jn = jit(rng);
            node[j][i] = {i * cfg.block + je, j * cfg.block + jn, 0.0};
        }
    auto row_class = [&](int j) {
        if (j == 0 || j == k) return kPrimary;
        return (j % 2 == 1) ? kSecondary : kResidential;
    };
    std::vector<roadnet::RawRoad> roads;
    roads.reserve(2 * k * (k + 1));
    for (int j = 0; j <= k; ++j)
        for (int i = 0; i <= k; ++i) {
            if (i < k)
                roads.push_back(make_road(node[j][i], node[j][i + 1], row_class(j),
                                          rng, cfg.oneway_fraction));
            if (j < k)
                roads.push_back(make_road(node[j][i], node[j + 1][i], row_class(i),
                                          rng, cfg.oneway_fraction));
        }
    return roads;
}

std::vector<roadnet::RawRoad> radial_roads(const ScenarioConfig& cfg,
                                           std::mt19937_64& rng) {
    const int S = std::max(3, cfg.radial_spokes);
    const int R = std::max(1, cfg.radial_rings);
    const double outer = cfg.extent / 2.0;
    auto at = [&](int s, int ring) {
        const double alpha = geo::kTwoPi * s / S;
        const double rho = outer * ring / R;
        return geo::EnuPoint{rho * std::cos(alpha), rho * std::sin(alpha), 0.0};
    };
    std::vector<roadnet::RawRoad> roads;
    for (int s = 0; s < S; ++s)
        for (int ring = 0; ring < R; ++ring)
            roads.push_back(make_road(at(s, ring), at(s, ring + 1), kPrimary, rng,
                                      cfg.oneway_fraction));
    for (int ring = 1; ring <= R; ++ring)
        for (int s = 0; s < S; ++s)
            roads.push_back(make_road(at(s, ring), at((s + 1) % S, ring),
                                      kSecondary, rng, cfg.oneway_fraction));
    return roads;
}

std::vector<roadnet::RawRoad> parallel_roads(const ScenarioConfig& cfg,
                                             std::mt19937_64& rng) {
    const int count = std::max(2, cfg.parallel_count);
    std::vector<roadnet::RawRoad> roads;
    for (int i = 0; i < count; ++i) {
        const double y = i * cfg.parallel_separation;
        roadnet::RawRoad r =
            make_road({0.0, y, 0.0}, {cfg.parallel_length, y, 0.0}, kPrimary, rng,
                      cfg.oneway_fraction);
        r.lanes = 2 + (i % 2);
        roads.push_back(std::move(r));
    }
    return roads;
}

}  // namespace

ScenarioConfig urban_scenario() { return ScenarioConfig{}; }

ScenarioConfig open_sky_scenario() {
    ScenarioConfig cfg;
    cfg.range_sigma = 2.5;
    cfg.p_multipath = 0.03;
    return cfg;
}

std::vector<roadnet::RawRoad> generate_raw_roads(const ScenarioConfig& cfg) {
    if (cfg.extent <= 0.0 || cfg.block <= 0.0)
        throw std::invalid_argument("generate_raw_roads: extent and block must be positive");
    std::mt19937_64 rng(cfg.seed);
    switch (cfg.network) {
        case NetworkKind::Grid:
            return grid_roads(cfg, rng);
        case NetworkKind::Radial:
            return radial_roads(cfg, rng);
        case NetworkKind::Parallel:
            return parallel_roads(cfg, rng);
        case NetworkKind::Imported:
            break;
    }
    throw std::invalid_argument("generate_raw_roads: imported networks come from files");
}

roadnet::RoadGraph generate_network(const ScenarioConfig& cfg) {
    return roadnet::to_dual_graph(roadnet::split_segments(generate_raw_roads(cfg)));
}

namespace {

double travel_heading(const roadnet::RoadSegment& s, bool fwd) {
    return fwd ? s.geometry.heading : geo::wrap_angle(s.geometry.heading + M_PI);
}

struct Plan {
    int seg = -1;  // -1: no legal successor
    bool fwd = true;
    double corner = kMinCornerSpeed;
};

// Successor choice is committed on entering a segment so braking can target
// the junction speed in advance.
Plan plan_next(const roadnet::RoadGraph& graph, int seg, bool fwd,
               std::mt19937_64& rng) {
    const auto& cur = graph.segment(seg);
    const geo::EnuPoint exit_point = fwd ? cur.geometry.b : cur.geometry.a;
    std::vector<std::pair<int, bool>> cands;
    for (int t : graph.out_neighbors(seg)) {
        if (t == seg) continue;
        const auto& tg = graph.segment(t);
        const bool at_a = geo::horizontal_distance(tg.geometry.a, exit_point) < 1e-6;
        if (at_a) {
            cands.emplace_back(t, true);
        } else if (!tg.oneway &&
                   geo::horizontal_distance(tg.geometry.b, exit_point) < 1e-6) {
            cands.emplace_back(t, false);
        }
    }
    Plan p;
    if (cands.empty()) return p;
    const std::size_t pick =
        std::uniform_int_distribution<std::size_t>(0, cands.size() - 1)(rng);
    p.seg = cands[pick].first;
    p.fwd = cands[pick].second;
    const auto& nxt = graph.segment(p.seg);
    const double dth = std::abs(std::remainder(
        travel_heading(nxt, p.fwd) - travel_heading(cur, fwd), geo::kTwoPi));
    const double vlim = std::min(cur.max_speed, nxt.max_speed);
    const double scale = 1.0 - dth / M_PI;
    p.corner = std::max(kMinCornerSpeed, vlim * scale * scale);
    return p;
}

}  // namespace

std::vector<TruthEpoch> generate_trajectory(const roadnet::RoadGraph& graph,
                                            const ScenarioConfig& cfg,
                                            std::uint64_t seed) {
    std::vector<TruthEpoch> out;
    if (graph.size() == 0) return out;
    if (cfg.epoch_rate <= 0.0 || cfg.duration <= 0.0)
        throw std::invalid_argument("generate_trajectory: rate and duration must be positive");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    int seg = std::uniform_int_distribution<int>(0, graph.size() - 1)(rng);
    bool fwd = graph.segment(seg).oneway ? true : (u01(rng) < 0.5);
    double pos = 0.0;
    double speed = 0.0;
    double bias = cfg.clock_bias0;
    const double drift = cfg.clock_drift0;

    Plan plan = plan_next(graph, seg, fwd, rng);

    const double dt = 1.0 / cfg.epoch_rate;
    const int epochs = static_cast<int>(std::llround(cfg.duration * cfg.epoch_rate));
    const int subs = std::max(1, static_cast<int>(std::llround(dt / kSubStep)));
    const double sub_dt = dt / subs;
    std::normal_distribution<double> walk(
        0.0, std::sqrt(std::max(0.0, cfg.clock_walk) * dt));

    bool terminated = false;
    for (int k = 0; k < epochs && !terminated; ++k) {
        const auto& g = graph.segment(seg).geometry;
        const double f = fwd ? pos / g.length : 1.0 - pos / g.length;
        TruthEpoch te;
        te.time = k * dt;
        te.position = g.a + f * (g.b - g.a);
        const double th = travel_heading(graph.segment(seg), fwd);
        te.velocity = {speed * std::cos(th), speed * std::sin(th), 0.0};
        te.clock_bias = bias;
        te.clock_drift = drift;
        te.segment = seg;
        out.push_back(te);

        for (int s = 0; s < subs && !terminated; ++s) {
            const auto& segment = graph.segment(seg);
            const double remaining = segment.geometry.length - pos;
            const double brake_dist =
                speed > plan.corner
                    ? (speed * speed - plan.corner * plan.corner) / (2.0 * kMaxAccel)
                    : 0.0;
            if (remaining <= brake_dist + speed * sub_dt)
                speed = std::max(plan.corner, speed - kMaxAccel * sub_dt);
            else
                speed = std::min(segment.max_speed, speed + kMaxAccel * sub_dt);
            pos += speed * sub_dt;
            while (pos >= graph.segment(seg).geometry.length) {
                pos -= graph.segment(seg).geometry.length;
                if (plan.seg < 0) {
                    if (graph.segment(seg).oneway) {
                        terminated = true;
                        break;
                    }
                    fwd = !fwd;  // U-turn re-enters from the same endpoint
                    speed = std::min(speed, kMinCornerSpeed);
                } else {
                    seg = plan.seg;
                    fwd = plan.fwd;
                }
                plan = plan_next(graph, seg, fwd, rng);
            }
        }
        bias += drift * dt + walk(rng);
    }
    return out;
}

std::vector<kalman::GnssEpoch> generate_measurements(
    const std::vector<TruthEpoch>& truth, const ScenarioConfig& cfg,
    std::uint64_t seed) {
    if (cfg.satellites < 4)
        throw std::invalid_argument("generate_measurements: need at least 4 satellites");
    std::vector<kalman::GnssEpoch> out;
    if (truth.empty()) return out;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_real_distribution<double> bias_draw(cfg.multipath_bias_min,
                                                     cfg.multipath_bias_max);
    std::normal_distribution<double> range_noise(0.0, std::max(0.0, cfg.range_sigma));
    std::normal_distribution<double> rate_noise(0.0, std::max(0.0, cfg.rate_sigma));

    const int S = cfg.satellites;
    const double azimuth0 = u01(rng) * geo::kTwoPi;
    std::vector<double> elevation(S);
    for (int j = 0; j < S; ++j)
        elevation[j] = cfg.elevation_min +
                       (cfg.elevation_max - cfg.elevation_min) * u01(rng);
    std::vector<char> nlos(S);
    std::vector<double> mp_bias(S);
    for (int j = 0; j < S; ++j) {
        nlos[j] = u01(rng) < cfg.p_multipath;
        mp_bias[j] = bias_draw(rng);
    }

    const double dt = truth.size() > 1 ? truth[1].time - truth[0].time : 1.0;
    // Two-state outage chain with the configured stationary probability; zero
    // dwell degenerates to independent epochs.
    const double p = std::clamp(cfg.p_multipath, 0.0, 1.0);
    const double leave =
        cfg.multipath_dwell > 0.0 ? std::min(1.0, dt / cfg.multipath_dwell) : 1.0;
    const double enter =
        p >= 1.0 ? 1.0 : std::min(1.0, leave * p / (1.0 - p));

    // The emitted per-observation sigmas are what a receiver would assume;
    // they never collapse to zero even in noise-free scenarios.
    const double assumed_range_sigma = std::max(cfg.range_sigma, 1.0);
    const double assumed_rate_sigma = std::max(cfg.rate_sigma, 0.1);

    out.reserve(truth.size());
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const TruthEpoch& te = truth[k];
        kalman::GnssEpoch ep;
        ep.time = te.time;
        ep.sats.reserve(S);
        for (int j = 0; j < S; ++j) {
            if (k > 0) {
                if (nlos[j]) {
                    if (u01(rng) < leave) nlos[j] = 0;
                } else if (u01(rng) < enter) {
                    nlos[j] = 1;
                    mp_bias[j] = bias_draw(rng);  // fresh bias per outage
                }
            }
            const double az = azimuth0 + geo::kTwoPi * j / S + kShellRotation * te.time;
            const double ce = std::cos(elevation[j]);
            kalman::SatObs so;
            so.sat_position = {cfg.shell_radius * ce * std::cos(az),
                               cfg.shell_radius * ce * std::sin(az),
                               cfg.shell_radius * std::sin(elevation[j])};
            const double de = so.sat_position.east - te.position.east;
            const double dn = so.sat_position.north - te.position.north;
            const double du = so.sat_position.up - te.position.up;
            const double rho = std::sqrt(de * de + dn * dn + du * du);
            const double nr = range_noise(rng);
            const double nv = rate_noise(rng);
            so.pseudorange =
                rho + te.clock_bias + nr + (nlos[j] ? mp_bias[j] : 0.0);
            // Rates are emitted with satellite motion already compensated, the
            // same closure the pseudoranges get for path-delay terms.
            so.pseudorange_rate =
                -(de * te.velocity.east + dn * te.velocity.north +
                  du * te.velocity.up) /
                    rho +
                te.clock_drift + nv;
            so.range_sigma = assumed_range_sigma;
            so.rate_sigma = assumed_rate_sigma;
            ep.sats.push_back(so);
        }
        out.push_back(std::move(ep));
    }
    return out;
}

DriveRecord generate_drive(const roadnet::RoadGraph& graph,
                           const ScenarioConfig& cfg, std::uint64_t seed) {
    DriveRecord rec;
    rec.truth = generate_trajectory(graph, cfg, seed);
    rec.epochs = generate_measurements(rec.truth, cfg,
                                       seed ^ 0x94d049bb133111ebULL);
    return rec;
}

}  // namespace roadkf::sim

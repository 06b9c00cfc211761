#pragma once

#include <cstdint>
#include <vector>

#include "roadkf/geo.hpp"
#include "roadkf/kalman.hpp"
#include "roadkf/road_graph.hpp"

// Synthetic scenario generation: road networks, center-line ground-truth
// drives, and noisy GNSS measurements. Everything is a pure function of
// (config, seed).

namespace roadkf::sim {

enum class NetworkKind { Grid, Radial, Parallel, Imported };

struct ScenarioConfig {
    NetworkKind network = NetworkKind::Grid;
    double extent = 600.0;        // m, side length / diameter of the region
    double block = 100.0;         // m, grid spacing
    double jitter = 8.0;          // m, intersection perturbation (grid kind)
    double oneway_fraction = 0.15;
    int radial_spokes = 8;
    int radial_rings = 3;
    int parallel_count = 3;
    double parallel_separation = 10.0;
    double parallel_length = 500.0;

    double epoch_rate = 1.0;  // Hz
    double duration = 600.0;  // s

    int satellites = 8;
    double shell_radius = 2.02e7;     // m
    double elevation_min = 0.35;      // rad
    double elevation_max = 1.35;
    double range_sigma = 5.0;         // m
    double rate_sigma = 0.5;          // m/s
    double p_multipath = 0.3;         // stationary outage probability per satellite
    double multipath_bias_min = 5.0;  // m, reflections only lengthen paths
    double multipath_bias_max = 60.0;
    double multipath_dwell = 15.0;    // s, mean outage length; 0 = independent epochs

    double clock_bias0 = 10.0;    // m
    double clock_drift0 = 0.5;    // m/s
    double clock_walk = 0.05;     // m^2/s random-walk density on the bias

    std::uint64_t seed = 0;
};

/// Heavy multipath and wide range noise.
ScenarioConfig urban_scenario();
/// Clean sky: same geometry, low noise, rare outliers.
ScenarioConfig open_sky_scenario();

struct TruthEpoch {
    double time = 0.0;
    geo::EnuPoint position;
    geo::EnuPoint velocity;
    double clock_bias = 0.0;
    double clock_drift = 0.0;
    int segment = -1;  // occupied dual segment id
};

struct DriveRecord {
    std::vector<TruthEpoch> truth;
    std::vector<kalman::GnssEpoch> epochs;  // parallel to truth
};

/// Primal roads before splitting; exposed so counts and geometry stay
/// checkable. Throws std::invalid_argument for the Imported kind (those come
/// from files).
std::vector<roadnet::RawRoad> generate_raw_roads(const ScenarioConfig& cfg);

/// Generated road network, already split to <= 25 m pieces and in dual form.
roadnet::RoadGraph generate_network(const ScenarioConfig& cfg);

/// Random walk over the directed dual at segment speed limits, trapezoidal
/// accel/decel (2 m/s^2) into turns, exact center-line positions. A oneway
/// dead end ends the drive early; a bidirectional one U-turns.
std::vector<TruthEpoch> generate_trajectory(const roadnet::RoadGraph& graph,
                                            const ScenarioConfig& cfg,
                                            std::uint64_t seed);

/// Satellite shell with per-satellite elevations, slow azimuth rotation,
/// Gaussian range/rate noise, and positive-bias multipath outages holding
/// for a sticky dwell. Clock bias enters every pseudorange.
std::vector<kalman::GnssEpoch> generate_measurements(
    const std::vector<TruthEpoch>& truth, const ScenarioConfig& cfg,
    std::uint64_t seed);

/// Trajectory plus measurements with decorrelated sub-seeds.
DriveRecord generate_drive(const roadnet::RoadGraph& graph,
                           const ScenarioConfig& cfg, std::uint64_t seed);

}  // namespace roadkf::sim

#pragma once

#include <Eigen/Dense>
#include <vector>

#include "roadkf/geo.hpp"
#include "roadkf/road_graph.hpp"

// 8-state GNSS Kalman filter. State order: east, north, up, v_east, v_north,
// v_up, clock_bias [m], clock_drift [m/s]. All operations are pure value
// transforms; covariance is re-symmetrized after every update.

namespace roadkf::kalman {

using Vec8 = Eigen::Matrix<double, 8, 1>;
using Mat8 = Eigen::Matrix<double, 8, 8>;

// Variances of 1e12 m^2 stand in for "infinite" (uninformative) measurement
// noise; keeps every 2x2 solve finite.
constexpr double kInfVariance = 1e12;

struct KfEstimate {
    Vec8 mean = Vec8::Zero();
    Mat8 cov = Mat8::Identity();

    geo::EnuPoint position() const { return {mean(0), mean(1), mean(2)}; }
    double speed_horizontal() const { return std::hypot(mean(3), mean(4)); }
    double heading() const { return geo::wrap_angle(std::atan2(mean(4), mean(3))); }
};

struct SatObs {
    geo::EnuPoint sat_position;
    double pseudorange = 0.0;       // m, clock bias included
    double pseudorange_rate = 0.0;  // m/s, clock drift included
    double range_sigma = 5.0;       // m
    double rate_sigma = 0.5;        // m/s
};

struct GnssEpoch {
    double time = 0.0;
    std::vector<SatObs> sats;
};

struct ProcessNoise {
    double accel_horizontal = 1.0;  // m^2/s^3 white-acceleration density
    double accel_vertical = 0.1;
    double clock_bias = 1e-2;   // m^2/s
    double clock_drift = 1e-4;  // m^2/s^3
};

struct InitialUncertainty {
    double pos = 25.0;     // m^2 per axis
    double vel = 100.0;    // (m/s)^2 per axis
    double clock_bias = 100.0;
    double clock_drift = 1.0;
};

struct LsFix {
    geo::EnuPoint position;
    double clock_bias = 0.0;
    int iterations = 0;
};

struct RoadObservation {
    Eigen::Vector2d z = Eigen::Vector2d::Zero();
    Eigen::Matrix<double, 2, 8> H = Eigen::Matrix<double, 2, 8>::Zero();
    Eigen::Vector2d V_diag = Eigen::Vector2d::Zero();  // sigma_par^2, sigma_perp^2
};

/// Iterated weighted least squares on pseudoranges. Throws if fewer than 4
/// satellites are present or the iteration fails to converge (position step
/// below 1e-4 m within 20 iterations).
LsFix least_squares_fix(const GnssEpoch& epoch);

/// Filter state from a least-squares fix: velocity and drift start at zero
/// with the configured initial variances.
KfEstimate init_from_fix(const LsFix& fix, const InitialUncertainty& u = {});

/// State-transition matrix of the constant-velocity model.
Mat8 transition_matrix(double dt);

/// Nearly-constant-velocity prediction over dt seconds.
KfEstimate predict(const KfEstimate& est, double dt, const ProcessNoise& q = {});

/// Linearized pseudorange/pseudorange-rate update. Measurement rows are
/// linearized once at the prior mean, then applied as sequential scalar
/// updates (exactly equal to the batch update for the linearized model).
/// When mean_jacobian is given it receives d(posterior mean)/d(prior mean)
/// of the linearized update.
KfEstimate gnss_update(const KfEstimate& est, const GnssEpoch& epoch,
                       Mat8* mean_jacobian = nullptr);

/// Road-frame pseudo-measurement for a selected segment. The residual
/// z - H*mean equals the rotated offset from the user position to the
/// closest point on the segment: the parallel component is soft-thresholded
/// by half the segment length.
RoadObservation build_road_observation(const KfEstimate& est,
                                       const roadnet::RoadSegment& r,
                                       double sigma_par2, double sigma_perp2);

/// Kalman update with the 2-D road observation. Throws if the innovation
/// covariance is numerically singular.
KfEstimate road_update(const KfEstimate& est, const RoadObservation& obs);

}  // namespace roadkf::kalman

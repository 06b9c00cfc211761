#include "roadkf/kalman.hpp"

#include <cmath>
#include <stdexcept>

namespace roadkf::kalman {

namespace {

void symmetrize(Mat8& P) { P = ((P + P.transpose()) * 0.5).eval(); }

double range_to(const geo::EnuPoint& sat, double e, double n, double u) {
    const double de = sat.east - e;
    const double dn = sat.north - n;
    const double du = sat.up - u;
    return std::sqrt(de * de + dn * dn + du * du);
}

// One scalar Kalman update on the linearized model. The innovation is
// computed against the fixed linearization point x0 so a sequence of scalar
// updates reproduces the batch update exactly.
void scalar_update(Vec8& x, Mat8& P, const Vec8& h, double innov0,
                   const Vec8& x0, double var, Mat8* jac) {
    const double s = h.dot(P * h) + var;
    const Vec8 k = (P * h) / s;
    const double innov = innov0 - h.dot(x - x0);
    x += k * innov;
    const Mat8 ikh = Mat8::Identity() - k * h.transpose();
    P = (ikh * P * ikh.transpose() + var * k * k.transpose()).eval();
    symmetrize(P);
    if (jac) *jac = (ikh * *jac).eval();
}

}  // namespace

LsFix least_squares_fix(const GnssEpoch& epoch) {
    const int m = static_cast<int>(epoch.sats.size());
    if (m < 4) {
        throw std::runtime_error("least_squares_fix: need at least 4 satellites, got " +
                                 std::to_string(m));
    }
    Eigen::Vector4d x = Eigen::Vector4d::Zero();  // e, n, u, clock_bias
    for (int it = 1; it <= 20; ++it) {
        Eigen::MatrixXd A(m, 4);
        Eigen::VectorXd r(m);
        for (int i = 0; i < m; ++i) {
            const SatObs& s = epoch.sats[i];
            const double rho = range_to(s.sat_position, x(0), x(1), x(2));
            const double w = 1.0 / s.range_sigma;
            A(i, 0) = -(s.sat_position.east - x(0)) / rho * w;
            A(i, 1) = -(s.sat_position.north - x(1)) / rho * w;
            A(i, 2) = -(s.sat_position.up - x(2)) / rho * w;
            A(i, 3) = w;
            r(i) = (s.pseudorange - rho - x(3)) * w;
        }
        const Eigen::Vector4d dx = A.colPivHouseholderQr().solve(r);
        x += dx;
        if (dx.head<3>().norm() < 1e-4) {
            return {{x(0), x(1), x(2)}, x(3), it};
        }
    }
    throw std::runtime_error("least_squares_fix: no convergence in 20 iterations");
}

KfEstimate init_from_fix(const LsFix& fix, const InitialUncertainty& u) {
    KfEstimate est;
    est.mean.setZero();
    est.mean(0) = fix.position.east;
    est.mean(1) = fix.position.north;
    est.mean(2) = fix.position.up;
    est.mean(6) = fix.clock_bias;
    est.cov.setZero();
    est.cov.diagonal() << u.pos, u.pos, u.pos, u.vel, u.vel, u.vel,
        u.clock_bias, u.clock_drift;
    return est;
}

Mat8 transition_matrix(double dt) {
    Mat8 F = Mat8::Identity();
    F(0, 3) = F(1, 4) = F(2, 5) = dt;  // position <- velocity
    F(6, 7) = dt;                      // clock bias <- drift
    return F;
}

KfEstimate predict(const KfEstimate& est, double dt, const ProcessNoise& q) {
    if (!(dt > 0.0)) throw std::invalid_argument("predict: dt must be > 0");
    const Mat8 F = transition_matrix(dt);

    const double dt2 = dt * dt, dt3 = dt2 * dt;
    Mat8 Q = Mat8::Zero();
    const double qa[3] = {q.accel_horizontal, q.accel_horizontal, q.accel_vertical};
    for (int i = 0; i < 3; ++i) {
        Q(i, i) = qa[i] * dt3 / 3.0;
        Q(i, i + 3) = Q(i + 3, i) = qa[i] * dt2 / 2.0;
        Q(i + 3, i + 3) = qa[i] * dt;
    }
    Q(6, 6) = q.clock_bias * dt + q.clock_drift * dt3 / 3.0;
    Q(6, 7) = Q(7, 6) = q.clock_drift * dt2 / 2.0;
    Q(7, 7) = q.clock_drift * dt;

    KfEstimate out;
    out.mean = F * est.mean;
    out.cov = F * est.cov * F.transpose() + Q;
    symmetrize(out.cov);
    return out;
}

KfEstimate gnss_update(const KfEstimate& est, const GnssEpoch& epoch,
                       Mat8* mean_jacobian) {
    KfEstimate out = est;
    const Vec8 x0 = est.mean;
    if (mean_jacobian) mean_jacobian->setIdentity();
    for (const SatObs& s : epoch.sats) {
        const double rho = range_to(s.sat_position, x0(0), x0(1), x0(2));
        const double ux = (s.sat_position.east - x0(0)) / rho;
        const double uy = (s.sat_position.north - x0(1)) / rho;
        const double uz = (s.sat_position.up - x0(2)) / rho;

        Vec8 hr = Vec8::Zero();
        hr(0) = -ux;
        hr(1) = -uy;
        hr(2) = -uz;
        hr(6) = 1.0;
        const double pred_range = rho + x0(6);
        scalar_update(out.mean, out.cov, hr, s.pseudorange - pred_range, x0,
                      s.range_sigma * s.range_sigma, mean_jacobian);

        Vec8 hv = Vec8::Zero();
        hv(3) = -ux;
        hv(4) = -uy;
        hv(5) = -uz;
        hv(7) = 1.0;
        const double pred_rate = -(ux * x0(3) + uy * x0(4) + uz * x0(5)) + x0(7);
        scalar_update(out.mean, out.cov, hv, s.pseudorange_rate - pred_rate, x0,
                      s.rate_sigma * s.rate_sigma, mean_jacobian);
    }
    return out;
}

RoadObservation build_road_observation(const KfEstimate& est,
                                       const roadnet::RoadSegment& r,
                                       double sigma_par2, double sigma_perp2) {
    if (sigma_par2 < 0.0 || sigma_perp2 < 0.0) {
        throw std::invalid_argument("build_road_observation: negative variance");
    }
    const geo::Rot2 rot = geo::rotation_to_road(r.geometry.heading);

    RoadObservation obs;
    obs.H(0, 0) = rot.c;
    obs.H(0, 1) = rot.s;
    obs.H(1, 0) = -rot.s;
    obs.H(1, 1) = rot.c;

    const auto d = rot.apply(r.geometry.midpoint.east - est.mean(0),
                             r.geometry.midpoint.north - est.mean(1));
    const double half = r.geometry.length / 2.0;
    const double d_par =
        (d[0] >= 0.0 ? 1.0 : -1.0) * std::max(std::abs(d[0]) - half, 0.0);

    const auto hx = rot.apply(est.mean(0), est.mean(1));
    obs.z(0) = hx[0] + d_par;
    obs.z(1) = hx[1] + d[1];
    obs.V_diag << sigma_par2, sigma_perp2;
    return obs;
}

KfEstimate road_update(const KfEstimate& est, const RoadObservation& obs) {
    const Eigen::Matrix<double, 8, 2> PHt = est.cov * obs.H.transpose();
    Eigen::Matrix2d S = obs.H * PHt;
    S(0, 0) += obs.V_diag(0);
    S(1, 1) += obs.V_diag(1);

    const double det = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
    const double scale = std::max({std::abs(S(0, 0)), std::abs(S(1, 1)), 1e-30});
    if (!(std::abs(det) > 1e-14 * scale * scale)) {
        throw std::runtime_error("road_update: singular innovation covariance");
    }
    Eigen::Matrix2d Sinv;
    Sinv << S(1, 1), -S(0, 1), -S(1, 0), S(0, 0);
    Sinv /= det;

    const Eigen::Matrix<double, 8, 2> K = PHt * Sinv;

    KfEstimate out;
    out.mean = est.mean + K * (obs.z - obs.H * est.mean);

    // Joseph form for numerical symmetry; must agree with P - KHP.
    const Mat8 ikh = Mat8::Identity() - K * obs.H;
    Eigen::Matrix2d V = Eigen::Matrix2d::Zero();
    V.diagonal() = obs.V_diag;
    out.cov = ikh * est.cov * ikh.transpose() + K * V * K.transpose();
    symmetrize(out.cov);
    return out;
}

}  // namespace roadkf::kalman

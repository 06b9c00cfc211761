#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "roadkf/kalman.hpp"

using namespace roadkf;
using namespace roadkf::kalman;

namespace {

// Satellites on a 20,200 km shell at given azimuth/elevation from the origin.
geo::EnuPoint sat_at(double az, double el) {
    const double r = 20.2e6;
    return {r * std::cos(el) * std::cos(az), r * std::cos(el) * std::sin(az),
            r * std::sin(el)};
}

std::vector<geo::EnuPoint> default_constellation() {
    return {
        sat_at(0.3, 1.2),  sat_at(1.5, 0.7),  sat_at(2.8, 0.9),
        sat_at(4.0, 0.5),  sat_at(5.2, 1.0),  sat_at(0.9, 0.4),
        sat_at(3.5, 1.3),  sat_at(5.9, 0.6),
    };
}

// Exact measurements for a given truth state (static satellites).
GnssEpoch exact_epoch(const Vec8& truth, const std::vector<geo::EnuPoint>& sats,
                      double t = 0.0) {
    GnssEpoch ep;
    ep.time = t;
    for (const auto& sp : sats) {
        SatObs s;
        s.sat_position = sp;
        const double de = sp.east - truth(0);
        const double dn = sp.north - truth(1);
        const double du = sp.up - truth(2);
        const double rho = std::sqrt(de * de + dn * dn + du * du);
        s.pseudorange = rho + truth(6);
        const double ux = de / rho, uy = dn / rho, uz = du / rho;
        s.pseudorange_rate = -(ux * truth(3) + uy * truth(4) + uz * truth(5)) + truth(7);
        ep.sats.push_back(s);
    }
    return ep;
}

// Random PSD with bounded condition number so inverse-based oracles stay
// accurate.
Mat8 random_psd(std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    Mat8 M;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) M(i, j) = n(rng);
    return M * M.transpose() + 0.1 * scale * scale * Mat8::Identity();
}

roadnet::RoadSegment make_road(double ae, double an, double be, double bn) {
    roadnet::RoadSegment s;
    s.geometry = geo::make_segment({ae, an, 0}, {be, bn, 0});
    return s;
}

}  // namespace

TEST_CASE("least squares fix") {
    auto sats = default_constellation();
    Vec8 truth;
    truth << 120.0, -80.0, 10.0, 0, 0, 0, 44.0, 0;

    SUBCASE("noise-free recovery") {
        auto fix = least_squares_fix(exact_epoch(truth, sats));
        CHECK(std::abs(fix.position.east - 120.0) < 1e-6);
        CHECK(std::abs(fix.position.north - -80.0) < 1e-6);
        CHECK(std::abs(fix.position.up - 10.0) < 1e-6);
        CHECK(std::abs(fix.clock_bias - 44.0) < 1e-6);
    }
    SUBCASE("common-mode range offset absorbs into clock bias") {
        auto ep = exact_epoch(truth, sats);
        for (auto& s : ep.sats) s.pseudorange += 100.0;
        auto fix = least_squares_fix(ep);
        CHECK(std::abs(fix.position.east - 120.0) < 1e-6);
        CHECK(std::abs(fix.position.north - -80.0) < 1e-6);
        CHECK(std::abs(fix.clock_bias - 144.0) < 1e-6);
    }
    SUBCASE("fewer than 4 satellites rejected") {
        auto ep = exact_epoch(truth, sats);
        ep.sats.resize(3);
        CHECK_THROWS_AS(least_squares_fix(ep), std::runtime_error);
    }
    SUBCASE("Monte-Carlo error matches analytic weighted-LS covariance") {
        std::mt19937_64 rng(123);
        std::normal_distribution<double> noise(0.0, 5.0);
        const auto ep0 = exact_epoch(truth, sats);

        // Analytic covariance (A^T W A)^-1 at the truth.
        Eigen::MatrixXd A(static_cast<int>(sats.size()), 4);
        for (std::size_t i = 0; i < sats.size(); ++i) {
            const auto& sp = sats[i];
            const double de = sp.east - truth(0), dn = sp.north - truth(1),
                         du = sp.up - truth(2);
            const double rho = std::sqrt(de * de + dn * dn + du * du);
            A(static_cast<int>(i), 0) = -de / rho / 5.0;
            A(static_cast<int>(i), 1) = -dn / rho / 5.0;
            A(static_cast<int>(i), 2) = -du / rho / 5.0;
            A(static_cast<int>(i), 3) = 1.0 / 5.0;
        }
        const Eigen::Matrix4d C = (A.transpose() * A).inverse();
        const double predicted_rms = std::sqrt(C(0, 0) + C(1, 1));

        double sumsq = 0.0;
        const int trials = 1000;
        for (int t = 0; t < trials; ++t) {
            GnssEpoch ep = ep0;
            for (auto& s : ep.sats) s.pseudorange += noise(rng);
            auto fix = least_squares_fix(ep);
            const double he = std::hypot(fix.position.east - truth(0),
                                         fix.position.north - truth(1));
            sumsq += he * he;
        }
        const double empirical_rms = std::sqrt(sumsq / trials);
        CHECK(empirical_rms == doctest::Approx(predicted_rms).epsilon(0.15));
    }
}

TEST_CASE("predict") {
    SUBCASE("zero velocity, zero process noise leaves the mean fixed") {
        KfEstimate est;
        est.mean << 3, 4, 5, 0, 0, 0, 7, 0;
        ProcessNoise q{0, 0, 0, 0};
        auto out = predict(est, 1.0, q);
        CHECK((out.mean - est.mean).norm() == doctest::Approx(0.0));
        // With zero velocity uncertainty nothing can move the covariance.
        KfEstimate certain;
        certain.cov = Mat8::Zero();
        CHECK((predict(certain, 1.0, q).cov).norm() == doctest::Approx(0.0));
    }
    SUBCASE("velocity advances position") {
        KfEstimate est;
        est.mean << 0, 0, 0, 10, 0, 0, 2, 1;
        auto out = predict(est, 1.0);
        CHECK(out.mean(0) == doctest::Approx(10.0));
        CHECK(out.mean(6) == doctest::Approx(3.0));
    }
    SUBCASE("covariance trace never decreases") {
        std::mt19937_64 rng(9);
        for (int t = 0; t < 50; ++t) {
            KfEstimate est;
            est.cov = random_psd(rng, 3.0);
            auto out = predict(est, 0.5 + t * 0.1);
            CHECK(out.cov.trace() >= est.cov.trace() - 1e-9);
            CHECK((out.cov - out.cov.transpose()).norm() < 1e-9);
        }
    }
}

TEST_CASE("gnss update") {
    auto sats = default_constellation();
    Vec8 truth;
    truth << 50.0, 30.0, 0.0, 5.0, -3.0, 0.0, 20.0, 0.5;

    SUBCASE("zero innovation leaves the mean unchanged") {
        KfEstimate est;
        est.mean = truth;
        est.cov = 10.0 * Mat8::Identity();
        auto out = gnss_update(est, exact_epoch(truth, sats));
        CHECK((out.mean - est.mean).norm() < 1e-9);
    }
    SUBCASE("infinite noise is a no-op") {
        KfEstimate est;
        est.mean = truth;
        est.cov = 10.0 * Mat8::Identity();
        GnssEpoch ep = exact_epoch(truth, sats);
        ep.sats.resize(1);
        ep.sats[0].pseudorange += 500.0;  // big innovation
        ep.sats[0].pseudorange_rate += 50.0;
        ep.sats[0].range_sigma = 1e9;
        ep.sats[0].rate_sigma = 1e9;
        auto out = gnss_update(est, ep);
        CHECK((out.mean - est.mean).norm() < 1e-9);
    }
    SUBCASE("matches information-filter oracle") {
        std::mt19937_64 rng(77);
        std::normal_distribution<double> n01(0.0, 1.0);
        for (int trial = 0; trial < 100; ++trial) {
            KfEstimate est;
            for (int i = 0; i < 8; ++i) est.mean(i) = 30.0 * n01(rng);
            est.cov = random_psd(rng, 2.0);

            GnssEpoch ep = exact_epoch(truth, sats);
            for (auto& s : ep.sats) {
                s.pseudorange += 5.0 * n01(rng);
                s.pseudorange_rate += 0.5 * n01(rng);
                s.range_sigma = 2.0 + std::abs(3.0 * n01(rng));
                s.rate_sigma = 0.2 + std::abs(0.3 * n01(rng));
            }
            auto out = gnss_update(est, ep);

            // Independent information-form solution of the same linearized
            // problem: Lambda = P^-1 + sum H^T R^-1 H, eta = P^-1 x + sum
            // H^T R^-1 z_lin.
            const Mat8 Pinv = est.cov.inverse();
            Mat8 lambda = Pinv;
            Vec8 eta = Pinv * est.mean;
            for (const auto& s : ep.sats) {
                const double de = s.sat_position.east - est.mean(0);
                const double dn = s.sat_position.north - est.mean(1);
                const double du = s.sat_position.up - est.mean(2);
                const double rho = std::sqrt(de * de + dn * dn + du * du);
                const double ux = de / rho, uy = dn / rho, uz = du / rho;

                Vec8 hr = Vec8::Zero();
                hr << -ux, -uy, -uz, 0, 0, 0, 1, 0;
                const double zr = s.pseudorange - (rho + est.mean(6)) + hr.dot(est.mean);
                lambda += hr * hr.transpose() / (s.range_sigma * s.range_sigma);
                eta += hr * zr / (s.range_sigma * s.range_sigma);

                Vec8 hv = Vec8::Zero();
                hv << 0, 0, 0, -ux, -uy, -uz, 0, 1;
                const double pred = -(ux * est.mean(3) + uy * est.mean(4) +
                                      uz * est.mean(5)) + est.mean(7);
                const double zv = s.pseudorange_rate - pred + hv.dot(est.mean);
                lambda += hv * hv.transpose() / (s.rate_sigma * s.rate_sigma);
                eta += hv * zv / (s.rate_sigma * s.rate_sigma);
            }
            const Mat8 cov_oracle = lambda.inverse();
            const Vec8 mean_oracle = cov_oracle * eta;
            CHECK((out.mean - mean_oracle).cwiseAbs().maxCoeff() < 1e-9);
            CHECK((out.cov - cov_oracle).cwiseAbs().maxCoeff() < 1e-9);
            // Posterior variance never exceeds prior on the diagonal.
            for (int i = 0; i < 8; ++i) CHECK(out.cov(i, i) <= est.cov(i, i) + 1e-9);
        }
    }
}

TEST_CASE("road observation geometry") {
    SUBCASE("user at road midpoint: zero residual") {
        auto r = make_road(0, 0, 25, 0);
        KfEstimate est;
        est.mean << 12.5, 0, 0, 0, 0, 0, 0, 0;
        auto obs = build_road_observation(est, r, 4.0, 1.0);
        const Eigen::Vector2d resid = obs.z - obs.H * est.mean;
        CHECK(resid.cwiseAbs().maxCoeff() < 1e-12);
        CHECK(obs.V_diag(0) == 4.0);
        CHECK(obs.V_diag(1) == 1.0);
    }
    SUBCASE("abreast of the interior: only perpendicular pull") {
        auto r = make_road(0, 0, 25, 0);
        KfEstimate est;
        est.mean << 10.0, 4.0, 0, 0, 0, 0, 0, 0;
        auto obs = build_road_observation(est, r, 1.0, 1.0);
        const Eigen::Vector2d resid = obs.z - obs.H * est.mean;
        CHECK(std::abs(resid(0)) < 1e-12);
        CHECK(resid(1) == doctest::Approx(-4.0));
    }
    SUBCASE("past the endpoint: soft-thresholded parallel residual") {
        auto r = make_road(0, 0, 25, 0);
        KfEstimate est;
        est.mean << 35.0, 4.0, 0, 0, 0, 0, 0, 0;
        auto obs = build_road_observation(est, r, 1.0, 1.0);
        const Eigen::Vector2d resid = obs.z - obs.H * est.mean;
        CHECK(resid(0) == doctest::Approx(-10.0));
        CHECK(resid(1) == doctest::Approx(-4.0));
    }
    SUBCASE("residual equals rotated offset to the closest segment point") {
        std::mt19937_64 rng(31);
        std::uniform_real_distribution<double> u(-60.0, 60.0);
        for (int trial = 0; trial < 2000; ++trial) {
            const geo::EnuPoint a{u(rng), u(rng), 0};
            const geo::EnuPoint b{u(rng), u(rng), 0};
            if (geo::horizontal_distance(a, b) < 1e-3) continue;
            roadnet::RoadSegment r;
            r.geometry = geo::make_segment(a, b);
            KfEstimate est;
            est.mean << u(rng), u(rng), 0, 0, 0, 0, 0, 0;
            auto obs = build_road_observation(est, r, 1.0, 1.0);
            const Eigen::Vector2d resid = obs.z - obs.H * est.mean;

            const geo::EnuPoint cp =
                geo::closest_point_on_segment(est.position(), r.geometry);
            const auto rot = geo::rotation_to_road(r.geometry.heading);
            const auto expect = rot.apply(cp.east - est.mean(0), cp.north - est.mean(1));
            CHECK(std::abs(resid(0) - expect[0]) < 1e-9);
            CHECK(std::abs(resid(1) - expect[1]) < 1e-9);
        }
    }
}

TEST_CASE("road update") {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> u(-50.0, 50.0);

    auto random_setup = [&](double sp2, double sq2) {
        KfEstimate est;
        for (int i = 0; i < 8; ++i) est.mean(i) = u(rng);
        est.cov = random_psd(rng, 2.0);
        const geo::EnuPoint a{u(rng), u(rng), 0};
        geo::EnuPoint b{u(rng), u(rng), 0};
        while (geo::horizontal_distance(a, b) < 1e-2) b = {u(rng), u(rng), 0};
        roadnet::RoadSegment r;
        r.geometry = geo::make_segment(a, b);
        return std::make_pair(est, build_road_observation(est, r, sp2, sq2));
    };

    SUBCASE("near-infinite variance is an identity map") {
        for (int t = 0; t < 50; ++t) {
            auto [est, obs] = random_setup(kInfVariance, kInfVariance);
            auto out = road_update(est, obs);
            CHECK((out.mean - est.mean).norm() <= 1e-3 * (1.0 + est.mean.norm()));
            CHECK((out.cov - est.cov).norm() <= 1e-3 * (1.0 + est.cov.norm()));
        }
    }
    SUBCASE("zero variance snaps onto the observation") {
        for (int t = 0; t < 50; ++t) {
            auto [est, obs] = random_setup(0.0, 0.0);
            auto out = road_update(est, obs);
            CHECK(((obs.H * out.mean) - obs.z).cwiseAbs().maxCoeff() < 1e-9);
        }
    }
    SUBCASE("matches dense oracle; Joseph equals P-KHP; trace shrinks") {
        for (int t = 0; t < 500; ++t) {
            auto [est, obs] = random_setup(std::abs(u(rng)), std::abs(u(rng)));
            auto out = road_update(est, obs);

            const Eigen::Matrix<double, 8, 2> PHt = est.cov * obs.H.transpose();
            Eigen::Matrix2d S = obs.H * PHt;
            S(0, 0) += obs.V_diag(0);
            S(1, 1) += obs.V_diag(1);
            Eigen::Matrix2d Sinv;
            const double det = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
            Sinv << S(1, 1), -S(0, 1), -S(1, 0), S(0, 0);
            Sinv /= det;
            const Eigen::Matrix<double, 8, 2> K = PHt * Sinv;
            const Vec8 mean_oracle = est.mean + K * (obs.z - obs.H * est.mean);
            const Mat8 cov_oracle = est.cov - K * obs.H * est.cov;

            CHECK((out.mean - mean_oracle).cwiseAbs().maxCoeff() < 1e-9);
            CHECK((out.cov - cov_oracle).cwiseAbs().maxCoeff() < 1e-8);

            const double tr_before = est.cov(0, 0) + est.cov(1, 1);
            const double tr_after = out.cov(0, 0) + out.cov(1, 1);
            CHECK(tr_after <= tr_before + 1e-9);

            // Symmetric PSD posterior.
            CHECK((out.cov - out.cov.transpose()).norm() < 1e-9);
            Eigen::SelfAdjointEigenSolver<Mat8> eig(out.cov);
            CHECK(eig.eigenvalues().minCoeff() > -1e-9);
        }
    }
    SUBCASE("posterior mean derivative wrt sigma_par2 matches finite differences") {
        for (int t = 0; t < 20; ++t) {
            auto [est, obs] = random_setup(30.0, 5.0);

            // Analytic: d mean / d sigma_par2 = -P H^T S^-1 E11 S^-1 resid.
            const Eigen::Matrix<double, 8, 2> PHt = est.cov * obs.H.transpose();
            Eigen::Matrix2d S = obs.H * PHt;
            S(0, 0) += obs.V_diag(0);
            S(1, 1) += obs.V_diag(1);
            const Eigen::Matrix2d Sinv = S.inverse();
            Eigen::Matrix2d E11 = Eigen::Matrix2d::Zero();
            E11(0, 0) = 1.0;
            const Vec8 analytic =
                -PHt * Sinv * E11 * Sinv * (obs.z - obs.H * est.mean);

            const double h = 1e-3;
            RoadObservation op = obs, om = obs;
            op.V_diag(0) += h;
            om.V_diag(0) -= h;
            const Vec8 fd =
                (road_update(est, op).mean - road_update(est, om).mean) / (2 * h);
            const double denom = std::max(analytic.norm(), 1e-12);
            CHECK((fd - analytic).norm() / denom < 1e-5);
        }
    }
    SUBCASE("singular innovation rejected") {
        KfEstimate est;
        est.cov = Mat8::Zero();  // rank-deficient prior
        roadnet::RoadSegment r = make_road(0, 0, 10, 0);
        auto obs = build_road_observation(est, r, 0.0, 0.0);
        CHECK_THROWS_AS(road_update(est, obs), std::runtime_error);
    }
}

TEST_CASE("noise-free filter chain tracks truth") {
    auto sats = default_constellation();
    Vec8 truth;
    truth << 0, 0, 0, 10, 5, 0, 30, 0.2;

    // Measurements are exact, so their stated sigmas are near-zero.
    auto noise_free = [&](double t) {
        GnssEpoch ep = exact_epoch(truth, sats, t);
        for (auto& s : ep.sats) {
            s.range_sigma = 1e-3;
            s.rate_sigma = 1e-4;
        }
        return ep;
    };

    auto fix = least_squares_fix(noise_free(0));
    KfEstimate est = init_from_fix(fix);
    ProcessNoise q{0, 0, 0, 0};

    for (int epoch = 1; epoch <= 6; ++epoch) {
        // Constant-velocity truth; clock bias integrates drift.
        truth(0) += truth(3);
        truth(1) += truth(4);
        truth(2) += truth(5);
        truth(6) += truth(7);
        est = predict(est, 1.0, q);
        est = gnss_update(est, noise_free(epoch));
        if (epoch >= 5) {
            const double he = std::hypot(est.mean(0) - truth(0), est.mean(1) - truth(1));
            CHECK(he < 1e-3);
        }
    }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <numbers>
#include <random>

#include "dynslam/models.hpp"
#include "helpers.hpp"

using namespace dynslam;
using testutil::finiteDifferenceJacobian;
using testutil::randomVec;
using testutil::relErr;

namespace {
constexpr double kPi = std::numbers::pi;
}

TEST_CASE("wrapAngle maps into (-pi, pi]") {
    CHECK(wrapAngle(0.0) == doctest::Approx(0.0));
    CHECK(wrapAngle(3.2) == doctest::Approx(3.2 - 2 * kPi));
    CHECK(wrapAngle(-3.2) == doctest::Approx(-3.2 + 2 * kPi));
    CHECK(wrapAngle(kPi) == doctest::Approx(kPi));
    CHECK(wrapAngle(-kPi) == doctest::Approx(kPi));
    CHECK(wrapAngle(7 * kPi) == doctest::Approx(kPi));
}

TEST_CASE("ego dynamics is componentwise addition with wrapped heading") {
    const Eigen::Vector3d zero = egoDynamics<double>({0, 0, 0}, {0, 0, 0});
    CHECK(zero.isZero(0));

    const Eigen::Vector3d moved = egoDynamics<double>({1, 2, 0.1}, {0.5, 0, 0.05});
    CHECK(moved.x() == doctest::Approx(1.5));
    CHECK(moved.y() == doctest::Approx(2.0));
    CHECK(moved.z() == doctest::Approx(0.15));

    const Eigen::Vector3d wrapped = egoDynamics<double>({0, 0, 3.1}, {0, 0, 0.1});
    CHECK(wrapped.z() == doctest::Approx(3.2 - 2 * kPi));
}

TEST_CASE("measurement map") {
    SUBCASE("identity pose returns the feature") {
        const Eigen::Vector2d z = measure<double>({0, 0, 0}, {3, 4});
        CHECK(z.x() == doctest::Approx(3));
        CHECK(z.y() == doctest::Approx(4));
    }
    SUBCASE("rotated pose") {
        const Eigen::Vector2d z = measure<double>({1, 2, kPi / 2}, {1, 3});
        CHECK(z.x() == doctest::Approx(1));
        CHECK(z.y() == doctest::Approx(0).epsilon(1e-12));
    }
    SUBCASE("rotation preserves range") {
        std::mt19937_64 rng(11);
        for (int i = 0; i < 50; ++i) {
            const Eigen::Vector3d x = randomVec(rng, 3, 2.0);
            const Eigen::Vector2d f = randomVec(rng, 2, 5.0);
            CHECK(measure<double>(x, f).norm() ==
                  doctest::Approx((f - x.head<2>()).norm()).epsilon(1e-12));
        }
    }
}

TEST_CASE("inverse measurement is a right inverse of the measurement map") {
    const Eigen::Vector2d f0 = inverseMeasure<double>({0, 0, 0}, {3, 4});
    CHECK(f0.isApprox(Eigen::Vector2d(3, 4), 1e-14));

    const Eigen::Vector2d f1 = inverseMeasure<double>({1, 2, kPi / 2}, {1, 0});
    CHECK(f1.x() == doctest::Approx(1));
    CHECK(f1.y() == doctest::Approx(3));

    std::mt19937_64 rng(12);
    for (int i = 0; i < 100; ++i) {
        const Eigen::Vector3d x = randomVec(rng, 3, 3.0);
        const Eigen::Vector2d z = randomVec(rng, 2, 10.0);
        const Eigen::Vector2d round = measure<double>(x, inverseMeasure<double>(x, z));
        CHECK((round - z).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("object transform rotates about the cloud centroid") {
    Eigen::VectorXd cloud(4);
    cloud << 1, 0, -1, 0;

    SUBCASE("identity leaves the cloud unchanged") {
        CHECK(objectTransform<double>({0, 0, 0}, cloud).isApprox(cloud, 1e-15));
    }
    SUBCASE("quarter turn about the origin centroid") {
        const Eigen::VectorXd turned = objectTransform<double>({0, 0, kPi / 2}, cloud);
        Eigen::VectorXd expected(4);
        expected << 0, 1, 0, -1;
        CHECK((turned - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("single feature only translates") {
        Eigen::VectorXd one(2);
        one << 2, 3;
        const Eigen::VectorXd moved = objectTransform<double>({0.5, -0.25, 1.1}, one);
        CHECK(moved[0] == doctest::Approx(2.5));
        CHECK(moved[1] == doctest::Approx(2.75));
    }
    SUBCASE("empty cloud is a model error") {
        Eigen::VectorXd empty(0);
        CHECK_THROWS_AS((void)objectTransform<double>({0, 0, 0}, empty), ModelError);
    }
    SUBCASE("rigidity: pairwise distances preserved") {
        std::mt19937_64 rng(13);
        for (int trial = 0; trial < 20; ++trial) {
            const Eigen::VectorXd f0 = randomVec(rng, 10, 3.0);
            const Eigen::Vector3d xi = randomVec(rng, 3, 1.0);
            const Eigen::VectorXd ft = objectTransform<double>(xi, f0);
            for (int a = 0; a < 5; ++a)
                for (int b = a + 1; b < 5; ++b) {
                    const double before =
                        (f0.segment<2>(2 * a) - f0.segment<2>(2 * b)).norm();
                    const double after =
                        (ft.segment<2>(2 * a) - ft.segment<2>(2 * b)).norm();
                    CHECK(std::abs(before - after) < 1e-12);
                }
        }
    }
}

TEST_CASE("inverse object transform recovers rigid motions") {
    SUBCASE("identical clouds give the identity") {
        Eigen::VectorXd cloud(6);
        cloud << 0, 0, 1, 1, 2, -1;
        const auto a = inverseObjectTransform<double>(cloud, cloud);
        CHECK_FALSE(a.degenerate);
        CHECK(a.xi.cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("hand case matches a brute-force angle search") {
        Eigen::VectorXd f0(4), ft(4);
        f0 << 1, 0, -1, 0;
        ft << 0, 1, 0, -1;
        const auto a = inverseObjectTransform<double>(f0, ft);
        CHECK(a.xi.head<2>().cwiseAbs().maxCoeff() < 1e-12);
        // independent oracle: scan the angle minimizing the alignment error
        double best = 0, bestErr = 1e300;
        for (int i = 0; i <= 200000; ++i) {
            const double th = -kPi + 2 * kPi * i / 200000.0;
            const double err =
                (objectTransform<double>({0, 0, th}, f0) - ft).squaredNorm();
            if (err < bestErr) {
                bestErr = err;
                best = th;
            }
        }
        CHECK(a.xi.z() == doctest::Approx(best).epsilon(1e-4));
        CHECK(a.xi.z() == doctest::Approx(kPi / 2).epsilon(1e-9));
    }
    SUBCASE("noiseless recovery over random clouds") {
        std::mt19937_64 rng(14);
        for (int trial = 0; trial < 50; ++trial) {
            const Eigen::VectorXd f0 = randomVec(rng, 10, 2.0);
            const Eigen::Vector3d xi(randomVec(rng, 2, 3.0).x(), randomVec(rng, 2, 3.0).y(),
                                     wrapAngle(randomVec(rng, 1, 2.0)[0]));
            const auto a =
                inverseObjectTransform<double>(f0, objectTransform<double>(xi, f0));
            CHECK_FALSE(a.degenerate);
            CHECK((a.xi.head<2>() - xi.head<2>()).cwiseAbs().maxCoeff() < 1e-9);
            CHECK(std::abs(wrapAngle(a.xi.z() - xi.z())) < 1e-9);
        }
    }
    SUBCASE("single feature is degenerate with zero rotation") {
        Eigen::VectorXd f0(2), ft(2);
        f0 << 1, 1;
        ft << 2, 0;
        const auto a = inverseObjectTransform<double>(f0, ft);
        CHECK(a.degenerate);
        CHECK(a.xi.z() == 0.0);
        CHECK(a.xi.x() == doctest::Approx(1));
        CHECK(a.xi.y() == doctest::Approx(-1));
    }
    SUBCASE("coincident clouds are degenerate") {
        Eigen::VectorXd f0(4), ft(4);
        f0 << 1, 1, 1, 1;
        ft << 0, 0, 0, 0;
        CHECK(inverseObjectTransform<double>(f0, ft).degenerate);
    }
    SUBCASE("mismatched lengths are a model error") {
        Eigen::VectorXd f0(4), ft(2);
        f0.setZero();
        ft.setZero();
        CHECK_THROWS_AS((void)inverseObjectTransform<double>(f0, ft), ModelError);
    }
}

TEST_CASE("smoothing residual is a wrap-aware second difference") {
    const Eigen::Vector3d zero = smoothingResidual<double>({0, 0, 0}, {1, 0, 0}, {2, 0, 0});
    CHECK(zero.cwiseAbs().maxCoeff() < 1e-15);

    const Eigen::Vector3d accel = smoothingResidual<double>({0, 0, 0}, {1, 0, 0}, {3, 0, 0});
    CHECK(accel.x() == doctest::Approx(1));
    CHECK(accel.y() == doctest::Approx(0));
    CHECK(accel.z() == doctest::Approx(0));

    // wrap-crossing headings: (0.3) - (2 pi - 6.0)
    const Eigen::Vector3d wrapped =
        smoothingResidual<double>({0, 0, 3.0}, {0, 0, -3.0}, {0, 0, -2.7});
    CHECK(wrapped.z() == doctest::Approx(0.3 - (2 * kPi - 6.0)).epsilon(1e-9));
}

TEST_CASE("analytic jacobians match central finite differences") {
    std::mt19937_64 rng(15);
    double worst = 0;
    auto track = [&](double err) { worst = std::max(worst, err); };

    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Vector3d x = randomVec(rng, 3, 2.0);
        const Eigen::Vector2d f = randomVec(rng, 2, 5.0);
        const Eigen::Vector2d z = randomVec(rng, 2, 5.0);

        track(relErr(measureJacobianPose<double>(x, f),
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(measure<double>(v, f));
                         },
                         x)));
        track(relErr(measureJacobianFeature<double>(x, f),
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(measure<double>(x, Eigen::Vector2d(v)));
                         },
                         f)));
        track(relErr(inverseMeasureJacobianPose<double>(x, z),
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(inverseMeasure<double>(v, z));
                         },
                         x)));
        track(relErr(inverseMeasureJacobianMeasurement<double>(x, z),
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(inverseMeasure<double>(x, Eigen::Vector2d(v)));
                         },
                         z)));

        const Eigen::VectorXd cloud = randomVec(rng, 8, 2.0);
        const Eigen::Vector3d xi = randomVec(rng, 3, 1.0);
        track(relErr(objectTransformJacobianPose<double>(xi, cloud),
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return objectTransform<double>(Eigen::Vector3d(v), cloud);
                         },
                         xi)));
        track(relErr(objectTransformJacobianCloud<double>(xi, cloud),
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) { return objectTransform<double>(xi, v); },
                         cloud)));

        const Eigen::VectorXd current =
            objectTransform<double>(xi, cloud) + 0.05 * randomVec(rng, 8, 1.0);
        const auto jac = inverseObjectTransformJacobians<double>(cloud, current);
        track(relErr(jac.wrtInitial,
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(inverseObjectTransform<double>(v, current).xi);
                         },
                         cloud)));
        track(relErr(jac.wrtCurrent,
                     finiteDifferenceJacobian(
                         [&](const Eigen::VectorXd& v) {
                             return Eigen::VectorXd(inverseObjectTransform<double>(cloud, v).xi);
                         },
                         current)));
    }
    CHECK(worst < 1e-5);

    SUBCASE("trivial constants") {
        CHECK(egoDynamicsJacobian<double>().isIdentity(0));
        CHECK(measureJacobianFeature<double>({0, 0, 0}, {1, 1}).isIdentity(1e-15));
        const auto s = smoothingJacobians<double>();
        CHECK(s[0].isIdentity(0));
        CHECK((s[1] + 2 * Eigen::Matrix3d::Identity()).isZero(0));
        CHECK(s[2].isIdentity(0));
    }
}

TEST_CASE("round-trip and consistency identities") {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Vector3d x = randomVec(rng, 3, 2.0);
        const Eigen::Vector2d z = randomVec(rng, 2, 5.0);
        const Eigen::Vector2d f = inverseMeasure<double>(x, z);

        // I = H_f L_z and O = H_x + H_f L_x
        const Eigen::Matrix2d hf = measureJacobianFeature<double>(x, f);
        const Eigen::Matrix2d lz = inverseMeasureJacobianMeasurement<double>(x, z);
        CHECK((hf * lz - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
        const Eigen::Matrix<double, 2, 3> hx = measureJacobianPose<double>(x, f);
        const Eigen::Matrix<double, 2, 3> lx = inverseMeasureJacobianPose<double>(x, z);
        CHECK((hx + hf * lx).cwiseAbs().maxCoeff() < 1e-9);
    }

    SUBCASE("alignment jacobians left-invert the transform jacobian on rigid pairs") {
        std::mt19937_64 rng2(17);
        for (int trial = 0; trial < 50; ++trial) {
            const Eigen::VectorXd f0 = randomVec(rng2, 8, 2.0);
            const Eigen::Vector3d xi = randomVec(rng2, 3, 0.8);
            const Eigen::VectorXd ft = objectTransform<double>(xi, f0);
            const auto jac = inverseObjectTransformJacobians<double>(f0, ft);
            const Eigen::MatrixXd gxi = objectTransformJacobianPose<double>(xi, f0);
            const Eigen::MatrixXd gf = objectTransformJacobianCloud<double>(xi, f0);
            CHECK((jac.wrtCurrent * gxi - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
                  1e-9);
            CHECK((jac.wrtInitial + jac.wrtCurrent * gf).cwiseAbs().maxCoeff() < 1e-9);
        }
    }

    SUBCASE("transform jacobian in the pose is injective for spread clouds") {
        std::mt19937_64 rng3(18);
        for (int trial = 0; trial < 20; ++trial) {
            const Eigen::VectorXd f0 = randomVec(rng3, 6, 2.0);
            const Eigen::Vector3d xi = randomVec(rng3, 3, 1.0);
            const Eigen::MatrixXd gxi = objectTransformJacobianPose<double>(xi, f0);
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(gxi);
            CHECK(svd.singularValues().minCoeff() > 1e-9);
        }
    }

    SUBCASE("alignment jacobians reject degenerate clouds") {
        Eigen::VectorXd one(2), oneT(2);
        one << 1, 2;
        oneT << 3, 4;
        CHECK_THROWS_AS((void)inverseObjectTransformJacobians<double>(one, oneT), ModelError);
    }
}

TEST_CASE("noise model validation") {
    NoiseModel noise;
    noise.processNoise = Eigen::Vector3d(1e-6, 1e-6, 1e-8).asDiagonal();
    noise.measurementNoise = 1e-6 * Eigen::Matrix2d::Identity();
    CHECK_NOTHROW(noise.validate());
    CHECK(noise.transformNoise.isApprox(0.1 * Eigen::Matrix2d::Identity()));

    NoiseModel bad = noise;
    bad.processNoise(0, 1) = 1.0;
    CHECK_THROWS_AS(bad.validate(), NumericError);
    bad = noise;
    bad.measurementNoise.setZero();
    CHECK_THROWS_AS(bad.validate(), NumericError);
}

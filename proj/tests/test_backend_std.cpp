#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <random>

#include "dynslam/backend_std.hpp"
#include "dynslam/snapshot.hpp"
#include "helpers.hpp"

using namespace dynslam;
using testutil::randomSpd;
using testutil::randomVec;
using testutil::relErr;
using testutil::relErrVec;

namespace {

NoiseModel levelOneNoise() {
    NoiseModel noise;
    noise.processNoise = Eigen::Vector3d(1e-6, 1e-6, 1e-8).asDiagonal();
    noise.measurementNoise = 1e-6 * Eigen::Matrix2d::Identity();
    return noise;
}

Measurement staticMeas(int id, const Eigen::Vector2d& z) {
    return {z, {Association::Kind::Static, id, -1}};
}

Measurement objectMeas(int id, int fid, const Eigen::Vector2d& z, bool isNew) {
    return {z, {isNew ? Association::Kind::NewObject : Association::Kind::Object, id, fid}};
}

void checkValidCanonical(const FilterState& state) {
    state.belief().validate();
    const auto canon = canonicalLayout(state.belief().layout);
    CHECK(canon.keys() == state.belief().layout.keys());
}

double minEig(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff();
}

}  // namespace

TEST_CASE("filter initialization") {
    const auto noise = levelOneNoise();
    const auto state = FilterState::init({1, 2, 0.1}, noise.processNoise, noise);
    CHECK(state.belief().layout.dim() == 3);
    CHECK(state.registry().landmarkCount() == 0);
    CHECK(state.registry().objectCount() == 0);

    CHECK_NOTHROW((void)FilterState::init({0, 0, 0}, Eigen::Matrix3d::Identity(), noise));

    Eigen::Matrix3d lopsided = Eigen::Matrix3d::Identity();
    lopsided(0, 1) = 0.7;
    CHECK_THROWS_AS((void)FilterState::init({0, 0, 0}, lopsided, noise), NumericError);
}

TEST_CASE("feature augmentation") {
    const auto noise = levelOneNoise();

    SUBCASE("empty measurement list leaves the state unchanged") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const auto before = state.belief();
        state.featureAugment({});
        CHECK(state.belief().mean == before.mean);
        CHECK(state.belief().cov == before.cov);
    }
    SUBCASE("hand case at the identity pose") {
        std::mt19937_64 rng(41);
        const Eigen::Matrix3d prior = randomSpd(rng, 3, 1e-4);
        auto state = FilterState::init({0, 0, 0}, prior, noise);
        const std::vector<Measurement> ms{staticMeas(0, {3, 4})};
        state.featureAugment(ms);
        checkValidCanonical(state);
        const auto& belief = state.belief();
        CHECK(belief.layout.dim() == 5);
        CHECK(belief.blockMean(VariableKey::staticFeature(0)).isApprox(Eigen::Vector2d(3, 4)));
        // at the identity pose: L_z = I and L_x = [1 0 -z2; 0 1 z1]
        Eigen::Matrix<double, 2, 3> lx;
        lx << 1, 0, -4, 0, 1, 3;
        const Eigen::Matrix2d corner = lx * prior * lx.transpose() + noise.measurementNoise;
        CHECK(relErr(belief.cov.block<2, 2>(3, 3), corner) < 1e-12);
        CHECK(relErr(belief.cov.block<2, 3>(3, 0), lx * prior) < 1e-12);
        CHECK(relErr(belief.cov.block<3, 3>(0, 0), prior) < 1e-15);
    }
    SUBCASE("augmenting then slicing away the feature restores the old belief") {
        std::mt19937_64 rng(42);
        auto state = FilterState::init({1, -2, 0.3}, randomSpd(rng, 3, 1e-3), noise);
        const auto before = state.belief();
        const std::vector<Measurement> ms{staticMeas(0, {5, 1}), staticMeas(1, {-2, 2})};
        state.featureAugment(ms);
        const std::vector<VariableKey> doomed{VariableKey::staticFeature(0),
                                              VariableKey::staticFeature(1)};
        const auto sliced = dropBlocks(state.belief(), doomed);
        CHECK(relErrVec(sliced.mean, before.mean) < 1e-12);
        CHECK(relErr(sliced.cov, before.cov) < 1e-12);

        // same via an explicit marginalization of the augmented Gaussian
        ResidualTerm prior;
        prior.keys = state.belief().layout.keys();
        const Eigen::VectorXd mean = state.belief().mean;
        prior.residual = [mean](const Eigen::VectorXd& sub) -> Eigen::VectorXd {
            return sub - mean;
        };
        const int d = state.belief().layout.dim();
        prior.jacobian = [d](const Eigen::VectorXd&) -> Eigen::MatrixXd {
            return Eigen::MatrixXd::Identity(d, d);
        };
        prior.noise = state.belief().cov;
        const std::vector<VariableKey> keep{VariableKey::egoPose()};
        const auto marginal = marginalize(std::span(&prior, 1), state.belief().layout, keep,
                                          doomed, state.belief().mean);
        CHECK(relErrVec(marginal.mean, before.mean) < 1e-8);
        CHECK(relErr(marginal.cov, before.cov) < 1e-8);
    }
    SUBCASE("measuring a tracked landmark through augmentation is an association error") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const std::vector<Measurement> ms{staticMeas(0, {3, 4})};
        state.featureAugment(ms);
        CHECK_THROWS_AS(state.featureAugment(ms), AssociationError);
    }
}

TEST_CASE("object pose augmentation") {
    const auto noise = levelOneNoise();

    auto seedObject = [&](FilterState& state, const std::vector<Eigen::Vector2d>& cloud0,
                          const std::vector<Eigen::Vector2d>& cloudT) {
        // first sighting at frame 0 (epoch cloud), re-sighting at frame 1
        std::vector<Measurement> first;
        for (size_t k = 0; k < cloud0.size(); ++k)
            first.push_back(objectMeas(7, static_cast<int>(k),
                                       measure<double>({0, 0, 0}, cloud0[k]), true));
        FrameData f0{0, Eigen::Vector3d::Zero(), first};
        state.step(f0);
        std::vector<Measurement> second;
        for (size_t k = 0; k < cloudT.size(); ++k)
            second.push_back(objectMeas(7, static_cast<int>(k),
                                        measure<double>({0, 0, 0}, cloudT[k]), false));
        state.featureAugment(second);
    };

    SUBCASE("stationary object aligns to the identity") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const std::vector<Eigen::Vector2d> cloud{{6, 1}, {8, 1}, {7, 2}};
        seedObject(state, cloud, cloud);
        state.objectPoseAugment();
        checkValidCanonical(state);
        const auto pose = state.belief().blockMean(VariableKey::objectPose(1, 0));
        CHECK(pose.cwiseAbs().maxCoeff() < 1e-6);
    }
    SUBCASE("translated object recovers the offset") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const std::vector<Eigen::Vector2d> cloud{{6, 1}, {8, 1}, {7, 2}};
        std::vector<Eigen::Vector2d> moved = cloud;
        for (auto& f : moved) f += Eigen::Vector2d(1, 0);
        seedObject(state, cloud, moved);
        state.objectPoseAugment();
        const auto pose = state.belief().blockMean(VariableKey::objectPose(1, 0));
        CHECK(std::abs(pose.x() - 1.0) < 1e-6);
        CHECK(std::abs(pose.y()) < 1e-6);
        CHECK(std::abs(pose.z()) < 1e-6);
    }
    SUBCASE("single-feature object gets a pinned rotation with explicit variance") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        seedObject(state, {{4, -2}}, {{5, -1}});
        state.objectPoseAugment();
        const auto key = VariableKey::objectPose(1, 0);
        const auto pose = state.belief().blockMean(key);
        CHECK(std::abs(pose.x() - 1.0) < 1e-5);
        CHECK(std::abs(pose.y() - 1.0) < 1e-5);
        CHECK(pose.z() == 0.0);
        const int off = state.belief().layout.offsetOf(key);
        CHECK(state.belief().cov(off + 2, off + 2) ==
              doctest::Approx(noise.degenerateRotationVariance));
        checkValidCanonical(state);
    }
    SUBCASE("objects without a fresh cloud are skipped") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const int before = state.belief().layout.blockCount();
        state.objectPoseAugment();
        CHECK(state.belief().layout.blockCount() == before);
    }
}

TEST_CASE("static feature update") {
    const auto noise = levelOneNoise();

    SUBCASE("zero innovation keeps the mean and still contracts the covariance") {
        std::mt19937_64 rng(43);
        auto state = FilterState::init({0.5, -0.2, 0.1}, randomSpd(rng, 3, 1e-3), noise);
        const Eigen::Vector3d ego = state.belief().blockMean(VariableKey::egoPose());
        const Eigen::Vector2d f(12, 5);
        std::vector<Measurement> ms{staticMeas(3, measure<double>(ego, f))};
        state.featureAugment(ms);
        const auto before = state.belief();
        // re-measure exactly at the predicted value
        const Eigen::Vector2d fhat = before.blockMean(VariableKey::staticFeature(0));
        ms = {staticMeas(3, measure<double>(ego, fhat))};
        state.staticFeatureUpdate(ms);
        CHECK(relErrVec(state.belief().mean, before.mean) < 1e-9);
        const Eigen::MatrixXd shrink = before.cov - state.belief().cov;
        CHECK(minEig(shrink) > -1e-9 * before.cov.norm());
        CHECK(shrink.trace() > 0);
        checkValidCanonical(state);
    }
    SUBCASE("scalar Kalman analogue: prior N(1,1), measurement 2 with unit variance") {
        NoiseModel unitNoise = levelOneNoise();
        unitNoise.measurementNoise = Eigen::Matrix2d::Identity();
        // ego pinned almost exactly so the feature carries all uncertainty
        auto state = FilterState::init({0, 0, 0}, 1e-18 * Eigen::Matrix3d::Identity(), unitNoise);
        std::vector<Measurement> ms{staticMeas(0, {1, 1})};
        state.featureAugment(ms);  // feature at (1, 1), variance 1 + tiny per axis
        ms = {staticMeas(0, {2, 2})};
        state.staticFeatureUpdate(ms);
        const auto f = state.belief().blockMean(VariableKey::staticFeature(0));
        CHECK(f.x() == doctest::Approx(1.5).epsilon(1e-9));
        CHECK(f.y() == doctest::Approx(1.5).epsilon(1e-9));
        const int off = state.belief().layout.offsetOf(VariableKey::staticFeature(0));
        CHECK(state.belief().cov(off, off) == doctest::Approx(0.5).epsilon(1e-9));
    }
    SUBCASE("covariance is non-increasing in the Loewner order") {
        std::mt19937_64 rng(44);
        for (int trial = 0; trial < 10; ++trial) {
            auto state = FilterState::init({0, 0, 0}, randomSpd(rng, 3, 1e-2), noise);
            std::vector<Measurement> ms;
            for (int k = 0; k < 4; ++k)
                ms.push_back(staticMeas(k, randomVec(rng, 2, 10.0)));
            state.featureAugment(ms);
            const auto before = state.belief();
            ms.clear();
            for (int k = 0; k < 4; ++k)
                ms.push_back(staticMeas(k, randomVec(rng, 2, 10.0)));
            state.staticFeatureUpdate(ms);
            const Eigen::MatrixXd shrink = before.cov - state.belief().cov;
            CHECK(minEig(shrink) > -1e-9 * before.cov.norm());
        }
    }
    SUBCASE("unknown landmark index is an association error") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        std::vector<Measurement> ms{staticMeas(9, {1, 1})};
        CHECK_THROWS_AS(state.staticFeatureUpdate(ms), AssociationError);
    }
}

TEST_CASE("smoothing update") {
    auto noise = levelOneNoise();
    FilterOptions options;
    options.enableSmoothing = true;

    auto runObjectFrames = [&](FilterState& state, const std::vector<Eigen::Vector2d>& centers) {
        // a two-feature object translating through the given centers
        const std::vector<Eigen::Vector2d> body{{1, 0}, {-1, 0}};
        for (size_t t = 0; t < centers.size(); ++t) {
            std::vector<Measurement> ms;
            for (size_t k = 0; k < body.size(); ++k)
                ms.push_back(objectMeas(5, static_cast<int>(k),
                                        measure<double>({0, 0, 0},
                                                        Eigen::Vector2d(centers[t] + body[k])),
                                        t == 0));
            FrameData frame{static_cast<int>(t), std::nullopt, ms};
            if (t + 1 < centers.size()) frame.odom = Eigen::Vector3d::Zero();
            state.step(frame);
        }
    };

    SUBCASE("no objects: state unchanged") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise, options);
        const auto before = state.belief();
        state.smoothingUpdate();
        CHECK(state.belief().mean == before.mean);
        CHECK(state.belief().cov == before.cov);
    }
    SUBCASE("constant-velocity poses have zero residual: smoothing is the identity on the mean") {
        auto smoothed = FilterState::init({0, 0, 0}, noise.processNoise, noise, options);
        auto plain = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        runObjectFrames(smoothed, {{0, 0}, {1, 0}, {2, 0}, {3, 0}});
        runObjectFrames(plain, {{0, 0}, {1, 0}, {2, 0}, {3, 0}});
        // poses at frames 1..3 are (1,0,0), (2,0,0), (3,0,0): exact second difference
        CHECK(relErrVec(smoothed.belief().mean, plain.belief().mean) < 1e-9);
        checkValidCanonical(smoothed);
    }
    SUBCASE("accelerating object is pulled toward smooth motion") {
        auto smoothed = FilterState::init({0, 0, 0}, noise.processNoise, noise, options);
        auto plain = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        runObjectFrames(smoothed, {{0, 0}, {1, 0}, {2, 0}, {5, 0}});
        runObjectFrames(plain, {{0, 0}, {1, 0}, {2, 0}, {5, 0}});
        const auto pulled = smoothed.belief().blockMean(VariableKey::objectPose(3, 0));
        const auto raw = plain.belief().blockMean(VariableKey::objectPose(3, 0));
        CHECK(raw.x() == doctest::Approx(5.0).epsilon(1e-6));
        CHECK(pulled.x() < raw.x());
        checkValidCanonical(smoothed);
    }
}

TEST_CASE("state propagation") {
    SUBCASE("free function: zero odometry and zero noise change nothing") {
        std::mt19937_64 rng(45);
        GaussianBelief belief;
        belief.layout.append(VariableKey::egoPose(), 3);
        belief.layout.append(VariableKey::staticFeature(0), 2);
        belief.mean = randomVec(rng, 5);
        belief.cov = randomSpd(rng, 5);
        const auto out = propagateState(belief, Eigen::Vector3d::Zero(),
                                        Eigen::Matrix3d::Zero());
        CHECK(relErrVec(out.mean, belief.mean) < 1e-15);
        CHECK(relErr(out.cov, belief.cov) < 1e-15);
    }
    SUBCASE("level-one noise inflates exactly the ego block") {
        std::mt19937_64 rng(46);
        const auto noise = levelOneNoise();
        auto state = FilterState::init({0, 0, 0}, randomSpd(rng, 3, 1e-4), noise);
        std::vector<Measurement> ms{staticMeas(0, {4, 4})};
        state.featureAugment(ms);
        const auto before = state.belief();
        state.statePropagate({1, 0, 0.01});
        const auto& after = state.belief();
        CHECK(after.blockMean(VariableKey::egoPose())
                  .isApprox(Eigen::Vector3d(1, 0, 0.01), 1e-12));
        Eigen::Matrix3d gained =
            after.cov.block<3, 3>(0, 0) - before.cov.block<3, 3>(0, 0);
        CHECK(relErr(gained, noise.processNoise) < 1e-9);
        CHECK(relErr(after.cov.block<2, 2>(3, 3), before.cov.block<2, 2>(3, 3)) < 1e-15);
        CHECK(relErr(after.cov.block<3, 2>(0, 3), before.cov.block<3, 2>(0, 3)) < 1e-15);
    }
}

TEST_CASE("full step") {
    const auto noise = levelOneNoise();

    SUBCASE("a frame with no measurements and no odometry is the identity") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const auto before = state.belief();
        FrameData frame{0, std::nullopt, {}};
        state.step(frame);
        CHECK(state.belief().mean == before.mean);
        CHECK(state.belief().cov == before.cov);
    }
    SUBCASE("a landmark re-seen across steps strictly gains precision") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        const Eigen::Vector2d lm(10, 3);
        FrameData f0{0, Eigen::Vector3d::Zero(), {staticMeas(0, measure<double>({0, 0, 0}, lm))}};
        state.step(f0);
        const int off = state.belief().layout.offsetOf(VariableKey::staticFeature(0));
        const double varBefore = state.belief().cov(off, off);
        FrameData f1{1, std::nullopt, {staticMeas(0, measure<double>({0, 0, 0}, lm))}};
        state.step(f1);
        const double varAfter = state.belief().cov(off, off);
        CHECK(varAfter < varBefore);
    }
    SUBCASE("objects, poses and history trimming over several frames") {
        FilterOptions options;
        options.dropObjectHistory = true;
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise, options);
        const std::vector<Eigen::Vector2d> body{{1, 0}, {-1, 0}, {0, 1}};
        for (int t = 0; t < 6; ++t) {
            std::vector<Measurement> ms;
            const Eigen::Vector2d center(5.0 + 2.0 * t, -2.0);
            for (size_t k = 0; k < body.size(); ++k)
                ms.push_back(objectMeas(9, static_cast<int>(k),
                                        measure<double>({0, 0, 0},
                                                        Eigen::Vector2d(center + body[k])),
                                        t == 0));
            ms.push_back(staticMeas(0, measure<double>({0, 0, 0}, {20, 8})));
            FrameData frame{t, Eigen::Vector3d::Zero(), ms};
            state.step(frame);
            checkValidCanonical(state);
        }
        // three most recent poses retained: frames 3, 4, 5
        const auto& layout = state.belief().layout;
        CHECK_FALSE(layout.contains(VariableKey::objectPose(1, 0)));
        CHECK_FALSE(layout.contains(VariableKey::objectPose(2, 0)));
        CHECK(layout.contains(VariableKey::objectPose(3, 0)));
        CHECK(layout.contains(VariableKey::objectPose(4, 0)));
        CHECK(layout.contains(VariableKey::objectPose(5, 0)));
        // epoch cloud plus the current cloud only
        CHECK(layout.contains(VariableKey::objectFeature(0, 0, 0)));
        CHECK(layout.contains(VariableKey::objectFeature(5, 0, 0)));
        CHECK_FALSE(layout.contains(VariableKey::objectFeature(4, 0, 0)));
        // dimension: ego + landmark + 2 clouds of 3 + 3 poses
        CHECK(layout.dim() == 3 + 2 + 2 * (2 * 3) + 3 * 3);
        // the pose tracks the truth: pure translation 2 t in x
        const auto pose = state.belief().blockMean(VariableKey::objectPose(5, 0));
        CHECK(std::abs(pose.x() - 10.0) < 1e-6);
        CHECK(std::abs(pose.z()) < 1e-6);
    }
    SUBCASE("pose history kept when dropping is disabled") {
        FilterOptions options;
        options.dropObjectHistory = false;
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise, options);
        for (int t = 0; t < 5; ++t) {
            std::vector<Measurement> ms{
                objectMeas(9, 0, {5.0 + 1.0 * t, 0.0}, t == 0),
                objectMeas(9, 1, {6.0 + 1.0 * t, 0.0}, t == 0)};
            FrameData frame{t, Eigen::Vector3d::Zero(), ms};
            state.step(frame);
        }
        for (int t = 1; t <= 4; ++t)
            CHECK(state.belief().layout.contains(VariableKey::objectPose(t, 0)));
    }
    SUBCASE("out-of-order frames are rejected") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        FrameData frame{3, std::nullopt, {}};
        CHECK_THROWS_AS(state.step(frame), StateError);
    }
    SUBCASE("snapshot serialization round-trips the belief") {
        auto state = FilterState::init({0, 0, 0}, noise.processNoise, noise);
        FrameData frame{0, Eigen::Vector3d(0.5, 0, 0),
                        {staticMeas(0, {3, 1}), objectMeas(7, 0, {6, 0}, true)}};
        state.step(frame);
        const auto text = beliefToString(state.belief());
        const auto back = beliefFromString(text);
        CHECK(back.mean == state.belief().mean);
        CHECK(back.cov == state.belief().cov);
        CHECK(back.layout.keys() == state.belief().layout.keys());
    }
}

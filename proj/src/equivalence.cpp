#include "dynslam/equivalence.hpp"

#include <algorithm>

#include "dynslam/backend_opt.hpp"
#include "dynslam/sim.hpp"

namespace dynslam {

namespace {

double gauss(std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    return d(rng);
}

Eigen::VectorXd gaussVec(std::mt19937_64& rng, int n, double scale = 1.0) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = scale * gauss(rng);
    return v;
}

// Random SPD with moderate conditioning, then per-entry scaling D C D to give
// blocks different magnitudes while staying SPD.
Eigen::MatrixXd scaledSpd(std::mt19937_64& rng, const Eigen::VectorXd& entryScale) {
    const int d = static_cast<int>(entryScale.size());
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = gauss(rng);
    Eigen::MatrixXd c = a * a.transpose() / d + 0.5 * Eigen::MatrixXd::Identity(d, d);
    return entryScale.asDiagonal() * c * entryScale.asDiagonal();
}

struct Deviation {
    double mean = 0.0;
    double cov = 0.0;
};

Deviation compare(const GaussianBelief& a, const GaussianBelief& b) {
    GaussianBelief aligned = b;
    if (a.layout.keys() != b.layout.keys()) aligned = reorder(b, a.layout);
    return {beliefMeanDeviation(a, aligned), beliefCovDeviation(a, aligned)};
}

void track(SubBlockReport& report, const Deviation& dev) {
    report.maxMeanDev = std::max(report.maxMeanDev, dev.mean);
    report.maxCovDev = std::max(report.maxCovDev, dev.cov);
    ++report.trials;
}

}  // namespace

GaussianBelief randomFilterBelief(std::mt19937_64& rng, const RandomStateSpec& spec) {
    GaussianBelief belief;
    belief.layout.append(VariableKey::egoPose(), kPoseDim);
    for (int k = 0; k < spec.staticCount; ++k)
        belief.layout.append(VariableKey::staticFeature(k), kFeatureDim);
    const int objects = static_cast<int>(spec.objectFeatures.size());
    for (int alpha = 0; alpha < objects; ++alpha)
        for (int k = 0; k < spec.objectFeatures[alpha]; ++k)
            belief.layout.append(VariableKey::objectFeature(0, alpha, k), kFeatureDim);
    for (int alpha = 0; alpha < objects; ++alpha)
        for (int k = 0; k < spec.objectFeatures[alpha]; ++k)
            belief.layout.append(VariableKey::objectFeature(spec.time, alpha, k), kFeatureDim);
    for (int p = spec.poseCount; p > 0; --p)
        for (int alpha = 0; alpha < objects; ++alpha)
            belief.layout.append(VariableKey::objectPose(spec.time - p + 1, alpha), kPoseDim);

    const int d = belief.layout.dim();
    belief.mean.resize(d);
    belief.mean.segment<3>(0) = gaussVec(rng, 3, 0.5);
    for (int k = 0; k < spec.staticCount; ++k)
        belief.mean.segment<2>(belief.layout.offsetOf(VariableKey::staticFeature(k))) =
            gaussVec(rng, 2, 8.0);
    for (int alpha = 0; alpha < objects; ++alpha) {
        const int n = spec.objectFeatures[alpha];
        Eigen::VectorXd cloud = gaussVec(rng, 2 * n, 2.0);
        for (int k = 0; k < n; ++k)
            belief.mean.segment<2>(
                belief.layout.offsetOf(VariableKey::objectFeature(0, alpha, k))) =
                cloud.segment<2>(2 * k);
        Eigen::VectorXd current;
        if (spec.rigidClouds) {
            const Eigen::Vector3d xi(gauss(rng), gauss(rng), 0.5 * gauss(rng));
            current = objectTransform<double>(xi, cloud);
        } else {
            current = cloud + gaussVec(rng, 2 * n, 0.3);
        }
        for (int k = 0; k < n; ++k)
            belief.mean.segment<2>(
                belief.layout.offsetOf(VariableKey::objectFeature(spec.time, alpha, k))) =
                current.segment<2>(2 * k);
    }
    for (int p = spec.poseCount; p > 0; --p)
        for (int alpha = 0; alpha < objects; ++alpha)
            belief.mean.segment<3>(belief.layout.offsetOf(
                VariableKey::objectPose(spec.time - p + 1, alpha))) = gaussVec(rng, 3, 0.5);

    Eigen::VectorXd entryScale = Eigen::VectorXd::Ones(d);
    for (const auto& key : belief.layout.keys()) {
        if (key.kind == VarKind::ObjectFeature) {
            const int off = belief.layout.offsetOf(key);
            entryScale.segment<2>(off).setConstant(std::sqrt(spec.cloudScale));
        }
    }
    belief.cov = scaledSpd(rng, entryScale);
    return belief;
}

std::vector<SubBlockReport> runEquivalenceSuite(const EquivalenceOptions& options) {
    std::mt19937_64 rng(splitMix64(options.seed));
    std::vector<SubBlockReport> reports;

    // --- feature augmentation vs one Gauss-Newton step on the extended cost ---
    {
        SubBlockReport report{"feature-augmentation"};
        const Eigen::Matrix2d noise = 2e-3 * Eigen::Matrix2d::Identity();
        for (int trial = 0; trial < options.trials; ++trial) {
            RandomStateSpec spec;
            spec.staticCount = 2;
            spec.objectFeatures = {2};
            const GaussianBelief belief = randomFilterBelief(rng, spec);
            const Eigen::Vector3d x = belief.blockMean(VariableKey::egoPose());

            std::vector<NewFeatureObservation> observations;
            const int fresh = 1 + static_cast<int>(rng() % 3);
            for (int i = 0; i < fresh; ++i)
                observations.push_back(
                    {VariableKey::staticFeature(spec.staticCount + i), gaussVec(rng, 2, 6.0)});
            const GaussianBelief block = augmentFeatures(belief, observations, noise);

            VariableLayout layout = belief.layout;
            Eigen::VectorXd lin(belief.mean.size() + 2 * fresh);
            lin.head(belief.mean.size()) = belief.mean;
            std::vector<ResidualTerm> terms{makePriorTerm(belief)};
            for (int i = 0; i < fresh; ++i) {
                layout.append(observations[i].key, kFeatureDim);
                lin.segment<2>(belief.mean.size() + 2 * i) =
                    inverseMeasure<double>(x, observations[i].z);
                terms.push_back(makeBodyMeasurementTerm(observations[i].key, observations[i].z,
                                                        noise));
            }
            track(report, compare(block, gaussNewtonStep(terms, layout, lin)));
        }
        reports.push_back(report);
    }

    // --- object pose augmentation vs one Gauss-Newton step ---
    {
        SubBlockReport report{"pose-augmentation"};
        if (!options.transformNoise.isDiagonal(0.0)) {
            report.skipped = true;
            report.note = "transform covariance is not diagonal; equivalence not claimed";
        } else {
            for (int trial = 0; trial < options.trials; ++trial) {
                RandomStateSpec spec;
                spec.staticCount = 1;
                spec.objectFeatures = {2 + static_cast<int>(rng() % 2)};
                // Rigidly consistent cloud means with uncertainty much smaller
                // than the transform slack; outside that regime the block form
                // and the Gauss-Newton step differ beyond tolerance.
                spec.rigidClouds = true;
                spec.cloudScale = 1e-10;
                const GaussianBelief belief = randomFilterBelief(rng, spec);

                std::vector<PoseAugmentationSpec> specs(1);
                specs[0].poseKey = VariableKey::objectPose(spec.time, 0);
                const int n = spec.objectFeatures[0];
                for (int k = 0; k < n; ++k) {
                    specs[0].initialCloud.push_back(VariableKey::objectFeature(0, 0, k));
                    specs[0].currentCloud.push_back(VariableKey::objectFeature(spec.time, 0, k));
                }
                const GaussianBelief block =
                    augmentObjectPoses(belief, specs, options.transformNoise, 0.1);

                Eigen::VectorXd f0(2 * n), ft(2 * n);
                for (int k = 0; k < n; ++k) {
                    f0.segment<2>(2 * k) = belief.blockMean(specs[0].initialCloud[k]);
                    ft.segment<2>(2 * k) = belief.blockMean(specs[0].currentCloud[k]);
                }
                const auto alignment = inverseObjectTransform<double>(f0, ft);
                VariableLayout layout = belief.layout;
                layout.append(specs[0].poseKey, kPoseDim);
                Eigen::VectorXd lin(belief.mean.size() + 3);
                lin.head(belief.mean.size()) = belief.mean;
                lin.tail<3>() = alignment.xi;
                std::vector<ResidualTerm> terms{makePriorTerm(belief)};
                for (int k = 0; k < n; ++k)
                    terms.push_back(makeTransformTerm(specs[0].currentCloud[k],
                                                      specs[0].initialCloud, specs[0].poseKey, k,
                                                      options.transformNoise));
                track(report, compare(block, gaussNewtonStep(terms, layout, lin)));
            }
        }
        reports.push_back(report);
    }

    // --- static feature update vs one Gauss-Newton step ---
    {
        SubBlockReport report{"static-update"};
        for (int trial = 0; trial < options.trials; ++trial) {
            RandomStateSpec spec;
            spec.staticCount = 3;
            spec.objectFeatures = {2};
            const GaussianBelief belief = randomFilterBelief(rng, spec);
            const Eigen::Vector3d x = belief.blockMean(VariableKey::egoPose());
            const Eigen::Matrix2d noise = 5e-3 * Eigen::Matrix2d::Identity();

            std::vector<FeatureObservation> observations;
            std::vector<ResidualTerm> terms{makePriorTerm(belief)};
            for (int k = 0; k < spec.staticCount; ++k) {
                const VariableKey key = VariableKey::staticFeature(k);
                const Eigen::Vector2d z =
                    measure<double>(x, belief.blockMean(key)) + gaussVec(rng, 2, 0.05);
                observations.push_back({key, z});
                terms.push_back(makeBodyMeasurementTerm(key, z, noise));
            }
            const GaussianBelief block = updateStaticFeatures(belief, observations, noise);
            track(report,
                  compare(block, gaussNewtonStep(terms, belief.layout, belief.mean)));
        }
        reports.push_back(report);
    }

    // --- smoothing update vs one Gauss-Newton step ---
    {
        SubBlockReport report{"smoothing-update"};
        for (int trial = 0; trial < options.trials; ++trial) {
            RandomStateSpec spec;
            spec.staticCount = 1;
            spec.objectFeatures = {2};
            spec.poseCount = 3;
            const GaussianBelief belief = randomFilterBelief(rng, spec);

            std::vector<SmoothingTriple> triples{{VariableKey::objectPose(spec.time - 2, 0),
                                                  VariableKey::objectPose(spec.time - 1, 0),
                                                  VariableKey::objectPose(spec.time, 0)}};
            const GaussianBelief block =
                updateSmoothing(belief, triples, options.smoothingNoise);
            std::vector<ResidualTerm> terms{makePriorTerm(belief),
                                            makeSmoothingTerm(triples[0], options.smoothingNoise)};
            track(report,
                  compare(block, gaussNewtonStep(terms, belief.layout, belief.mean)));
        }
        reports.push_back(report);
    }

    // --- state propagation vs marginalizing the previous ego pose ---
    {
        SubBlockReport report{"state-propagation"};
        for (int trial = 0; trial < options.trials; ++trial) {
            RandomStateSpec spec;
            spec.staticCount = 2;
            spec.objectFeatures = {2};
            spec.poseCount = 1;
            const GaussianBelief belief = randomFilterBelief(rng, spec);
            const Eigen::Vector3d odom = gaussVec(rng, 3, 1.0);
            const Eigen::Matrix3d noise =
                Eigen::Vector3d(2e-3, 2e-3, 5e-4).asDiagonal();

            const GaussianBelief block = propagateState(belief, odom, noise);

            const VariableKey nextKey = VariableKey::egoPose(1);
            VariableLayout layout = belief.layout;
            layout.append(nextKey, kPoseDim);
            Eigen::VectorXd lin(belief.mean.size() + 3);
            lin.head(belief.mean.size()) = belief.mean;
            lin.tail<3>() =
                egoDynamics<double>(belief.blockMean(VariableKey::egoPose()), odom);
            std::vector<ResidualTerm> terms{makePriorTerm(belief),
                                            makeDynamicsTerm(nextKey, odom, noise)};
            std::vector<VariableKey> keep{nextKey};
            for (const auto& key : belief.layout.keys())
                if (key != VariableKey::egoPose()) keep.push_back(key);
            const std::vector<VariableKey> marg{VariableKey::egoPose()};
            GaussianBelief gn = marginalize(terms, layout, keep, marg, lin);
            gn = renameKey(gn, nextKey, VariableKey::egoPose());
            track(report, compare(block, gn));
        }
        reports.push_back(report);
    }

    return reports;
}

}  // namespace dynslam

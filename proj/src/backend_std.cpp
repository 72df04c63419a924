#include "dynslam/backend_std.hpp"

#include <Eigen/Cholesky>
#include <algorithm>

namespace dynslam {

namespace {

// Gathers rows of the covariance at the given flat indices.
Eigen::MatrixXd gatherRows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
    Eigen::MatrixXd out(idx.size(), m.cols());
    for (size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
    return out;
}

Eigen::MatrixXd gatherCols(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
    Eigen::MatrixXd out(m.rows(), idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out.col(i) = m.col(idx[i]);
    return out;
}

std::vector<int> flatIndices(const VariableLayout& layout, std::span<const VariableKey> keys) {
    std::vector<int> idx;
    for (const auto& key : keys) {
        const int off = layout.offsetOf(key), d = layout.dimOf(key);
        for (int i = 0; i < d; ++i) idx.push_back(off + i);
    }
    return idx;
}

// Innovation-form update shared by the static-feature and smoothing blocks:
//   mu  <- mu + U S^-1 v,   cov <- cov - U S^-1 U^T,   U = cov J^T
void kalmanUpdate(GaussianBelief& belief, const Eigen::MatrixXd& u, Eigen::MatrixXd s,
                  const Eigen::VectorXd& innovation) {
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) {
        const double jitter = 1e-12 * s.trace() / s.rows();
        llt.compute(s + jitter * Eigen::MatrixXd::Identity(s.rows(), s.cols()));
        if (llt.info() != Eigen::Success)
            throw NumericError("innovation covariance is not positive definite");
    }
    belief.mean += u * llt.solve(innovation);
    const Eigen::MatrixXd y = llt.matrixL().solve(u.transpose());
    belief.cov.selfadjointView<Eigen::Lower>().rankUpdate(y.transpose(), -1.0);
    belief.cov.triangularView<Eigen::StrictlyUpper>() = belief.cov.transpose();
}

void staticUpdateInPlace(GaussianBelief& belief,
                         std::span<const FeatureObservation> observations,
                         const Eigen::Matrix2d& measurementNoise) {
    if (observations.empty()) return;
    const int m = static_cast<int>(observations.size());
    const int egoOff = belief.layout.offsetOf(VariableKey::egoPose());
    const Eigen::Vector3d x = belief.mean.segment<3>(egoOff);

    std::vector<Eigen::Matrix<double, 2, 3>> hx(m);
    std::vector<Eigen::Matrix2d> hf(m);
    std::vector<int> fOff(m);
    Eigen::VectorXd innovation(2 * m);
    for (int i = 0; i < m; ++i) {
        const auto& obs = observations[i];
        fOff[i] = belief.layout.offsetOf(obs.key);
        if (belief.layout.dimOf(obs.key) != kFeatureDim)
            throw LayoutError("updateStaticFeatures: " + formatKey(obs.key) + " is not a feature");
        const Eigen::Vector2d f = belief.mean.segment<2>(fOff[i]);
        innovation.segment<2>(2 * i) = obs.z - measure<double>(x, f);
        hx[i] = measureJacobianPose<double>(x, f);
        hf[i] = measureJacobianFeature<double>(x, f);
    }

    // U = cov H^T and S = H U + R~, assembled from the nonzero blocks of H.
    const int n = belief.layout.dim();
    Eigen::MatrixXd u(n, 2 * m);
    for (int i = 0; i < m; ++i)
        u.middleCols<2>(2 * i) = belief.cov.middleCols<3>(egoOff) * hx[i].transpose() +
                                 belief.cov.middleCols<2>(fOff[i]) * hf[i].transpose();
    Eigen::MatrixXd s(2 * m, 2 * m);
    for (int i = 0; i < m; ++i) {
        s.middleRows<2>(2 * i) = hx[i] * u.middleRows<3>(egoOff) + hf[i] * u.middleRows<2>(fOff[i]);
        s.block<2, 2>(2 * i, 2 * i) += measurementNoise;
    }
    kalmanUpdate(belief, u, 0.5 * (s + s.transpose()), innovation);
}

void smoothingUpdateInPlace(GaussianBelief& belief, std::span<const SmoothingTriple> triples,
                            const Eigen::Matrix3d& smoothingNoise) {
    if (triples.empty()) return;
    const int m = static_cast<int>(triples.size());
    const int n = belief.layout.dim();

    Eigen::VectorXd residual(3 * m);
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(n, 3 * m);
    std::vector<std::array<int, 3>> offs(m);
    for (int i = 0; i < m; ++i) {
        const auto& tr = triples[i];
        offs[i] = {belief.layout.offsetOf(tr.first), belief.layout.offsetOf(tr.second),
                   belief.layout.offsetOf(tr.third)};
        residual.segment<3>(3 * i) = smoothingResidual<double>(
            belief.mean.segment<3>(offs[i][0]), belief.mean.segment<3>(offs[i][1]),
            belief.mean.segment<3>(offs[i][2]));
        // jacobian blocks are (I, -2 I, I)
        u.middleCols<3>(3 * i) = belief.cov.middleCols<3>(offs[i][0]) -
                                 2.0 * belief.cov.middleCols<3>(offs[i][1]) +
                                 belief.cov.middleCols<3>(offs[i][2]);
    }
    Eigen::MatrixXd s(3 * m, 3 * m);
    for (int i = 0; i < m; ++i) {
        s.middleRows<3>(3 * i) = u.middleRows<3>(offs[i][0]) - 2.0 * u.middleRows<3>(offs[i][1]) +
                                 u.middleRows<3>(offs[i][2]);
        s.block<3, 3>(3 * i, 3 * i) += smoothingNoise;
    }
    kalmanUpdate(belief, u, 0.5 * (s + s.transpose()), -residual);
}

void propagateInPlace(GaussianBelief& belief, const Eigen::Vector3d& odom,
                      const Eigen::Matrix3d& processNoise) {
    const int egoOff = belief.layout.offsetOf(VariableKey::egoPose());
    belief.mean.segment<3>(egoOff) =
        egoDynamics<double>(belief.mean.segment<3>(egoOff), odom);
    // d g / d x = I, so only the ego block inflates.
    belief.cov.block<3, 3>(egoOff, egoOff) += processNoise;
}

}  // namespace

GaussianBelief augmentFeatures(const GaussianBelief& belief,
                               std::span<const NewFeatureObservation> observations,
                               const Eigen::Matrix2d& measurementNoise) {
    if (observations.empty()) return belief;
    const int n = belief.layout.dim();
    const int m = static_cast<int>(observations.size());
    const int egoOff = belief.layout.offsetOf(VariableKey::egoPose());
    const Eigen::Vector3d x = belief.mean.segment<3>(egoOff);

    Eigen::MatrixXd lx(2 * m, 3);
    std::vector<Eigen::Matrix2d> lz(m);
    GaussianBelief out;
    out.layout = belief.layout;
    out.mean.resize(n + 2 * m);
    out.mean.head(n) = belief.mean;
    for (int i = 0; i < m; ++i) {
        const auto& obs = observations[i];
        if (belief.layout.contains(obs.key))
            throw LayoutError("augmentFeatures: key already present: " + formatKey(obs.key));
        out.layout.append(obs.key, kFeatureDim);
        out.mean.segment<2>(n + 2 * i) = inverseMeasure<double>(x, obs.z);
        lx.middleRows<2>(2 * i) = inverseMeasureJacobianPose<double>(x, obs.z);
        lz[i] = inverseMeasureJacobianMeasurement<double>(x, obs.z);
    }

    const Eigen::MatrixXd sxAll = belief.cov.middleRows<3>(egoOff);  // 3 x n
    const Eigen::Matrix3d sxx = belief.cov.block<3, 3>(egoOff, egoOff);
    out.cov.resize(n + 2 * m, n + 2 * m);
    out.cov.topLeftCorner(n, n) = belief.cov;
    const Eigen::MatrixXd cross = lx * sxAll;  // 2m x n
    out.cov.bottomLeftCorner(2 * m, n) = cross;
    out.cov.topRightCorner(n, 2 * m) = cross.transpose();
    Eigen::MatrixXd corner = lx * sxx * lx.transpose();
    for (int i = 0; i < m; ++i)
        corner.block<2, 2>(2 * i, 2 * i) += lz[i] * measurementNoise * lz[i].transpose();
    out.cov.bottomRightCorner(2 * m, 2 * m) = corner;
    return out;
}

GaussianBelief augmentObjectPoses(const GaussianBelief& belief,
                                  std::span<const PoseAugmentationSpec> specs,
                                  const Eigen::Matrix2d& transformNoise,
                                  double degenerateRotationVariance) {
    if (specs.empty()) return belief;
    const int n = belief.layout.dim();
    const int p = static_cast<int>(specs.size());

    std::vector<int> idxF0, idxFt;
    Eigen::VectorXd xiStack(3 * p);
    std::vector<Eigen::MatrixXd> g1(p), g2(p);
    std::vector<bool> degenerate(p, false);
    std::vector<int> cloudDims(p);
    for (int s = 0; s < p; ++s) {
        const auto& spec = specs[s];
        if (spec.initialCloud.size() != spec.currentCloud.size() || spec.initialCloud.empty())
            throw StateError("pose augmentation needs index-aligned, non-empty clouds");
        const auto f0Idx = flatIndices(belief.layout, spec.initialCloud);
        const auto ftIdx = flatIndices(belief.layout, spec.currentCloud);
        idxF0.insert(idxF0.end(), f0Idx.begin(), f0Idx.end());
        idxFt.insert(idxFt.end(), ftIdx.begin(), ftIdx.end());
        Eigen::VectorXd f0(f0Idx.size()), ft(ftIdx.size());
        for (size_t i = 0; i < f0Idx.size(); ++i) f0[i] = belief.mean[f0Idx[i]];
        for (size_t i = 0; i < ftIdx.size(); ++i) ft[i] = belief.mean[ftIdx[i]];
        cloudDims[s] = static_cast<int>(f0.size());
        const int features = cloudDims[s] / kFeatureDim;

        const auto alignment = inverseObjectTransform<double>(f0, ft);
        xiStack.segment<3>(3 * s) = alignment.xi;
        if (alignment.degenerate) {
            if (features > 1)
                throw ModelError("pose augmentation: coincident cloud, rotation undefined");
            degenerate[s] = true;
            // Translation of a single feature is observable; rotation is pinned.
            Eigen::MatrixXd t = Eigen::MatrixXd::Zero(3, 2);
            t(0, 0) = t(1, 1) = 1.0;
            g2[s] = t;
            g1[s] = -t;
        } else {
            // Jacobians at the rigidly consistent pair (f0, g_o(xi, f0)); there
            // they coincide with the pseudoinverse of the transform jacobian.
            const Eigen::VectorXd consistent = objectTransform<double>(alignment.xi, f0);
            const auto jac = inverseObjectTransformJacobians<double>(f0, consistent);
            g1[s] = jac.wrtInitial;
            g2[s] = jac.wrtCurrent;
        }
    }

    const int cloudTotal = static_cast<int>(idxF0.size());
    Eigen::MatrixXd gamma1 = Eigen::MatrixXd::Zero(3 * p, cloudTotal);
    Eigen::MatrixXd gamma2 = Eigen::MatrixXd::Zero(3 * p, cloudTotal);
    for (int s = 0, at = 0; s < p; at += cloudDims[s], ++s) {
        gamma1.block(3 * s, at, 3, cloudDims[s]) = g1[s];
        gamma2.block(3 * s, at, 3, cloudDims[s]) = g2[s];
    }

    const Eigen::MatrixXd sF0 = gatherRows(belief.cov, idxF0);  // cloudTotal x n
    const Eigen::MatrixXd sFt = gatherRows(belief.cov, idxFt);
    const Eigen::MatrixXd rows = gamma1 * sF0 + gamma2 * sFt;  // 3p x n

    const Eigen::MatrixXd sF0F0 = gatherCols(sF0, idxF0);
    const Eigen::MatrixXd sF0Ft = gatherCols(sF0, idxFt);
    const Eigen::MatrixXd sFtF0 = gatherCols(sFt, idxF0);
    Eigen::MatrixXd sFtFt = gatherCols(sFt, idxFt);
    for (int i = 0; i < cloudTotal / 2; ++i)
        sFtFt.block<2, 2>(2 * i, 2 * i) += transformNoise;
    Eigen::MatrixXd corner = gamma1 * sF0F0 * gamma1.transpose() +
                             gamma2 * sFtF0 * gamma1.transpose() +
                             gamma1 * sF0Ft * gamma2.transpose() +
                             gamma2 * sFtFt * gamma2.transpose();
    for (int s = 0; s < p; ++s)
        if (degenerate[s]) corner(3 * s + 2, 3 * s + 2) += degenerateRotationVariance;
    corner = 0.5 * (corner + corner.transpose());

    GaussianBelief out;
    out.layout = belief.layout;
    for (const auto& spec : specs) out.layout.append(spec.poseKey, kPoseDim);
    out.mean.resize(n + 3 * p);
    out.mean.head(n) = belief.mean;
    out.mean.tail(3 * p) = xiStack;
    out.cov.resize(n + 3 * p, n + 3 * p);
    out.cov.topLeftCorner(n, n) = belief.cov;
    out.cov.bottomLeftCorner(3 * p, n) = rows;
    out.cov.topRightCorner(n, 3 * p) = rows.transpose();
    out.cov.bottomRightCorner(3 * p, 3 * p) = corner;
    return out;
}

GaussianBelief updateStaticFeatures(const GaussianBelief& belief,
                                    std::span<const FeatureObservation> observations,
                                    const Eigen::Matrix2d& measurementNoise) {
    GaussianBelief out = belief;
    staticUpdateInPlace(out, observations, measurementNoise);
    return out;
}

GaussianBelief updateSmoothing(const GaussianBelief& belief,
                               std::span<const SmoothingTriple> triples,
                               const Eigen::Matrix3d& smoothingNoise) {
    GaussianBelief out = belief;
    smoothingUpdateInPlace(out, triples, smoothingNoise);
    return out;
}

GaussianBelief propagateState(const GaussianBelief& belief, const Eigen::Vector3d& odom,
                              const Eigen::Matrix3d& processNoise) {
    GaussianBelief out = belief;
    propagateInPlace(out, odom, processNoise);
    return out;
}

FilterState FilterState::init(const Eigen::Vector3d& priorMean, const Eigen::Matrix3d& priorCov,
                              const NoiseModel& noise, const FilterOptions& options) {
    noise.validate();
    FilterState state;
    state.noise_ = noise;
    state.options_ = options;
    state.belief_.layout.append(VariableKey::egoPose(), kPoseDim);
    state.belief_.mean = priorMean;
    state.belief_.cov = priorCov;
    state.belief_.validate();
    return state;
}

void FilterState::canonicalize() {
    const VariableLayout target = canonicalLayout(belief_.layout);
    if (target.keys() != belief_.layout.keys()) belief_ = reorder(belief_, target);
}

void FilterState::augmentNewStatics(const std::vector<std::pair<int, Eigen::Vector2d>>& fresh) {
    if (fresh.empty()) return;
    std::vector<NewFeatureObservation> observations;
    observations.reserve(fresh.size());
    for (const auto& [externalId, z] : fresh)
        observations.push_back({VariableKey::staticFeature(registry_.registerLandmark(externalId)),
                                z});
    belief_ = augmentFeatures(belief_, observations, noise_.measurementNoise);
    canonicalize();
}

void FilterState::replaceTrackedClouds(const std::vector<FramePartition::ObjectObs>& tracked) {
    if (tracked.empty()) return;
    const int egoOff = belief_.layout.offsetOf(VariableKey::egoPose());
    std::vector<NewFeatureObservation> grow;
    std::vector<std::pair<VariableKey, VariableKey>> renames;
    for (const auto& obj : tracked) {
        const auto& track = registry_.object(obj.alpha);
        const int n = static_cast<int>(track.featureIds.size());
        if (static_cast<int>(obj.features.size()) != n)
            throw AssociationError("object " + std::to_string(track.externalId) +
                                   " must be re-observed with its full feature set");
        if (track.currentCloudTime < 0) {
            // second sighting: the current cloud does not exist yet, grow the state
            for (const auto& [k, z] : obj.features)
                grow.push_back({VariableKey::objectFeature(frameIndex_, obj.alpha, k), z});
            registry_.setCurrentCloudTime(obj.alpha, frameIndex_);
            continue;
        }
        // In-place replacement: the fresh cloud has the same block shape, so
        // overwrite values and relabel the keys instead of drop-and-append.
        const Eigen::Vector3d x = belief_.mean.segment<3>(egoOff);
        const int off = belief_.layout.offsetOf(
            VariableKey::objectFeature(track.currentCloudTime, obj.alpha, 0));
        Eigen::MatrixXd lx(2 * n, 3);
        std::vector<Eigen::Matrix2d> lz(n);
        for (int k = 0; k < n; ++k) {
            const Eigen::Vector2d& z = obj.features[k].second;
            belief_.mean.segment<2>(off + 2 * k) = inverseMeasure<double>(x, z);
            lx.middleRows<2>(2 * k) = inverseMeasureJacobianPose<double>(x, z);
            lz[k] = inverseMeasureJacobianMeasurement<double>(x, z);
        }
        const Eigen::Matrix3d sxx = belief_.cov.block<3, 3>(egoOff, egoOff);
        Eigen::MatrixXd corner = lx * sxx * lx.transpose();
        for (int k = 0; k < n; ++k)
            corner.block<2, 2>(2 * k, 2 * k) +=
                lz[k] * noise_.measurementNoise * lz[k].transpose();
        const Eigen::MatrixXd cross = lx * belief_.cov.middleRows<3>(egoOff);  // 2n x d
        belief_.cov.middleRows(off, 2 * n) = cross;
        belief_.cov.middleCols(off, 2 * n) = cross.transpose();
        belief_.cov.block(off, off, 2 * n, 2 * n) = corner;
        for (int k = 0; k < n; ++k)
            renames.emplace_back(VariableKey::objectFeature(track.currentCloudTime, obj.alpha, k),
                                 VariableKey::objectFeature(frameIndex_, obj.alpha, k));
        registry_.setCurrentCloudTime(obj.alpha, frameIndex_);
    }
    if (!renames.empty()) {
        VariableLayout relabeled;
        for (const auto& key : belief_.layout.keys()) {
            const auto it = std::find_if(renames.begin(), renames.end(),
                                         [&](const auto& rn) { return rn.first == key; });
            relabeled.append(it == renames.end() ? key : it->second,
                             belief_.layout.dimOf(key));
        }
        belief_.layout = std::move(relabeled);
    }
    if (!grow.empty()) belief_ = augmentFeatures(belief_, grow, noise_.measurementNoise);
    canonicalize();
}

void FilterState::augmentNewObjects(const std::vector<FramePartition::NewObjectObs>& fresh) {
    if (fresh.empty()) return;
    std::vector<NewFeatureObservation> observations;
    for (const auto& obj : fresh) {
        std::vector<int> featureIds;
        for (const auto& [fid, z] : obj.features) featureIds.push_back(fid);
        const int alpha = registry_.registerObject(obj.externalId, featureIds, frameIndex_);
        for (size_t k = 0; k < obj.features.size(); ++k)
            observations.push_back({VariableKey::objectFeature(0, alpha, static_cast<int>(k)),
                                    obj.features[k].second});
    }
    belief_ = augmentFeatures(belief_, observations, noise_.measurementNoise);
    canonicalize();
}

void FilterState::applyStaticUpdate(const std::vector<FeatureObservation>& observations) {
    staticUpdateInPlace(belief_, observations, noise_.measurementNoise);
}

void FilterState::featureAugment(std::span<const Measurement> measurements) {
    if (measurements.empty()) return;
    const FrameData frame{frameIndex_, std::nullopt,
                          {measurements.begin(), measurements.end()}};
    const FramePartition part = partitionFrame(registry_, frame);
    if (!part.existingStatic.empty())
        throw AssociationError("featureAugment: measurement of an already tracked landmark");
    augmentNewStatics(part.newStatic);
    replaceTrackedClouds(part.trackedObjects);
    augmentNewObjects(part.newObjects);
}

void FilterState::objectPoseAugment() {
    std::vector<PoseAugmentationSpec> specs;
    std::vector<int> alphas;
    for (int alpha = 0; alpha < registry_.objectCount(); ++alpha) {
        const auto& track = registry_.object(alpha);
        // Needs a current cloud from this frame and an epoch-0 cloud behind it.
        if (track.currentCloudTime != frameIndex_) continue;
        PoseAugmentationSpec spec;
        spec.poseKey = VariableKey::objectPose(frameIndex_, alpha);
        for (size_t k = 0; k < track.featureIds.size(); ++k) {
            spec.initialCloud.push_back(VariableKey::objectFeature(0, alpha, static_cast<int>(k)));
            spec.currentCloud.push_back(
                VariableKey::objectFeature(frameIndex_, alpha, static_cast<int>(k)));
        }
        specs.push_back(std::move(spec));
        alphas.push_back(alpha);
    }
    if (specs.empty()) return;
    belief_ = augmentObjectPoses(belief_, specs, noise_.transformNoise,
                                 noise_.degenerateRotationVariance);
    std::vector<VariableKey> stale;
    for (const int alpha : alphas)
        for (const int t : registry_.addPose(alpha, frameIndex_, options_.dropObjectHistory))
            stale.push_back(VariableKey::objectPose(t, alpha));
    belief_ = dropBlocks(belief_, stale);
    canonicalize();
}

void FilterState::staticFeatureUpdate(std::span<const Measurement> measurements) {
    if (measurements.empty()) return;
    std::vector<FeatureObservation> observations;
    for (const auto& m : measurements) {
        if (m.assoc.kind != Association::Kind::Static)
            throw AssociationError("staticFeatureUpdate: non-static measurement");
        const int k = registry_.landmarkIndexOf(m.assoc.id);
        observations.push_back({VariableKey::staticFeature(k), m.z});
    }
    applyStaticUpdate(observations);
}

void FilterState::smoothingUpdate() {
    std::vector<SmoothingTriple> triples;
    for (int alpha = 0; alpha < registry_.objectCount(); ++alpha) {
        const auto& times = registry_.object(alpha).poseTimes;
        const int m = static_cast<int>(times.size());
        if (m >= 3 && times[m - 1] == frameIndex_ && times[m - 2] == frameIndex_ - 1 &&
            times[m - 3] == frameIndex_ - 2) {
            triples.push_back({VariableKey::objectPose(frameIndex_ - 2, alpha),
                               VariableKey::objectPose(frameIndex_ - 1, alpha),
                               VariableKey::objectPose(frameIndex_, alpha)});
        }
    }
    smoothingUpdateInPlace(belief_, triples, noise_.smoothingNoise);
}

void FilterState::statePropagate(const Eigen::Vector3d& odom) {
    propagateInPlace(belief_, odom, noise_.processNoise);
}

void FilterState::step(const FrameData& frame, const FilteredHook& hook) {
    if (frame.t != frameIndex_)
        throw StateError("frames must be processed consecutively");
    const FramePartition part = partitionFrame(registry_, frame);

    augmentNewStatics(part.newStatic);
    replaceTrackedClouds(part.trackedObjects);
    objectPoseAugment();
    augmentNewObjects(part.newObjects);
    if (options_.enableSmoothing) smoothingUpdate();

    std::vector<FeatureObservation> existing;
    existing.reserve(part.existingStatic.size());
    for (const auto& [k, z] : part.existingStatic)
        existing.push_back({VariableKey::staticFeature(k), z});
    applyStaticUpdate(existing);

    if (hook) hook(belief_, registry_);
    if (frame.odom) statePropagate(*frame.odom);
    ++frameIndex_;
}

}  // namespace dynslam

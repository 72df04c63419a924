#include "dynslam/backend_opt.hpp"

#include <algorithm>
#include <utility>

namespace dynslam {

ResidualTerm makeBodyMeasurementTerm(const VariableKey& featureKey, const Eigen::Vector2d& z,
                                     const Eigen::Matrix2d& noise) {
    ResidualTerm term;
    term.keys = {VariableKey::egoPose(), featureKey};
    term.residual = [z](const Eigen::VectorXd& sub) -> Eigen::VectorXd {
        const Eigen::Vector3d x = sub.head<3>();
        const Eigen::Vector2d f = sub.segment<2>(3);
        return z - measure<double>(x, f);
    };
    term.jacobian = [](const Eigen::VectorXd& sub) -> Eigen::MatrixXd {
        const Eigen::Vector3d x = sub.head<3>();
        const Eigen::Vector2d f = sub.segment<2>(3);
        Eigen::MatrixXd j(2, 5);
        j.leftCols<3>() = -measureJacobianPose<double>(x, f);
        j.rightCols<2>() = -measureJacobianFeature<double>(x, f);
        return j;
    };
    term.noise = noise;
    return term;
}

// One rigid-transform residual: current feature k against the transformed
// initial cloud. Keys: [f_t_k, f0_1..f0_n, xi].
ResidualTerm makeTransformTerm(const VariableKey& currentKey,
                           std::span<const VariableKey> initialCloud,
                           const VariableKey& poseKey, int featureIndex,
                           const Eigen::Matrix2d& noise) {
    ResidualTerm term;
    term.keys.push_back(currentKey);
    term.keys.insert(term.keys.end(), initialCloud.begin(), initialCloud.end());
    term.keys.push_back(poseKey);
    const int n = static_cast<int>(initialCloud.size());
    const int k = featureIndex;
    term.residual = [n, k](const Eigen::VectorXd& sub) -> Eigen::VectorXd {
        const Eigen::Vector2d ftk = sub.head<2>();
        const Eigen::VectorXd f0 = sub.segment(2, 2 * n);
        const Eigen::Vector3d xi = sub.tail<3>();
        return ftk - objectTransform<double>(xi, f0).segment<2>(2 * k);
    };
    term.jacobian = [n, k](const Eigen::VectorXd& sub) -> Eigen::MatrixXd {
        const Eigen::VectorXd f0 = sub.segment(2, 2 * n);
        const Eigen::Vector3d xi = sub.tail<3>();
        Eigen::MatrixXd j(2, 2 + 2 * n + 3);
        j.leftCols<2>().setIdentity();
        j.middleCols(2, 2 * n) =
            -objectTransformJacobianCloud<double>(xi, f0).middleRows<2>(2 * k);
        j.rightCols<3>() = -objectTransformJacobianPose<double>(xi, f0).middleRows<2>(2 * k);
        return j;
    };
    term.noise = noise;
    return term;
}

// Pins the unobservable rotation of a single-feature object to zero.
ResidualTerm makeRotationPinTerm(const VariableKey& poseKey, double variance) {
    ResidualTerm term;
    term.keys = {poseKey};
    term.residual = [](const Eigen::VectorXd& sub) -> Eigen::VectorXd {
        return sub.tail<1>();
    };
    term.jacobian = [](const Eigen::VectorXd&) -> Eigen::MatrixXd {
        Eigen::MatrixXd j(1, 3);
        j << 0, 0, 1;
        return j;
    };
    term.noise = Eigen::MatrixXd::Constant(1, 1, variance);
    return term;
}

ResidualTerm makeSmoothingTerm(const SmoothingTriple& triple, const Eigen::Matrix3d& noise) {
    ResidualTerm term;
    term.keys = {triple.first, triple.second, triple.third};
    term.residual = [](const Eigen::VectorXd& sub) -> Eigen::VectorXd {
        return smoothingResidual<double>(sub.head<3>(), sub.segment<3>(3), sub.tail<3>());
    };
    term.jacobian = [](const Eigen::VectorXd&) -> Eigen::MatrixXd {
        Eigen::MatrixXd j(3, 9);
        j << Eigen::Matrix3d::Identity(), -2.0 * Eigen::Matrix3d::Identity(),
            Eigen::Matrix3d::Identity();
        return j;
    };
    term.noise = noise;
    return term;
}

ResidualTerm makeDynamicsTerm(const VariableKey& nextKey, const Eigen::Vector3d& odom,
                          const Eigen::Matrix3d& noise) {
    ResidualTerm term;
    term.keys = {nextKey, VariableKey::egoPose()};
    term.residual = [odom](const Eigen::VectorXd& sub) -> Eigen::VectorXd {
        Eigen::Vector3d d = sub.head<3>() - sub.tail<3>() - odom;
        d.z() = wrapAngle(d.z());
        return d;
    };
    term.jacobian = [](const Eigen::VectorXd&) -> Eigen::MatrixXd {
        Eigen::MatrixXd j(3, 6);
        j << Eigen::Matrix3d::Identity(), -Eigen::Matrix3d::Identity();
        return j;
    };
    term.noise = noise;
    return term;
}

RunningCost RunningCost::init(const Eigen::Vector3d& priorMean, const Eigen::Matrix3d& priorCov,
                              const NoiseModel& noise, const Options& options) {
    noise.validate();
    RunningCost cost;
    cost.noise_ = noise;
    cost.options_ = options;
    cost.prior_.layout.append(VariableKey::egoPose(), kPoseDim);
    cost.prior_.mean = priorMean;
    cost.prior_.cov = priorCov;
    cost.prior_.validate();
    return cost;
}

ResidualTerm makePriorTerm(const GaussianBelief& prior) {
    ResidualTerm term;
    term.keys = prior.layout.keys();
    const Eigen::VectorXd mean = prior.mean;
    term.residual = [mean](const Eigen::VectorXd& sub) -> Eigen::VectorXd { return sub - mean; };
    const int d = prior.layout.dim();
    term.jacobian = [d](const Eigen::VectorXd&) -> Eigen::MatrixXd {
        return Eigen::MatrixXd::Identity(d, d);
    };
    term.noise = prior.cov;
    return term;
}

ResidualTerm RunningCost::priorTerm() const { return makePriorTerm(prior_); }

std::vector<ResidualTerm> RunningCost::allTerms() const {
    std::vector<ResidualTerm> terms;
    terms.reserve(pending_.size() + 1);
    terms.push_back(priorTerm());
    terms.insert(terms.end(), pending_.begin(), pending_.end());
    return terms;
}

VariableLayout RunningCost::extendedLayout() const {
    VariableLayout layout = prior_.layout;
    for (const auto& var : pendingVars_) layout.append(var.key, var.dim);
    return layout;
}

Eigen::VectorXd RunningCost::linearizationPoint() const {
    int extra = 0;
    for (const auto& var : pendingVars_) extra += var.dim;
    Eigen::VectorXd point(prior_.layout.dim() + extra);
    point.head(prior_.layout.dim()) = prior_.mean;
    int at = prior_.layout.dim();
    for (const auto& var : pendingVars_) {
        point.segment(at, var.dim) = var.init;
        at += var.dim;
    }
    return point;
}

double RunningCost::costValue(const Eigen::VectorXd& point) const {
    const VariableLayout layout = extendedLayout();
    if (point.size() != layout.dim())
        throw LayoutError("costValue: point does not match the extended layout");
    const auto terms = allTerms();
    const StackedSystem sys = stackResiduals(terms, layout, point);
    return sys.c.squaredNorm();
}

void RunningCost::addMeasurementTerms(std::span<const Measurement> measurements,
                                      bool newFeatures) {
    if (measurements.empty()) return;
    const FrameData frame{frameIndex_, std::nullopt, {measurements.begin(), measurements.end()}};
    const FramePartition part = partitionFrame(registry_, frame);
    const Eigen::Vector3d x = prior_.blockMean(VariableKey::egoPose());

    if (!newFeatures) {
        if (!part.newStatic.empty() || !part.trackedObjects.empty() || !part.newObjects.empty())
            throw AssociationError("existing-feature terms got a non-tracked measurement");
        for (const auto& [k, z] : part.existingStatic)
            pending_.push_back(
                makeBodyMeasurementTerm(VariableKey::staticFeature(k), z, noise_.measurementNoise));
        return;
    }

    if (!part.existingStatic.empty())
        throw AssociationError("new-feature terms got an already tracked landmark");
    // Stale current clouds go first: dropping needs a collapsed cost.
    std::vector<VariableKey> stale;
    for (const auto& obj : part.trackedObjects) {
        const auto& track = registry_.object(obj.alpha);
        if (track.currentCloudTime >= 0)
            for (size_t k = 0; k < track.featureIds.size(); ++k)
                stale.push_back(VariableKey::objectFeature(track.currentCloudTime, obj.alpha,
                                                           static_cast<int>(k)));
        registry_.setCurrentCloudTime(obj.alpha, frameIndex_);
    }
    dropVariables(stale);
    auto addVariable = [&](const VariableKey& key, const Eigen::Vector2d& z) {
        pendingVars_.push_back({key, kFeatureDim, inverseMeasure<double>(x, z)});
        pending_.push_back(makeBodyMeasurementTerm(key, z, noise_.measurementNoise));
    };
    for (const auto& [externalId, z] : part.newStatic)
        addVariable(VariableKey::staticFeature(registry_.registerLandmark(externalId)), z);
    for (const auto& obj : part.trackedObjects)
        for (const auto& [k, z] : obj.features)
            addVariable(VariableKey::objectFeature(frameIndex_, obj.alpha, k), z);
    for (const auto& obj : part.newObjects) {
        std::vector<int> featureIds;
        for (const auto& [fid, z] : obj.features) featureIds.push_back(fid);
        const int alpha = registry_.registerObject(obj.externalId, featureIds, frameIndex_);
        for (size_t k = 0; k < obj.features.size(); ++k)
            addVariable(VariableKey::objectFeature(0, alpha, static_cast<int>(k)),
                        obj.features[k].second);
    }
}

void RunningCost::addObjectTransformTerms() {
    for (int alpha = 0; alpha < registry_.objectCount(); ++alpha) {
        const auto& track = registry_.object(alpha);
        if (track.currentCloudTime != frameIndex_) continue;
        const int n = static_cast<int>(track.featureIds.size());
        std::vector<VariableKey> initialCloud, currentCloud;
        Eigen::VectorXd f0(2 * n), ft(2 * n);
        for (int k = 0; k < n; ++k) {
            initialCloud.push_back(VariableKey::objectFeature(0, alpha, k));
            currentCloud.push_back(VariableKey::objectFeature(frameIndex_, alpha, k));
            f0.segment<2>(2 * k) = prior_.blockMean(initialCloud.back());
            ft.segment<2>(2 * k) = prior_.blockMean(currentCloud.back());
        }
        const auto alignment = inverseObjectTransform<double>(f0, ft);
        if (alignment.degenerate && n > 1)
            throw ModelError("object transform terms: coincident cloud, rotation undefined");
        const VariableKey poseKey = VariableKey::objectPose(frameIndex_, alpha);
        pendingVars_.push_back({poseKey, kPoseDim, alignment.xi});
        for (int k = 0; k < n; ++k)
            pending_.push_back(
                makeTransformTerm(currentCloud[k], initialCloud, poseKey, k, noise_.transformNoise));
        if (alignment.degenerate)
            pending_.push_back(makeRotationPinTerm(poseKey, noise_.degenerateRotationVariance));
    }
}

void RunningCost::addSmoothingTerms() {
    for (int alpha = 0; alpha < registry_.objectCount(); ++alpha) {
        const auto& times = registry_.object(alpha).poseTimes;
        const int m = static_cast<int>(times.size());
        if (m >= 3 && times[m - 1] == frameIndex_ && times[m - 2] == frameIndex_ - 1 &&
            times[m - 3] == frameIndex_ - 2) {
            pending_.push_back(makeSmoothingTerm({VariableKey::objectPose(frameIndex_ - 2, alpha),
                                              VariableKey::objectPose(frameIndex_ - 1, alpha),
                                              VariableKey::objectPose(frameIndex_, alpha)},
                                             noise_.smoothingNoise));
        }
    }
}

void RunningCost::addDynamicsTerm(const Eigen::Vector3d& odom) {
    const VariableKey nextKey = VariableKey::egoPose(1);
    const Eigen::Vector3d x = prior_.blockMean(VariableKey::egoPose());
    pendingVars_.push_back({nextKey, kPoseDim, egoDynamics<double>(x, odom)});
    pending_.push_back(makeDynamicsTerm(nextKey, odom, noise_.processNoise));
}

void RunningCost::gnCollapse() {
    if (pending_.empty() && pendingVars_.empty()) return;
    const VariableLayout layout = extendedLayout();
    const Eigen::VectorXd lin = linearizationPoint();
    const auto terms = allTerms();
    GaussianBelief next = gaussNewtonStep(terms, layout, lin, SolveMode::Strict);
    prior_ = reorder(next, canonicalLayout(next.layout));
    pending_.clear();
    pendingVars_.clear();
}

void RunningCost::margCollapse() {
    const VariableLayout layout = extendedLayout();
    const VariableKey oldEgo = VariableKey::egoPose(0);
    const VariableKey nextEgo = VariableKey::egoPose(1);
    if (!layout.contains(nextEgo))
        throw StateError("margCollapse: no successor ego pose pending");
    std::vector<VariableKey> keep{nextEgo};
    for (const auto& key : layout.keys())
        if (key != oldEgo && key != nextEgo) keep.push_back(key);
    const std::vector<VariableKey> marg{oldEgo};
    const auto terms = allTerms();
    GaussianBelief next = marginalize(terms, layout, keep, marg, linearizationPoint());
    next = renameKey(next, nextEgo, oldEgo);
    prior_ = reorder(next, canonicalLayout(next.layout));
    pending_.clear();
    pendingVars_.clear();
}

void RunningCost::dropVariables(std::span<const VariableKey> keys) {
    if (keys.empty()) return;
    if (!pending_.empty() || !pendingVars_.empty())
        throw StateError("dropVariables requires a collapsed cost");
    if (!options_.dropByMarginalization) {
        prior_ = dropBlocks(prior_, keys);
        return;
    }
    std::vector<VariableKey> keep;
    for (const auto& key : prior_.layout.keys())
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) keep.push_back(key);
    const auto terms = allTerms();
    prior_ = marginalize(terms, prior_.layout, keep, keys, prior_.mean);
}

void RunningCost::step(const FrameData& frame, const FilteredHook& hook) {
    if (frame.t != frameIndex_)
        throw StateError("frames must be processed consecutively");
    const FramePartition part = partitionFrame(registry_, frame);

    std::vector<Measurement> phase;
    auto flush = [&](bool newFeatures) {
        addMeasurementTerms(phase, newFeatures);
        gnCollapse();
        phase.clear();
    };

    // All new features of the frame in one collapse: new landmarks, replaced
    // object clouds, and first-seen object clouds.
    for (const auto& [id, z] : part.newStatic)
        phase.push_back({z, {Association::Kind::Static, id, -1}});
    for (const auto& obj : part.trackedObjects) {
        const auto& track = registry_.object(obj.alpha);
        for (const auto& [k, z] : obj.features)
            phase.push_back({z, {Association::Kind::Object, track.externalId,
                                 track.featureIds[k]}});
    }
    for (const auto& obj : part.newObjects)
        for (const auto& [fid, z] : obj.features)
            phase.push_back({z, {Association::Kind::NewObject, obj.externalId, fid}});
    flush(true);

    // Object pose augmentation, then history trimming.
    const int before = static_cast<int>(pending_.size());
    addObjectTransformTerms();
    std::vector<int> augmented;
    if (static_cast<int>(pending_.size()) > before || !pendingVars_.empty()) {
        for (const auto& var : pendingVars_)
            if (var.key.kind == VarKind::ObjectPose) augmented.push_back(var.key.object);
        gnCollapse();
    }
    std::vector<VariableKey> stale;
    for (const int alpha : augmented)
        for (const int t : registry_.addPose(alpha, frameIndex_, options_.filter.dropObjectHistory))
            stale.push_back(VariableKey::objectPose(t, alpha));
    dropVariables(stale);

    if (options_.filter.enableSmoothing) {
        addSmoothingTerms();
        gnCollapse();
    }

    for (const auto& [k, z] : part.existingStatic)
        phase.push_back({z, {Association::Kind::Static, registry_.landmarkIdAt(k), -1}});
    flush(false);

    if (hook) hook(prior_, registry_);

    if (frame.odom) {
        addDynamicsTerm(*frame.odom);
        margCollapse();
    }
    ++frameIndex_;
}

}  // namespace dynslam

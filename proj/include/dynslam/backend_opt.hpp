#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "dynslam/backend_std.hpp"
#include "dynslam/frame.hpp"
#include "dynslam/models.hpp"
#include "dynslam/quadcost.hpp"

// Optimization-form dynamic EKF SLAM. The running cost is a Gaussian prior
// plus freshly added residual terms; each phase collapses back to prior form
// with one Gauss-Newton step, and state propagation collapses with one
// marginalization of the previous ego pose. This is the reference oracle the
// covariance-block formulation is checked against.

namespace dynslam {

// Residual-term builders for the cost phases; shared with the randomized
// formulation-equivalence checks.
ResidualTerm makePriorTerm(const GaussianBelief& prior);
ResidualTerm makeBodyMeasurementTerm(const VariableKey& featureKey, const Eigen::Vector2d& z,
                                     const Eigen::Matrix2d& noise);
ResidualTerm makeTransformTerm(const VariableKey& currentKey,
                               std::span<const VariableKey> initialCloud,
                               const VariableKey& poseKey, int featureIndex,
                               const Eigen::Matrix2d& noise);
ResidualTerm makeRotationPinTerm(const VariableKey& poseKey, double variance);
ResidualTerm makeSmoothingTerm(const SmoothingTriple& triple, const Eigen::Matrix3d& noise);
ResidualTerm makeDynamicsTerm(const VariableKey& nextKey, const Eigen::Vector3d& odom,
                              const Eigen::Matrix3d& noise);

struct RunningCostOptions {
    FilterOptions filter;
    // Remove stale variables by marginalizing instead of deleting. For a
    // collapsed Gaussian prior the two agree; the switch exists for
    // comparison runs.
    bool dropByMarginalization = false;
};

class RunningCost {
public:
    using Options = RunningCostOptions;

    static RunningCost init(const Eigen::Vector3d& priorMean, const Eigen::Matrix3d& priorCov,
                            const NoiseModel& noise, const Options& options = Options{});

    /// Adds measurement residual terms. New-feature measurements also create
    /// the feature variables, initialized by the inverse measurement at the
    /// current ego mean; tracked-object measurements replace the object's
    /// current cloud.
    void addMeasurementTerms(std::span<const Measurement> measurements, bool newFeatures);

    /// Adds rigid-transform terms and this frame's object pose variables,
    /// initialized by cloud alignment. Single-feature objects get their
    /// rotation pinned by an explicit prior term.
    void addObjectTransformTerms();

    /// Adds second-difference terms for objects with three consecutive poses.
    void addSmoothingTerms();

    /// Adds the odometry residual and the next ego pose variable.
    void addDynamicsTerm(const Eigen::Vector3d& odom);

    /// One Gauss-Newton step about (prior mean, new-variable initializers);
    /// the result becomes the new prior and the pending terms clear.
    void gnCollapse();

    /// Marginalizes the previous ego pose about (prior mean, g(prior mean));
    /// the kept belief becomes the new prior with the next pose relabeled.
    void margCollapse();

    /// Full frame in the same sub-block order as the covariance-block filter.
    void step(const FrameData& frame, const FilteredHook& hook = {});

    /// Removes collapsed variables (dropping or marginalizing per options).
    void dropVariables(std::span<const VariableKey> keys);

    const GaussianBelief& prior() const { return prior_; }
    const TrackRegistry& registry() const { return registry_; }
    int pendingTermCount() const { return static_cast<int>(pending_.size()); }
    int pendingVariableCount() const { return static_cast<int>(pendingVars_.size()); }
    int frameIndex() const { return frameIndex_; }

    /// Total cost value at a point of the extended layout (prior plus pending
    /// terms); exposed for tests.
    double costValue(const Eigen::VectorXd& point) const;

    /// Layout of prior variables plus pending new variables.
    VariableLayout extendedLayout() const;
    /// Prior mean extended with the pending variables' initializers.
    Eigen::VectorXd linearizationPoint() const;

private:
    struct NewVariable {
        VariableKey key;
        int dim = 0;
        Eigen::VectorXd init;
    };

    ResidualTerm priorTerm() const;
    std::vector<ResidualTerm> allTerms() const;

    GaussianBelief prior_;
    std::vector<ResidualTerm> pending_;
    std::vector<NewVariable> pendingVars_;
    TrackRegistry registry_;
    NoiseModel noise_;
    Options options_;
    int frameIndex_ = 0;
};

}  // namespace dynslam

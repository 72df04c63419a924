#pragma once

#include <Eigen/Core>
#include <functional>
#include <span>
#include <vector>

#include "dynslam/frame.hpp"
#include "dynslam/models.hpp"
#include "dynslam/quadcost.hpp"

// Covariance-block dynamic EKF SLAM. Each sub-block is a free function on a
// belief; FilterState sequences them per frame and keeps the layout in
// canonical state order throughout.

namespace dynslam {

struct FilterOptions {
    bool dropObjectHistory = true;  // keep only the three most recent poses per object
    bool enableSmoothing = false;   // object-pose second-difference regularization
};

struct NewFeatureObservation {
    VariableKey key;     // feature variable to create
    Eigen::Vector2d z;   // its body-frame measurement
};

struct FeatureObservation {
    VariableKey key;     // existing feature variable
    Eigen::Vector2d z;
};

struct PoseAugmentationSpec {
    VariableKey poseKey;
    std::vector<VariableKey> initialCloud;  // epoch-0 feature keys, index-aligned with
    std::vector<VariableKey> currentCloud;  // the current-frame feature keys
};

struct SmoothingTriple {
    VariableKey first, second, third;  // poses at t-2, t-1, t
};

/// Appends inverse-measured features; new blocks correlate with the old state
/// only through the ego pose:
///   mean_new = l(mu_x, z)
///   cov      = [ S          S_{:,x} Lx^T                 ]
///              [ Lx S_{x,:} Lx S_xx Lx^T + Lz R~ Lz^T    ]
GaussianBelief augmentFeatures(const GaussianBelief& belief,
                               std::span<const NewFeatureObservation> observations,
                               const Eigen::Matrix2d& measurementNoise);

/// Appends one rigid-transform pose per spec, initialized by cloud alignment.
/// New covariance rows follow the alignment jacobians G1 = d gamma / d f0,
/// G2 = d gamma / d ft evaluated at the rigidly consistent cloud pair:
///   cov_xi,: = G1 S_f0,: + G2 S_ft,:
///   cov_xi,xi = G1 S_ff G1^T + G2 S_f'f G1^T + G1 S_ff' G2^T + G2 (S_f'f' + Xi~) G2^T
/// Single-feature clouds pin the rotation to zero with an explicit variance.
GaussianBelief augmentObjectPoses(const GaussianBelief& belief,
                                  std::span<const PoseAugmentationSpec> specs,
                                  const Eigen::Matrix2d& transformNoise,
                                  double degenerateRotationVariance);

/// Joint position update from stacked body-frame measurements of tracked
/// features (Kalman form; the covariance is non-increasing).
GaussianBelief updateStaticFeatures(const GaussianBelief& belief,
                                    std::span<const FeatureObservation> observations,
                                    const Eigen::Matrix2d& measurementNoise);

/// Second-difference regularization over each triple of consecutive poses.
GaussianBelief updateSmoothing(const GaussianBelief& belief,
                               std::span<const SmoothingTriple> triples,
                               const Eigen::Matrix3d& smoothingNoise);

/// Moves the ego pose through the odometry and inflates its block:
///   mu_x <- g(mu_x, u);  S_xx <- G S_xx G^T + Q;  S_xe <- G S_xe   (G = I)
GaussianBelief propagateState(const GaussianBelief& belief, const Eigen::Vector3d& odom,
                              const Eigen::Matrix3d& processNoise);

/// Called with the filtered belief of the current frame, after measurement
/// updates and before propagation.
using FilteredHook = std::function<void(const GaussianBelief&, const TrackRegistry&)>;

class FilterState {
public:
    static FilterState init(const Eigen::Vector3d& priorMean, const Eigen::Matrix3d& priorCov,
                            const NoiseModel& noise, const FilterOptions& options = {});

    /// Runs one frame: new-feature augmentation, object cloud replacement and
    /// pose augmentation, new-object handling, smoothing, static update, then
    /// propagation when odometry is present.
    void step(const FrameData& frame, const FilteredHook& hook = {});

    // Individual sub-blocks, exposed in frame order.
    void featureAugment(std::span<const Measurement> measurements);
    void objectPoseAugment();
    void staticFeatureUpdate(std::span<const Measurement> measurements);
    void smoothingUpdate();
    void statePropagate(const Eigen::Vector3d& odom);

    const GaussianBelief& belief() const { return belief_; }
    const TrackRegistry& registry() const { return registry_; }
    const NoiseModel& noise() const { return noise_; }
    const FilterOptions& options() const { return options_; }
    int frameIndex() const { return frameIndex_; }

private:
    void canonicalize();
    void augmentNewStatics(const std::vector<std::pair<int, Eigen::Vector2d>>& fresh);
    void replaceTrackedClouds(const std::vector<FramePartition::ObjectObs>& tracked);
    void augmentNewObjects(const std::vector<FramePartition::NewObjectObs>& fresh);
    void applyStaticUpdate(const std::vector<FeatureObservation>& observations);

    GaussianBelief belief_;
    TrackRegistry registry_;
    NoiseModel noise_;
    FilterOptions options_;
    int frameIndex_ = 0;
};

}  // namespace dynslam

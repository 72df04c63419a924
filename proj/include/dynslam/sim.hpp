#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dynslam/backend_std.hpp"
#include "dynslam/frame.hpp"
#include "dynslam/models.hpp"

// Highway scenario generation, noise injection, Monte Carlo orchestration and
// RMS metrics. The ground truth is a kilometer of three-lane highway sampled
// every 0.5 s for 60 s: the ego vehicle in the middle lane, two other
// vehicles changing lanes around it, a jaywalking pedestrian, and static
// landmarks scattered along the roadside.

namespace dynslam {

uint64_t splitMix64(uint64_t x);

/// Deterministic normal/uniform source. Draw transforms are hand-rolled so a
/// seed yields the same stream on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitMix64(seed)) {}
    double uniform();  // [0, 1)
    double normal();
    Eigen::VectorXd normalVec(int n);

private:
    std::mt19937_64 gen_;
    bool hasSpare_ = false;
    double spare_ = 0.0;
};

struct ScenarioOptions {
    int landmarkCount = 40;
    bool includeAgents = true;
    double sensingRadius = 0.0;  // 0 disables range limiting
};

struct AgentTruth {
    std::string name;
    int id = 0;                              // external object id
    int featureCount = 0;
    std::vector<Eigen::VectorXd> features;   // flat rigid cloud per timestep

    /// True transform of the cloud at `t` relative to the cloud at `epoch`.
    Eigen::Vector3d poseFromEpoch(int epoch, int t) const;
};

struct Scenario {
    double dt = 0.5;
    int steps = 121;
    uint64_t seed = 0;
    ScenarioOptions options;
    std::vector<Eigen::Vector3d> egoPose;
    std::vector<Eigen::Vector2d> landmarks;
    std::vector<AgentTruth> agents;
};

Scenario buildScenario(uint64_t seed, const ScenarioOptions& options = {});

/// Simulates odometry and measurements with the given injection covariances
/// (zero matrices inject nothing). Deterministic per seed.
std::vector<FrameData> simulateFrames(const Scenario& scenario,
                                      const Eigen::Matrix3d& odomNoise,
                                      const Eigen::Matrix2d& measurementNoise, uint64_t seed);

/// Odometry / measurement covariances per noise level 1..3.
Eigen::Matrix3d processNoiseLevel(int level);
Eigen::Matrix2d measurementNoiseLevel(int level);

struct NoiseLevelPair {
    int process = 1;
    int measurement = 1;
};

// --- estimates and metrics ---

struct ObjectEstimate {
    int externalId = -1;
    int epoch = 0;                                          // first-seen frame
    std::vector<std::pair<int, Eigen::Vector2d>> features;  // external feature id, estimate
    std::optional<Eigen::Vector3d> pose;
};

struct StepEstimates {
    int t = 0;
    Eigen::Vector3d ego = Eigen::Vector3d::Zero();
    Eigen::Matrix3d egoCov = Eigen::Matrix3d::Zero();
    std::vector<std::pair<int, Eigen::Vector2d>> landmarks;  // external id, estimate
    std::vector<ObjectEstimate> objects;
};

/// Reads the per-entity estimates out of a filtered belief.
StepEstimates extractEstimates(const GaussianBelief& belief, const TrackRegistry& registry,
                               int t);

struct GroupRms {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;
    bool hasTheta = false;  // feature groups have no rotation axis
};

struct RmsReport {
    GroupRms ego;
    GroupRms staticFeatures;
    std::vector<GroupRms> agentFeatures;  // one per scenario agent
    std::vector<GroupRms> agentPoses;
};

/// Per-axis root-mean-squared error over all runs and timesteps; heading
/// errors are wrapped before squaring.
RmsReport computeRms(const Scenario& scenario,
                     const std::vector<std::vector<StepEstimates>>& runs);

// --- Monte Carlo ---

enum class BackendKind { Standard, Optimization };

struct MonteCarloOptions {
    int runs = 25;
    BackendKind backend = BackendKind::Standard;
    FilterOptions filter;
    uint64_t seed = 0;
    bool zeroInjection = false;  // noiseless data; the filter keeps its level noise
    bool checkPsd = false;       // validate every covariance snapshot
    bool collectNees = false;
    int threads = 0;  // 0 = hardware concurrency
};

struct RunFailure {
    int run = -1;
    std::string message;
};

struct TimingStats {
    double meanStepSeconds = 0.0;
    double maxStepSeconds = 0.0;
    double meanRunSeconds = 0.0;
};

struct MonteCarloResult {
    RmsReport rms;
    std::vector<RunFailure> failures;
    int psdViolations = 0;
    double neesMean = 0.0;  // normalized ego error squared, averaged
    long neesCount = 0;
    TimingStats timing;
};

/// Runs `runs` independent simulations of the scenario at one noise level and
/// aggregates RMS errors. Runs execute concurrently; the reduction is
/// sequential in run order, so results are independent of scheduling.
/// Filter failures are recorded per run, never silently dropped.
MonteCarloResult runMonteCarlo(const Scenario& scenario, NoiseLevelPair levels,
                               const MonteCarloOptions& options);

/// Runs both formulations on the same frame stream and reports the largest
/// relative deviation between their per-step beliefs.
struct AgreementReport {
    double maxMeanDev = 0.0;
    double maxCovDev = 0.0;
    int steps = 0;
    double standardSeconds = 0.0;
    double optimizationSeconds = 0.0;
};

AgreementReport compareBackends(const Scenario& scenario, NoiseLevelPair levels, uint64_t seed,
                                const FilterOptions& filter = {}, bool zeroInjection = false);

/// Relative max-entry deviation between two beliefs over identical layouts.
double beliefMeanDeviation(const GaussianBelief& a, const GaussianBelief& b);
double beliefCovDeviation(const GaussianBelief& a, const GaussianBelief& b);

}  // namespace dynslam

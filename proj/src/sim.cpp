#include "dynslam/sim.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <future>
#include <thread>
#include <unordered_set>

#include "dynslam/backend_opt.hpp"

namespace dynslam {

namespace {

using Clock = std::chrono::steady_clock;

double seconds(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

// quintic smoothstep on [0, 1]
double smooth(double u) {
    if (u <= 0) return 0;
    if (u >= 1) return 1;
    return u * u * u * (10 + u * (-15 + 6 * u));
}

double dsmooth(double u) {
    if (u <= 0 || u >= 1) return 0;
    return 30 * u * u * (1 - u) * (1 - u);
}

struct PathPoint {
    Eigen::Vector2d p;
    Eigen::Vector2d v;
};

PathPoint egoPath(double t) {
    const double u = (t - 24.0) / 6.0;
    return {{16.7 * t, 3.5 * smooth(u)}, {16.7, 3.5 * dsmooth(u) / 6.0}};
}

PathPoint vehicleOnePath(double t) {
    const double brake = std::max(t - 30.0, 0.0);
    const double u = (t - 10.0) / 6.0;
    return {{30.0 + 18.0 * t - 0.02 * brake * brake, -3.5 + 3.5 * smooth(u)},
            {18.0 - 0.04 * brake, 3.5 * dsmooth(u) / 6.0}};
}

PathPoint vehicleTwoPath(double t) {
    const double u = (t - 40.0) / 6.0;
    return {{140.0 + 15.0 * t, 3.5 - 3.5 * smooth(u)}, {15.0, -3.5 * dsmooth(u) / 6.0}};
}

double pedestrianY(double t) {
    constexpr double kStart = 20.0, kSpeed = 1.4, kSpan = 16.0;
    const double walked = std::clamp(t - kStart, 0.0, kSpan / kSpeed);
    return -8.0 + kSpeed * walked;
}

AgentTruth makeVehicle(const std::string& name, int id, int steps, double dt,
                       PathPoint (*path)(double)) {
    // rigid rectangle corners in the body frame
    const std::array<Eigen::Vector2d, 4> corners = {
        Eigen::Vector2d(2.25, 0.9), Eigen::Vector2d(2.25, -0.9), Eigen::Vector2d(-2.25, -0.9),
        Eigen::Vector2d(-2.25, 0.9)};
    AgentTruth agent;
    agent.name = name;
    agent.id = id;
    agent.featureCount = 4;
    agent.features.reserve(steps);
    for (int t = 0; t < steps; ++t) {
        const PathPoint at = path(t * dt);
        const double heading = std::atan2(at.v.y(), at.v.x());
        const Eigen::Matrix2d r = rotation(heading);
        Eigen::VectorXd cloud(8);
        for (int k = 0; k < 4; ++k) cloud.segment<2>(2 * k) = at.p + r * corners[k];
        agent.features.push_back(std::move(cloud));
    }
    return agent;
}

AgentTruth makePedestrian(int id, int steps, double dt) {
    AgentTruth agent;
    agent.name = "pedestrian";
    agent.id = id;
    agent.featureCount = 1;
    agent.features.reserve(steps);
    for (int t = 0; t < steps; ++t) {
        Eigen::VectorXd f(2);
        f << 500.0, pedestrianY(t * dt);
        agent.features.push_back(std::move(f));
    }
    return agent;
}

// PSD square root that tolerates zero covariances.
Eigen::MatrixXd psdSqrt(const Eigen::MatrixXd& m) {
    if (m.isZero(0.0)) return Eigen::MatrixXd::Zero(m.rows(), m.cols());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    const Eigen::VectorXd clamped = eig.eigenvalues().cwiseMax(0.0);
    return eig.eigenvectors() * clamped.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

uint64_t deriveSeed(uint64_t root, uint64_t a, uint64_t b, uint64_t c) {
    uint64_t x = root;
    x = splitMix64(x ^ (0x9E3779B97F4A7C15ULL * (a + 1)));
    x = splitMix64(x ^ (0xBF58476D1CE4E5B9ULL * (b + 1)));
    x = splitMix64(x ^ (0x94D049BB133111EBULL * (c + 1)));
    return x;
}

Eigen::Vector2d agentCentroid(const AgentTruth& agent, int t) {
    Eigen::Vector2d c = Eigen::Vector2d::Zero();
    for (int k = 0; k < agent.featureCount; ++k) c += agent.features[t].segment<2>(2 * k);
    return c / agent.featureCount;
}

struct AxisAccumulator {
    double sx = 0, sy = 0, st = 0;
    long nxy = 0, nt = 0;
    void addXY(double ex, double ey) {
        sx += ex * ex;
        sy += ey * ey;
        ++nxy;
    }
    void addPose(const Eigen::Vector3d& e) {
        addXY(e.x(), e.y());
        const double w = wrapAngle(e.z());
        st += w * w;
        ++nt;
    }
    GroupRms finish(bool hasTheta) const {
        GroupRms out;
        out.x = nxy ? std::sqrt(sx / nxy) : 0.0;
        out.y = nxy ? std::sqrt(sy / nxy) : 0.0;
        out.hasTheta = hasTheta;
        out.theta = (hasTheta && nt) ? std::sqrt(st / nt) : 0.0;
        return out;
    }
};

}  // namespace

uint64_t splitMix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double Rng::uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (hasSpare_) {
        hasSpare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    constexpr double kTau = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(kTau * u2);
    hasSpare_ = true;
    return mag * std::cos(kTau * u2);
}

Eigen::VectorXd Rng::normalVec(int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
}

Eigen::Vector3d AgentTruth::poseFromEpoch(int epoch, int t) const {
    return inverseObjectTransform<double>(features[epoch], features[t]).xi;
}

Scenario buildScenario(uint64_t seed, const ScenarioOptions& options) {
    Scenario scenario;
    scenario.seed = seed;
    scenario.options = options;
    scenario.egoPose.reserve(scenario.steps);
    for (int t = 0; t < scenario.steps; ++t) {
        const PathPoint at = egoPath(t * scenario.dt);
        scenario.egoPose.push_back(
            {at.p.x(), at.p.y(), std::atan2(at.v.y(), at.v.x())});
    }
    Rng rng(seed);
    scenario.landmarks.reserve(options.landmarkCount);
    for (int i = 0; i < options.landmarkCount; ++i) {
        const double x = 1000.0 * rng.uniform();
        const double side = (i % 2 == 0) ? 1.0 : -1.0;
        const double y = side * (8.0 + 7.0 * rng.uniform());
        scenario.landmarks.push_back({x, y});
    }
    if (options.includeAgents) {
        scenario.agents.push_back(
            makeVehicle("vehicle-a", 101, scenario.steps, scenario.dt, vehicleOnePath));
        scenario.agents.push_back(
            makeVehicle("vehicle-b", 102, scenario.steps, scenario.dt, vehicleTwoPath));
        scenario.agents.push_back(makePedestrian(103, scenario.steps, scenario.dt));
    }
    return scenario;
}

std::vector<FrameData> simulateFrames(const Scenario& scenario, const Eigen::Matrix3d& odomNoise,
                                      const Eigen::Matrix2d& measurementNoise, uint64_t seed) {
    const Eigen::MatrixXd sqrtQ = psdSqrt(odomNoise);
    const Eigen::MatrixXd sqrtR = psdSqrt(measurementNoise);
    Rng rng(seed);
    std::vector<FrameData> frames;
    frames.reserve(scenario.steps);
    std::unordered_set<int> seen;
    const double radius = scenario.options.sensingRadius;
    for (int t = 0; t < scenario.steps; ++t) {
        FrameData frame;
        frame.t = t;
        const Eigen::Vector3d ego = scenario.egoPose[t];
        for (size_t i = 0; i < scenario.landmarks.size(); ++i) {
            const Eigen::Vector2d& lm = scenario.landmarks[i];
            if (radius > 0 && (lm - ego.head<2>()).norm() > radius) continue;
            Measurement m;
            m.z = measure<double>(ego, lm) + sqrtR * rng.normalVec(2);
            m.assoc = {Association::Kind::Static, static_cast<int>(i), -1};
            frame.measurements.push_back(std::move(m));
        }
        for (const auto& agent : scenario.agents) {
            if (radius > 0 && (agentCentroid(agent, t) - ego.head<2>()).norm() > radius)
                continue;
            const bool isNew = seen.insert(agent.id).second;
            for (int k = 0; k < agent.featureCount; ++k) {
                Measurement m;
                const Eigen::Vector2d f = agent.features[t].segment<2>(2 * k);
                m.z = measure<double>(ego, f) + sqrtR * rng.normalVec(2);
                m.assoc = {isNew ? Association::Kind::NewObject : Association::Kind::Object,
                           agent.id, k};
                frame.measurements.push_back(std::move(m));
            }
        }
        if (t + 1 < scenario.steps) {
            Eigen::Vector3d delta = scenario.egoPose[t + 1] - scenario.egoPose[t];
            delta.z() = wrapAngle(scenario.egoPose[t + 1].z() - scenario.egoPose[t].z());
            frame.odom = delta + Eigen::Vector3d(sqrtQ * rng.normalVec(3));
        }
        frames.push_back(std::move(frame));
    }
    return frames;
}

Eigen::Matrix3d processNoiseLevel(int level) {
    double xy = 0, th = 0;
    switch (level) {
        case 1: xy = 1e-6; th = 1e-8; break;
        case 2: xy = 1e-5; th = 1e-7; break;
        case 3: xy = 1e-4; th = 1e-6; break;
        default: throw MetricError("process noise level must be 1, 2 or 3");
    }
    return Eigen::Vector3d(xy, xy, th).asDiagonal();
}

Eigen::Matrix2d measurementNoiseLevel(int level) {
    switch (level) {
        case 1: return 1e-6 * Eigen::Matrix2d::Identity();
        case 2: return 1e-5 * Eigen::Matrix2d::Identity();
        case 3: return 1e-4 * Eigen::Matrix2d::Identity();
        default: throw MetricError("measurement noise level must be 1, 2 or 3");
    }
}

StepEstimates extractEstimates(const GaussianBelief& belief, const TrackRegistry& registry,
                               int t) {
    StepEstimates out;
    out.t = t;
    const int egoOff = belief.layout.offsetOf(VariableKey::egoPose());
    out.ego = belief.mean.segment<3>(egoOff);
    out.egoCov = belief.cov.block<3, 3>(egoOff, egoOff);
    for (int k = 0; k < registry.landmarkCount(); ++k)
        out.landmarks.emplace_back(registry.landmarkIdAt(k),
                                   belief.blockMean(VariableKey::staticFeature(k)));
    for (int alpha = 0; alpha < registry.objectCount(); ++alpha) {
        const auto& track = registry.object(alpha);
        ObjectEstimate obj;
        obj.externalId = track.externalId;
        obj.epoch = track.firstTime;
        const int cloudTime = track.currentCloudTime >= 0 ? track.currentCloudTime : 0;
        for (size_t k = 0; k < track.featureIds.size(); ++k)
            obj.features.emplace_back(
                track.featureIds[k],
                belief.blockMean(
                    VariableKey::objectFeature(cloudTime, alpha, static_cast<int>(k))));
        if (!track.poseTimes.empty() && track.poseTimes.back() == t)
            obj.pose = belief.blockMean(VariableKey::objectPose(t, alpha));
        out.objects.push_back(std::move(obj));
    }
    return out;
}

RmsReport computeRms(const Scenario& scenario,
                     const std::vector<std::vector<StepEstimates>>& runs) {
    AxisAccumulator ego, statics;
    std::vector<AxisAccumulator> agentFeatures(scenario.agents.size());
    std::vector<AxisAccumulator> agentPoses(scenario.agents.size());

    for (const auto& run : runs) {
        if (static_cast<int>(run.size()) != scenario.steps)
            throw MetricError("estimate and truth lengths disagree");
        for (const auto& est : run) {
            const int t = est.t;
            if (t < 0 || t >= scenario.steps)
                throw MetricError("estimate timestep out of range");
            Eigen::Vector3d egoErr = est.ego - scenario.egoPose[t];
            ego.addPose(egoErr);
            for (const auto& [id, f] : est.landmarks) {
                if (id < 0 || id >= static_cast<int>(scenario.landmarks.size()))
                    throw MetricError("landmark id out of range");
                statics.addXY(f.x() - scenario.landmarks[id].x(),
                              f.y() - scenario.landmarks[id].y());
            }
            for (const auto& obj : est.objects) {
                const auto it =
                    std::find_if(scenario.agents.begin(), scenario.agents.end(),
                                 [&](const AgentTruth& a) { return a.id == obj.externalId; });
                if (it == scenario.agents.end())
                    throw MetricError("object id not in the scenario");
                const int a = static_cast<int>(it - scenario.agents.begin());
                for (const auto& [fid, f] : obj.features) {
                    const Eigen::Vector2d truth = it->features[t].segment<2>(2 * fid);
                    agentFeatures[a].addXY(f.x() - truth.x(), f.y() - truth.y());
                }
                if (obj.pose) {
                    const Eigen::Vector3d truth = it->poseFromEpoch(obj.epoch, t);
                    agentPoses[a].addPose(*obj.pose - truth);
                }
            }
        }
    }

    RmsReport report;
    report.ego = ego.finish(true);
    report.staticFeatures = statics.finish(false);
    for (size_t a = 0; a < scenario.agents.size(); ++a) {
        report.agentFeatures.push_back(agentFeatures[a].finish(false));
        report.agentPoses.push_back(agentPoses[a].finish(true));
    }
    return report;
}

double beliefMeanDeviation(const GaussianBelief& a, const GaussianBelief& b) {
    if (a.layout.keys() != b.layout.keys())
        throw NumericError("belief comparison across different layouts");
    const double scale =
        std::max({a.mean.cwiseAbs().maxCoeff(), b.mean.cwiseAbs().maxCoeff(), 1e-12});
    return (a.mean - b.mean).cwiseAbs().maxCoeff() / scale;
}

double beliefCovDeviation(const GaussianBelief& a, const GaussianBelief& b) {
    if (a.layout.keys() != b.layout.keys())
        throw NumericError("belief comparison across different layouts");
    const double scale =
        std::max({a.cov.cwiseAbs().maxCoeff(), b.cov.cwiseAbs().maxCoeff(), 1e-12});
    return (a.cov - b.cov).cwiseAbs().maxCoeff() / scale;
}

namespace {

struct RunOutput {
    std::vector<StepEstimates> estimates;
    std::optional<std::string> failure;
    int psdViolations = 0;
    double neesSum = 0.0;
    long neesCount = 0;
    double stepSecondsSum = 0.0;
    double stepSecondsMax = 0.0;
    long stepCount = 0;
    double runSeconds = 0.0;
};

template <typename Filter>
void driveFilter(Filter& filter, const std::vector<FrameData>& frames, const Scenario& scenario,
                 const MonteCarloOptions& options, RunOutput& out) {
    const auto beliefOf = [](const Filter& f) -> const GaussianBelief& {
        if constexpr (std::is_same_v<Filter, RunningCost>)
            return f.prior();
        else
            return f.belief();
    };
    const auto runStart = Clock::now();
    for (const auto& frame : frames) {
        StepEstimates est;
        bool psdFiltered = true;
        const auto hook = [&](const GaussianBelief& belief, const TrackRegistry& registry) {
            est = extractEstimates(belief, registry, frame.t);
            if (options.checkPsd) {
                try {
                    belief.validate();
                } catch (const NumericError&) {
                    psdFiltered = false;
                }
            }
        };
        const auto t0 = Clock::now();
        filter.step(frame, hook);
        const auto t1 = Clock::now();
        const double dt = seconds(t0, t1);
        out.stepSecondsSum += dt;
        out.stepSecondsMax = std::max(out.stepSecondsMax, dt);
        ++out.stepCount;
        if (!psdFiltered) ++out.psdViolations;
        if (options.checkPsd) {
            try {
                beliefOf(filter).validate();
            } catch (const NumericError&) {
                ++out.psdViolations;
            }
        }
        if (options.collectNees) {
            Eigen::Vector3d err = est.ego - scenario.egoPose[frame.t];
            err.z() = wrapAngle(err.z());
            out.neesSum += err.dot(est.egoCov.ldlt().solve(err));
            ++out.neesCount;
        }
        out.estimates.push_back(std::move(est));
    }
    out.runSeconds = seconds(runStart, Clock::now());
}

}  // namespace

MonteCarloResult runMonteCarlo(const Scenario& scenario, NoiseLevelPair levels,
                               const MonteCarloOptions& options) {
    const Eigen::Matrix3d q = processNoiseLevel(levels.process);
    const Eigen::Matrix2d r = measurementNoiseLevel(levels.measurement);
    const Eigen::Matrix3d injQ = options.zeroInjection ? Eigen::Matrix3d::Zero() : q;
    const Eigen::Matrix2d injR = options.zeroInjection ? Eigen::Matrix2d::Zero() : r;
    NoiseModel noise;
    noise.processNoise = q;
    noise.measurementNoise = r;

    auto runOne = [&](int runIdx) -> RunOutput {
        RunOutput out;
        try {
            const uint64_t runSeed = deriveSeed(options.seed, levels.process,
                                                levels.measurement, runIdx);
            const auto frames = simulateFrames(scenario, injQ, injR, runSeed);
            Rng initRng(splitMix64(runSeed ^ 0xA5A5A5A5A5A5A5A5ULL));
            const Eigen::Vector3d priorMean =
                scenario.egoPose[0] + Eigen::Vector3d(psdSqrt(injQ) * initRng.normalVec(3));
            if (options.backend == BackendKind::Standard) {
                FilterState filter = FilterState::init(priorMean, q, noise, options.filter);
                driveFilter(filter, frames, scenario, options, out);
            } else {
                RunningCost::Options opt;
                opt.filter = options.filter;
                RunningCost filter = RunningCost::init(priorMean, q, noise, opt);
                driveFilter(filter, frames, scenario, options, out);
            }
        } catch (const Error& e) {
            out.failure = e.what();
        }
        return out;
    };

    const int runs = options.runs;
    std::vector<RunOutput> outputs(runs);
    int threads = options.threads > 0 ? options.threads
                                      : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, runs));
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < runs; i = next.fetch_add(1))
                outputs[i] = runOne(i);
        });
    }
    for (auto& th : pool) th.join();

    MonteCarloResult result;
    std::vector<std::vector<StepEstimates>> estimateRuns;
    double stepSum = 0, runSum = 0;
    long stepCount = 0;
    for (int i = 0; i < runs; ++i) {
        auto& out = outputs[i];
        if (out.failure) {
            result.failures.push_back({i, *out.failure});
            continue;
        }
        result.psdViolations += out.psdViolations;
        result.neesMean += out.neesSum;
        result.neesCount += out.neesCount;
        stepSum += out.stepSecondsSum;
        stepCount += out.stepCount;
        runSum += out.runSeconds;
        result.timing.maxStepSeconds = std::max(result.timing.maxStepSeconds, out.stepSecondsMax);
        estimateRuns.push_back(std::move(out.estimates));
    }
    if (result.neesCount > 0) result.neesMean /= static_cast<double>(result.neesCount);
    if (stepCount > 0) result.timing.meanStepSeconds = stepSum / static_cast<double>(stepCount);
    if (!estimateRuns.empty()) {
        result.timing.meanRunSeconds = runSum / static_cast<double>(estimateRuns.size());
        result.rms = computeRms(scenario, estimateRuns);
    }
    return result;
}

AgreementReport compareBackends(const Scenario& scenario, NoiseLevelPair levels, uint64_t seed,
                                const FilterOptions& filterOptions, bool zeroInjection) {
    const Eigen::Matrix3d q = processNoiseLevel(levels.process);
    const Eigen::Matrix2d r = measurementNoiseLevel(levels.measurement);
    const Eigen::Matrix3d injQ = zeroInjection ? Eigen::Matrix3d::Zero() : q;
    const Eigen::Matrix2d injR = zeroInjection ? Eigen::Matrix2d::Zero() : r;
    NoiseModel noise;
    noise.processNoise = q;
    noise.measurementNoise = r;

    const uint64_t runSeed = deriveSeed(seed, levels.process, levels.measurement, 0);
    const auto frames = simulateFrames(scenario, injQ, injR, runSeed);
    Rng initRng(splitMix64(runSeed ^ 0xA5A5A5A5A5A5A5A5ULL));
    const Eigen::Vector3d priorMean =
        scenario.egoPose[0] + Eigen::Vector3d(psdSqrt(injQ) * initRng.normalVec(3));

    FilterState standard = FilterState::init(priorMean, q, noise, filterOptions);
    RunningCost::Options optOptions;
    optOptions.filter = filterOptions;
    RunningCost optimization = RunningCost::init(priorMean, q, noise, optOptions);

    AgreementReport report;
    for (const auto& frame : frames) {
        GaussianBelief filteredStd, filteredOpt;
        auto t0 = Clock::now();
        standard.step(frame, [&](const GaussianBelief& b, const TrackRegistry&) {
            filteredStd = b;
        });
        auto t1 = Clock::now();
        optimization.step(frame, [&](const GaussianBelief& b, const TrackRegistry&) {
            filteredOpt = b;
        });
        auto t2 = Clock::now();
        report.standardSeconds += seconds(t0, t1);
        report.optimizationSeconds += seconds(t1, t2);
        report.maxMeanDev =
            std::max(report.maxMeanDev, beliefMeanDeviation(filteredStd, filteredOpt));
        report.maxCovDev =
            std::max(report.maxCovDev, beliefCovDeviation(filteredStd, filteredOpt));
        report.maxMeanDev = std::max(
            report.maxMeanDev, beliefMeanDeviation(standard.belief(), optimization.prior()));
        report.maxCovDev = std::max(
            report.maxCovDev, beliefCovDeviation(standard.belief(), optimization.prior()));
        ++report.steps;
    }
    return report;
}

}  // namespace dynslam

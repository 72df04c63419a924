// Command-line front end: build highway scenarios, run single filters or
// Monte Carlo grids, emit per-axis RMS reports, dump trajectories, and run the
// randomized formulation-equivalence suite.

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dynslam/equivalence.hpp"
#include "dynslam/sim.hpp"

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace dynslam;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    uint64_t seed = 7;
    int runs = 25;
    bool allLevels = true;
    NoiseLevelPair level;
    std::string backend = "std";  // std | opt | both
    bool dropHistory = true;
    bool smoothing = false;
    bool zeroNoise = false;
    bool checkPsd = true;
    int threads = 0;
    int landmarks = 40;
    bool agents = true;
    double sensingRadius = 0.0;
    std::string outDir;
};

std::string defaultOutDir() {
    if (const char* env = std::getenv("DYNSLAM_OUT_DIR")) return env;
    return "out";
}

json configToJson(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["runs"] = c.runs;
    j["noise"] = c.allLevels ? json("all") : json({c.level.process, c.level.measurement});
    j["backend"] = c.backend;
    j["drop_history"] = c.dropHistory;
    j["smoothing"] = c.smoothing;
    j["zero_noise"] = c.zeroNoise;
    j["check_psd"] = c.checkPsd;
    j["threads"] = c.threads;
    j["scenario"]["landmarks"] = c.landmarks;
    j["scenario"]["agents"] = c.agents;
    j["scenario"]["sensing_radius"] = c.sensingRadius;
    return j;
}

void configFromJson(const json& j, RunConfig& c) {
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("runs")) c.runs = j["runs"].get<int>();
    if (j.contains("noise")) {
        if (j["noise"].is_string()) {
            c.allLevels = j["noise"].get<std::string>() == "all";
        } else {
            c.allLevels = false;
            c.level.process = j["noise"][0].get<int>();
            c.level.measurement = j["noise"][1].get<int>();
        }
    }
    if (j.contains("backend")) c.backend = j["backend"].get<std::string>();
    if (j.contains("drop_history")) c.dropHistory = j["drop_history"].get<bool>();
    if (j.contains("smoothing")) c.smoothing = j["smoothing"].get<bool>();
    if (j.contains("zero_noise")) c.zeroNoise = j["zero_noise"].get<bool>();
    if (j.contains("check_psd")) c.checkPsd = j["check_psd"].get<bool>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
    if (j.contains("scenario")) {
        const auto& s = j["scenario"];
        if (s.contains("landmarks")) c.landmarks = s["landmarks"].get<int>();
        if (s.contains("agents")) c.agents = s["agents"].get<bool>();
        if (s.contains("sensing_radius")) c.sensingRadius = s["sensing_radius"].get<double>();
    }
}

bool parseNoiseSpec(const std::string& text, RunConfig& c) {
    if (text == "all") {
        c.allLevels = true;
        return true;
    }
    int i = 0, j = 0;
    if (std::sscanf(text.c_str(), "%d,%d", &i, &j) != 2) return false;
    if (i < 1 || i > 3 || j < 1 || j > 3) return false;
    c.allLevels = false;
    c.level = {i, j};
    return true;
}

ScenarioOptions scenarioOptions(const RunConfig& c) {
    ScenarioOptions options;
    options.landmarkCount = c.landmarks;
    options.includeAgents = c.agents;
    options.sensingRadius = c.sensingRadius;
    return options;
}

FilterOptions filterOptions(const RunConfig& c) {
    FilterOptions options;
    options.dropObjectHistory = c.dropHistory;
    options.enableSmoothing = c.smoothing;
    return options;
}

std::string axisCell(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6e", v);
    return buf;
}

void writeConfigHeader(std::ofstream& os, const RunConfig& c) {
    os << "# dynslam " << kVersion << "\n";
    os << "# config: " << configToJson(c).dump() << "\n";
}

void writeRmsCsv(const fs::path& path, const RunConfig& c,
                 const std::vector<std::pair<NoiseLevelPair, RmsReport>>& rows,
                 const Scenario& scenario) {
    std::ofstream os(path);
    writeConfigHeader(os, c);
    os << "noise_w,noise_v,axis";
    os << ",ego,static_features";
    for (const auto& agent : scenario.agents) os << "," << agent.name << "_features";
    for (const auto& agent : scenario.agents) os << "," << agent.name << "_poses";
    os << "\n";
    for (const auto& [level, rms] : rows) {
        const std::array<std::string, 3> axes{"x_m", "y_m", "theta_rad"};
        for (int axis = 0; axis < 3; ++axis) {
            os << level.process << "," << level.measurement << "," << axes[axis];
            auto cell = [&](const GroupRms& g) {
                if (axis == 0) return axisCell(g.x);
                if (axis == 1) return axisCell(g.y);
                return g.hasTheta ? axisCell(g.theta) : std::string("N/A");
            };
            os << "," << cell(rms.ego) << "," << cell(rms.staticFeatures);
            for (const auto& g : rms.agentFeatures) os << "," << cell(g);
            for (const auto& g : rms.agentPoses) os << "," << cell(g);
            os << "\n";
        }
    }
}

int cmdRun(RunConfig config) {
    const Scenario scenario = buildScenario(config.seed, scenarioOptions(config));
    std::vector<NoiseLevelPair> levels;
    if (config.allLevels) {
        for (int w = 1; w <= 3; ++w)
            for (int v = 1; v <= 3; ++v) levels.push_back({w, v});
    } else {
        levels.push_back(config.level);
    }

    fs::create_directories(config.outDir);
    json manifest;
    manifest["tool"] = "dynslam";
    manifest["version"] = kVersion;
    manifest["compiler"] = __VERSION__;
    manifest["effective_config"] = configToJson(config);
    manifest["levels"] = json::array();

    std::vector<std::string> backends;
    if (config.backend == "both") {
        backends = {"std", "opt"};
    } else {
        backends = {config.backend};
    }

    bool sawFailure = false;
    for (const auto& backend : backends) {
        std::vector<std::pair<NoiseLevelPair, RmsReport>> rows;
        for (const auto& level : levels) {
            MonteCarloOptions options;
            options.runs = config.runs;
            options.backend =
                backend == "std" ? BackendKind::Standard : BackendKind::Optimization;
            options.filter = filterOptions(config);
            options.seed = config.seed;
            options.zeroInjection = config.zeroNoise;
            options.checkPsd = config.checkPsd;
            options.collectNees = true;
            options.threads = config.threads;
            const MonteCarloResult result = runMonteCarlo(scenario, level, options);
            rows.emplace_back(level, result.rms);

            json entry;
            entry["backend"] = backend;
            entry["noise"] = {level.process, level.measurement};
            entry["psd_violations"] = result.psdViolations;
            entry["nees_mean"] = result.neesMean;
            entry["mean_step_ms"] = 1e3 * result.timing.meanStepSeconds;
            entry["max_step_ms"] = 1e3 * result.timing.maxStepSeconds;
            entry["mean_run_ms"] = 1e3 * result.timing.meanRunSeconds;
            entry["failures"] = json::array();
            for (const auto& failure : result.failures) {
                entry["failures"].push_back({{"run", failure.run},
                                             {"message", failure.message}});
                std::fprintf(stderr, "run failure: backend=%s level=(%d,%d) run=%d: %s\n",
                             backend.c_str(), level.process, level.measurement, failure.run,
                             failure.message.c_str());
                sawFailure = true;
            }
            if (result.psdViolations > 0) {
                std::fprintf(stderr, "psd violations: backend=%s level=(%d,%d) count=%d\n",
                             backend.c_str(), level.process, level.measurement,
                             result.psdViolations);
                sawFailure = true;
            }
            manifest["levels"].push_back(entry);
            std::printf("%s  (%d,%d)  ego x %.3e m  y %.3e m  theta %.3e rad  [%d runs]\n",
                        backend.c_str(), level.process, level.measurement, result.rms.ego.x,
                        result.rms.ego.y, result.rms.ego.theta,
                        config.runs - static_cast<int>(result.failures.size()));
        }
        writeRmsCsv(fs::path(config.outDir) / ("rms_" + backend + ".csv"), config, rows,
                    scenario);
    }

    if (config.backend == "both") {
        const auto agree = compareBackends(scenario, levels.front(), config.seed,
                                           filterOptions(config), config.zeroNoise);
        manifest["agreement"] = {{"noise", {levels.front().process, levels.front().measurement}},
                                 {"max_mean_dev", agree.maxMeanDev},
                                 {"max_cov_dev", agree.maxCovDev},
                                 {"steps", agree.steps}};
        std::printf("cross-backend agreement at (%d,%d): mean %.3e cov %.3e\n",
                    levels.front().process, levels.front().measurement, agree.maxMeanDev,
                    agree.maxCovDev);
        if (agree.maxMeanDev > 1e-6 || agree.maxCovDev > 1e-6) {
            std::fprintf(stderr, "cross-backend deviation exceeds 1e-6\n");
            sawFailure = true;
        }
    }

    std::ofstream(fs::path(config.outDir) / "manifest.json") << manifest.dump(2) << "\n";
    return sawFailure ? 1 : 0;
}

int cmdEquiv(uint64_t seed, int trials, double tolerance, const std::string& sigmaXi) {
    EquivalenceOptions options;
    options.seed = seed;
    options.trials = trials;
    options.tolerance = tolerance;
    if (!sigmaXi.empty()) {
        double a, b, c, d;
        if (std::sscanf(sigmaXi.c_str(), "%lf,%lf,%lf,%lf", &a, &b, &c, &d) != 4) {
            std::fprintf(stderr, "--sigma-xi expects four comma-separated entries\n");
            return 2;
        }
        options.transformNoise << a, b, c, d;
    }
    const auto reports = runEquivalenceSuite(options);
    bool failed = false;
    for (const auto& report : reports) {
        const char* status = report.skipped ? "SKIP"
                             : report.passed(options.tolerance) ? "PASS"
                                                                : "FAIL";
        std::printf("%-18s %s  trials %3d  mean dev %.3e  cov dev %.3e%s%s\n", report.name.c_str(),
                    status, report.trials, report.maxMeanDev, report.maxCovDev,
                    report.note.empty() ? "" : "  ", report.note.c_str());
        if (!report.skipped && !report.passed(options.tolerance)) failed = true;
    }
    return failed ? 1 : 0;
}

int cmdDump(RunConfig config) {
    if (config.landmarks <= 0 && !config.agents) {
        std::fprintf(stderr, "scenario has no entities to estimate\n");
        return 2;
    }
    const Scenario scenario = buildScenario(config.seed, scenarioOptions(config));
    MonteCarloOptions options;
    options.runs = 1;
    options.backend =
        config.backend == "opt" ? BackendKind::Optimization : BackendKind::Standard;
    options.filter = filterOptions(config);
    options.seed = config.seed;
    options.zeroInjection = config.zeroNoise;
    const NoiseLevelPair level = config.allLevels ? NoiseLevelPair{1, 1} : config.level;

    // one run, estimates captured per frame
    const Eigen::Matrix3d q = processNoiseLevel(level.process);
    const Eigen::Matrix2d r = measurementNoiseLevel(level.measurement);
    const Eigen::Matrix3d injQ = config.zeroNoise ? Eigen::Matrix3d::Zero() : q;
    const Eigen::Matrix2d injR = config.zeroNoise ? Eigen::Matrix2d::Zero() : r;
    NoiseModel noise;
    noise.processNoise = q;
    noise.measurementNoise = r;
    const auto frames = simulateFrames(scenario, injQ, injR, config.seed);
    FilterState filter =
        FilterState::init(scenario.egoPose[0], q, noise, filterOptions(config));
    std::vector<StepEstimates> estimates;
    for (const auto& frame : frames)
        filter.step(frame, [&](const GaussianBelief& b, const TrackRegistry& reg) {
            estimates.push_back(extractEstimates(b, reg, frame.t));
        });

    fs::create_directories(config.outDir);
    const fs::path path =
        fs::path(config.outDir) / ("trajectories_" + config.backend + ".csv");
    std::ofstream os(path);
    writeConfigHeader(os, config);
    os << "t,entity,id,sub_id,truth_x_m,truth_y_m,truth_theta_rad,est_x_m,est_y_m,"
          "est_theta_rad\n";
    char line[256];
    for (const auto& est : estimates) {
        const int t = est.t;
        const Eigen::Vector3d& ego = scenario.egoPose[t];
        std::snprintf(line, sizeof line, "%d,ego,0,0,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e\n", t, ego.x(),
                      ego.y(), ego.z(), est.ego.x(), est.ego.y(), est.ego.z());
        os << line;
        for (const auto& [id, f] : est.landmarks) {
            const Eigen::Vector2d& lm = scenario.landmarks[id];
            std::snprintf(line, sizeof line, "%d,landmark,%d,0,%.9e,%.9e,,%.9e,%.9e,\n", t, id,
                          lm.x(), lm.y(), f.x(), f.y());
            os << line;
        }
        for (const auto& obj : est.objects) {
            const auto& agent =
                *std::find_if(scenario.agents.begin(), scenario.agents.end(),
                              [&](const AgentTruth& a) { return a.id == obj.externalId; });
            for (const auto& [fid, f] : obj.features) {
                const Eigen::Vector2d truth = agent.features[t].segment<2>(2 * fid);
                std::snprintf(line, sizeof line, "%d,object_feature,%d,%d,%.9e,%.9e,,%.9e,%.9e,\n",
                              t, obj.externalId, fid, truth.x(), truth.y(), f.x(), f.y());
                os << line;
            }
            const Eigen::Vector3d poseTruth = agent.poseFromEpoch(obj.epoch, t);
            if (obj.pose) {
                std::snprintf(line, sizeof line, "%d,object_pose,%d,0,%.9e,%.9e,%.9e,%.9e,%.9e,%.9e\n",
                              t, obj.externalId, poseTruth.x(), poseTruth.y(), poseTruth.z(),
                              obj.pose->x(), obj.pose->y(), obj.pose->z());
            } else {
                std::snprintf(line, sizeof line, "%d,object_pose,%d,0,%.9e,%.9e,%.9e,,,\n", t,
                              obj.externalId, poseTruth.x(), poseTruth.y(), poseTruth.z());
            }
            os << line;
        }
    }
    std::printf("wrote %s\n", path.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic-SLAM backend experiments"};
    app.require_subcommand(1);

    RunConfig flags;  // values provided on the command line
    flags.outDir = defaultOutDir();

    std::string noiseSpec, configPath, manifestPath;
    std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> overrides;

    auto addCommonOptions = [&](CLI::App* cmd) {
        auto bind = [&](CLI::Option* opt, std::function<void(RunConfig&)> apply) {
            overrides.emplace_back(opt, std::move(apply));
        };
        bind(cmd->add_option("--seed", flags.seed, "scenario and noise seed"),
             [&](RunConfig& c) { c.seed = flags.seed; });
        bind(cmd->add_option("--noise", noiseSpec,
                             "noise levels: i,j with i,j in 1..3, or 'all'"),
             [](RunConfig&) {});  // applied via parseNoiseSpec after merging
        bind(cmd->add_option("--backend", flags.backend, "std | opt | both")
                 ->check(CLI::IsMember({"std", "opt", "both"})),
             [&](RunConfig& c) { c.backend = flags.backend; });
        bind(cmd->add_option("--drop-history", flags.dropHistory,
                             "keep only the three most recent object poses")
                 ->transform(
                     CLI::IsMember(std::map<std::string, bool>{{"on", true}, {"off", false}})),
             [&](RunConfig& c) { c.dropHistory = flags.dropHistory; });
        bind(cmd->add_option("--smoothing", flags.smoothing, "object pose smoothing factor")
                 ->transform(
                     CLI::IsMember(std::map<std::string, bool>{{"on", true}, {"off", false}})),
             [&](RunConfig& c) { c.smoothing = flags.smoothing; });
        bind(cmd->add_option("--out", flags.outDir, "output directory"),
             [&](RunConfig& c) { c.outDir = flags.outDir; });
        bind(cmd->add_option("--landmarks", flags.landmarks, "landmark count"),
             [&](RunConfig& c) { c.landmarks = flags.landmarks; });
        bind(cmd->add_flag("--no-agents", "scenario without moving objects"),
             [](RunConfig& c) { c.agents = false; });
        bind(cmd->add_option("--sensing-radius", flags.sensingRadius,
                             "limit sensing range in meters (0 = unlimited)"),
             [&](RunConfig& c) { c.sensingRadius = flags.sensingRadius; });
        bind(cmd->add_flag("--zero-noise", "noiseless data, filter keeps its model"),
             [](RunConfig& c) { c.zeroNoise = true; });
    };

    auto* run = app.add_subcommand("run", "Monte Carlo estimation runs and RMS reports");
    addCommonOptions(run);
    overrides.emplace_back(run->add_option("--runs", flags.runs,
                                           "independent runs per noise level")
                               ->check(CLI::PositiveNumber),
                           [&](RunConfig& c) { c.runs = flags.runs; });
    overrides.emplace_back(run->add_option("--threads", flags.threads,
                                           "worker threads (0 = hardware)"),
                           [&](RunConfig& c) { c.threads = flags.threads; });
    overrides.emplace_back(
        run->add_option("--check-psd", flags.checkPsd, "validate every covariance snapshot")
            ->transform(CLI::IsMember(std::map<std::string, bool>{{"on", true}, {"off", false}})),
        [&](RunConfig& c) { c.checkPsd = flags.checkPsd; });
    run->add_option("--config", configPath, "JSON config file (flags override)");
    run->add_option("--from-manifest", manifestPath, "re-run the config embedded in a manifest");

    uint64_t equivSeed = 1;
    int equivTrials = 100;
    double equivTol = 1e-8;
    std::string sigmaXi;
    auto* equiv = app.add_subcommand("equiv", "randomized sub-block equivalence suite");
    equiv->add_option("--seed", equivSeed, "suite seed");
    equiv->add_option("--trials", equivTrials, "states per sub-block")
        ->check(CLI::NonNegativeNumber);
    equiv->add_option("--tol", equivTol, "max relative deviation");
    equiv->add_option("--sigma-xi", sigmaXi, "transform covariance entries a,b,c,d");

    auto* dump = app.add_subcommand("dump", "write truth and estimate trajectories");
    addCommonOptions(dump);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    // defaults, then config file / manifest, then explicitly given flags
    auto mergedConfig = [&]() -> RunConfig {
        RunConfig config;
        config.outDir = defaultOutDir();
        if (!manifestPath.empty()) {
            std::ifstream is(manifestPath);
            if (!is) throw UsageError("cannot read manifest " + manifestPath);
            configFromJson(json::parse(is).at("effective_config"), config);
        }
        if (!configPath.empty()) {
            std::ifstream is(configPath);
            if (!is) throw UsageError("cannot read config " + configPath);
            configFromJson(json::parse(is), config);
        }
        for (const auto& [opt, apply] : overrides)
            if (opt->count() > 0) apply(config);
        if (!noiseSpec.empty() && !parseNoiseSpec(noiseSpec, config))
            throw UsageError("bad --noise value '" + noiseSpec + "'");
        return config;
    };

    try {
        if (run->parsed()) return cmdRun(mergedConfig());
        if (equiv->parsed()) return cmdEquiv(equivSeed, equivTrials, equivTol, sigmaXi);
        if (dump->parsed()) return cmdDump(mergedConfig());
    } catch (const UsageError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

#include "dynslam/models.hpp"

#include <Eigen/Eigenvalues>

namespace dynslam {

namespace {

void requireSpd(const Eigen::MatrixXd& m, const char* name) {
    if ((m - m.transpose()).norm() > 1e-12 * std::max(m.norm(), 1e-300))
        throw NumericError(std::string(name) + " covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() <= 0.0)
        throw NumericError(std::string(name) + " covariance is not positive definite");
}

}  // namespace

void NoiseModel::validate() const {
    requireSpd(processNoise, "process");
    requireSpd(measurementNoise, "measurement");
    requireSpd(transformNoise, "transform");
    requireSpd(smoothingNoise, "smoothing");
    if (!(degenerateRotationVariance > 0.0))
        throw NumericError("degenerate rotation variance must be positive");
}

}  // namespace dynslam

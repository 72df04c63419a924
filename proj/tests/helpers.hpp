#pragma once

#include <Eigen/Dense>
#include <functional>
#include <random>

// Shared test utilities: a central finite-difference jacobian (the
// independent oracle for every analytic jacobian), relative comparison
// helpers, and small random generators.

namespace testutil {

inline Eigen::MatrixXd finiteDifferenceJacobian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
    double step = 1e-6) {
    const Eigen::VectorXd f0 = f(x);
    Eigen::MatrixXd jac(f0.size(), x.size());
    for (int i = 0; i < x.size(); ++i) {
        Eigen::VectorXd hi = x, lo = x;
        hi[i] += step;
        lo[i] -= step;
        jac.col(i) = (f(hi) - f(lo)) / (2.0 * step);
    }
    return jac;
}

inline double relErr(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1.0});
    return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline double relErrVec(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1.0});
    return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline Eigen::MatrixXd randomSpd(std::mt19937_64& rng, int n, double scale = 1.0) {
    std::normal_distribution<double> gauss;
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = gauss(rng);
    return scale * (a * a.transpose() / n + 0.3 * Eigen::MatrixXd::Identity(n, n));
}

inline Eigen::VectorXd randomVec(std::mt19937_64& rng, int n, double scale = 1.0) {
    std::normal_distribution<double> gauss;
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = scale * gauss(rng);
    return v;
}

}  // namespace testutil

#pragma once

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <array>
#include <cmath>
#include <numbers>

#include "dynslam/errors.hpp"

// 2-D driving models: additive ego dynamics on (x, y, heading), a body-frame
// position sensor, its inverse, a rigid object transform about the time-0
// cloud centroid, its least-squares inverse (Wahba/Procrustes), and a
// second-difference pose smoothness residual. All maps are templated on the
// scalar and come with analytic Jacobians.

namespace dynslam {

inline constexpr int kPoseDim = 3;
inline constexpr int kFeatureDim = 2;

template <typename S> using Vec2 = Eigen::Matrix<S, 2, 1>;
template <typename S> using Vec3 = Eigen::Matrix<S, 3, 1>;
template <typename S> using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S> using Mat2 = Eigen::Matrix<S, 2, 2>;
template <typename S> using Mat3 = Eigen::Matrix<S, 3, 3>;
template <typename S> using Mat23 = Eigen::Matrix<S, 2, 3>;
template <typename S> using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Wrap an angle to (-pi, pi].
template <typename S>
S wrapAngle(S a) {
    const S pi = std::numbers::pi_v<S>;
    S r = std::remainder(a, S(2) * pi);
    if (r <= -pi) r += S(2) * pi;
    return r;
}

/// Counter-clockwise rotation by `theta`.
template <typename S>
Mat2<S> rotation(S theta) {
    const S c = std::cos(theta), s = std::sin(theta);
    Mat2<S> r;
    r << c, -s, s, c;
    return r;
}

// --- ego dynamics: g(x, u) = x + u, heading re-wrapped ---

template <typename S>
Vec3<S> egoDynamics(const Vec3<S>& pose, const Vec3<S>& odom) {
    Vec3<S> out = pose + odom;
    out.z() = wrapAngle(out.z());
    return out;
}

/// d g / d x is the identity (additive odometry).
template <typename S>
Mat3<S> egoDynamicsJacobian() {
    return Mat3<S>::Identity();
}

// --- measurement: h(x, f) = R(x3)^T (f - x12), expressed in the body frame ---

template <typename S>
Vec2<S> measure(const Vec3<S>& pose, const Vec2<S>& feature) {
    const S c = std::cos(pose.z()), s = std::sin(pose.z());
    const Vec2<S> d = feature - pose.template head<2>();
    return Vec2<S>(c * d.x() + s * d.y(), -s * d.x() + c * d.y());
}

template <typename S>
Mat23<S> measureJacobianPose(const Vec3<S>& pose, const Vec2<S>& feature) {
    const S c = std::cos(pose.z()), s = std::sin(pose.z());
    const Vec2<S> h = measure(pose, feature);
    Mat23<S> j;
    j << -c, -s, h.y(),
          s, -c, -h.x();
    return j;
}

template <typename S>
Mat2<S> measureJacobianFeature(const Vec3<S>& pose, const Vec2<S>& /*feature*/) {
    const S c = std::cos(pose.z()), s = std::sin(pose.z());
    Mat2<S> j;
    j << c, s, -s, c;
    return j;
}

// --- inverse measurement: l(x, z) with h(x, l(x, z)) = z ---

template <typename S>
Vec2<S> inverseMeasure(const Vec3<S>& pose, const Vec2<S>& z) {
    const S c = std::cos(pose.z()), s = std::sin(pose.z());
    return Vec2<S>(pose.x() + c * z.x() - s * z.y(),
                   pose.y() + s * z.x() + c * z.y());
}

template <typename S>
Mat23<S> inverseMeasureJacobianPose(const Vec3<S>& pose, const Vec2<S>& z) {
    const S c = std::cos(pose.z()), s = std::sin(pose.z());
    Mat23<S> j;
    j << 1, 0, -s * z.x() - c * z.y(),
         0, 1,  c * z.x() - s * z.y();
    return j;
}

template <typename S>
Mat2<S> inverseMeasureJacobianMeasurement(const Vec3<S>& pose, const Vec2<S>& /*z*/) {
    return rotation(pose.z());
}

// --- rigid object transform about the time-0 centroid ---
//
// Clouds are flat vectors (f1x, f1y, f2x, f2y, ...). The transform rotates
// every feature about the cloud centroid and translates by (xi1, xi2).

template <typename S>
Vec2<S> cloudCentroid(const VecX<S>& cloud) {
    if (cloud.size() == 0 || cloud.size() % kFeatureDim != 0)
        throw ModelError("cloud must be a non-empty flat vector of 2-D features");
    const Eigen::Index n = cloud.size() / kFeatureDim;
    Vec2<S> c = Vec2<S>::Zero();
    for (Eigen::Index j = 0; j < n; ++j) c += cloud.template segment<2>(2 * j);
    return c / S(n);
}

template <typename S>
VecX<S> objectTransform(const Vec3<S>& xi, const VecX<S>& cloud) {
    const Vec2<S> c = cloudCentroid(cloud);
    const Mat2<S> r = rotation(xi.z());
    const Eigen::Index n = cloud.size() / kFeatureDim;
    VecX<S> out(cloud.size());
    for (Eigen::Index j = 0; j < n; ++j)
        out.template segment<2>(2 * j) =
            r * (cloud.template segment<2>(2 * j) - c) + c + xi.template head<2>();
    return out;
}

/// d g_o / d xi, shape (2n x 3).
template <typename S>
MatX<S> objectTransformJacobianPose(const Vec3<S>& xi, const VecX<S>& cloud) {
    const Vec2<S> c = cloudCentroid(cloud);
    const S ct = std::cos(xi.z()), st = std::sin(xi.z());
    Mat2<S> dr;  // d R / d theta
    dr << -st, -ct, ct, -st;
    const Eigen::Index n = cloud.size() / kFeatureDim;
    MatX<S> j = MatX<S>::Zero(2 * n, 3);
    for (Eigen::Index k = 0; k < n; ++k) {
        j.template block<2, 2>(2 * k, 0).setIdentity();
        j.template block<2, 1>(2 * k, 2) = dr * (cloud.template segment<2>(2 * k) - c);
    }
    return j;
}

/// d g_o / d f0, shape (2n x 2n). Off-diagonal blocks enter through the centroid.
template <typename S>
MatX<S> objectTransformJacobianCloud(const Vec3<S>& xi, const VecX<S>& cloud) {
    cloudCentroid(cloud);  // validates
    const Mat2<S> r = rotation(xi.z());
    const Eigen::Index n = cloud.size() / kFeatureDim;
    const Mat2<S> shared = (Mat2<S>::Identity() - r) / S(n);
    MatX<S> j(2 * n, 2 * n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
            j.template block<2, 2>(2 * a, 2 * b) = (a == b) ? Mat2<S>(r + shared) : shared;
    return j;
}

// --- inverse object transform: least-squares rigid alignment of two clouds ---

template <typename S>
struct Alignment {
    Vec3<S> xi;
    bool degenerate;  // rotation unobservable (single feature or coincident cloud)
};

namespace detail {
// Centered coordinates and the alignment trig sums
//   sc = sum a.b,  ss = sum (a x b)
// whose atan2 is the optimal rotation. Kept together so the jacobians and the
// SVD path agree on degeneracy.
template <typename S>
struct AlignmentWork {
    Eigen::Index n;
    MatX<S> a, b;  // n x 2, centered
    S sc, ss, spreadA, spreadB;
};

template <typename S>
AlignmentWork<S> alignmentWork(const VecX<S>& initial, const VecX<S>& current) {
    if (initial.size() != current.size())
        throw ModelError("cloud size mismatch between initial and current clouds");
    const Eigen::Index n = initial.size() / kFeatureDim;
    cloudCentroid(initial);
    AlignmentWork<S> w;
    w.n = n;
    w.a.resize(n, 2);
    w.b.resize(n, 2);
    Vec2<S> ca = cloudCentroid(initial), cb = cloudCentroid(current);
    for (Eigen::Index j = 0; j < n; ++j) {
        w.a.row(j) = (initial.template segment<2>(2 * j) - ca).transpose();
        w.b.row(j) = (current.template segment<2>(2 * j) - cb).transpose();
    }
    w.sc = (w.a.array() * w.b.array()).sum();
    w.ss = (w.a.col(0).array() * w.b.col(1).array() -
            w.a.col(1).array() * w.b.col(0).array()).sum();
    w.spreadA = w.a.squaredNorm();
    w.spreadB = w.b.squaredNorm();
    return w;
}

template <typename S>
bool alignmentDegenerate(const AlignmentWork<S>& w) {
    return w.n < 2 || w.spreadA < S(1e-18) || w.spreadB < S(1e-18);
}
}  // namespace detail

/// Least-squares rigid alignment: xi with current ~ g_o(xi, initial).
/// Rotation from the SVD of the centered cross-covariance with determinant
/// correction; translation is the centroid difference. A degenerate cloud
/// gets theta = 0 and the flag set.
template <typename S>
Alignment<S> inverseObjectTransform(const VecX<S>& initial, const VecX<S>& current) {
    const auto w = detail::alignmentWork(initial, current);
    Alignment<S> out;
    out.degenerate = detail::alignmentDegenerate(w);
    S theta = S(0);
    if (!out.degenerate) {
        const MatX<S> m = w.a.transpose() * w.b;  // 2x2 cross-covariance
        Eigen::JacobiSVD<Mat2<S>> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat2<S> corr = Mat2<S>::Identity();
        corr(1, 1) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < S(0) ? S(-1) : S(1);
        const Mat2<S> r = svd.matrixV() * corr * svd.matrixU().transpose();
        theta = std::atan2(r(1, 0), r(0, 0));
    }
    const Vec2<S> t = cloudCentroid(current) - cloudCentroid(initial);
    out.xi = Vec3<S>(t.x(), t.y(), theta);
    return out;
}

template <typename S>
struct AlignmentJacobians {
    MatX<S> wrtInitial;  // 3 x 2n
    MatX<S> wrtCurrent;  // 3 x 2n
};

/// Analytic derivatives of the rigid alignment. Translation rows are the
/// centroid derivatives; the rotation row differentiates
/// theta = atan2(ss, sc). Throws on clouds whose rotation is unobservable.
template <typename S>
AlignmentJacobians<S> inverseObjectTransformJacobians(const VecX<S>& initial,
                                                      const VecX<S>& current) {
    const auto w = detail::alignmentWork(initial, current);
    if (detail::alignmentDegenerate(w))
        throw ModelError("alignment jacobians undefined for a degenerate cloud");
    const S d = w.sc * w.sc + w.ss * w.ss;
    AlignmentJacobians<S> out;
    out.wrtInitial = MatX<S>::Zero(3, 2 * w.n);
    out.wrtCurrent = MatX<S>::Zero(3, 2 * w.n);
    const S inv = S(1) / S(w.n);
    for (Eigen::Index m = 0; m < w.n; ++m) {
        out.wrtInitial(0, 2 * m) = -inv;
        out.wrtInitial(1, 2 * m + 1) = -inv;
        out.wrtCurrent(0, 2 * m) = inv;
        out.wrtCurrent(1, 2 * m + 1) = inv;
        // d theta / d f0_m and d theta / d ft_m; centering terms cancel
        // because the opposite cloud's centered coordinates sum to zero.
        out.wrtInitial(2, 2 * m) = (w.sc * w.b(m, 1) - w.ss * w.b(m, 0)) / d;
        out.wrtInitial(2, 2 * m + 1) = (-w.sc * w.b(m, 0) - w.ss * w.b(m, 1)) / d;
        out.wrtCurrent(2, 2 * m) = (-w.sc * w.a(m, 1) - w.ss * w.a(m, 0)) / d;
        out.wrtCurrent(2, 2 * m + 1) = (w.sc * w.a(m, 0) - w.ss * w.a(m, 1)) / d;
    }
    return out;
}

// --- pose smoothness: second difference with wrap-aware heading ---

template <typename S>
Vec3<S> smoothingResidual(const Vec3<S>& a, const Vec3<S>& b, const Vec3<S>& c) {
    Vec3<S> d1 = b - a, d2 = c - b;
    d1.z() = wrapAngle(d1.z());
    d2.z() = wrapAngle(d2.z());
    return d2 - d1;
}

/// d s / d (xi_a, xi_b, xi_c) = (I, -2 I, I), constant almost everywhere.
template <typename S>
std::array<Mat3<S>, 3> smoothingJacobians() {
    return {Mat3<S>::Identity(), S(-2) * Mat3<S>::Identity(), Mat3<S>::Identity()};
}

// --- noise model for the filter backends ---

struct NoiseModel {
    Eigen::Matrix3d processNoise;                                    // odometry, m^2/m^2/rad^2
    Eigen::Matrix2d measurementNoise;                                // body-frame sensor, m^2
    Eigen::Matrix2d transformNoise = 0.1 * Eigen::Matrix2d::Identity();  // rigid-transform slack per feature
    Eigen::Matrix3d smoothingNoise = 0.1 * Eigen::Matrix3d::Identity();
    // Variance assigned to the rotation of a single-feature object, whose
    // heading is unobservable and pinned to zero.
    double degenerateRotationVariance = 0.1;

    /// Throws NumericError unless every covariance is symmetric positive definite.
    void validate() const;
};

}  // namespace dynslam

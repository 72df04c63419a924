#pragma once

#include <Eigen/Core>
#include <compare>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dynslam/errors.hpp"

// Quadratic costs over a flat state: semantic variable layouts, Gaussian
// beliefs, whitened residual stacking, a single Gauss-Newton step, and
// marginalization by Schur complement. Everything is dense; state dimensions
// here stay in the low hundreds.

namespace dynslam {

enum class VarKind : std::uint8_t { EgoPose, StaticFeature, ObjectFeature, ObjectPose };

/// Semantic identity of one state block.
struct VariableKey {
    VarKind kind = VarKind::EgoPose;
    std::int32_t time = 0;    // ObjectFeature: 0 or the current frame; ObjectPose: frame
    std::int32_t object = 0;  // object index, when applicable
    std::int32_t index = 0;   // feature index, when applicable

    friend auto operator<=>(const VariableKey&, const VariableKey&) = default;

    static VariableKey egoPose(int time = 0) { return {VarKind::EgoPose, time, 0, 0}; }
    static VariableKey staticFeature(int k) { return {VarKind::StaticFeature, 0, 0, k}; }
    static VariableKey objectFeature(int time, int object, int k) {
        return {VarKind::ObjectFeature, time, object, k};
    }
    static VariableKey objectPose(int time, int object) {
        return {VarKind::ObjectPose, time, object, 0};
    }
};

std::string formatKey(const VariableKey& key);

/// Ordered, contiguous index ranges for a set of unique variable keys.
class VariableLayout {
public:
    VariableLayout() = default;

    /// Appends a block; throws LayoutError on duplicate keys or dim < 1.
    int append(const VariableKey& key, int dim);

    int dim() const { return dim_; }
    int blockCount() const { return static_cast<int>(keys_.size()); }
    bool contains(const VariableKey& key) const;

    int offsetOf(const VariableKey& key) const;  // throws LayoutError if absent
    int dimOf(const VariableKey& key) const;
    int blockIndexOf(const VariableKey& key) const;

    const std::vector<VariableKey>& keys() const { return keys_; }
    int offsetAt(int block) const { return offsets_[block]; }
    int dimAt(int block) const { return dims_[block]; }

    /// True when the other layout holds the same (key, dim) blocks in any order.
    bool isPermutationOf(const VariableLayout& other) const;

private:
    std::vector<VariableKey> keys_;
    std::vector<int> dims_;
    std::vector<int> offsets_;
    int dim_ = 0;
};

/// Gaussian over a laid-out flat state.
struct GaussianBelief {
    VariableLayout layout;
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    Eigen::VectorXd blockMean(const VariableKey& key) const;

    /// Checks sizes, symmetry (relative Frobenius) and positive
    /// semidefiniteness (min eigenvalue >= -psdTol * max eigenvalue).
    /// Throws NumericError on violation.
    void validate(double symTol = 1e-9, double psdTol = 1e-9) const;
};

/// One squared-Mahalanobis cost term. The residual and jacobian act on the
/// concatenated sub-state of `keys`, in that order; `noise` is the term's
/// SPD covariance, applied as a symmetric inverse square root when stacking.
struct ResidualTerm {
    std::vector<VariableKey> keys;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> residual;
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian;
    Eigen::MatrixXd noise;
};

struct StackedSystem {
    Eigen::VectorXd c;    // whitened residuals
    Eigen::MatrixXd jac;  // whitened jacobian, (sum d_r) x layout.dim()
};

/// Symmetric inverse square root of an SPD matrix; throws NumericError if
/// the matrix is not positive definite.
Eigen::MatrixXd symmetricInverseSqrt(const Eigen::MatrixXd& m);

/// Gathers the concatenated sub-state of `keys` out of a flat vector.
Eigen::VectorXd gatherSubState(const Eigen::VectorXd& point, const VariableLayout& layout,
                               std::span<const VariableKey> keys);

/// Evaluates every term at `point`, whitens by the inverse square root of its
/// noise, and scatters jacobian columns into the full state width.
StackedSystem stackResiduals(std::span<const ResidualTerm> terms, const VariableLayout& layout,
                             const Eigen::VectorXd& point);

enum class SolveMode { Strict, Pseudoinverse };

/// One Gauss-Newton step about `linPoint`:
///   cov  = (J^T J)^-1            (pseudoinverse when permitted)
///   mean = linPoint - cov J^T C
/// Strict mode reports rank-deficient normal matrices as SingularityError.
GaussianBelief gaussNewtonStep(std::span<const ResidualTerm> terms, const VariableLayout& layout,
                               const Eigen::VectorXd& linPoint, SolveMode mode = SolveMode::Strict);

/// Eliminates `margKeys` from the quadratic cost about `linPoint`, keeping the
/// exact marginal of the linearized model over `keepKeys`:
///   P    = I - J_M (J_M^T J_M)^-1 J_M^T
///   cov  = (J_K^T P J_K)^-1
///   mean = keep part of linPoint - cov J_K^T P C
GaussianBelief marginalize(std::span<const ResidualTerm> terms, const VariableLayout& layout,
                           std::span<const VariableKey> keepKeys,
                           std::span<const VariableKey> margKeys,
                           const Eigen::VectorXd& linPoint);

/// Permutes a belief's blocks into `newLayout`; the inverse permutation
/// restores the input bit-exactly.
GaussianBelief reorder(const GaussianBelief& belief, const VariableLayout& newLayout);

/// Deletes blocks outright (dropping, not marginalizing). For a plain
/// Gaussian belief the two coincide.
GaussianBelief dropBlocks(const GaussianBelief& belief, std::span<const VariableKey> keys);

/// State order used by the filters: ego pose, static features, object
/// features (initial epoch before current, grouped by object), object poses
/// (by time, then object).
VariableLayout canonicalLayout(const VariableLayout& layout);

/// Renames one block without touching values.
GaussianBelief renameKey(const GaussianBelief& belief, const VariableKey& from,
                         const VariableKey& to);

}  // namespace dynslam

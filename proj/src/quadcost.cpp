#include "dynslam/quadcost.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <sstream>

namespace dynslam {

namespace {

const char* kindName(VarKind kind) {
    switch (kind) {
        case VarKind::EgoPose: return "ego";
        case VarKind::StaticFeature: return "static";
        case VarKind::ObjectFeature: return "objfeat";
        case VarKind::ObjectPose: return "objpose";
    }
    return "?";
}

// Canonical sort key: ego pose, static features by index, object features by
// (time, object, index) so the initial epoch precedes the current one, then
// object poses by (time, object).
std::tuple<int, int, int, int> canonicalRank(const VariableKey& k) {
    switch (k.kind) {
        case VarKind::EgoPose: return {0, k.time, 0, 0};
        case VarKind::StaticFeature: return {1, k.index, 0, 0};
        case VarKind::ObjectFeature: return {2, k.time, k.object, k.index};
        case VarKind::ObjectPose: return {3, k.time, k.object, 0};
    }
    return {4, 0, 0, 0};
}

struct EvaluatedTerm {
    Eigen::VectorXd c;
    Eigen::MatrixXd jac;
    const ResidualTerm* term;
};

}  // namespace

std::string formatKey(const VariableKey& key) {
    std::ostringstream os;
    os << kindName(key.kind) << "(t=" << key.time << ",o=" << key.object
       << ",k=" << key.index << ")";
    return os.str();
}

int VariableLayout::append(const VariableKey& key, int dim) {
    if (dim < 1) throw LayoutError("block dimension must be positive for " + formatKey(key));
    if (contains(key)) throw LayoutError("duplicate key in layout: " + formatKey(key));
    keys_.push_back(key);
    dims_.push_back(dim);
    offsets_.push_back(dim_);
    dim_ += dim;
    return static_cast<int>(keys_.size()) - 1;
}

bool VariableLayout::contains(const VariableKey& key) const {
    return std::find(keys_.begin(), keys_.end(), key) != keys_.end();
}

int VariableLayout::blockIndexOf(const VariableKey& key) const {
    const auto it = std::find(keys_.begin(), keys_.end(), key);
    if (it == keys_.end()) throw LayoutError("unknown key: " + formatKey(key));
    return static_cast<int>(it - keys_.begin());
}

int VariableLayout::offsetOf(const VariableKey& key) const { return offsets_[blockIndexOf(key)]; }

int VariableLayout::dimOf(const VariableKey& key) const { return dims_[blockIndexOf(key)]; }

bool VariableLayout::isPermutationOf(const VariableLayout& other) const {
    if (blockCount() != other.blockCount() || dim() != other.dim()) return false;
    auto mine = keys_;
    auto theirs = other.keys_;
    std::sort(mine.begin(), mine.end());
    std::sort(theirs.begin(), theirs.end());
    if (mine != theirs) return false;
    for (const auto& key : keys_)
        if (dimOf(key) != other.dimOf(key)) return false;
    return true;
}

Eigen::VectorXd GaussianBelief::blockMean(const VariableKey& key) const {
    return mean.segment(layout.offsetOf(key), layout.dimOf(key));
}

void GaussianBelief::validate(double symTol, double psdTol) const {
    const int d = layout.dim();
    if (mean.size() != d || cov.rows() != d || cov.cols() != d)
        throw NumericError("belief dimensions disagree with layout");
    if (!mean.allFinite() || !cov.allFinite())
        throw NumericError("belief has non-finite entries");
    const double scale = std::max(cov.norm(), 1e-300);
    if ((cov - cov.transpose()).norm() > symTol * scale)
        throw NumericError("covariance is not symmetric within tolerance");
    // Cheap exact test first: an LDLT with nonnegative pivots proves PSD.
    const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
    Eigen::LDLT<Eigen::MatrixXd> ldlt(sym);
    if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() >= 0.0).all()) return;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = std::max(eig.eigenvalues().maxCoeff(), 0.0);
    if (lo < -psdTol * std::max(hi, 1e-300))
        throw NumericError("covariance has negative eigenvalue " + std::to_string(lo));
}

Eigen::MatrixXd symmetricInverseSqrt(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols()) throw NumericError("inverse sqrt of a non-square matrix");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
    if (eig.info() != Eigen::Success)
        throw NumericError("eigendecomposition failed in symmetricInverseSqrt");
    const auto& vals = eig.eigenvalues();
    if (vals.minCoeff() <= 0.0)
        throw NumericError("matrix is not positive definite (min eigenvalue " +
                           std::to_string(vals.minCoeff()) + ")");
    return eig.eigenvectors() * vals.cwiseSqrt().cwiseInverse().asDiagonal() *
           eig.eigenvectors().transpose();
}

Eigen::VectorXd gatherSubState(const Eigen::VectorXd& point, const VariableLayout& layout,
                               std::span<const VariableKey> keys) {
    int total = 0;
    for (const auto& key : keys) total += layout.dimOf(key);
    Eigen::VectorXd sub(total);
    int at = 0;
    for (const auto& key : keys) {
        const int d = layout.dimOf(key);
        sub.segment(at, d) = point.segment(layout.offsetOf(key), d);
        at += d;
    }
    return sub;
}

StackedSystem stackResiduals(std::span<const ResidualTerm> terms, const VariableLayout& layout,
                             const Eigen::VectorXd& point) {
    if (point.size() != layout.dim())
        throw LayoutError("evaluation point does not match layout dimension");
    std::vector<EvaluatedTerm> evaluated;
    evaluated.reserve(terms.size());
    int rows = 0;
    for (const auto& term : terms) {
        const Eigen::VectorXd sub = gatherSubState(point, layout, term.keys);
        Eigen::VectorXd r = term.residual(sub);
        Eigen::MatrixXd j = term.jacobian(sub);
        if (j.rows() != r.size() || j.cols() != sub.size())
            throw NumericError("term jacobian shape disagrees with its residual");
        if (term.noise.rows() != r.size() || term.noise.cols() != r.size())
            throw NumericError("term noise covariance shape disagrees with its residual");
        const Eigen::MatrixXd w = symmetricInverseSqrt(term.noise);
        evaluated.push_back({w * r, w * j, &term});
        rows += static_cast<int>(r.size());
    }
    StackedSystem out;
    out.c.resize(rows);
    out.jac = Eigen::MatrixXd::Zero(rows, layout.dim());
    int at = 0;
    for (const auto& ev : evaluated) {
        const int dr = static_cast<int>(ev.c.size());
        out.c.segment(at, dr) = ev.c;
        int col = 0;
        for (const auto& key : ev.term->keys) {
            const int d = layout.dimOf(key);
            out.jac.block(at, layout.offsetOf(key), dr, d) += ev.jac.middleCols(col, d);
            col += d;
        }
        at += dr;
    }
    return out;
}

namespace {

constexpr double kPinvCutoff = 1e-10;  // relative to the largest eigenvalue
constexpr double kJitterScale = 1e-12;

// Inverts an SPD normal matrix. Strict mode distinguishes rank deficiency
// (reported with the numeric rank under the pseudoinverse cutoff) from plain
// conditioning failures, which get one shot of diagonal jitter.
Eigen::MatrixXd invertNormalMatrix(const Eigen::MatrixXd& n, SolveMode mode,
                                   const char* context) {
    const int d = static_cast<int>(n.rows());
    if (mode == SolveMode::Pseudoinverse) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(n);
        if (eig.info() != Eigen::Success)
            throw NumericError(std::string(context) + ": eigendecomposition failed");
        const double cutoff = kPinvCutoff * std::max(eig.eigenvalues().maxCoeff(), 0.0);
        Eigen::VectorXd inv = Eigen::VectorXd::Zero(d);
        for (int i = 0; i < d; ++i)
            if (eig.eigenvalues()[i] > cutoff) inv[i] = 1.0 / eig.eigenvalues()[i];
        return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
    }
    Eigen::LLT<Eigen::MatrixXd> llt(n);
    if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(n);
        const double cutoff = kPinvCutoff * std::max(eig.eigenvalues().maxCoeff(), 0.0);
        const int rank = static_cast<int>((eig.eigenvalues().array() > cutoff).count());
        if (rank < d)
            throw SingularityError(std::string(context) + ": normal matrix rank " +
                                       std::to_string(rank) + " of " + std::to_string(d),
                                   rank, d);
        const double jitter = kJitterScale * n.trace() / d;
        llt.compute(n + jitter * Eigen::MatrixXd::Identity(d, d));
        if (llt.info() != Eigen::Success)
            throw NumericError(std::string(context) + ": factorization failed after jitter");
    }
    Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
    return 0.5 * (inv + inv.transpose());
}

}  // namespace

GaussianBelief gaussNewtonStep(std::span<const ResidualTerm> terms, const VariableLayout& layout,
                               const Eigen::VectorXd& linPoint, SolveMode mode) {
    const StackedSystem sys = stackResiduals(terms, layout, linPoint);
    if (!sys.c.allFinite() || !sys.jac.allFinite())
        throw NumericError("non-finite residual or jacobian in Gauss-Newton step");
    const int d = layout.dim();
    Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(d, d);
    normal.selfadjointView<Eigen::Lower>().rankUpdate(sys.jac.transpose());
    normal.triangularView<Eigen::StrictlyUpper>() = normal.transpose();

    GaussianBelief out;
    out.layout = layout;
    out.cov = invertNormalMatrix(normal, mode, "gaussNewtonStep");
    out.mean = linPoint - out.cov * (sys.jac.transpose() * sys.c);
    return out;
}

GaussianBelief marginalize(std::span<const ResidualTerm> terms, const VariableLayout& layout,
                           std::span<const VariableKey> keepKeys,
                           std::span<const VariableKey> margKeys,
                           const Eigen::VectorXd& linPoint) {
    if (keepKeys.empty()) throw LayoutError("marginalize: empty keep set");
    if (static_cast<int>(keepKeys.size() + margKeys.size()) != layout.blockCount())
        throw LayoutError("marginalize: keep and marg sets must partition the layout");
    VariableLayout keepLayout;
    for (const auto& key : keepKeys) keepLayout.append(key, layout.dimOf(key));
    for (const auto& key : margKeys)
        if (keepLayout.contains(key))
            throw LayoutError("marginalize: key in both sets: " + formatKey(key));
    int margDim = 0;
    for (const auto& key : margKeys) margDim += layout.dimOf(key);

    const StackedSystem sys = stackResiduals(terms, layout, linPoint);
    if (!sys.c.allFinite() || !sys.jac.allFinite())
        throw NumericError("non-finite residual or jacobian in marginalization");

    const int rows = static_cast<int>(sys.jac.rows());
    Eigen::MatrixXd jk(rows, keepLayout.dim()), jm(rows, margDim);
    int at = 0;
    for (const auto& key : keepKeys) {
        const int d = layout.dimOf(key);
        jk.middleCols(at, d) = sys.jac.middleCols(layout.offsetOf(key), d);
        at += d;
    }
    at = 0;
    for (const auto& key : margKeys) {
        const int d = layout.dimOf(key);
        jm.middleCols(at, d) = sys.jac.middleCols(layout.offsetOf(key), d);
        at += d;
    }

    // Schur complement of the marginalized block in the normal equations.
    Eigen::MatrixXd nmm = jm.transpose() * jm;
    Eigen::LLT<Eigen::MatrixXd> llt(nmm);
    if (llt.info() != Eigen::Success) {
        const double jitter = kJitterScale * nmm.trace() / std::max<int>(margDim, 1);
        llt.compute(nmm + jitter * Eigen::MatrixXd::Identity(margDim, margDim));
        if (llt.info() != Eigen::Success)
            throw MarginalizationError("marginalized-block normal matrix is singular");
    }
    const Eigen::MatrixXd cross = jm.transpose() * jk;       // J_M^T J_K
    const Eigen::MatrixXd solved = llt.solve(cross);         // (J_M^T J_M)^-1 J_M^T J_K
    Eigen::MatrixXd schur = jk.transpose() * jk - cross.transpose() * solved;
    schur = 0.5 * (schur + schur.transpose());
    const Eigen::VectorXd grad =
        jk.transpose() * sys.c - cross.transpose() * llt.solve(jm.transpose() * sys.c);

    GaussianBelief out;
    out.layout = keepLayout;
    out.cov = invertNormalMatrix(schur, SolveMode::Strict, "marginalize");
    out.mean = gatherSubState(linPoint, layout, keepKeys) - out.cov * grad;
    return out;
}

GaussianBelief reorder(const GaussianBelief& belief, const VariableLayout& newLayout) {
    if (!newLayout.isPermutationOf(belief.layout))
        throw LayoutError("reorder: new layout is not a permutation of the old one");
    const int d = belief.layout.dim();
    std::vector<int> perm(d);
    int at = 0;
    for (const auto& key : newLayout.keys()) {
        const int off = belief.layout.offsetOf(key);
        for (int i = 0; i < belief.layout.dimOf(key); ++i) perm[at++] = off + i;
    }
    GaussianBelief out;
    out.layout = newLayout;
    out.mean.resize(d);
    out.cov.resize(d, d);
    for (int i = 0; i < d; ++i) out.mean[i] = belief.mean[perm[i]];
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) out.cov(i, j) = belief.cov(perm[i], perm[j]);
    return out;
}

GaussianBelief dropBlocks(const GaussianBelief& belief, std::span<const VariableKey> keys) {
    if (keys.empty()) return belief;
    std::vector<VariableKey> doomed(keys.begin(), keys.end());
    VariableLayout layout;
    for (const auto& key : belief.layout.keys()) {
        if (std::find(doomed.begin(), doomed.end(), key) == doomed.end())
            layout.append(key, belief.layout.dimOf(key));
    }
    if (layout.blockCount() + static_cast<int>(doomed.size()) != belief.layout.blockCount())
        throw LayoutError("dropBlocks: some keys are absent from the layout");
    std::vector<int> keep;
    for (const auto& key : layout.keys()) {
        const int off = belief.layout.offsetOf(key);
        for (int i = 0; i < belief.layout.dimOf(key); ++i) keep.push_back(off + i);
    }
    GaussianBelief out;
    out.layout = std::move(layout);
    out.mean.resize(keep.size());
    out.cov.resize(keep.size(), keep.size());
    for (size_t i = 0; i < keep.size(); ++i) {
        out.mean[i] = belief.mean[keep[i]];
        for (size_t j = 0; j < keep.size(); ++j) out.cov(i, j) = belief.cov(keep[i], keep[j]);
    }
    return out;
}

VariableLayout canonicalLayout(const VariableLayout& layout) {
    std::vector<VariableKey> keys = layout.keys();
    std::stable_sort(keys.begin(), keys.end(), [](const VariableKey& a, const VariableKey& b) {
        return canonicalRank(a) < canonicalRank(b);
    });
    VariableLayout out;
    for (const auto& key : keys) out.append(key, layout.dimOf(key));
    return out;
}

GaussianBelief renameKey(const GaussianBelief& belief, const VariableKey& from,
                         const VariableKey& to) {
    if (!belief.layout.contains(from))
        throw LayoutError("renameKey: unknown key " + formatKey(from));
    if (belief.layout.contains(to))
        throw LayoutError("renameKey: target key already present " + formatKey(to));
    VariableLayout layout;
    for (const auto& key : belief.layout.keys())
        layout.append(key == from ? to : key, belief.layout.dimOf(key));
    GaussianBelief out = belief;
    out.layout = std::move(layout);
    return out;
}

}  // namespace dynslam

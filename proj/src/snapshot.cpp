#include "dynslam/snapshot.hpp"

#include <cinttypes>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace dynslam {

namespace {

const char* kMagic = "dynslam-belief-v1";

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

int kindCode(VarKind k) { return static_cast<int>(k); }

VarKind kindFromCode(int code) {
    if (code < 0 || code > 3) throw NumericError("snapshot: bad variable kind code");
    return static_cast<VarKind>(code);
}

}  // namespace

void writeBelief(std::ostream& os, const GaussianBelief& belief) {
    const int d = belief.layout.dim();
    os << kMagic << "\n";
    os << "blocks " << belief.layout.blockCount() << " dim " << d << "\n";
    for (const auto& key : belief.layout.keys())
        os << kindCode(key.kind) << " " << key.time << " " << key.object << " " << key.index
           << " " << belief.layout.dimOf(key) << "\n";
    os << "mean\n";
    for (int i = 0; i < d; ++i) os << fmt(belief.mean[i]) << (i + 1 == d ? "\n" : " ");
    os << "cov\n";
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            os << fmt(belief.cov(i, j)) << (j + 1 == d ? "\n" : " ");
}

GaussianBelief readBelief(std::istream& is) {
    std::string magic, word;
    is >> magic;
    if (magic != kMagic) throw NumericError("snapshot: unrecognized header");
    int blocks = 0, d = 0;
    is >> word >> blocks >> word >> d;
    GaussianBelief belief;
    for (int b = 0; b < blocks; ++b) {
        int kind, time, object, index, dim;
        is >> kind >> time >> object >> index >> dim;
        belief.layout.append({kindFromCode(kind), time, object, index}, dim);
    }
    if (belief.layout.dim() != d) throw NumericError("snapshot: dimension mismatch");
    is >> word;  // "mean"
    belief.mean.resize(d);
    for (int i = 0; i < d; ++i) is >> belief.mean[i];
    is >> word;  // "cov"
    belief.cov.resize(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) is >> belief.cov(i, j);
    if (!is) throw NumericError("snapshot: truncated input");
    return belief;
}

std::string beliefToString(const GaussianBelief& belief) {
    std::ostringstream os;
    writeBelief(os, belief);
    return os.str();
}

GaussianBelief beliefFromString(const std::string& text) {
    std::istringstream is(text);
    return readBelief(is);
}

}  // namespace dynslam

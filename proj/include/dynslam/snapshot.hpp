#pragma once

#include <iosfwd>
#include <string>

#include "dynslam/quadcost.hpp"

namespace dynslam {

// Text serialization of a belief (layout, mean, covariance) for debugging and
// regression snapshots. Values use %.17g so a round-trip is bit-exact; block
// order is written exactly as laid out.

void writeBelief(std::ostream& os, const GaussianBelief& belief);
GaussianBelief readBelief(std::istream& is);

std::string beliefToString(const GaussianBelief& belief);
GaussianBelief beliefFromString(const std::string& text);

}  // namespace dynslam

#pragma once

#include <stdexcept>
#include <string>

namespace dynslam {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A variable key is unknown, duplicated, or a layout is inconsistent.
class LayoutError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, failed factorizations, invalid covariances.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A normal matrix was rank deficient in strict solve mode.
class SingularityError : public NumericError {
public:
    SingularityError(const std::string& what, int rank, int dim)
        : NumericError(what), rank_(rank), dim_(dim) {}
    int rank() const { return rank_; }
    int dim() const { return dim_; }

private:
    int rank_;
    int dim_;
};

/// The marginalized-block normal matrix could not be inverted.
class MarginalizationError : public NumericError {
public:
    using NumericError::NumericError;
};

/// A measurement refers to an unknown entity or redeclares a known one.
class AssociationError : public Error {
public:
    using Error::Error;
};

/// A model map was evaluated outside its domain (empty or degenerate cloud).
class ModelError : public Error {
public:
    using Error::Error;
};

/// A filter state lacks the variables an operation requires.
class StateError : public Error {
public:
    using Error::Error;
};

/// Metric inputs are inconsistent (length mismatch etc.).
class MetricError : public Error {
public:
    using Error::Error;
};

}  // namespace dynslam

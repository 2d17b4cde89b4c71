#pragma once

#include <stdexcept>
#include <string>

namespace ckm {

// Thrown when a requested plan or subproblem has no feasible point.
class InfeasibleError : public std::runtime_error {
public:
    explicit InfeasibleError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown on numerical breakdown (divergence, non-finite iterates).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ckm

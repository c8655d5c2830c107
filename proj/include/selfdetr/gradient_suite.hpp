#pragma once

#include <string>
#include <vector>

namespace selfdetr::gradcheck {

struct CaseResult {
    std::string name;
    double max_rel_error = 0.0;
    bool passed = false;
};

inline constexpr double kTolerance = 1e-4;

// Finite-difference checks of every differentiable operation, each wrapped
// as sum(op(x) * R) with a fixed random R so the whole Jacobian is probed.
std::vector<CaseResult> check_operations(double tolerance = kTolerance);

// Detection + feedback objective of a toy model (T=8, 4 queries, 2 classes)
// checked against central differences over every parameter entry.
CaseResult check_toy_model(double tolerance = kTolerance);

// A sigmoid whose adjoint is deliberately off by 10%; the check must fail.
CaseResult check_corrupted_adjoint(double tolerance = kTolerance);

}  // namespace selfdetr::gradcheck

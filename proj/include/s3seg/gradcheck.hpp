#pragma once

#include <string>
#include <vector>

namespace s3seg {

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckSummary {
    std::vector<GradCheckResult> results;
    bool all_pass = false;
    double elapsed_seconds = 0.0;

    /// One line per operator plus a trailing verdict line.
    std::string formatted() const;
};

/// Checks every differentiable operator against central finite differences on
/// seeded random instances: elementwise ops, reductions, softmax, the
/// convolution family, batch normalization, bilinear sampling, deformable
/// convolution, and the three losses. Relative error uses
/// |a-b| / max(|a|,|b|,1), tolerance 1e-4 (1e-3 for deformable offsets).
GradCheckSummary run_operator_suite();

}  // namespace s3seg

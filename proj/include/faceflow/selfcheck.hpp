#pragma once

#include <string>
#include <vector>

namespace faceflow {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Finite-difference gradient checks for every differentiable op plus a
// sampled end-to-end model check, all at 64-bit.
std::vector<CheckResult> run_gradient_checks();

// Exact mechanism identities and brute-force oracle comparisons (warp
// identity, fusion degeneracy, curriculum window, AUC, gallery ranking,
// checkpoint round-trip).
std::vector<CheckResult> run_oracle_checks();

// Both suites in order; used by the `verify` subcommand.
std::vector<CheckResult> run_all_checks();

}  // namespace faceflow

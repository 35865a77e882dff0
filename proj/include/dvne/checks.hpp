#pragma once

#include <functional>
#include <string>
#include <vector>

namespace dvne {

// Outcome of one invariant suite. `detail` lists the measured worst cases.
struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

// Each suite compares the library against an independent scalar oracle.
CheckResult check_geometry();
CheckResult check_volume_rendering();
CheckResult check_gradients();
CheckResult check_nnfm_and_depth();
CheckResult check_sds();
CheckResult check_deformation();
CheckResult check_deferred();

// All suites above, in order.
std::vector<CheckResult> run_invariant_checks();

// Runs `fn` and stores its wall time; exceptions become failures.
CheckResult timed_check(const std::string& name, const std::function<bool(std::string&)>& fn);

}  // namespace dvne

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace dinp {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;

  bool passed() const;
};

struct VerifyOptions {
  int gradient_probes = 100;
  double gradient_tolerance = 1e-4;
  int monte_carlo_samples = 100000;
  int pipeline_draws = 10000;
  std::uint64_t seed = 0;
};

/// Analytic vs. central-difference gradients in 64-bit for every layer type
/// and for a small end-to-end denoiser.
SuiteReport gradient_suite(const VerifyOptions& options = {});

/// Schedule invariants, closed-form vs. iterated forward process, DDIM
/// properties and guidance-rule identities.
SuiteReport schedule_suite(const VerifyOptions& options = {});

/// Masked-loss locality, initial loss level, preprocessing invariants,
/// split integrity and oversampling counts.
SuiteReport pipeline_suite(const VerifyOptions& options = {});

std::vector<SuiteReport> verify_all(const VerifyOptions& options = {});

/// One line per check; returns true iff everything passed.
bool print_reports(std::ostream& os, const std::vector<SuiteReport>& reports);

/// Relative error |a − b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-3);

}  // namespace dinp

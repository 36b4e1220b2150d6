#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace tpu::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kStudyAborted = 3, kEstimationFailure = 4 };

/// Fully resolved settings of one run; serialized into the JSON sidecar.
struct RunConfig {
  std::string command;  // simulate | analyze
  // simulate
  std::string scenario = "s1";
  std::string model;
  std::string design = "mcar";
  double rho = 0.7;
  std::size_t reps = 200;
  std::string emit_csv;
  std::size_t emit_rep = 0;
  // analyze
  std::string data;
  std::vector<std::string> outcome;
  std::vector<std::string> expensive;
  std::vector<std::string> aux;
  std::vector<std::string> adjust;
  std::string r_col = "r";
  std::string pi_col;
  std::string design_file;
  bool intercept = true;
  // shared
  std::vector<std::string> methods;
  std::size_t boot = 200;
  std::vector<double> lambda{0.005, 0.01, 0.02, 0.04};
  std::string penalty = "averaged";
  std::uint64_t seed = 1;
  std::string out;
  std::string format = "csv";
};

/// Parses argv, runs the command and returns the process exit code. Results go
/// to the --out path (or `out` when no path is given); log lines go to `log`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log);

}  // namespace tpu::cli

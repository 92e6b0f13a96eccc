#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace mededge {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitIntegrity = 3,
};

/// Entry point of the `mededge` executable; args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// gen-world -> train-dnn -> freeze -> prune -> quantize -> pack -> eval ->
/// diagnose in `dir`; returns the metrics report as JSON text. Artifacts are
/// left in `dir`. Progress goes to `log`.
std::string pipeline_smoke(std::uint64_t seed, const std::filesystem::path& dir, std::ostream& log);

}  // namespace mededge

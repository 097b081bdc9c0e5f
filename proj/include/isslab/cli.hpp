#pragma once

#include <json.hpp>

#include <ostream>
#include <string>

namespace isslab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

/// Subcommands gen-data, gradcheck, run and report.  Returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Per-method table of a metrics.json record.
std::string format_report(const nlohmann::json& metrics);

}  // namespace isslab::cli

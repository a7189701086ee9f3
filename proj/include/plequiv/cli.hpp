#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace plequiv::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kManifestName = "run_manifest.json";
inline constexpr const char* kManifestSchema = "plequiv.run_manifest.v1";

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2, kPartialFailure = 3 };

/// Configuration error; maps to exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Decimal or fraction text: "0.5", "8/255", "-1e-3".
double parse_real(std::string_view text);
/// Comma-separated parse_real values.
std::vector<double> parse_real_list(std::string_view text);

std::vector<std::string> command_names();

/// Defaults for `command` with `user` merged on top, checked and normalized.
/// Throws UsageError for unknown keys or invalid values.
nlohmann::json resolve_config(const std::string& command, const nlohmann::json& user);

/// Runs a command from a resolved config, writing its outputs and a run
/// manifest into `out_dir`. Returns an ExitCode.
int execute(const std::string& command, const nlohmann::json& config,
            const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err);

/// Re-runs the command recorded in `manifest_path` into `out_dir` and compares
/// every listed output by digest. `threads` > 0 overrides the recorded count.
int replay(const std::filesystem::path& manifest_path, const std::filesystem::path& out_dir,
           std::size_t threads, std::ostream& out, std::ostream& err);

/// Command-line entry point.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace plequiv::cli

#ifndef SFUDA_RUN_DIR_HPP
#define SFUDA_RUN_DIR_HPP

#include <cstdint>
#include <string>

namespace sfuda {

inline constexpr const char* kToolVersion = "sfuda 0.1.0";

/// First artifact every command writes; a crashed run still leaves one
/// behind identifying the attempt.
struct RunManifest {
    std::string command;
    std::string config_path;  // empty when flags-only
    std::string output_dir;
    std::uint64_t master_seed = 0;
    std::string tool_version = kToolVersion;
};

/// Creates `dir` (parents included) and writes manifest.json into it before
/// anything else happens. Refuses a non-empty existing dir unless `force`.
void init_run_dir(const std::string& dir, const RunManifest& manifest, bool force);

/// Default output root: $SFUDA_STABLE_HOME or ./sfuda_runs.
std::string default_output_root();

}  // namespace sfuda

#endif

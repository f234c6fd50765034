#include "sfuda/run_dir.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "sfuda/errors.hpp"

namespace sfuda {

namespace fs = std::filesystem;

void init_run_dir(const std::string& dir, const RunManifest& manifest, bool force) {
    const fs::path p(dir);
    if (fs::exists(p) && !fs::is_directory(p)) throw io_error(dir + " exists and is not a directory");
    if (fs::exists(p) && !fs::is_empty(p) && !force)
        throw io_error("output dir " + dir + " is not empty (use --force to overwrite)");
    fs::create_directories(p);

    nlohmann::json j{{"command", manifest.command},
                     {"config_path", manifest.config_path},
                     {"output_dir", manifest.output_dir},
                     {"master_seed", manifest.master_seed},
                     {"tool_version", manifest.tool_version}};
    std::ofstream os(p / "manifest.json");
    if (!os) throw io_error("cannot write manifest in " + dir);
    os << j.dump(2) << "\n";
    if (!os) throw io_error("manifest write failed in " + dir);
}

std::string default_output_root() {
    if (const char* home = std::getenv("SFUDA_STABLE_HOME"); home && *home) return home;
    return "sfuda_runs";
}

}  // namespace sfuda

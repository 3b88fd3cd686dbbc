#pragma once

#include <string>

#include "elt/config.hpp"

namespace elt {

// Executes one CLI subcommand: pretrain-teacher, distill, sweep, prune,
// compare-routers, eval, or report. Artifacts land in cfg.out_dir. Throws
// ConfigError for configuration problems (CLI exit status 2) and other
// elt::Error subclasses for runtime failures (status 1).
void run_command(const std::string& command, const RunConfig& cfg);

// Log level from the ELASTI_LOG environment variable: quiet, info (default),
// or debug.
int log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace elt

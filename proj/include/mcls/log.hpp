#pragma once

// Leveled stderr logging.  The level comes from the MCLS_LOG environment
// variable (error, info, debug); unrecognized values fall back to info with
// a one-time warning.

#include <string>

namespace mcls::log {

enum class Level { error = 0, info = 1, debug = 2 };

// Throws InputError on anything but "error", "info", "debug".
Level parse_level(const std::string& name);
std::string level_name(Level level);

// Current level: resolved from MCLS_LOG on first use, then cached.
Level level();
void set_level(Level level);

bool enabled(Level level);

void error(const std::string& msg);
void info(const std::string& msg);
void debug(const std::string& msg);

}  // namespace mcls::log

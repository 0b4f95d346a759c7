#include "mcls/log.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>

#include "mcls/errors.hpp"

namespace mcls::log {

namespace {

std::optional<Level> g_level;

Level level_from_env() {
  const char* raw = std::getenv("MCLS_LOG");
  if (raw == nullptr || *raw == '\0') {
    return Level::info;
  }
  try {
    return parse_level(raw);
  } catch (const InputError&) {
    std::cerr << "[mcls] warning: unrecognized MCLS_LOG value '" << raw
              << "', using info\n";
    return Level::info;
  }
}

void emit(Level lvl, const std::string& msg) {
  if (!enabled(lvl)) return;
  std::cerr << "[mcls] " << level_name(lvl) << ": " << msg << std::endl;
}

}  // namespace

Level parse_level(const std::string& name) {
  if (name == "error") return Level::error;
  if (name == "info") return Level::info;
  if (name == "debug") return Level::debug;
  throw InputError("unknown log level '" + name +
                   "' (expected error, info, or debug)");
}

std::string level_name(Level level) {
  switch (level) {
    case Level::error:
      return "error";
    case Level::info:
      return "info";
    case Level::debug:
      return "debug";
  }
  return "info";
}

Level level() {
  if (!g_level) g_level = level_from_env();
  return *g_level;
}

void set_level(Level level) { g_level = level; }

bool enabled(Level lvl) {
  return static_cast<int>(lvl) <= static_cast<int>(level());
}

void error(const std::string& msg) { emit(Level::error, msg); }
void info(const std::string& msg) { emit(Level::info, msg); }
void debug(const std::string& msg) { emit(Level::debug, msg); }

}  // namespace mcls::log

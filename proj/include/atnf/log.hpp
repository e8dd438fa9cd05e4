#pragma once

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace atnf {

// Log level from ATNF_LOG (trace, debug, info, warn, error, critical, off); default warn.
// Logs go to stderr so stdout stays machine-readable.
inline void init_logging() {
  auto logger = spdlog::stderr_color_mt("atnf");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("ATNF_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off")
      spdlog::warn("ATNF_LOG='{}' is not a log level; keeping warn", env);
    else
      spdlog::set_level(level);
  }
}

}  // namespace atnf

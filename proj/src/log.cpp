#include "gazekit/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

#include <cstdlib>
#include <mutex>
#include <string>

namespace gazekit::log {

std::shared_ptr<spdlog::logger> logger() {
  static std::once_flag once;
  static std::shared_ptr<spdlog::logger> lg;
  std::call_once(once, [] {
    lg = spdlog::stderr_color_mt("gazekit");
    lg->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    spdlog::level::level_enum level = spdlog::level::warn;
    if (const char* env = std::getenv("GAZEKIT_LOG")) {
      const std::string name(env);
      const auto parsed = spdlog::level::from_str(name);
      if (parsed != spdlog::level::off || name == "off") level = parsed;
    }
    lg->set_level(level);
  });
  return lg;
}

}  // namespace gazekit::log

#pragma once

#include <spdlog/spdlog.h>

#include <memory>

namespace gazekit::log {

/// Shared stderr logger. Level comes from GAZEKIT_LOG (trace, debug, info,
/// warn, error, off); default warn.
std::shared_ptr<spdlog::logger> logger();

}  // namespace gazekit::log

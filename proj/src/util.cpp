#include "posesynth/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace posesynth {

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("POSESYNTH_LOG");
    if (!env) return LogLevel::kWarn;
    if (std::strcmp(env, "error") == 0) return LogLevel::kError;
    if (std::strcmp(env, "warn") == 0) return LogLevel::kWarn;
    if (std::strcmp(env, "info") == 0) return LogLevel::kInfo;
    if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
    return LogLevel::kWarn;
  }();
  return level;
}

void log_message(LogLevel level, const std::string& msg) {
  if (level > log_level()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[%s] %s\n", names[int(level)], msg.c_str());
  std::fflush(stderr);
}

}  // namespace posesynth

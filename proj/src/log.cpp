#include "least/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace least {

namespace {
std::atomic<LogLevel> g_level{LogLevel::Warn};
std::mutex g_log_mutex;

void emit(LogLevel level, const char* tag, std::string_view message) {
  if (static_cast<int>(level) > static_cast<int>(g_level.load())) return;
  std::lock_guard lock(g_log_mutex);
  std::clog << "[least " << tag << "] " << message << '\n';
}
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }
void log_warn(std::string_view message) { emit(LogLevel::Warn, "warn", message); }
void log_info(std::string_view message) { emit(LogLevel::Info, "info", message); }
void log_debug(std::string_view message) { emit(LogLevel::Debug, "debug", message); }

}  // namespace least

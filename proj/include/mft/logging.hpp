// Copyright 2026 The mft Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdio>
#include <mutex>
#include <string>
#include <string_view>

#include "mft/core.hpp"

namespace mft {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

/// Minimal process-wide logger. One timestamped line per event, optionally
/// teed to a file so test harnesses can grep the full output afterwards.
class Logger {
 public:
  static Logger& instance() {
    static Logger logger;
    return logger;
  }

  void set_level(LogLevel level) { level_ = level; }

  void set_file(const std::string& path) {
    std::lock_guard<std::mutex> lk(mu_);
    if (file_ && file_ != stderr) fclose(file_);
    file_ = path.empty() ? nullptr : fopen(path.c_str(), "a");
  }

  void set_stderr_enabled(bool on) { stderr_enabled_ = on; }

  void log(LogLevel level, std::string_view area, std::string_view msg) {
    if (level < level_) return;
    static const char* kNames[] = {"DEBUG", "INFO ", "WARN ", "ERROR"};
    std::string line = strcat(iso8601_utc(unix_seconds()), " ", kNames[static_cast<int>(level)],
                              " [", area, "] ", msg, "\n");
    std::lock_guard<std::mutex> lk(mu_);
    if (stderr_enabled_) {
      fwrite(line.data(), 1, line.size(), stderr);
      fflush(stderr);
    }
    if (file_) {
      fwrite(line.data(), 1, line.size(), file_);
      fflush(file_);
    }
  }

 private:
  Logger() = default;
  std::mutex mu_;
  FILE* file_ = nullptr;
  bool stderr_enabled_ = true;
  LogLevel level_ = LogLevel::Info;
};

inline void log_debug(std::string_view area, std::string_view msg) {
  Logger::instance().log(LogLevel::Debug, area, msg);
}
inline void log_info(std::string_view area, std::string_view msg) {
  Logger::instance().log(LogLevel::Info, area, msg);
}
inline void log_warn(std::string_view area, std::string_view msg) {
  Logger::instance().log(LogLevel::Warn, area, msg);
}
inline void log_error(std::string_view area, std::string_view msg) {
  Logger::instance().log(LogLevel::Error, area, msg);
}

}  // namespace mft

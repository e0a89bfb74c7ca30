/*
 * TimeFlow longitudinal registration
 *
 * Copyright 2026 The TimeFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Minimal leveled logging to stderr. The sink can be replaced, e.g. by tests.

#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace timeflow {

enum class LogLevel { Debug, Info, Warning, Error };

inline LogLevel& log_threshold() {
  static LogLevel level = LogLevel::Info;
  return level;
}

inline std::function<void(LogLevel, const std::string&)>& log_sink() {
  static std::function<void(LogLevel, const std::string&)> sink = [](LogLevel level, const std::string& msg) {
    static const char* names[] = {"debug", "info", "warning", "error"};
    std::cerr << "[timeflow " << names[static_cast<int>(level)] << "] " << msg << '\n';
  };
  return sink;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level >= log_threshold()) log_sink()(level, msg);
}

inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }
inline void log_warning(const std::string& msg) { log(LogLevel::Warning, msg); }

}  // namespace timeflow

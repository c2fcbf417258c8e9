// Copyright 2026 TSE Cascade Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef TSE_COMMON_HPP_
#define TSE_COMMON_HPP_

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace tse {

// Exit code 2 from the CLI.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Exit code 3 from the CLI (NaN activations, diverged training, ...).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

inline void check_numeric(bool ok, const std::string& msg) {
  if (!ok) throw NumericalError(msg);
}

template <typename... Args>
void warn(const char* fmt, Args... args) {
  std::fprintf(stderr, "[warn] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

template <typename... Args>
void info(const char* fmt, Args... args) {
  std::fprintf(stderr, "[info] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

}  // namespace tse

#endif  // TSE_COMMON_HPP_

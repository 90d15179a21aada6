#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace erasenet {

/// Process-wide diagnostic sink. Defaults to standard error.
inline std::function<void(const std::string&)>& log_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) {
    std::cerr << m << '\n';
  };
  return sink;
}

inline void log_info(const std::string& msg) { log_sink()("[erasenet] " + msg); }
inline void log_warning(const std::string& msg) { log_sink()("[erasenet] warning: " + msg); }

}  // namespace erasenet

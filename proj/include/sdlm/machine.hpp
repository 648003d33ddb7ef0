#pragma once

#include <fstream>
#include <string>
#include <thread>

namespace sdlm {

/// "cpu model | N threads", read from /proc/cpuinfo where available.
inline std::string machine_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return model + " | " + std::to_string(std::thread::hardware_concurrency()) + " threads";
}

}  // namespace sdlm

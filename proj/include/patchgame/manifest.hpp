#pragma once

// Run manifests: what was run, with which inputs, and what it produced.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "patchgame/evalsuite.hpp"

namespace patchgame {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kManifestFile = "manifest.txt";

inline std::string utc_timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

struct RunManifest {
  std::string command;     // full command line
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string code_version = kVersion;
  std::string started, finished;
  std::vector<std::pair<std::string, std::string>> inputs;  // role, path
  std::vector<std::string> artifacts;                       // relative to the run directory

  std::string text() const {
    std::string out = "command = " + command + "\nconfig_hash = " + config_hash + "\nseed = " + std::to_string(seed) +
                      "\ncode_version = " + code_version + "\nstarted = " + started + "\nfinished = " + finished + "\n";
    for (const auto& [role, path] : inputs) out += "input." + role + " = " + path + "\n";
    for (const auto& a : artifacts) out += "artifact = " + a + "\n";
    return out;
  }

  // Lists the manifest itself too, then writes it to <dir>/manifest.txt.
  void write(const std::string& dir) {
    if (std::find(artifacts.begin(), artifacts.end(), kManifestFile) == artifacts.end()) artifacts.push_back(kManifestFile);
    finished = utc_timestamp();
    write_text((std::filesystem::path(dir) / kManifestFile).string(), text());
  }
};

}  // namespace patchgame

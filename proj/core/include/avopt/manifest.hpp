#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Run provenance: every CLI run records what it ran, on which inputs, with
// which seed, and how long each phase took, so any result can be reproduced
// from its manifest alone.

namespace avopt {

struct PhaseTiming {
  std::string name;
  double seconds = 0.0;
};

struct RunManifest {
  std::string command;
  uint64_t seed = 0;
  std::string config_path;
  std::string config_hash;  // fnv1a-64 over the config bytes, lowercase hex
  std::string core_version;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<PhaseTiming> phases;
};

std::string core_version();

// fnv1a-64 over a file's bytes as 16 lowercase hex digits. Throws
// ValidationError when the file cannot be read.
std::string file_hash_hex(const std::string& path);

// Written atomically; readable back with load_manifest.
void save_manifest(const std::string& path, const RunManifest& manifest);
RunManifest load_manifest(const std::string& path);

// Stopwatch appending one PhaseTiming per phase.
class PhaseClock {
 public:
  explicit PhaseClock(RunManifest& manifest) : manifest_(&manifest) {}

  // Ends the previous phase (if any) and starts a named one.
  void begin(const std::string& name);
  // Ends the current phase.
  void end();

 private:
  RunManifest* manifest_;
  bool running_ = false;
  double start_ = 0.0;
};

}  // namespace avopt

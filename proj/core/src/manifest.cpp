#include "avopt/manifest.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "avopt/common.hpp"
#include "avopt/container.hpp"
#include "avopt/rng.hpp"
#include "json.hpp"

namespace avopt {

namespace {

double now_seconds() {
  const auto t = std::chrono::steady_clock::now().time_since_epoch();
  return std::chrono::duration<double>(t).count();
}

}  // namespace

std::string core_version() { return "0.1.0"; }

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("file_hash_hex: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << hash_tag(bytes);
  return hex.str();
}

void save_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::json j;
  j["command"] = manifest.command;
  j["seed"] = manifest.seed;
  j["config"] = {{"path", manifest.config_path}, {"fnv1a64", manifest.config_hash}};
  j["versions"] = {{"core", manifest.core_version}};
  j["inputs"] = manifest.inputs;
  j["outputs"] = manifest.outputs;
  j["phases"] = nlohmann::json::array();
  for (const PhaseTiming& p : manifest.phases)
    j["phases"].push_back({{"name", p.name}, {"seconds", p.seconds}});
  atomic_write_file(path, j.dump(2) + "\n");
}

RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("load_manifest: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_manifest: " + path + ": " + e.what());
  }
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.seed = j.at("seed").get<uint64_t>();
    m.config_path = j.at("config").at("path").get<std::string>();
    m.config_hash = j.at("config").at("fnv1a64").get<std::string>();
    m.core_version = j.at("versions").at("core").get<std::string>();
    m.inputs = j.at("inputs").get<std::vector<std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    for (const nlohmann::json& p : j.at("phases"))
      m.phases.push_back({p.at("name").get<std::string>(), p.at("seconds").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_manifest: " + path + ": " + e.what());
  }
  return m;
}

void PhaseClock::begin(const std::string& name) {
  end();
  manifest_->phases.push_back({name, 0.0});
  start_ = now_seconds();
  running_ = true;
}

void PhaseClock::end() {
  if (!running_) return;
  manifest_->phases.back().seconds = now_seconds() - start_;
  running_ = false;
}

}  // namespace avopt

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "avopt/common.hpp"
#include "avopt/manifest.hpp"
#include "avopt/synth.hpp"

namespace fs = std::filesystem;
using namespace avopt;

namespace {

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("AVOPT_LOG");
    if (env == nullptr) return LogLevel::kInfo;
    const std::string v(env);
    if (v == "quiet" || v == "0") return LogLevel::kQuiet;
    if (v == "debug" || v == "2") return LogLevel::kDebug;
    return LogLevel::kInfo;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) std::fprintf(stderr, "[avopt] %s\n", msg.c_str());
}

// Flags shared by every subcommand.
struct RunOptions {
  std::string config;
  std::string out;
  uint64_t seed = 0;
  int threads = 0;  // 0 means all logical cores

  int resolved_threads() const {
    if (threads > 0) return threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }
};

void add_run_options(CLI::App& cmd, RunOptions& opt) {
  cmd.add_option("--config", opt.config, "TOML config file")->required();
  cmd.add_option("--out", opt.out, "output directory")->required();
  cmd.add_option("--seed", opt.seed, "RNG seed")->required();
  cmd.add_option("--threads", opt.threads, "worker threads (default: all logical cores)");
}

RunManifest make_manifest(const std::string& command, const RunOptions& opt) {
  RunManifest m;
  m.command = command;
  m.seed = opt.seed;
  m.config_path = opt.config;
  m.config_hash = file_hash_hex(opt.config);
  m.core_version = core_version();
  m.inputs.push_back(opt.config);
  return m;
}

void finish_run(RunManifest& manifest, PhaseClock& clock, const RunOptions& opt) {
  clock.end();
  const std::string path = (fs::path(opt.out) / "manifest.json").string();
  save_manifest(path, manifest);
  log_info(manifest.command + ": done, manifest at " + path);
}

void run_synth_gen(const RunOptions& opt) {
  RunManifest manifest = make_manifest("synth-gen", opt);
  PhaseClock clock(manifest);

  clock.begin("load-config");
  const SceneSpec spec = load_scene_spec(opt.config);

  clock.begin("generate");
  const SynthScene scene = generate_scene(spec, opt.seed);
  log_info("synth-gen: " + std::to_string(spec.persons) + " person(s), " +
           std::to_string(spec.frames) + " frame(s), " + std::to_string(spec.rig.cameras) +
           " view(s) at " + std::to_string(spec.rig.resolution) + "px");

  clock.begin("render");
  const GroundTruthBundle bundle = render_ground_truth(scene, spec, opt.resolved_threads());

  clock.begin("save");
  save_bundle(opt.out, bundle);
  manifest.outputs.push_back(opt.out);

  finish_run(manifest, clock, opt);
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Avatar reconstruction and multi-person pose refinement"};
  app.require_subcommand(1);

  RunOptions synth_opt;
  CLI::App* synth = app.add_subcommand("synth-gen", "Generate a synthetic ground-truth bundle");
  add_run_options(*synth, synth_opt);
  synth->callback([&] { run_synth_gen(synth_opt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

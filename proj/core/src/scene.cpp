#include "avopt/scene.hpp"

#include <filesystem>
#include <fstream>

#include "avopt/container.hpp"
#include "json.hpp"

namespace avopt {

namespace fs = std::filesystem;

void save_scene(const std::string& dir, const Scene& scene) {
  if (scene.tmpl.n_b <= 0) throw ValidationError("save_scene: template not initialized");
  fs::create_directories(dir);
  nlohmann::json j;
  j["persons"] = scene.person_count();
  atomic_write_file((fs::path(dir) / "scene.json").string(), j.dump(2));
  save_template((fs::path(dir) / "template.bin").string(), scene.tmpl);
  save_rig((fs::path(dir) / "cameras.json").string(), scene.cameras);
  for (int i = 0; i < scene.person_count(); ++i)
    scene.fields[i].save((fs::path(dir) / ("person_" + std::to_string(i) + ".field")).string());
}

Scene load_scene(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream meta(root / "scene.json");
  if (!meta) throw ValidationError("load_scene: missing " + (root / "scene.json").string());
  nlohmann::json j;
  try {
    meta >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_scene: bad scene.json: " + std::string(e.what()));
  }
  if (!j.contains("persons") || !j["persons"].is_number_integer())
    throw ValidationError("load_scene: scene.json lacks integer field 'persons'");
  const int persons = j["persons"].get<int>();
  if (persons < 0) throw ValidationError("load_scene: negative person count");

  Scene scene;
  scene.tmpl = load_template((root / "template.bin").string());
  scene.cameras = load_rig((root / "cameras.json").string());
  scene.fields.reserve(persons);
  for (int i = 0; i < persons; ++i)
    scene.fields.push_back(
        CanonicalField::load((root / ("person_" + std::to_string(i) + ".field")).string()));
  return scene;
}

}  // namespace avopt

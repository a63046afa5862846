#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "migc/encoders.hpp"
#include "migc/json_io.hpp"

namespace migc {

inline constexpr int kSceneSchemaVersion = 1;

/// Global description plus per-instance descriptions at latent resolution.
struct SceneSpec {
  std::string global_text;
  std::vector<InstanceDescription> instances;
  std::size_t height = 32;
  std::size_t width = 32;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> reference_images;  // id -> file path

  /// Same canvas and seed, no text and no instances: the unconditional input.
  SceneSpec null_like() const {
    SceneSpec s;
    s.height = height;
    s.width = width;
    s.seed = seed;
    return s;
  }

  const InstanceDescription* find(const std::string& id) const {
    for (const auto& inst : instances)
      if (inst.id == id) return &inst;
    return nullptr;
  }

  /// Every shader reserves one aggregation slot for the template, so at most
  /// capacity-1 instances fit.
  void check_capacity(std::size_t capacity) const {
    require(instances.size() + 1 <= capacity, ErrorKind::kCapacity,
            "scene has " + std::to_string(instances.size()) + " instances; capacity " + std::to_string(capacity) +
                " admits at most " + std::to_string(capacity == 0 ? 0 : capacity - 1));
  }
};

/// Parses a scene document. Relative reference-image paths are resolved
/// against `base_dir`.
inline SceneSpec parse_scene(const Json& doc, const std::filesystem::path& base_dir = {}) {
  JsonNode root(doc, "");
  root.expect_object({"version", "global_text", "height", "width", "seed", "instances", "reference_images"});
  root.expect_version(kSceneSchemaVersion);
  SceneSpec s;
  s.global_text = root.at("global_text").as_string();
  s.height = root.at("height").as_uint();
  s.width = root.at("width").as_uint();
  if (s.height == 0 || s.width == 0) root.at("height").error("resolution must be positive");
  s.seed = root.has("seed") ? root.at("seed").as_uint() : 0;

  if (root.has("reference_images")) {
    const JsonNode refs = root.at("reference_images");
    if (!refs.value().is_object()) refs.error("expected an object mapping id -> path");
    for (auto it = refs.value().begin(); it != refs.value().end(); ++it) {
      JsonNode entry(it.value(), refs.child_path(it.key()));
      std::filesystem::path p = entry.as_string();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      s.reference_images[it.key()] = p.lexically_normal().string();
    }
  }

  std::set<std::string> ids;
  const auto items = root.at("instances").items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const JsonNode& node = items[i];
    node.expect_object({"id", "text", "image", "box", "mask"});
    InstanceDescription inst;
    inst.id = node.has("id") ? node.at("id").as_string() : "inst-" + std::to_string(i);
    if (!ids.insert(inst.id).second) node.at("id").error("duplicate instance id '" + inst.id + "'");

    if (node.has("text") == node.has("image")) node.error("exactly one of 'text' or 'image' is required");
    if (node.has("text")) {
      inst.attribute = TextAttribute{tokenize(node.at("text").as_string())};
    } else {
      const std::string id = node.at("image").as_string();
      if (id != kBlankImageId && !s.reference_images.count(id))
        node.at("image").error("reference image '" + id + "' is not listed in reference_images");
      inst.attribute = ImageAttribute{id};
    }

    if (node.has("box") == node.has("mask")) node.error("exactly one of 'box' or 'mask' is required");
    if (node.has("box")) {
      inst.position = parse_box(node.at("box"));
    } else {
      PositionMap m = parse_mask(node.at("mask"));
      if (m.height() != s.height || m.width() != s.width)
        node.at("mask").error("mask size must equal the scene resolution");
      inst.position = std::move(m);
    }
    s.instances.push_back(std::move(inst));
  }
  return s;
}

inline SceneSpec load_scene(const std::filesystem::path& path) {
  return parse_scene(read_json_file(path), std::filesystem::absolute(path).parent_path());
}

inline Json scene_to_json(const SceneSpec& s) {
  Json inst = Json::array();
  for (const auto& i : s.instances) {
    Json j{{"id", i.id}};
    if (const auto* t = std::get_if<TextAttribute>(&i.attribute)) {
      std::string text;
      for (std::size_t k = 0; k < t->tokens.size(); ++k) text += (k ? " " : "") + t->tokens[k];
      j["text"] = text;
    } else {
      j["image"] = std::get<ImageAttribute>(i.attribute).image_id;
    }
    if (const auto* b = std::get_if<Box>(&i.position)) {
      j["box"] = box_to_json(*b);
    } else {
      j["mask"] = mask_to_json(std::get<PositionMap>(i.position));
    }
    inst.push_back(std::move(j));
  }
  Json doc{{"version", kSceneSchemaVersion}, {"global_text", s.global_text}, {"height", s.height},
           {"width", s.width},   {"seed", s.seed},                        {"instances", inst}};
  if (!s.reference_images.empty()) doc["reference_images"] = s.reference_images;
  return doc;
}

/// Loads every reference image listed by the scene into the store.
inline void load_reference_images(const SceneSpec& s, ReferenceImageStore& store) {
  for (const auto& [id, path] : s.reference_images) store.load(id, path);
}

}  // namespace migc

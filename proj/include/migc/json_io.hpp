#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "migc/encoders.hpp"

namespace migc {

using Json = nlohmann::json;

/// Strict reader over a JSON value that remembers its JSON-pointer path so
/// schema errors point at the offending field.
class JsonNode {
 public:
  JsonNode(const Json& value, std::string path) : value_(&value), path_(std::move(path)) {}

  const Json& value() const { return *value_; }
  const std::string& path() const { return path_; }
  std::string child_path(const std::string& key) const { return path_ + "/" + key; }
  std::string child_path(std::size_t i) const { return path_ + "/" + std::to_string(i); }

  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorKind::kSchema, "at " + (path_.empty() ? std::string("/") : path_) + ": " + what);
  }

  void expect_object(std::initializer_list<const char*> allowed) const {
    if (!value_->is_object()) error("expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = value_->begin(); it != value_->end(); ++it) {
      if (!ok.count(it.key())) JsonNode(it.value(), child_path(it.key())).error("unknown field");
    }
  }

  bool has(const std::string& key) const { return value_->is_object() && value_->contains(key); }

  JsonNode at(const std::string& key) const {
    if (!has(key)) error("missing required field '" + key + "'");
    return JsonNode((*value_)[key], child_path(key));
  }

  std::vector<JsonNode> items() const {
    if (!value_->is_array()) error("expected an array");
    std::vector<JsonNode> out;
    for (std::size_t i = 0; i < value_->size(); ++i) out.emplace_back((*value_)[i], child_path(i));
    return out;
  }

  std::string as_string() const {
    if (!value_->is_string()) error("expected a string");
    return value_->get<std::string>();
  }
  double as_number() const {
    if (!value_->is_number()) error("expected a number");
    return value_->get<double>();
  }
  std::uint64_t as_uint() const {
    if (!value_->is_number_unsigned() && !(value_->is_number_integer() && value_->get<long long>() >= 0))
      error("expected a non-negative integer");
    return value_->get<std::uint64_t>();
  }
  bool as_bool() const {
    if (!value_->is_boolean()) error("expected a boolean");
    return value_->get<bool>();
  }

  void expect_version(int supported) const {
    const std::uint64_t v = at("version").as_uint();
    if (v != static_cast<std::uint64_t>(supported))
      at("version").error("unsupported schema version " + std::to_string(v) + " (expected " +
                          std::to_string(supported) + ")");
  }

 private:
  const Json* value_;
  std::string path_;
};

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    fail(ErrorKind::kSchema, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& value) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kInput, "cannot write " + path.string());
  out << value.dump(2) << '\n';
}

inline Box parse_box(const JsonNode& node) {
  const auto items = node.items();
  if (items.size() != 4) node.error("box must have 4 numbers [x1,y1,x2,y2]");
  Box b{items[0].as_number(), items[1].as_number(), items[2].as_number(), items[3].as_number()};
  try {
    b.validate();
  } catch (const Error& e) {
    node.error(e.what());
  }
  return b;
}

inline Json box_to_json(const Box& b) { return Json::array({b.x1, b.y1, b.x2, b.y2}); }

/// Uncompressed COCO-style run-length encoding: column-major runs that start
/// with a run of zeros.
inline PositionMap rle_decode(std::size_t height, std::size_t width, const std::vector<std::uint64_t>& counts) {
  PositionMap m(height, width);
  std::size_t pos = 0;
  bool value = false;
  for (std::uint64_t run : counts) {
    require(pos + run <= height * width, ErrorKind::kSchema, "RLE runs exceed mask size");
    for (std::uint64_t i = 0; i < run; ++i, ++pos) {
      if (value) m.set(pos % height, pos / height, true);
    }
    value = !value;
  }
  require(pos == height * width, ErrorKind::kSchema, "RLE runs do not cover the mask");
  return m;
}

inline std::vector<std::uint64_t> rle_encode(const PositionMap& m) {
  std::vector<std::uint64_t> counts;
  bool value = false;
  std::uint64_t run = 0;
  for (std::size_t c = 0; c < m.width(); ++c) {
    for (std::size_t r = 0; r < m.height(); ++r) {
      if (m.at(r, c) != value) {
        counts.push_back(run);
        run = 0;
        value = !value;
      }
      ++run;
    }
  }
  counts.push_back(run);
  return counts;
}

inline PositionMap parse_mask(const JsonNode& node) {
  node.expect_object({"size", "counts"});
  const auto size = node.at("size").items();
  if (size.size() != 2) node.at("size").error("size must be [height, width]");
  const std::size_t h = size[0].as_uint(), w = size[1].as_uint();
  if (h == 0 || w == 0) node.at("size").error("mask extents must be positive");
  std::vector<std::uint64_t> counts;
  for (const auto& c : node.at("counts").items()) counts.push_back(c.as_uint());
  try {
    return rle_decode(h, w, counts);
  } catch (const Error& e) {
    node.at("counts").error(e.what());
  }
}

inline Json mask_to_json(const PositionMap& m) {
  return Json{{"size", Json::array({m.height(), m.width()})}, {"counts", rle_encode(m)}};
}

}  // namespace migc

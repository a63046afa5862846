#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "migc/encoders.hpp"
#include "migc/image_io.hpp"
#include "migc/json_io.hpp"
#include "migc/rng.hpp"

namespace migc {

inline constexpr int kEvalSchemaVersion = 1;

/// Benchmark level sizes L2..L6 of the full benchmark and images per prompt.
inline constexpr std::array<std::size_t, 5> kReferenceLevelSizes = {155, 153, 148, 140, 154};
inline constexpr std::size_t kReferenceImagesPerPrompt = 8;
inline constexpr std::size_t kMinLevel = 2, kMaxLevel = 6;

inline const std::array<std::string, 7>& palette() {
  static const std::array<std::string, 7> colors = {"red", "yellow", "green", "blue", "white", "black", "brown"};
  return colors;
}

using Region = std::variant<Box, PositionMap>;

inline Box region_box(const Region& r) {
  if (const Box* b = std::get_if<Box>(&r)) return *b;
  return mask_to_bbox(std::get<PositionMap>(r));
}

inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Mask vs mask by pixel counts (same size); any other pairing compares the
/// tight boxes.
inline double iou(const Region& a, const Region& b) {
  const auto* ma = std::get_if<PositionMap>(&a);
  const auto* mb = std::get_if<PositionMap>(&b);
  if (ma && mb) {
    require(ma->height() == mb->height() && ma->width() == mb->width(), ErrorKind::kInvalidArgument,
            "mask IoU needs masks of equal size");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < ma->size(); ++i) {
      inter += (*ma)[i] && (*mb)[i];
      uni += (*ma)[i] || (*mb)[i];
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
  }
  return box_iou(region_box(a), region_box(b));
}

inline std::pair<double, double> box_center(const Box& b) { return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2}; }

struct PixelCount {
  Rgb rgb;
  std::uint64_t count = 1;
};

struct Detection {
  std::string category;
  Box box;
  std::optional<PositionMap> mask;
  std::vector<PixelCount> segment;

  Region region() const { return mask ? Region(*mask) : Region(box); }
};

struct Match {
  std::size_t index = 0;
  double iou = 0.0;
};

/// Best detection for a target: max IoU, ties by smaller center distance,
/// then lower index. A detection carrying a mask is compared as a mask when
/// the target is a mask, otherwise by box.
inline std::optional<Match> match_detection(const Region& target, const std::vector<const Detection*>& dets) {
  std::optional<Match> best;
  double best_dist = 0.0;
  const auto [tx, ty] = box_center(region_box(target));
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const bool as_mask = std::holds_alternative<PositionMap>(target) && dets[i]->mask &&
                         dets[i]->mask->height() == std::get<PositionMap>(target).height() &&
                         dets[i]->mask->width() == std::get<PositionMap>(target).width();
    const double v = iou(target, as_mask ? Region(*dets[i]->mask) : Region(dets[i]->box));
    const auto [cx, cy] = box_center(dets[i]->box);
    const double dist = std::hypot(cx - tx, cy - ty);
    if (!best || v > best->iou || (v == best->iou && dist < best_dist)) {
      best = Match{i, v};
      best_dist = dist;
    }
  }
  return best;
}

inline bool position_correct(double iou_value) { return iou_value >= 0.5; }

// ---------------------------------------------------------------------------
// Color check in HSV space.

struct Hsv {
  double h = 0, s = 0, v = 0;  // degrees, [0,1], [0,1]
};

/// Hue from integer channel differences, so hues on whole-degree range
/// boundaries come out exact.
inline Hsv rgb_to_hsv(const Rgb& c) {
  const int r = c.r, g = c.g, b = c.b;
  const int mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  Hsv out;
  out.v = mx / 255.0;
  out.s = mx > 0 ? static_cast<double>(d) / mx : 0.0;
  if (d > 0) {
    int num = 0, base = 0;
    if (mx == r) {
      num = g - b;
    } else if (mx == g) {
      num = b - r;
      base = 120;
    } else {
      num = r - g;
      base = 240;
    }
    out.h = base + static_cast<double>(60 * num) / d;
    if (out.h < 0) out.h += 360.0;
  }
  return out;
}

/// Inclusive HSV box; a color may list several hue intervals (red wraps).
struct ColorRange {
  std::vector<std::pair<double, double>> hue;  // empty: any hue
  double s_min = 0, s_max = 1, v_min = 0, v_max = 1;

  bool contains(const Hsv& p) const {
    if (p.s < s_min || p.s > s_max || p.v < v_min || p.v > v_max) return false;
    if (hue.empty()) return true;
    for (const auto& [lo, hi] : hue)
      if (p.h >= lo && p.h <= hi) return true;
    return false;
  }
};

struct ColorTable {
  int version = 1;
  std::map<std::string, ColorRange> ranges;

  static ColorTable defaults() {
    ColorTable t;
    t.ranges["red"] = {{{0, 10}, {340, 360}}, 0.4, 1, 0.2, 1};
    t.ranges["yellow"] = {{{40, 70}}, 0.4, 1, 0.3, 1};
    t.ranges["green"] = {{{70, 170}}, 0.3, 1, 0.2, 1};
    t.ranges["blue"] = {{{190, 260}}, 0.3, 1, 0.2, 1};
    t.ranges["brown"] = {{{10, 40}}, 0.4, 1, 0.15, 0.7};
    t.ranges["white"] = {{}, 0, 0.15, 0.8, 1};
    t.ranges["black"] = {{}, 0, 1, 0, 0.2};
    return t;
  }

  const ColorRange& at(const std::string& color) const {
    auto it = ranges.find(color);
    require(it != ranges.end(), ErrorKind::kInput, "no HSV range configured for color '" + color + "'");
    return it->second;
  }
};

/// Override file: {"version":1,"colors":{"red":{"hue":[[0,10],[340,360]],"s":[0.4,1],"v":[0.2,1]},...}}.
/// Listed colors replace the defaults; others keep them.
inline ColorTable parse_color_table(const Json& doc) {
  const JsonNode root(doc, "");
  root.expect_object({"version", "colors"});
  root.expect_version(1);
  ColorTable t = ColorTable::defaults();
  const JsonNode colors = root.at("colors");
  if (!colors.value().is_object()) colors.error("expected an object");
  for (auto it = colors.value().begin(); it != colors.value().end(); ++it) {
    const JsonNode c(it.value(), colors.child_path(it.key()));
    c.expect_object({"hue", "s", "v"});
    ColorRange r;
    if (c.has("hue"))
      for (const auto& iv : c.at("hue").items()) {
        const auto p = iv.items();
        if (p.size() != 2) iv.error("hue interval must be [lo, hi] in degrees");
        r.hue.emplace_back(p[0].as_number(), p[1].as_number());
      }
    auto pair = [&](const char* key, double& lo, double& hi) {
      if (!c.has(key)) return;
      const auto p = c.at(key).items();
      if (p.size() != 2) c.at(key).error("expected [min, max]");
      lo = p[0].as_number();
      hi = p[1].as_number();
    };
    pair("s", r.s_min, r.s_max);
    pair("v", r.v_min, r.v_max);
    t.ranges[it.key()] = r;
  }
  return t;
}

struct ColorVerdict {
  bool correct = false;
  double ratio = 0.0;
  std::string diagnostic;
};

/// O/M >= 0.2 where M is the segment size and O the pixels inside the range.
inline ColorVerdict color_check(const std::vector<PixelCount>& segment, const std::string& color,
                                const ColorTable& table) {
  const ColorRange& range = table.at(color);
  std::uint64_t total = 0, inside = 0;
  for (const auto& p : segment) {
    total += p.count;
    if (range.contains(rgb_to_hsv(p.rgb))) inside += p.count;
  }
  if (total == 0) return {false, 0.0, "empty segment"};
  const double ratio = static_cast<double>(inside) / static_cast<double>(total);
  // Integer form of inside/total >= 0.2, exact at the boundary.
  return {inside * 5 >= total, ratio, {}};
}

inline bool color_correct(const std::vector<PixelCount>& segment, const std::string& color,
                          const ColorTable& table = ColorTable::defaults()) {
  return color_check(segment, color, table).correct;
}

// ---------------------------------------------------------------------------
// Layouts, detections and per-image evaluation.

struct BenchmarkInstance {
  std::string id;
  std::string category;
  std::string color;
  Region region;
};

struct BenchmarkLayout {
  std::string layout_id;
  std::size_t level = 2;
  std::string prompt;
  std::vector<BenchmarkInstance> instances;
};

struct DetectionRecord {
  std::string image_id;
  std::string layout_id;
  std::vector<Detection> detections;
};

struct EvalRecord {
  std::string image_id;
  std::string layout_id;
  std::size_t level = 0;
  std::string instance_id;
  bool matched = false;
  double iou = 0.0;
  bool position_correct = false;
  bool color_correct = false;
  bool fully_correct = false;
};

/// Per target: match among same-category detections, position check, then
/// the color check only for positioned instances.
inline std::vector<EvalRecord> evaluate_image(const BenchmarkLayout& layout, const DetectionRecord& det,
                                              const ColorTable& table = ColorTable::defaults()) {
  require(det.layout_id == layout.layout_id, ErrorKind::kInput,
          "image '" + det.image_id + "' refers to layout '" + det.layout_id + "', not '" + layout.layout_id + "'");
  std::vector<EvalRecord> out;
  for (const auto& target : layout.instances) {
    EvalRecord r{det.image_id, layout.layout_id, layout.level, target.id};
    std::vector<const Detection*> same;
    for (const auto& d : det.detections)
      if (d.category == target.category) same.push_back(&d);
    if (const auto m = match_detection(target.region, same)) {
      r.matched = true;
      r.iou = m->iou;
      r.position_correct = position_correct(m->iou);
      if (r.position_correct) r.color_correct = color_correct(same[m->index]->segment, target.color, table);
    }
    r.fully_correct = r.position_correct && r.color_correct;
    out.push_back(std::move(r));
  }
  return out;
}

/// Evaluates every detection record against its layout, fanning out over up
/// to `jobs` threads. Records come back in detection-file order.
inline std::vector<EvalRecord> evaluate_all(const std::vector<BenchmarkLayout>& layouts,
                                            const std::vector<DetectionRecord>& dets,
                                            const ColorTable& table = ColorTable::defaults(), std::size_t jobs = 1) {
  std::map<std::string, const BenchmarkLayout*> by_id;
  for (const auto& l : layouts) by_id[l.layout_id] = &l;
  std::vector<std::string> orphans;
  std::set<std::string> seen_layouts;
  for (const auto& d : dets) {
    if (!by_id.count(d.layout_id))
      orphans.push_back("image '" + d.image_id + "' -> unknown layout '" + d.layout_id + "'");
    seen_layouts.insert(d.layout_id);
  }
  for (const auto& l : layouts)
    if (!seen_layouts.count(l.layout_id)) orphans.push_back("layout '" + l.layout_id + "' has no detection record");
  if (!orphans.empty()) {
    std::string msg = "id mismatch between layouts and detections:";
    for (const auto& o : orphans) msg += "\n  " + o;
    fail(ErrorKind::kInput, msg);
  }

  std::vector<std::vector<EvalRecord>> per_image(dets.size());
  jobs = std::max<std::size_t>(1, std::min(jobs, dets.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < dets.size(); ++i) per_image[i] = evaluate_image(*by_id.at(dets[i].layout_id), dets[i], table);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t j = 0; j < jobs; ++j) {
      pool.emplace_back([&, j] {
        try {
          for (std::size_t i = j; i < dets.size(); i += jobs)
            per_image[i] = evaluate_image(*by_id.at(dets[i].layout_id), dets[i], table);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<EvalRecord> out;
  for (auto& v : per_image) out.insert(out.end(), v.begin(), v.end());
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation and reports.

struct LevelMetrics {
  std::size_t instances = 0;
  std::size_t images = 0;
  double isr = 0.0;
  double image_sr = 0.0;
  double miou = 0.0;

  friend bool operator==(const LevelMetrics&, const LevelMetrics&) = default;
};

/// Keys "L2".."L6" for levels present plus "average" pooled over all records.
struct EvalReport {
  std::map<std::string, LevelMetrics> levels;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline std::string level_key(std::size_t level) { return "L" + std::to_string(level); }

inline EvalReport aggregate(const std::vector<EvalRecord>& records) {
  require(!records.empty(), ErrorKind::kEmptyReport, "no evaluation records to aggregate");
  struct Acc {
    std::size_t inst = 0, fully = 0;
    double iou_sum = 0.0;
    std::map<std::string, bool> image_ok;
  };
  std::map<std::string, Acc> acc;
  // Sort a copy so floating-point sums do not depend on record order.
  std::vector<const EvalRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const EvalRecord* a, const EvalRecord* b) {
    return std::tie(a->image_id, a->instance_id, a->iou) < std::tie(b->image_id, b->instance_id, b->iou);
  });
  for (const EvalRecord* r : sorted) {
    for (const std::string& key : {level_key(r->level), std::string("average")}) {
      Acc& a = acc[key];
      ++a.inst;
      if (r->fully_correct) {
        ++a.fully;
        a.iou_sum += r->iou;
      }
      auto [it, fresh] = a.image_ok.emplace(r->image_id, true);
      it->second = it->second && r->fully_correct;
    }
  }
  EvalReport rep;
  for (const auto& [key, a] : acc) {
    LevelMetrics m;
    m.instances = a.inst;
    m.images = a.image_ok.size();
    m.isr = static_cast<double>(a.fully) / static_cast<double>(a.inst);
    std::size_t ok = 0;
    for (const auto& [id, good] : a.image_ok) ok += good;
    m.image_sr = static_cast<double>(ok) / static_cast<double>(m.images);
    m.miou = a.iou_sum / static_cast<double>(a.inst);
    rep.levels[key] = m;
  }
  return rep;
}

inline Json report_to_json(const EvalReport& rep) {
  Json levels = Json::object();
  for (const auto& [key, m] : rep.levels)
    levels[key] = {{"instances", m.instances}, {"images", m.images}, {"isr", m.isr}, {"image_sr", m.image_sr},
                   {"miou", m.miou}};
  Json ref = Json::object();
  for (std::size_t i = 0; i < kReferenceLevelSizes.size(); ++i) ref[level_key(i + kMinLevel)] = kReferenceLevelSizes[i];
  return Json{{"version", kEvalSchemaVersion},
              {"levels", levels},
              {"reference", {{"layouts_per_level", ref}, {"images_per_prompt", kReferenceImagesPerPrompt}}}};
}

inline EvalReport parse_report(const Json& doc) {
  const JsonNode root(doc, "");
  root.expect_object({"version", "levels", "reference"});
  root.expect_version(kEvalSchemaVersion);
  EvalReport rep;
  const JsonNode levels = root.at("levels");
  if (!levels.value().is_object()) levels.error("expected an object");
  for (auto it = levels.value().begin(); it != levels.value().end(); ++it) {
    const JsonNode l(it.value(), levels.child_path(it.key()));
    l.expect_object({"instances", "images", "isr", "image_sr", "miou"});
    rep.levels[it.key()] = {l.at("instances").as_uint(), l.at("images").as_uint(), l.at("isr").as_number(),
                            l.at("image_sr").as_number(), l.at("miou").as_number()};
  }
  return rep;
}

inline std::string report_to_csv(const EvalReport& rep) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "level,instances,images,isr,image_sr,miou\n";
  auto row = [&](const std::string& key, const LevelMetrics& m) {
    os << key << ',' << m.instances << ',' << m.images << ',' << m.isr << ',' << m.image_sr << ',' << m.miou << '\n';
  };
  for (const auto& [key, m] : rep.levels)
    if (key != "average") row(key, m);
  if (auto it = rep.levels.find("average"); it != rep.levels.end()) row(it->first, it->second);
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON ingestion.

inline Region parse_region(const JsonNode& node) {
  if (node.has("box") == node.has("mask")) node.error("exactly one of 'box' or 'mask' is required");
  if (node.has("box")) return parse_box(node.at("box"));
  return parse_mask(node.at("mask"));
}

inline Rgb parse_rgb(const JsonNode& node) {
  const auto c = node.items();
  if (c.size() != 3) node.error("color must be [r, g, b]");
  std::array<std::uint8_t, 3> v{};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto x = c[i].as_uint();
    if (x > 255) c[i].error("channel must be in 0..255");
    v[i] = static_cast<std::uint8_t>(x);
  }
  return {v[0], v[1], v[2]};
}

inline Json region_to_json_fields(const Region& r) {
  if (const Box* b = std::get_if<Box>(&r)) return Json{{"box", box_to_json(*b)}};
  return Json{{"mask", mask_to_json(std::get<PositionMap>(r))}};
}

inline std::vector<BenchmarkLayout> parse_layouts(const Json& doc) {
  const JsonNode root(doc, "");
  root.expect_object({"version", "layouts"});
  root.expect_version(kEvalSchemaVersion);
  std::vector<BenchmarkLayout> out;
  std::set<std::string> ids;
  for (const auto& l : root.at("layouts").items()) {
    l.expect_object({"layout_id", "level", "prompt", "instances"});
    BenchmarkLayout layout;
    layout.layout_id = l.at("layout_id").as_string();
    if (!ids.insert(layout.layout_id).second) l.at("layout_id").error("duplicate layout id");
    layout.level = l.at("level").as_uint();
    if (layout.level < kMinLevel || layout.level > kMaxLevel) l.at("level").error("level must be 2..6");
    layout.prompt = l.has("prompt") ? l.at("prompt").as_string() : "";
    std::set<std::string> inst_ids;
    const auto items = l.at("instances").items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& n = items[i];
      n.expect_object({"id", "category", "color", "box", "mask"});
      BenchmarkInstance inst;
      inst.id = n.has("id") ? n.at("id").as_string() : std::to_string(i);
      if (!inst_ids.insert(inst.id).second) n.at("id").error("duplicate instance id");
      inst.category = n.at("category").as_string();
      inst.color = n.at("color").as_string();
      inst.region = parse_region(n);
      layout.instances.push_back(std::move(inst));
    }
    if (layout.instances.size() != layout.level)
      l.at("instances").error("instance count must equal the level (" + std::to_string(layout.level) + ")");
    out.push_back(std::move(layout));
  }
  return out;
}

inline Json layouts_to_json(const std::vector<BenchmarkLayout>& layouts) {
  Json arr = Json::array();
  for (const auto& l : layouts) {
    Json inst = Json::array();
    for (const auto& i : l.instances) {
      Json j{{"id", i.id}, {"category", i.category}, {"color", i.color}};
      j.update(region_to_json_fields(i.region));
      inst.push_back(std::move(j));
    }
    arr.push_back({{"layout_id", l.layout_id}, {"level", l.level}, {"prompt", l.prompt}, {"instances", inst}});
  }
  return Json{{"version", kEvalSchemaVersion}, {"layouts", arr}};
}

/// Segment colors come as raw "pixels" ([[r,g,b],...]) or a "histogram"
/// ([{"rgb":[r,g,b],"count":n},...]).
inline std::vector<DetectionRecord> parse_detections(const Json& doc) {
  const JsonNode root(doc, "");
  root.expect_object({"version", "images"});
  root.expect_version(kEvalSchemaVersion);
  std::vector<DetectionRecord> out;
  std::set<std::string> ids;
  for (const auto& im : root.at("images").items()) {
    im.expect_object({"image_id", "layout_id", "detections"});
    DetectionRecord rec;
    rec.image_id = im.at("image_id").as_string();
    if (!ids.insert(rec.image_id).second) im.at("image_id").error("duplicate image id");
    rec.layout_id = im.at("layout_id").as_string();
    for (const auto& d : im.at("detections").items()) {
      d.expect_object({"category", "box", "mask", "pixels", "histogram"});
      Detection det;
      det.category = d.at("category").as_string();
      det.box = parse_box(d.at("box"));
      if (d.has("mask")) det.mask = parse_mask(d.at("mask"));
      if (d.has("pixels") && d.has("histogram")) d.error("give either 'pixels' or 'histogram', not both");
      if (d.has("pixels"))
        for (const auto& p : d.at("pixels").items()) det.segment.push_back({parse_rgb(p), 1});
      if (d.has("histogram"))
        for (const auto& h : d.at("histogram").items()) {
          h.expect_object({"rgb", "count"});
          det.segment.push_back({parse_rgb(h.at("rgb")), h.at("count").as_uint()});
        }
      rec.detections.push_back(std::move(det));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark construction.

struct PoolInstance {
  std::string category;
  Box box;
};

struct PoolLayout {
  std::string layout_id;
  std::vector<PoolInstance> instances;
};

inline std::vector<PoolLayout> parse_pool(const Json& doc) {
  const JsonNode root(doc, "");
  root.expect_object({"version", "layouts"});
  root.expect_version(kEvalSchemaVersion);
  std::vector<PoolLayout> out;
  for (const auto& l : root.at("layouts").items()) {
    l.expect_object({"layout_id", "instances"});
    PoolLayout p{l.at("layout_id").as_string(), {}};
    for (const auto& n : l.at("instances").items()) {
      n.expect_object({"category", "box"});
      p.instances.push_back({n.at("category").as_string(), parse_box(n.at("box"))});
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// "a red dog, a blue cat, and a green car"; two instances give
/// "a red dog, and a blue cat".
inline std::string render_prompt(const std::vector<BenchmarkInstance>& inst) {
  std::string out;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    if (i) out += i + 1 == inst.size() ? ", and " : ", ";
    out += "a " + inst[i].color + " " + inst[i].category;
  }
  return out;
}

inline bool large_enough(const Box& b) { return b.width() >= 1.0 / 8.0 && b.height() >= 1.0 / 8.0; }

struct BenchmarkConfig {
  std::map<std::size_t, std::size_t> per_level = {{2, 2}, {3, 2}, {4, 2}, {5, 2}, {6, 2}};
  std::uint64_t seed = 0;
};

/// Filters small instances, then fills levels from the highest down: each
/// level draws unused layouts in seeded order, skipping (resampling past)
/// layouts with too few instances, and keeps the i largest by area.
inline std::vector<BenchmarkLayout> build_benchmark(const std::vector<PoolLayout>& pool, const BenchmarkConfig& cfg) {
  std::vector<PoolLayout> filtered;
  for (const auto& l : pool) {
    PoolLayout f{l.layout_id, {}};
    for (const auto& i : l.instances) {
      i.box.validate();
      if (large_enough(i.box)) f.instances.push_back(i);
    }
    if (f.instances.size() >= kMinLevel) filtered.push_back(std::move(f));
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(filtered.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::vector<bool> used(filtered.size(), false);
  std::map<std::size_t, std::vector<BenchmarkLayout>> by_level;
  for (std::size_t level = kMaxLevel; level >= kMinLevel; --level) {
    auto want_it = cfg.per_level.find(level);
    const std::size_t want = want_it == cfg.per_level.end() ? 0 : want_it->second;
    for (std::size_t k = 0; k < order.size() && by_level[level].size() < want; ++k) {
      const std::size_t idx = order[k];
      if (used[idx] || filtered[idx].instances.size() < level) continue;
      used[idx] = true;
      std::vector<std::size_t> rank(filtered[idx].instances.size());
      std::iota(rank.begin(), rank.end(), 0);
      std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
        return filtered[idx].instances[a].box.area() > filtered[idx].instances[b].box.area();
      });
      BenchmarkLayout out;
      out.layout_id = filtered[idx].layout_id;
      out.level = level;
      const std::size_t offset = rng.below(palette().size());
      for (std::size_t j = 0; j < level; ++j) {
        const PoolInstance& src = filtered[idx].instances[rank[j]];
        out.instances.push_back({std::to_string(j), src.category, palette()[(offset + j) % palette().size()], src.box});
      }
      out.prompt = render_prompt(out.instances);
      by_level[level].push_back(std::move(out));
    }
    if (by_level[level].size() < want)
      fail(ErrorKind::kBuild, "pool exhausted for " + level_key(level) + ": need " + std::to_string(want) +
                                  " layouts, found " + std::to_string(by_level[level].size()) + " (shortfall " +
                                  std::to_string(want - by_level[level].size()) + ")");
  }
  std::vector<BenchmarkLayout> out;
  for (auto& [level, ls] : by_level)
    for (auto& l : ls) out.push_back(std::move(l));
  return out;
}

}  // namespace migc

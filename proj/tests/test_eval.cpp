#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>

#include "eval_oracle.hpp"
#include "migc/eval.hpp"

using namespace migc;

namespace {

Json fixture(const std::string& name) {
  std::ifstream in(std::string(MIGC_FIXTURES) + "/" + name);
  return Json::parse(in);
}

std::vector<PixelCount> solid(Rgb c, std::uint64_t n) { return {{c, n}}; }

Detection det(const std::string& cat, Box b, std::vector<PixelCount> seg = {}) {
  Detection d;
  d.category = cat;
  d.box = b;
  d.segment = std::move(seg);
  return d;
}

EvalRecord rec(const std::string& image, std::size_t level, const std::string& inst, bool ok, double iou) {
  EvalRecord r{image, "l", level, inst};
  r.matched = true;
  r.iou = iou;
  r.position_correct = ok;
  r.color_correct = ok;
  r.fully_correct = ok;
  return r;
}

}  // namespace

TEST(Iou, BoxesAndMasks) {
  EXPECT_EQ(box_iou({0, 0, 1, 1}, {0, 0, 1, 1}), 1.0);
  EXPECT_EQ(box_iou({0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}), 0.0);
  EXPECT_NEAR(box_iou({0, 0, 0.5, 1}, {0.25, 0, 0.75, 1}), 1.0 / 3.0, 1e-15);
  const PositionMap a = PositionMap::from_cells(2, 2, {1, 1, 0, 0}), b = PositionMap::from_cells(2, 2, {0, 1, 1, 0});
  EXPECT_NEAR(iou(Region(a), Region(b)), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(iou(Region(PositionMap(2, 2)), Region(PositionMap(2, 2))), 0.0);
  EXPECT_THROW(iou(Region(a), Region(PositionMap(3, 3))), Error);
}

TEST(Matching, HighestIouWinsThenCenterDistanceThenIndex) {
  const Detection far = det("dog", {0.5, 0.5, 1, 1}), near = det("dog", {0, 0, 0.5, 0.5}),
                  shifted = det("dog", {0.125, 0, 0.625, 0.5});
  const Region target = Box{0, 0, 0.5, 0.5};
  auto m = match_detection(target, {&far, &shifted, &near});
  ASSERT_TRUE(m);
  EXPECT_EQ(m->index, 2u);
  EXPECT_EQ(m->iou, 1.0);
  const Detection left = det("dog", {0, 0, 0.25, 0.5}), right = det("dog", {0.25, 0, 0.5, 0.5});
  m = match_detection(Box{0, 0, 0.5, 0.5}, {&right, &left});
  EXPECT_EQ(m->index, 0u);
  m = match_detection(Box{0, 0, 0.75, 0.5}, {&left, &right});
  EXPECT_EQ(m->index, 1u);
  EXPECT_FALSE(match_detection(target, {}));
}

TEST(Position, Threshold) {
  EXPECT_TRUE(position_correct(0.5));
  EXPECT_FALSE(position_correct(0.4999));
}

TEST(Color, Examples) {
  const auto table = ColorTable::defaults();
  EXPECT_TRUE(color_correct(solid({255, 0, 0}, 10), "red", table));
  EXPECT_FALSE(color_correct(solid({128, 128, 128}, 10), "blue", table));
  std::vector<PixelCount> fifth = {{{0, 0, 255}, 1}, {{128, 128, 128}, 4}};
  EXPECT_TRUE(color_correct(fifth, "blue", table));
  EXPECT_DOUBLE_EQ(color_check(fifth, "blue", table).ratio, 0.2);
  std::vector<PixelCount> below = {{{0, 0, 255}, 199}, {{128, 128, 128}, 801}};
  EXPECT_FALSE(color_correct(below, "blue", table));
  EXPECT_FALSE(color_check({}, "red", table).correct);
  EXPECT_THROW(color_check(solid({1, 2, 3}, 1), "mauve", table), Error);
}

TEST(Color, PaletteSwatchesLandInTheirOwnRangeOnly) {
  const std::map<std::string, Rgb> swatch = {{"red", {230, 20, 20}},   {"yellow", {240, 220, 10}},
                                             {"green", {20, 180, 40}}, {"blue", {20, 40, 220}},
                                             {"white", {245, 245, 245}}, {"black", {12, 12, 12}},
                                             {"brown", {140, 80, 30}}};
  const auto table = ColorTable::defaults();
  for (const auto& [name, rgb] : swatch)
    for (const auto& other : palette()) EXPECT_EQ(color_correct(solid(rgb, 1), other, table), other == name) << name << " as " << other;
}

TEST(Color, HsvMatchesIndependentConversion) {
  std::mt19937 gen(7);
  for (int i = 0; i < 2000; ++i) {
    const Rgb c{static_cast<std::uint8_t>(gen() % 256), static_cast<std::uint8_t>(gen() % 256),
                static_cast<std::uint8_t>(gen() % 256)};
    double h, s, v;
    oracle::hsv(c.r, c.g, c.b, h, s, v);
    const Hsv got = rgb_to_hsv(c);
    EXPECT_NEAR(got.h, h, 1e-9);
    EXPECT_NEAR(got.s, s, 1e-12);
    EXPECT_NEAR(got.v, v, 1e-12);
    for (const auto& name : palette())
      EXPECT_EQ(ColorTable::defaults().at(name).contains(got), oracle::in_default_range(name, c.r, c.g, c.b))
          << name << " " << int(c.r) << "," << int(c.g) << "," << int(c.b) << " h=" << got.h << " s=" << got.s << " v=" << got.v;
  }
}

TEST(Color, OverrideFileReplacesListedColors) {
  const ColorTable t = parse_color_table(Json::parse(R"({"version":1,"colors":{"blue":{"hue":[[0,360]],"s":[0,1],"v":[0,1]}}})"));
  EXPECT_TRUE(color_correct(solid({128, 128, 128}, 1), "blue", t));
  EXPECT_TRUE(color_correct(solid({255, 0, 0}, 1), "red", t));
  EXPECT_THROW(parse_color_table(Json::parse(R"({"version":1,"colors":{"blue":{"hue":[[0]]}}})")), Error);
  EXPECT_THROW(parse_color_table(Json::parse(R"({"version":2,"colors":{}})")), Error);
}

TEST(EvaluateImage, Outcomes) {
  BenchmarkLayout layout{"l", 3, "", {}};
  layout.instances = {{"0", "dog", "red", Box{0, 0, 0.5, 0.5}},
                      {"1", "cat", "blue", Box{0.5, 0.5, 1, 1}},
                      {"2", "car", "green", Box{0, 0.5, 0.5, 1}}};
  DetectionRecord d{"img", "l", {}};
  d.detections.push_back(det("dog", {0, 0, 0.5, 0.5}, solid({255, 0, 0}, 5)));
  d.detections.push_back(det("cat", {0.5, 0.5, 1, 1}, solid({255, 0, 0}, 5)));
  d.detections.push_back(det("dog", {0, 0.5, 0.5, 1}, solid({0, 200, 0}, 5)));
  const auto r = evaluate_image(layout, d);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_TRUE(r[0].fully_correct);
  EXPECT_TRUE(r[1].position_correct);
  EXPECT_FALSE(r[1].color_correct);
  EXPECT_FALSE(r[1].fully_correct);
  EXPECT_FALSE(r[2].matched);
  EXPECT_FALSE(r[2].fully_correct);
  DetectionRecord wrong{"img", "other", {}};
  EXPECT_THROW(evaluate_image(layout, wrong), Error);
}

TEST(EvaluateAll, FixtureMatchesBruteForceOracle) {
  const Json lj = fixture("eval_layouts.json"), dj = fixture("eval_detections.json");
  const auto layouts = parse_layouts(lj);
  const auto dets = parse_detections(dj);
  const auto want = oracle::brute_force_eval(lj, dj);
  for (std::size_t jobs : {1u, 4u}) {
    const auto got = evaluate_all(layouts, dets, ColorTable::defaults(), jobs);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      SCOPED_TRACE(got[i].image_id + "/" + got[i].instance_id);
      EXPECT_EQ(got[i].image_id, want[i].image_id);
      EXPECT_EQ(got[i].instance_id, want[i].instance_id);
      EXPECT_EQ(got[i].level, want[i].level);
      EXPECT_EQ(got[i].matched, want[i].matched);
      EXPECT_NEAR(got[i].iou, want[i].iou, 1e-12);
      EXPECT_EQ(got[i].position_correct, want[i].position);
      EXPECT_EQ(got[i].color_correct, want[i].color);
      EXPECT_EQ(got[i].fully_correct, want[i].fully);
    }
  }
}

TEST(EvaluateAll, FixtureCoversEveryOutcome) {
  const auto got = evaluate_all(parse_layouts(fixture("eval_layouts.json")), parse_detections(fixture("eval_detections.json")));
  bool exact_half = false, unmatched = false, color_fail = false, position_fail = false, full = false;
  for (const auto& r : got) {
    exact_half = exact_half || (r.iou == 0.5 && r.position_correct);
    unmatched = unmatched || !r.matched;
    color_fail = color_fail || (r.position_correct && !r.color_correct);
    position_fail = position_fail || (r.matched && !r.position_correct);
    full = full || r.fully_correct;
  }
  EXPECT_TRUE(exact_half && unmatched && color_fail && position_fail && full);
}

TEST(EvaluateAll, IdMismatchListsOrphans) {
  const auto layouts = parse_layouts(fixture("eval_layouts.json"));
  auto dets = parse_detections(fixture("eval_detections.json"));
  dets.front().layout_id = "nowhere";
  try {
    evaluate_all(layouts, dets);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInput);
    EXPECT_NE(std::string(e.what()).find("nowhere"), std::string::npos);
  }
}

TEST(Aggregate, Arithmetic) {
  auto rep = aggregate({rec("a", 2, "0", true, 0.8), rec("a", 2, "1", true, 0.6)});
  EXPECT_DOUBLE_EQ(rep.levels.at("L2").isr, 1.0);
  EXPECT_DOUBLE_EQ(rep.levels.at("L2").image_sr, 1.0);
  EXPECT_DOUBLE_EQ(rep.levels.at("L2").miou, 0.7);
  rep = aggregate({rec("a", 2, "0", true, 0.8), rec("a", 2, "1", false, 0.9)});
  EXPECT_DOUBLE_EQ(rep.levels.at("L2").isr, 0.5);
  EXPECT_DOUBLE_EQ(rep.levels.at("L2").image_sr, 0.0);
  EXPECT_DOUBLE_EQ(rep.levels.at("L2").miou, 0.4);
  try {
    aggregate({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyReport);
  }
}

TEST(Aggregate, AveragePoolsAllLevels) {
  const auto rep = aggregate({rec("a", 2, "0", true, 1.0), rec("a", 2, "1", true, 1.0), rec("b", 3, "0", false, 0.2),
                              rec("b", 3, "1", true, 0.5), rec("b", 3, "2", true, 0.5)});
  const auto& avg = rep.levels.at("average");
  EXPECT_EQ(avg.instances, 5u);
  EXPECT_EQ(avg.images, 2u);
  EXPECT_DOUBLE_EQ(avg.isr, 0.8);
  EXPECT_DOUBLE_EQ(avg.image_sr, 0.5);
  EXPECT_DOUBLE_EQ(avg.miou, 0.6);
}

TEST(Aggregate, InvariantsAndPermutationInvariance) {
  const auto records = evaluate_all(parse_layouts(fixture("eval_layouts.json")), parse_detections(fixture("eval_detections.json")));
  const EvalReport rep = aggregate(records);
  for (const auto& [key, m] : rep.levels) {
    EXPECT_LE(m.image_sr, m.isr) << key;
    EXPECT_LE(m.miou, m.isr) << key;
  }
  std::mt19937 gen(3);
  for (int i = 0; i < 5; ++i) {
    auto shuffled = records;
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    EXPECT_EQ(aggregate(shuffled), rep);
  }
}

TEST(Report, JsonAndCsvRoundTrip) {
  const EvalReport rep = aggregate(
      evaluate_all(parse_layouts(fixture("eval_layouts.json")), parse_detections(fixture("eval_detections.json"))));
  const Json j = report_to_json(rep);
  EXPECT_EQ(parse_report(Json::parse(j.dump())), rep);
  EXPECT_EQ(j["reference"]["layouts_per_level"]["L2"], 155);
  EXPECT_EQ(j["reference"]["images_per_prompt"], 8);
  const std::string csv = report_to_csv(rep);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "level,instances,images,isr,image_sr,miou");
  std::size_t rows = 0;
  std::string last;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string key, f;
    std::getline(row, key, ',');
    LevelMetrics m;
    std::getline(row, f, ',');
    m.instances = std::stoul(f);
    std::getline(row, f, ',');
    m.images = std::stoul(f);
    std::getline(row, f, ',');
    m.isr = std::stod(f);
    std::getline(row, f, ',');
    m.image_sr = std::stod(f);
    std::getline(row, f, ',');
    m.miou = std::stod(f);
    EXPECT_EQ(m, rep.levels.at(key));
    last = key;
    ++rows;
  }
  EXPECT_EQ(rows, rep.levels.size());
  EXPECT_EQ(last, "average");
}

TEST(Layouts, ParseValidatesAndRoundTrips) {
  const auto layouts = parse_layouts(fixture("eval_layouts.json"));
  EXPECT_EQ(layouts.size(), 10u);
  const auto again = parse_layouts(Json::parse(layouts_to_json(layouts).dump()));
  ASSERT_EQ(again.size(), layouts.size());
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    EXPECT_EQ(again[i].layout_id, layouts[i].layout_id);
    ASSERT_EQ(again[i].instances.size(), layouts[i].instances.size());
    for (std::size_t k = 0; k < layouts[i].instances.size(); ++k) EXPECT_EQ(again[i].instances[k].region, layouts[i].instances[k].region);
  }
  EXPECT_THROW(parse_layouts(Json::parse(R"({"version":1,"layouts":[{"layout_id":"x","level":3,"instances":[]}]})")), Error);
  EXPECT_THROW(parse_detections(Json::parse(R"({"version":1,"images":[{"image_id":"a","layout_id":"x","detections":[],"extra":1}]})")), Error);
}

TEST(Benchmark, KeepsLargestAndFiltersSmall) {
  PoolLayout big{"big", {}};
  for (int i = 0; i < 8; ++i) big.instances.push_back({"c" + std::to_string(i), Box{0, 0, 0.2 + 0.1 * i, 0.5}});
  big.instances.push_back({"tiny", Box{0, 0, 0.1, 0.9}});
  BenchmarkConfig cfg;
  cfg.per_level = {{3, 1}};
  const auto out = build_benchmark({big}, cfg);
  ASSERT_EQ(out.size(), 1u);
  ASSERT_EQ(out[0].instances.size(), 3u);
  EXPECT_EQ(out[0].instances[0].category, "c7");
  EXPECT_EQ(out[0].instances[1].category, "c6");
  EXPECT_EQ(out[0].instances[2].category, "c5");
  EXPECT_FALSE(large_enough({0, 0, 0.1, 1}));
  EXPECT_TRUE(large_enough({0, 0, 0.125, 0.125}));
}

TEST(Benchmark, PromptTemplateAndColors) {
  std::vector<BenchmarkInstance> two = {{"0", "dog", "red", Box{}}, {"1", "cat", "blue", Box{}}};
  EXPECT_EQ(render_prompt(two), "a red dog, and a blue cat");
  two.push_back({"2", "car", "green", Box{}});
  EXPECT_EQ(render_prompt(two), "a red dog, a blue cat, and a green car");
  PoolLayout l{"p", {{"dog", Box{0, 0, 0.5, 0.5}}, {"cat", Box{0.5, 0.5, 1, 1}}}};
  BenchmarkConfig cfg;
  cfg.per_level = {{2, 1}};
  const auto out = build_benchmark({l}, cfg);
  const auto& inst = out.at(0).instances;
  const auto& pal = palette();
  const auto a = std::find(pal.begin(), pal.end(), inst[0].color), b = std::find(pal.begin(), pal.end(), inst[1].color);
  ASSERT_NE(a, pal.end());
  EXPECT_EQ((a - pal.begin() + 1) % 7, b - pal.begin());
  EXPECT_EQ(out[0].prompt, render_prompt(inst));
}

TEST(Benchmark, DeterministicAndReportsShortfall) {
  std::vector<PoolLayout> pool;
  std::mt19937 gen(1);
  for (int i = 0; i < 30; ++i) {
    PoolLayout l{"p" + std::to_string(i), {}};
    const int n = 2 + static_cast<int>(gen() % 6);
    for (int k = 0; k < n; ++k) l.instances.push_back({"obj", Box{0, 0, 0.2 + 0.01 * k, 0.3}});
    pool.push_back(l);
  }
  BenchmarkConfig cfg;
  cfg.seed = 9;
  const auto a = build_benchmark(pool, cfg), b = build_benchmark(pool, cfg);
  ASSERT_EQ(a.size(), 10u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].layout_id, b[i].layout_id);
    EXPECT_EQ(a[i].instances.size(), a[i].level);
    ids.insert(a[i].layout_id);
  }
  EXPECT_EQ(ids.size(), a.size());
  cfg.per_level = {{6, 100}};
  try {
    build_benchmark(pool, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kBuild);
    EXPECT_NE(std::string(e.what()).find("shortfall"), std::string::npos);
  }
}

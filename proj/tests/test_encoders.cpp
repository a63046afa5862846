#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "migc/encoders.hpp"
#include "oracles.hpp"

using namespace migc;

TEST(EncodeText, DeterministicUnitRows) {
  const Tensor a = encode_text({"red", "cat", "red"}, 16);
  ASSERT_EQ(a.shape(), (Shape{3, 16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double n = 0.0;
    for (std::size_t j = 0; j < 16; ++j) n += a.at(r, j) * a.at(r, j);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  }
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(a.at(0, j), a.at(2, j));
  EXPECT_EQ(encode_text({"red"}, 16), encode_text({"red"}, 16));
}

TEST(EncodeText, PerTokenEncodingIsOrderIndependent) {
  const Tensor a = encode_text({"red", "cat"}, 8), b = encode_text({"cat", "red"}, 8);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(a.at(0, j), b.at(1, j));
    EXPECT_EQ(a.at(1, j), b.at(0, j));
  }
  EXPECT_NE(a, b);
}

TEST(EncodeText, RejectsEmptyAndTinyDims) {
  try {
    encode_text({}, 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
  EXPECT_THROW(encode_text({"a"}, 1), Error);
}

TEST(EncodeImage, DeterministicAndDistinct) {
  ReferenceImageStore store;
  store.add("red", RgbImage::filled(8, 8, {255, 0, 0}));
  store.add("blue", RgbImage::filled(8, 8, {0, 0, 255}));
  store.add("gray", RgbImage::filled(4, 4, {128, 128, 128}));
  EXPECT_EQ(encode_image(store, "red", 16), encode_image(store, "red", 16));
  const std::vector<std::string> ids = {"red", "blue", "gray", kBlankImageId};
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = i + 1; j < ids.size(); ++j)
      EXPECT_NE(encode_image(store, ids[i], 16), encode_image(store, ids[j], 16)) << ids[i] << " vs " << ids[j];
}

TEST(EncodeImage, UnknownIdIsNotFound) {
  ReferenceImageStore store;
  try {
    encode_image(store, "missing", 16);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNotFound);
  }
}

TEST(ImageProjector, IdentityInitPassesThrough) {
  ReferenceImageStore store;
  const Tensor e = encode_image(store, kBlankImageId, 16);
  EXPECT_EQ(ImageProjector::identity(16, 8)(e), e);
}

TEST(Fourier, ZeroBoxGivesSinZeroCosOne) {
  const Tensor f = fourier_embed(Box{0, 0, 0, 0}, 3);
  ASSERT_EQ(f.size(), 24u);
  for (std::size_t i = 0; i < f.size(); i += 2) {
    EXPECT_EQ(f[i], 0.0);
    EXPECT_EQ(f[i + 1], 1.0);
  }
}

TEST(Fourier, UnitBoxSingleFrequency) {
  const Tensor f = fourier_embed(Box{1, 1, 1, 1}, 1);
  for (std::size_t i = 0; i < 8; i += 2) {
    EXPECT_NEAR(f[i], 0.0, 1e-15);
    EXPECT_EQ(f[i + 1], -1.0);
  }
}

TEST(Fourier, MatchesTrigOracle) {
  const Box b{0.25, 0.5, 0.75, 1.0};
  const Tensor f = fourier_embed(b, 2);
  const long double coords[4] = {0.25L, 0.5L, 0.75L, 1.0L};
  const long double pi = std::numbers::pi_v<long double>;
  std::size_t i = 0;
  for (long double v : coords)
    for (int k = 0; k < 2; ++k) {
      const long double arg = std::pow(2.0L, k) * pi * v;
      EXPECT_NEAR(f[i++], static_cast<double>(std::sin(arg)), 1e-12);
      EXPECT_NEAR(f[i++], static_cast<double>(std::cos(arg)), 1e-12);
    }
}

TEST(GroundingMlp, ZeroWeightsGiveZero) {
  GroundingMlp<double> mlp{Linear<double>::zeros(16, 4), Linear<double>::zeros(4, 8), 2, 1};
  const Tensor out = mlp(Box{0.1, 0.2, 0.3, 0.4});
  for (double v : out.storage()) EXPECT_EQ(v, 0.0);
}

TEST(GroundingMlp, GoldenVector) {
  Rng rng(2024);
  const auto mlp = GroundingMlp<double>::random(rng, 8, 32, 6, 1, 0.5);
  const Tensor w = mlp(Box{0.1, 0.2, 0.6, 0.9});
  ASSERT_EQ(w.shape(), (Shape{1, 6}));
  const double golden[6] = {-3.9193732390850604, 1.8580724987830273, -1.6770720711291665,
                            -2.2615853259644374, -0.53390827483637548, 4.146493940941931};
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(w[j], golden[j], 1e-12) << j;
  EXPECT_EQ(mlp(Box{0.1, 0.2, 0.6, 0.9}), w);
}

TEST(GroundingMlp, ShapeMismatchIsConfigError) {
  Rng rng(1);
  const auto mlp = GroundingMlp<double>::random(rng, 4, 8, 6, 1, 0.1);
  try {
    mlp(Tensor({1, 16}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(GroundingEmbedding, PositionFirst) {
  const Tensor pos({1, 4}, {1, 1, 1, 1});
  const Tensor text = encode_text({"red", "dog"}, 4);
  const auto g = make_grounding_embedding(pos, text);
  EXPECT_EQ(g.vectors.dim(0), 3u);
  EXPECT_EQ(g.position_prefix_len, 1u);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g.vectors.at(0, j), 1.0);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g.vectors.at(2, j), text.at(1, j));
}

TEST(GroundingEmbedding, RejectsEmptyAndMismatched) {
  EXPECT_THROW(make_grounding_embedding(Tensor({1, 4}), Tensor({1, 5})), Error);
  try {
    make_grounding_embedding(Tensor({1, 4}), Tensor({1, 5}));
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(GroundingEmbedding, SameTextDifferentBoxesDiffer) {
  Rng rng(4);
  const auto mlp = GroundingMlp<double>::random(rng, 8, 16, 8, 1, 0.3);
  const Tensor text = encode_text({"white", "cat"}, 8);
  const auto a = make_grounding_embedding(mlp(Box{0, 0, 0.5, 0.5}), text);
  const auto b = make_grounding_embedding(mlp(Box{0.5, 0.5, 1, 1}), text);
  const auto c = make_grounding_embedding(mlp(Box{0, 0, 0.5, 0.5}), text);
  EXPECT_NE(a.vectors, b.vectors);
  EXPECT_EQ(a.vectors, c.vectors);
}

TEST(Rasterize, NullBoxIsEmpty) { EXPECT_TRUE(rasterize_box(Box{0, 0, 0, 0}, 8, 8).empty()); }

TEST(Rasterize, FullBoxIsFull) { EXPECT_EQ(rasterize_box(Box{0, 0, 1, 1}, 5, 7).count(), 35u); }

TEST(Rasterize, CenteredQuarterBoxOnEightGrid) {
  const PositionMap m = rasterize_box(Box{0.25, 0.25, 0.75, 0.75}, 8, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(m.at(r, c), r >= 2 && r <= 5 && c >= 2 && c <= 5) << r << "," << c;
}

TEST(Rasterize, MaskPassesThroughIdempotently) {
  const PositionMap m = PositionMap::from_cells(2, 3, {1, 0, 1, 0, 1, 0});
  EXPECT_EQ(rasterize_position(m, 2, 3), m);
  EXPECT_EQ(rasterize_position(rasterize_position(m, 2, 3), 2, 3), m);
}

TEST(Rasterize, MonotoneForContainingBoxes) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
    const Box inner{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
    const Box outer{inner.x1 * rng.uniform(), inner.y1 * rng.uniform(), inner.x2 + (1 - inner.x2) * rng.uniform(),
                    inner.y2 + (1 - inner.y2) * rng.uniform()};
    const PositionMap mi = rasterize_box(inner, 9, 11), mo = rasterize_box(outer, 9, 11);
    for (std::size_t i = 0; i < mi.size(); ++i)
      if (mi[i]) EXPECT_TRUE(mo[i]);
  }
}

TEST(Rasterize, BboxRoundTripOnGrid) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const std::size_t r0 = rng.below(8), r1 = r0 + rng.below(8 - r0), c0 = rng.below(8), c1 = c0 + rng.below(8 - c0);
    const Box b{c0 / 8.0, r0 / 8.0, (c1 + 1) / 8.0, (r1 + 1) / 8.0};
    const PositionMap m = rasterize_box(b, 8, 8);
    EXPECT_EQ(rasterize_box(mask_to_bbox(m), 8, 8), m);
  }
}

TEST(MaskToBbox, EmptyMaskIsNullBox) { EXPECT_TRUE(mask_to_bbox(PositionMap(4, 4)).is_null()); }

TEST(MaskToBbox, TightBox) {
  PositionMap m(4, 8);
  m.set(1, 2, true);
  m.set(2, 5, true);
  const Box b = mask_to_bbox(m);
  EXPECT_EQ(b, (Box{2 / 8.0, 1 / 4.0, 6 / 8.0, 3 / 4.0}));
}

TEST(PositionMap, RejectsNonBinary) { EXPECT_THROW(PositionMap::from_cells(1, 2, {0, 2}), Error); }

TEST(Box, ValidatesOrdering) { EXPECT_THROW(Box({0.5, 0, 0.4, 1}).validate(), Error); }

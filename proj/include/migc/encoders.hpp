#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "migc/image_io.hpp"
#include "migc/tensor.hpp"

namespace migc {

/// Axis-aligned box in normalized image coordinates.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  /// [0,0,0,0] is the padding box used for absent instances.
  bool is_null() const { return x1 == 0.0 && y1 == 0.0 && x2 == 0.0 && y2 == 0.0; }

  void validate() const {
    const bool ok = 0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0;
    if (!ok) {
      std::ostringstream os;
      os << "box [" << x1 << ',' << y1 << ',' << x2 << ',' << y2
         << "] must satisfy 0<=x1<=x2<=1 and 0<=y1<=y2<=1";
      fail(ErrorKind::kInvalidArgument, os.str());
    }
  }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Binary H x W map locating one instance (or the background).
class PositionMap {
 public:
  PositionMap() = default;
  PositionMap(std::size_t height, std::size_t width, bool value = false)
      : height_(height), width_(width), cells_(height * width, value ? 1 : 0) {
    require(height >= 1 && width >= 1, ErrorKind::kInvalidArgument, "position map needs H,W >= 1");
  }

  /// Accepts any 0/1 grid; other values are rejected to keep the map binary.
  static PositionMap from_cells(std::size_t height, std::size_t width, std::vector<std::uint8_t> cells) {
    PositionMap m(height, width);
    require(cells.size() == height * width, ErrorKind::kShape, "position map cell count mismatch");
    for (auto c : cells) require(c <= 1, ErrorKind::kInvalidArgument, "position map must be binary");
    m.cells_ = std::move(cells);
    return m;
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return cells_.size(); }

  bool at(std::size_t r, std::size_t c) const { return cells_[r * width_ + c] != 0; }
  bool operator[](std::size_t flat) const { return cells_[flat] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { cells_[r * width_ + c] = v ? 1 : 0; }
  void set(std::size_t flat, bool v) { cells_[flat] = v ? 1 : 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto c : cells_) n += c;
    return n;
  }
  bool empty() const { return count() == 0; }
  const std::vector<std::uint8_t>& cells() const { return cells_; }

  friend bool operator==(const PositionMap&, const PositionMap&) = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<std::uint8_t> cells_;
};

struct TextAttribute {
  std::vector<std::string> tokens;
  friend bool operator==(const TextAttribute&, const TextAttribute&) = default;
};

struct ImageAttribute {
  std::string image_id;
  friend bool operator==(const ImageAttribute&, const ImageAttribute&) = default;
};

using Attribute = std::variant<TextAttribute, ImageAttribute>;
using Position = std::variant<Box, PositionMap>;

enum class Modality { kText, kImage };

struct InstanceDescription {
  std::string id;
  Attribute attribute;
  Position position;

  Modality modality() const {
    return std::holds_alternative<ImageAttribute>(attribute) ? Modality::kImage : Modality::kText;
  }
  friend bool operator==(const InstanceDescription&, const InstanceDescription&) = default;
};

/// Token used for empty ("null") text, e.g. for padded instances.
inline constexpr const char* kNullToken = "<pad>";
/// Reference-image id of the blank white padding image.
inline constexpr const char* kBlankImageId = "__blank_white__";

inline std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

/// Deterministic stand-in for the CLIP text encoder: each token is hashed to a
/// seed and expanded into a unit-norm vector. No context mixing between tokens.
inline Tensor encode_text(const std::vector<std::string>& tokens, std::size_t dim) {
  require(!tokens.empty(), ErrorKind::kInvalidArgument, "encode_text needs at least one token");
  require(dim >= 2, ErrorKind::kInvalidArgument, "embedding dim must be >= 2");
  Tensor out({tokens.size(), dim});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::uint64_t state = fnv1a(tokens[i]) ^ (0x5851f42d4c957f2dULL * dim);
    double norm2 = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      double x = splitmix_symmetric(state);
      out.at(i, j) = x;
      norm2 += x * x;
    }
    if (norm2 == 0.0) {
      out.at(i, 0) = 1.0;
      norm2 = 1.0;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t j = 0; j < dim; ++j) out.at(i, j) *= inv;
  }
  return out;
}

/// Read-only map from reference-image id to pixels. Always contains the blank
/// white padding image.
class ReferenceImageStore {
 public:
  ReferenceImageStore() { images_.emplace(kBlankImageId, RgbImage::filled(8, 8, {255, 255, 255})); }

  void add(const std::string& id, RgbImage image) {
    require(image.width > 0 && image.height > 0, ErrorKind::kInvalidArgument, "empty image " + id);
    images_[id] = std::move(image);
  }

  void load(const std::string& id, const std::filesystem::path& path) { add(id, read_image(path)); }

  bool contains(const std::string& id) const { return images_.count(id) != 0; }

  const RgbImage& get(const std::string& id) const {
    auto it = images_.find(id);
    require(it != images_.end(), ErrorKind::kNotFound, "unknown reference image id '" + id + "'");
    return it->second;
  }

 private:
  std::map<std::string, RgbImage> images_;
};

/// Deterministic stand-in for the CLIP image encoder. The image is split into
/// a g x g grid (tokens = g*g); each cell's mean color goes through a fixed
/// seeded projection and is normalized to unit length.
inline Tensor encode_image(const RgbImage& image, std::size_t dim, std::size_t tokens = 4) {
  require(dim >= 2, ErrorKind::kInvalidArgument, "embedding dim must be >= 2");
  const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens))));
  require(grid >= 1 && grid * grid == tokens, ErrorKind::kInvalidArgument,
          "image token count must be a perfect square");
  Tensor out({tokens, dim});
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      const std::size_t x0 = gx * image.width / grid, x1 = std::max(x0 + 1, (gx + 1) * image.width / grid);
      const std::size_t y0 = gy * image.height / grid, y1 = std::max(y0 + 1, (gy + 1) * image.height / grid);
      double feat[4] = {0.0, 0.0, 0.0, 1.0};
      std::size_t n = 0;
      for (std::size_t y = y0; y < std::min(y1, image.height); ++y) {
        for (std::size_t x = x0; x < std::min(x1, image.width); ++x) {
          const Rgb& p = image.at(x, y);
          feat[0] += p.r / 255.0;
          feat[1] += p.g / 255.0;
          feat[2] += p.b / 255.0;
          ++n;
        }
      }
      for (int c = 0; c < 3; ++c) feat[c] = n ? feat[c] / static_cast<double>(n) : 0.0;
      const std::size_t token = gy * grid + gx;
      std::uint64_t state = fnv1a("image-token-" + std::to_string(token)) ^ (0x9e3779b97f4a7c15ULL * dim);
      double norm2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        double acc = 0.0;
        for (double f : feat) acc += splitmix_symmetric(state) * f;
        out.at(token, j) = acc;
        norm2 += acc * acc;
      }
      const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
      for (std::size_t j = 0; j < dim; ++j) out.at(token, j) *= inv;
    }
  }
  return out;
}

inline Tensor encode_image(const ReferenceImageStore& store, const std::string& image_id, std::size_t dim,
                           std::size_t tokens = 4) {
  return encode_image(store.get(image_id), dim, tokens);
}

/// Image projector W'_e = Proj(W_e): a residual two-layer perceptron,
/// W + silu(W A + a) B + b. With B and b zero it is the identity.
struct ImageProjector {
  Linear<double> hidden;
  Linear<double> out;

  static ImageProjector identity(std::size_t dim, std::size_t width = 0) {
    if (width == 0) width = dim;
    return {Linear<double>::zeros(dim, width), Linear<double>::zeros(width, dim)};
  }

  static ImageProjector random(Rng& rng, std::size_t dim, std::size_t width, double stddev) {
    return {Linear<double>::random(rng, dim, width, stddev), Linear<double>::random(rng, width, dim, stddev)};
  }

  Tensor operator()(const Tensor& embedding) const {
    Tensor h = hidden(embedding);
    for (auto& x : h.storage()) x = silu(x);
    Tensor delta = out(h);
    return embedding + delta;
  }
};

/// Fourier features of a box: for each coordinate v in (x1,y1,x2,y2) and
/// frequency k in [0, L): sin(2^k pi v), cos(2^k pi v). Layout is
/// coordinate-major, then frequency, then (sin, cos).
inline Tensor fourier_embed(const Box& box, std::size_t frequencies) {
  box.validate();
  require(frequencies >= 1, ErrorKind::kInvalidArgument, "need at least one Fourier frequency");
  const double coords[4] = {box.x1, box.y1, box.x2, box.y2};
  Tensor out({4 * 2 * frequencies});
  std::size_t i = 0;
  for (double v : coords) {
    for (std::size_t k = 0; k < frequencies; ++k) {
      const double arg = std::ldexp(1.0, static_cast<int>(k)) * std::numbers::pi * v;
      out[i++] = std::sin(arg);
      out[i++] = std::cos(arg);
    }
  }
  return out;
}

/// Position encoder MLP(Fourier(box)): Linear -> SiLU -> Linear, reshaped into
/// `positions` vectors of width `dim`.
template <class T>
struct GroundingMlp {
  Linear<T> fc1;
  Linear<T> fc2;
  std::size_t frequencies = 8;
  std::size_t positions = 1;

  static GroundingMlp random(Rng& rng, std::size_t frequencies, std::size_t hidden, std::size_t dim,
                             std::size_t positions, double stddev) {
    return {Linear<T>::random(rng, 8 * frequencies, hidden, stddev),
            Linear<T>::random(rng, hidden, positions * dim, stddev), frequencies, positions};
  }

  std::size_t dim() const { return fc2.out_features() / positions; }

  BasicTensor<T> operator()(const BasicTensor<T>& fourier) const {
    require(fourier.size() == 8 * frequencies, ErrorKind::kConfig,
            "Fourier feature length " + std::to_string(fourier.size()) + " does not match " +
                std::to_string(8 * frequencies));
    require(fc1.in_features() == 8 * frequencies && fc2.in_features() == fc1.out_features() &&
                fc2.out_features() % positions == 0,
            ErrorKind::kConfig, "grounding MLP weight shapes are inconsistent");
    BasicTensor<T> h = fc1(fourier.reshaped({1, fourier.size()}));
    for (auto& x : h.storage()) x = silu(x);
    return fc2(h).reshaped({positions, dim()});
  }

  BasicTensor<T> operator()(const Box& box) const {
    return (*this)(fourier_embed(box, frequencies).template cast<T>());
  }

  template <class U>
  GroundingMlp<U> cast() const {
    return {fc1.template cast<U>(), fc2.template cast<U>(), frequencies, positions};
  }

  template <class Fn>
  void visit(Fn&& fn) {
    fc1.visit(fn);
    fc2.visit(fn);
  }
};

/// [W_pos ; W_attr] with the position vectors first.
template <class T>
struct GroundingEmbedding {
  BasicTensor<T> vectors;
  std::size_t position_prefix_len = 0;
};

template <class T>
GroundingEmbedding<T> make_grounding_embedding(const BasicTensor<T>& positions, const BasicTensor<T>& attribute) {
  require(positions.rank() == 2 && attribute.rank() == 2, ErrorKind::kShape,
          "grounding inputs must be matrices");
  require(attribute.dim(0) >= 1, ErrorKind::kInvalidArgument, "attribute sequence is empty");
  require(positions.dim(1) == attribute.dim(1), ErrorKind::kShape,
          "position/attribute width mismatch " + shape_string(positions.shape()) + " vs " +
              shape_string(attribute.shape()));
  return {concat_rows(positions, attribute), positions.dim(0)};
}

/// Box to binary map by cell-center inclusion: cell (r,c) is on when its
/// center ((c+0.5)/W, (r+0.5)/H) lies in the closed box. Zero-area boxes are empty.
inline PositionMap rasterize_box(const Box& box, std::size_t height, std::size_t width) {
  box.validate();
  PositionMap m(height, width);
  if (box.width() <= 0.0 || box.height() <= 0.0) return m;
  for (std::size_t r = 0; r < height; ++r) {
    const double cy = (static_cast<double>(r) + 0.5) / static_cast<double>(height);
    if (cy < box.y1 || cy > box.y2) continue;
    for (std::size_t c = 0; c < width; ++c) {
      const double cx = (static_cast<double>(c) + 0.5) / static_cast<double>(width);
      if (cx >= box.x1 && cx <= box.x2) m.set(r, c, true);
    }
  }
  return m;
}

/// Nearest-neighbor resample of a map onto another grid.
inline PositionMap resample_nearest(const PositionMap& map, std::size_t height, std::size_t width) {
  if (map.height() == height && map.width() == width) return map;
  PositionMap out(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    const std::size_t sr = std::min(map.height() - 1, (2 * r + 1) * map.height() / (2 * height));
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t sc = std::min(map.width() - 1, (2 * c + 1) * map.width() / (2 * width));
      out.set(r, c, map.at(sr, sc));
    }
  }
  return out;
}

/// Unified 2D position map for any position format. Masks at the requested
/// resolution pass through unchanged; other resolutions are resampled.
inline PositionMap rasterize_position(const Position& position, std::size_t height, std::size_t width) {
  require(height >= 1 && width >= 1, ErrorKind::kInvalidArgument, "H and W must be >= 1");
  if (const Box* box = std::get_if<Box>(&position)) return rasterize_box(*box, height, width);
  return resample_nearest(std::get<PositionMap>(position), height, width);
}

/// Tight box around the nonzero cells. An all-zero map gives the null box.
inline Box mask_to_bbox(const PositionMap& map) {
  std::size_t r0 = map.height(), r1 = 0, c0 = map.width(), c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < map.height(); ++r) {
    for (std::size_t c = 0; c < map.width(); ++c) {
      if (!map.at(r, c)) continue;
      any = true;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (!any) return Box{};
  const auto h = static_cast<double>(map.height()), w = static_cast<double>(map.width());
  return Box{static_cast<double>(c0) / w, static_cast<double>(r0) / h, static_cast<double>(c1 + 1) / w,
             static_cast<double>(r1 + 1) / h};
}

/// Box form of any position (masks are standardized through mask_to_bbox).
inline Box position_box(const Position& position) {
  if (const Box* box = std::get_if<Box>(&position)) return *box;
  return mask_to_bbox(std::get<PositionMap>(position));
}

/// Encoder sizes and frozen encoder state shared by the shaders.
struct EncoderContext {
  std::size_t embed_dim = 16;
  std::size_t image_tokens = 4;
  ReferenceImageStore images;
  ImageProjector projector;

  /// Text tokens (or the null token for empty text) or projected image
  /// embeddings W'_e.
  Tensor attribute_embedding(const Attribute& attribute) const {
    if (const auto* text = std::get_if<TextAttribute>(&attribute)) {
      if (text->tokens.empty()) return encode_text({kNullToken}, embed_dim);
      return encode_text(text->tokens, embed_dim);
    }
    const auto& image = std::get<ImageAttribute>(attribute);
    return projector(encode_image(images, image.image_id, embed_dim, image_tokens));
  }
};

}  // namespace migc

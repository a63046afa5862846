#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#ifdef MIGC_HAVE_PNG
#include <png.h>
#endif

#include "migc/errors.hpp"

namespace migc {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit RGB raster, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Rgb> pixels;

  static RgbImage filled(std::size_t w, std::size_t h, Rgb color) {
    return RgbImage{w, h, std::vector<Rgb>(w * h, color)};
  }
  const Rgb& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

namespace detail {

inline void skip_ppm_space(std::istream& in) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
      in.get();
    } else {
      return;
    }
  }
}

inline std::size_t read_ppm_int(std::istream& in, const std::string& path) {
  skip_ppm_space(in);
  long long v = -1;
  in >> v;
  require(static_cast<bool>(in) && v >= 0, ErrorKind::kInput, "malformed PPM header in " + path);
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Reads binary (P6) or ASCII (P3) PPM with maxval 255.
inline RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open image " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  require(magic == "P6" || magic == "P3", ErrorKind::kInput, "not a PPM file: " + path.string());
  RgbImage img;
  img.width = detail::read_ppm_int(in, path.string());
  img.height = detail::read_ppm_int(in, path.string());
  const std::size_t maxval = detail::read_ppm_int(in, path.string());
  require(maxval == 255, ErrorKind::kInput, "only maxval 255 PPM is supported: " + path.string());
  require(img.width > 0 && img.height > 0, ErrorKind::kInput, "empty PPM: " + path.string());
  img.pixels.resize(img.width * img.height);
  if (magic == "P6") {
    in.get();
    std::vector<char> raw(img.pixels.size() * 3);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    require(static_cast<std::size_t>(in.gcount()) == raw.size(), ErrorKind::kInput,
            "truncated PPM: " + path.string());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      img.pixels[i] = {static_cast<std::uint8_t>(raw[3 * i]), static_cast<std::uint8_t>(raw[3 * i + 1]),
                       static_cast<std::uint8_t>(raw[3 * i + 2])};
    }
  } else {
    for (auto& p : img.pixels) {
      p.r = static_cast<std::uint8_t>(detail::read_ppm_int(in, path.string()));
      p.g = static_cast<std::uint8_t>(detail::read_ppm_int(in, path.string()));
      p.b = static_cast<std::uint8_t>(detail::read_ppm_int(in, path.string()));
    }
  }
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kInput, "cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (const Rgb& p : img.pixels) {
    const char px[3] = {static_cast<char>(p.r), static_cast<char>(p.g), static_cast<char>(p.b)};
    out.write(px, 3);
  }
}

#ifdef MIGC_HAVE_PNG
inline RgbImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_file(&image, path.string().c_str()) != 0, ErrorKind::kInput,
          "cannot read PNG " + path.string());
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  const bool ok = png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) != 0;
  png_image_free(&image);
  require(ok, ErrorKind::kInput, "cannot decode PNG " + path.string());
  RgbImage img;
  img.width = image.width;
  img.height = image.height;
  img.pixels.resize(img.width * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = {buffer[3 * i], buffer[3 * i + 1], buffer[3 * i + 2]};
  return img;
}
#endif

/// Dispatches on extension: .ppm always, .png when built with libpng.
inline RgbImage read_image(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::kNotFound, "image file missing: " + path.string());
  const std::string ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") {
#ifdef MIGC_HAVE_PNG
    return read_png(path);
#else
    fail(ErrorKind::kInput, "PNG support not compiled in: " + path.string());
#endif
  }
  return read_ppm(path);
}

}  // namespace migc

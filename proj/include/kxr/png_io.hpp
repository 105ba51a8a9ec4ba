// Grayscale image I/O: 8/16-bit PNG via libpng, or raw float32 with a
// JSON sidecar shape header (<file>.hdr).
#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>

#include "kxr/image.hpp"
#include "kxr/serialize.hpp"

namespace kxr {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png16(const std::string& path, const Image& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint16_t> row(img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const float v = std::clamp(img.at(y, x), 0.0f, 1.0f);
      const uint16_t q = static_cast<uint16_t>(std::lround(v * 65535.0f));
      row[x] = static_cast<uint16_t>((q >> 8) | (q << 8));  // big-endian
    }
    png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw IntegrityError(path + ": not a png file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IntegrityError("png read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);

  const int h = static_cast<int>(png_get_image_height(png, info));
  const int w = static_cast<int>(png_get_image_width(png, info));
  Image img(h, w);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    if (depth == 16) {
      for (int x = 0; x < w; ++x) {
        const uint16_t v = static_cast<uint16_t>((row[2 * x] << 8) | row[2 * x + 1]);
        img.at(y, x) = v / 65535.0f;
      }
    } else {
      for (int x = 0; x < w; ++x) img.at(y, x) = row[x] / 255.0f;
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// Raw float32 row-major payload with a sidecar header describing the shape.
inline void write_raw(const std::string& path, const Image& img) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  const size_t n = img.pixels.size();
  const size_t written = std::fwrite(img.pixels.data(), sizeof(float), n, f);
  std::fclose(f);
  if (written != n) throw IoError("short write: " + path);
  write_json_file(path + ".hdr", {{"height", img.height}, {"width", img.width}, {"dtype", "f32"}});
}

inline Image read_raw(const std::string& path) {
  const json hdr = read_json_file(path + ".hdr");
  Image img(hdr.at("height").get<int>(), hdr.at("width").get<int>());
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  const size_t n = img.pixels.size();
  const size_t got = std::fread(img.pixels.data(), sizeof(float), n, f);
  std::fclose(f);
  if (got != n) throw IntegrityError(path + ": payload does not match sidecar shape");
  return img;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline Image read_image(const std::string& path) {
  return ends_with(path, ".png") ? read_png(path) : read_raw(path);
}

inline void write_image(const std::string& path, const Image& img) {
  if (ends_with(path, ".png"))
    write_png16(path, img);
  else
    write_raw(path, img);
}

}  // namespace kxr

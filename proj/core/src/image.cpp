#include "avopt/image.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>

#include "avopt/common.hpp"

namespace avopt {

namespace {

unsigned char quantize(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

struct WriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~WriteGuard() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

struct ReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~ReadGuard() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

void write_png_bytes(const std::string& path, int width, int height, int channels,
                     const std::vector<unsigned char>& bytes) {
  if (width <= 0 || height <= 0)
    throw ValidationError("cannot write empty image '" + path + "'");
  WriteGuard g;
  g.fp = std::fopen(path.c_str(), "wb");
  if (!g.fp) throw ValidationError("cannot open '" + path + "' for writing");
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw ValidationError("png writer allocation failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw ValidationError("png writer allocation failed");
  if (setjmp(png_jmpbuf(g.png))) throw ValidationError("failed to write PNG '" + path + "'");
  png_init_io(g.png, g.fp);
  png_set_IHDR(g.png, g.info, width, height, 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(g.png, g.info);
  const size_t stride = static_cast<size_t>(width) * channels;
  for (int y = 0; y < height; ++y)
    png_write_row(g.png, const_cast<png_bytep>(bytes.data() + y * stride));
  png_write_end(g.png, nullptr);
}

// Decodes any supported PNG into 8-bit rows with `channels` (1 or 3) samples.
std::vector<unsigned char> read_png_bytes(const std::string& path, int channels, int* width,
                                          int* height) {
  ReadGuard g;
  g.fp = std::fopen(path.c_str(), "rb");
  if (!g.fp) throw ValidationError("cannot open '" + path + "' for reading");
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw ValidationError("png reader allocation failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw ValidationError("png reader allocation failed");
  if (setjmp(png_jmpbuf(g.png))) throw ValidationError("failed to read PNG '" + path + "'");
  png_init_io(g.png, g.fp);
  png_read_info(g.png, g.info);

  png_set_expand(g.png);
  png_set_strip_16(g.png);
  png_set_strip_alpha(g.png);
  const png_byte color = png_get_color_type(g.png, g.info);
  if (channels == 3) {
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(g.png);
  } else {
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE)
      png_set_rgb_to_gray_fixed(g.png, 1, -1, -1);
  }
  png_read_update_info(g.png, g.info);

  const int w = static_cast<int>(png_get_image_width(g.png, g.info));
  const int h = static_cast<int>(png_get_image_height(g.png, g.info));
  const size_t rowbytes = png_get_rowbytes(g.png, g.info);
  if (rowbytes != static_cast<size_t>(w) * channels)
    throw ValidationError("unexpected PNG layout in '" + path + "'");

  std::vector<unsigned char> bytes(static_cast<size_t>(h) * rowbytes);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = bytes.data() + y * rowbytes;
  png_read_image(g.png, rows.data());
  png_read_end(g.png, nullptr);
  *width = w;
  *height = h;
  return bytes;
}

}  // namespace

void write_png(const std::string& path, const ImageRGB& img) {
  std::vector<unsigned char> bytes(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) bytes[i] = quantize(img.data[i]);
  write_png_bytes(path, img.width, img.height, 3, bytes);
}

void write_png(const std::string& path, const ImageGray& img) {
  std::vector<unsigned char> bytes(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) bytes[i] = quantize(img.data[i]);
  write_png_bytes(path, img.width, img.height, 1, bytes);
}

ImageRGB read_png_rgb(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = read_png_bytes(path, 3, &w, &h);
  ImageRGB img(w, h);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

ImageGray read_png_gray(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = read_png_bytes(path, 1, &w, &h);
  ImageGray img(w, h);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace avopt

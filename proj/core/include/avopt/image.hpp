#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace avopt {

// Row-major images with linear channel values in [0,1]. PNG io quantizes to
// 8 bits by scaling with 255 and rounding; no gamma transfer is applied.
struct ImageRGB {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // height * width * 3

  ImageRGB() = default;
  ImageRGB(int w, int h)
      : width(w), height(h), data(static_cast<size_t>(w) * static_cast<size_t>(h) * 3, 0.0) {}

  double& at(int x, int y, int c) {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

struct ImageGray {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // height * width

  ImageGray() = default;
  ImageGray(int w, int h)
      : width(w), height(h), data(static_cast<size_t>(w) * static_cast<size_t>(h), 0.0) {}

  double& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
};

void write_png(const std::string& path, const ImageRGB& img);
void write_png(const std::string& path, const ImageGray& img);

// Readers accept any 8/16-bit PNG color type and convert as needed.
ImageRGB read_png_rgb(const std::string& path);
ImageGray read_png_gray(const std::string& path);

}  // namespace avopt

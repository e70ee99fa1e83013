#include "avopt/image.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "avopt/common.hpp"
#include "doctest.h"

using namespace avopt;

namespace {

struct TmpFile {
  std::string path;
  explicit TmpFile(const std::string& name) : path(name) {}
  ~TmpFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_SUITE("image") {
  TEST_CASE("rgb png round-trips within quantization error") {
    ImageRGB img(33, 17);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        img.at(x, y, 0) = x / 32.0;
        img.at(x, y, 1) = y / 16.0;
        img.at(x, y, 2) = (x + y) / 48.0;
      }
    TmpFile f("tmp_rt_rgb.png");
    write_png(f.path, img);
    const ImageRGB back = read_png_rgb(f.path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    double max_err = 0.0;
    for (size_t i = 0; i < img.data.size(); ++i)
      max_err = std::max(max_err, std::abs(back.data[i] - img.data[i]));
    CHECK(max_err <= 0.5 / 255.0 + 1e-12);
  }

  TEST_CASE("gray png round-trips within quantization error") {
    ImageGray img(21, 9);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(x, y) = (x * img.height + y) / 200.0;
    TmpFile f("tmp_rt_gray.png");
    write_png(f.path, img);
    const ImageGray back = read_png_gray(f.path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    double max_err = 0.0;
    for (size_t i = 0; i < img.data.size(); ++i)
      max_err = std::max(max_err, std::abs(back.data[i] - img.data[i]));
    CHECK(max_err <= 0.5 / 255.0 + 1e-12);
  }

  TEST_CASE("out-of-range values clamp on write") {
    ImageRGB img(2, 1);
    img.at(0, 0, 0) = 2.0;
    img.at(1, 0, 1) = -1.0;
    TmpFile f("tmp_clamp.png");
    write_png(f.path, img);
    const ImageRGB back = read_png_rgb(f.path);
    CHECK(back.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(back.at(1, 0, 1) == doctest::Approx(0.0));
  }

  TEST_CASE("cross reads convert between gray and rgb") {
    ImageGray g(4, 4);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) g.at(x, y) = 0.25 * x;
    TmpFile f("tmp_cross.png");
    write_png(f.path, g);
    const ImageRGB rgb = read_png_rgb(f.path);
    CHECK(rgb.at(2, 1, 0) == doctest::Approx(0.5).epsilon(0.01));
    CHECK(rgb.at(2, 1, 1) == doctest::Approx(rgb.at(2, 1, 2)));

    ImageRGB c(3, 3);
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x)
        for (int ch = 0; ch < 3; ++ch) c.at(x, y, ch) = 0.5;
    TmpFile f2("tmp_cross2.png");
    write_png(f2.path, c);
    const ImageGray back = read_png_gray(f2.path);
    CHECK(back.at(1, 1) == doctest::Approx(0.5).epsilon(0.01));
  }

  TEST_CASE("missing file raises a validation error") {
    CHECK_THROWS_AS(read_png_rgb("no_such_file.png"), ValidationError);
    CHECK_THROWS_AS(read_png_gray("no_such_dir/x.png"), ValidationError);
  }
}

#include <catch2/catch_amalgamated.hpp>

#include "kxr/image.hpp"

using namespace kxr;

TEST_CASE("bilinear sample interpolates and zero-pads", "[image]") {
  Image img(2, 2);
  img.at(0, 0) = 0;
  img.at(0, 1) = 1;
  img.at(1, 0) = 2;
  img.at(1, 1) = 3;
  CHECK(img.sample(0, 0) == Catch::Approx(0.0));
  CHECK(img.sample(0.5, 0.5) == Catch::Approx(1.5));
  CHECK(img.sample(0, 0.5) == Catch::Approx(0.5));
  CHECK(img.sample(-5, -5) == Catch::Approx(0.0));
}

TEST_CASE("resize keeps identity and interpolates centers", "[image]") {
  Image img(2, 2);
  img.at(0, 0) = 0;
  img.at(0, 1) = 1;
  img.at(1, 0) = 2;
  img.at(1, 1) = 3;
  const Image same = resize_bilinear(img, 2, 2);
  CHECK(same.pixels == img.pixels);
  const Image up = resize_bilinear(img, 4, 4);
  CHECK(up.at(0, 0) == Catch::Approx(0.0));
  CHECK(up.at(1, 1) == Catch::Approx(0.75));
  CHECK(up.at(3, 3) == Catch::Approx(3.0));
  CHECK_THROWS_AS(resize_bilinear(img, 0, 4), UsageError);
}

TEST_CASE("rotate_point applies R(angle) about the center", "[image]") {
  const Point p = rotate_point({10, 0}, {0, 0}, 90.0);
  CHECK(p.x == Catch::Approx(0.0).margin(1e-12));
  CHECK(p.y == Catch::Approx(10.0).margin(1e-12));
  const Point q = rotate_point({3, 4}, {3, 4}, 57.0);
  CHECK(q.x == Catch::Approx(3.0));
  CHECK(q.y == Catch::Approx(4.0));
}

TEST_CASE("rotate_raster at zero is the identity", "[image]") {
  Image img(9, 9);
  Rng rng(1);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
  const Image out = rotate_raster(img, 0.0);
  CHECK(out.pixels == img.pixels);
}

TEST_CASE("rotate_raster moves features like rotate_point", "[image]") {
  Image img(31, 31);
  img.at(5, 20) = 1.0f;  // single bright pixel
  const Image out = rotate_raster(img, 30.0);
  const Point moved = rotate_point({20, 5}, {15, 15}, 30.0);
  // peak should be at the predicted location (within a pixel of blur)
  float best = 0;
  int by = 0, bx = 0;
  for (int y = 0; y < 31; ++y)
    for (int x = 0; x < 31; ++x)
      if (out.at(y, x) > best) {
        best = out.at(y, x);
        by = y;
        bx = x;
      }
  CHECK(std::abs(bx - moved.x) <= 1.0);
  CHECK(std::abs(by - moved.y) <= 1.0);
  CHECK(best > 0.2f);
}

TEST_CASE("rotation round trip restores the center crop", "[image]") {
  Image img(64, 64);
  Rng rng(2);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) img.at(y, x) = static_cast<float>(0.5 + 0.3 * std::sin(0.3 * x) * std::cos(0.2 * y));
  const Image back = rotate_raster(rotate_raster(img, 20.0), -20.0);
  double mad = 0;
  int n = 0;
  for (int y = 16; y < 48; ++y)
    for (int x = 16; x < 48; ++x) {
      mad += std::abs(back.at(y, x) - img.at(y, x));
      ++n;
    }
  CHECK(mad / n < 0.02);
}

TEST_CASE("median filter rejects salt noise", "[image]") {
  Image img(5, 5, 0.5f);
  img.at(2, 2) = 1.0f;
  const Image out = median_filter(img, 3);
  CHECK(out.at(2, 2) == 0.5f);
  CHECK_THROWS_AS(median_filter(img, 2), UsageError);
  CHECK(median_filter(img, 1).pixels == img.pixels);
}

TEST_CASE("avg_pool averages blocks", "[image]") {
  Image img(2, 4);
  for (int i = 0; i < 8; ++i) img.pixels[i] = static_cast<float>(i);
  const Image out = avg_pool(img, 2);
  REQUIRE(out.height == 1);
  REQUIRE(out.width == 2);
  CHECK(out.at(0, 0) == Catch::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(out.at(0, 1) == Catch::Approx((2 + 3 + 6 + 7) / 4.0));
}

TEST_CASE("hflip mirrors columns", "[image]") {
  Image img(1, 3);
  img.at(0, 0) = 1;
  img.at(0, 2) = 3;
  const Image out = hflip(img);
  CHECK(out.at(0, 0) == 3);
  CHECK(out.at(0, 1) == 0);
  CHECK(out.at(0, 2) == 1);
}

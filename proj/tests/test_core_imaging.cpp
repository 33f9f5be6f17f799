#include <catch2/catch_amalgamated.hpp>

#include <png.h>

#include <cstdio>
#include <fstream>

#include "unvalley/image.hpp"
#include "unvalley/rng.hpp"

#include "testutil.hpp"

using namespace unvalley;

namespace {

Image random_image(std::int64_t h, std::int64_t w, Rng& rng) {
  Image img(h, w);
  for (auto& v : img.planes().vec()) v = rng.uniform(-1.0, 1.0);
  return img;
}

// Small RGBA PNG for the alpha-drop path.
void write_rgba_png(const std::filesystem::path& path, int size) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  REQUIRE(fp);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(size), png_uint_32(size), 8, PNG_COLOR_TYPE_RGBA,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(std::size_t(size) * 4);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      row[std::size_t(x) * 4 + 0] = static_cast<unsigned char>(10 * x);
      row[std::size_t(x) * 4 + 1] = static_cast<unsigned char>(10 * y);
      row[std::size_t(x) * 4 + 2] = 7;
      row[std::size_t(x) * 4 + 3] = 200;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void write_gray_png(const std::filesystem::path& path, int size) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  REQUIRE(fp);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(size), png_uint_32(size), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(std::size_t(size), 99);
  for (int y = 0; y < size; ++y) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

TEST_CASE("downsample keeps constants and rejects upsampling") {
  Image c(16, 16);
  for (auto& v : c.planes().vec()) v = 0.37;
  Image out = downsample(c, 8);
  REQUIRE(out.height() == 8);
  for (double v : out.planes().vec()) REQUIRE(v == Catch::Approx(0.37).margin(1e-12));

  REQUIRE_THROWS_AS(downsample(c, 17), ShapeError);
  REQUIRE_THROWS_AS(downsample(c, 0), ShapeError);
}

TEST_CASE("downsample of a checkerboard averages each source block") {
  // 4x4 two-tone checkerboard; brute-force area oracle: every 2x2 block mean.
  Image img(4, 4);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 4; ++y)
      for (std::int64_t x = 0; x < 4; ++x) img.at(c, y, x) = ((x + y) % 2 == 0) ? 0.8 : -0.4;
  Image out = downsample(img, 2);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t x = 0; x < 2; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) acc += img.at(c, 2 * y + dy, 2 * x + dx);
        REQUIRE(out.at(c, y, x) == Catch::Approx(acc / 4.0).margin(1e-6));
      }
}

TEST_CASE("downsample preserves the global mean") {
  Rng rng(5);
  Image img = random_image(12, 12, rng);
  Image out = downsample(img, 5);  // non-integer ratio
  REQUIRE(out.planes().mean() == Catch::Approx(img.planes().mean()).margin(1e-3));
  Image out2 = downsample(img, 4);  // integer ratio: exact
  REQUIRE(out2.planes().mean() == Catch::Approx(img.planes().mean()).margin(1e-12));
}

TEST_CASE("downsample produces the stated shape") {
  Rng rng(6);
  Image img = random_image(64, 64, rng);
  Image out = downsample(img, 32);
  REQUIRE(out.height() == 32);
  REQUIRE(out.width() == 32);
}

TEST_CASE("blur spec validation and kernel normalization") {
  REQUIRE_THROWS_AS(BlurSpec{12, 10.0}.taps(), ShapeError);
  REQUIRE_THROWS_AS(BlurSpec{13, 0.0}.taps(), ShapeError);

  // The paper-scale kernel: 13 taps, sigma 10. Summation oracle.
  auto taps = BlurSpec{13, 10.0}.taps();
  REQUIRE(taps.size() == 13);
  double sum = 0.0;
  for (double t : taps) sum += t;
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("gaussian blur preserves constants") {
  Image c(32, 32);
  for (auto& v : c.planes().vec()) v = -0.21;
  Image out = gaussian_blur(c, BlurSpec{13, 10.0});
  for (double v : out.planes().vec()) REQUIRE(v == Catch::Approx(-0.21).margin(1e-6));
}

TEST_CASE("impulse response equals the separable kernel outer product") {
  Image img(33, 33);
  img.planes().fill(0.0);
  img.at(0, 16, 16) = 1.0;
  img.at(1, 16, 16) = 1.0;
  img.at(2, 16, 16) = 1.0;
  BlurSpec spec{13, 10.0};
  Image out = gaussian_blur(img, spec);
  auto taps = spec.taps();
  for (std::int64_t y = 0; y < 33; ++y)
    for (std::int64_t x = 0; x < 33; ++x) {
      const std::int64_t dy = y - 16, dx = x - 16;
      double expect = 0.0;
      if (std::abs(dy) <= 6 && std::abs(dx) <= 6)
        expect = taps[std::size_t(dy + 6)] * taps[std::size_t(dx + 6)];
      REQUIRE(out.at(0, y, x) == Catch::Approx(expect).margin(1e-6));
    }
}

TEST_CASE("blur is linear") {
  Rng rng(9);
  Image a = random_image(24, 24, rng);
  Image b = random_image(24, 24, rng);
  BlurSpec spec{7, 2.0};
  const double alpha = 0.6, beta = -1.3;
  Image mix(24, 24);
  for (std::int64_t i = 0; i < mix.planes().numel(); ++i)
    mix.planes()[i] = alpha * a.planes()[i] + beta * b.planes()[i];
  Image lhs = gaussian_blur(mix, spec);
  Image ba = gaussian_blur(a, spec);
  Image bb = gaussian_blur(b, spec);
  for (std::int64_t i = 0; i < lhs.planes().numel(); ++i)
    REQUIRE(lhs.planes()[i] ==
            Catch::Approx(alpha * ba.planes()[i] + beta * bb.planes()[i]).margin(1e-5));
}

TEST_CASE("blur and downsample commute with horizontal flip") {
  Rng rng(10);
  Image img = random_image(16, 16, rng);
  BlurSpec spec{5, 1.5};

  Image a = horizontal_flip(gaussian_blur(img, spec));
  Image b = gaussian_blur(horizontal_flip(img), spec);
  REQUIRE(max_abs_diff(a.planes(), b.planes()) <= 1e-5);

  Image c = horizontal_flip(downsample(img, 8));
  Image d = downsample(horizontal_flip(img), 8);
  REQUIRE(max_abs_diff(c.planes(), d.planes()) <= 1e-5);
}

TEST_CASE("horizontal flip is an involution and moves pixels exactly") {
  Rng rng(12);
  Image img = random_image(9, 13, rng);
  Image once = horizontal_flip(img);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 9; ++y)
      for (std::int64_t x = 0; x < 13; ++x) REQUIRE(once.at(c, y, 12 - x) == img.at(c, y, x));

  Image twice = horizontal_flip(once);
  REQUIRE(max_abs_diff(twice.planes(), img.planes()) == 0.0);

  // A symmetric image is a fixed point.
  Image sym(8, 8);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 8; ++y)
      for (std::int64_t x = 0; x < 8; ++x) sym.at(c, y, x) = double(y) / 8.0;
  Image fs = horizontal_flip(sym);
  REQUIRE(max_abs_diff(fs.planes(), sym.planes()) == 0.0);
}

TEST_CASE("png round trip stays within quantization error") {
  testutil::TempDir dir("png");
  Rng rng(14);
  Image img = random_image(20, 20, rng);
  const auto path = dir.path() / "round.png";
  save_image(img, path);
  Image back = load_image(path);
  REQUIRE(back.height() == 20);
  REQUIRE(max_abs_diff(back.planes(), img.planes()) <= 2.0 / 255.0);
}

TEST_CASE("zero image quantizes to the documented midpoint") {
  testutil::TempDir dir("png_mid");
  Image zero(4, 4);
  const auto path = dir.path() / "zero.png";
  save_image(zero, path);

  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  REQUIRE_FALSE(bytes.empty());
  // Round-half-away-from-zero puts 0.0 at byte 128.
  Image back = load_image(path);
  for (double v : back.planes().vec())
    REQUIRE(v == Catch::Approx(128.0 / 255.0 * 2.0 - 1.0).margin(1e-12));
}

TEST_CASE("png error paths") {
  testutil::TempDir dir("png_err");
  REQUIRE_THROWS_AS(load_image(dir.path() / "missing.png"), IoError);

  const auto junk = dir.path() / "junk.png";
  std::ofstream(junk) << "this is not a png";
  REQUIRE_THROWS_AS(load_image(junk), IoError);

  const auto gray = dir.path() / "gray.png";
  write_gray_png(gray, 6);
  REQUIRE_THROWS_MATCHES(load_image(gray), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("non-3-channel")));
}

TEST_CASE("alpha channel is dropped on load") {
  testutil::TempDir dir("png_alpha");
  const auto path = dir.path() / "rgba.png";
  write_rgba_png(path, 5);
  Image img = load_image(path);
  REQUIRE(img.height() == 5);
  REQUIRE(img.at(2, 0, 0) == Catch::Approx(7.0 / 255.0 * 2.0 - 1.0).margin(1e-12));
}

#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "unvalley/imaging_kernels.hpp"
#include "unvalley/tensor.hpp"

namespace unvalley {

// RGB raster with values in [-1, 1], stored planar (3, H, W).
class Image {
 public:
  Image() = default;
  Image(std::int64_t height, std::int64_t width) : planes_(Tensor({3, height, width})) {}
  explicit Image(Tensor planes) : planes_(std::move(planes)) {
    UNVALLEY_CHECK(planes_.ndim() == 3 && planes_.dim(0) == 3, ShapeError,
                   "Image expects (3,H,W) planes, got ", shape_str(planes_.shape()));
  }

  std::int64_t height() const { return planes_.dim(1); }
  std::int64_t width() const { return planes_.dim(2); }
  bool square() const { return height() == width(); }

  double& at(std::int64_t c, std::int64_t y, std::int64_t x) {
    return planes_[(c * height() + y) * width() + x];
  }
  double at(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return planes_[(c * height() + y) * width() + x];
  }

  double* plane(std::int64_t c) { return planes_.data() + c * height() * width(); }
  const double* plane(std::int64_t c) const { return planes_.data() + c * height() * width(); }

  Tensor& planes() { return planes_; }
  const Tensor& planes() const { return planes_; }

  // (1,3,H,W) network layout.
  Tensor to_nchw() const { return planes_.reshaped({1, 3, height(), width()}); }
  static Image from_nchw(const Tensor& t) {
    UNVALLEY_CHECK(t.ndim() == 4 && t.dim(0) == 1 && t.dim(1) == 3, ShapeError,
                   "from_nchw expects (1,3,H,W), got ", shape_str(t.shape()));
    return Image(t.reshaped({3, t.dim(2), t.dim(3)}));
  }

  void clamp_() {
    for (auto& v : planes_.vec()) v = std::clamp(v, -1.0, 1.0);
  }

 private:
  Tensor planes_;
};

// Gaussian blur parameters; taps are normalized to sum 1.
struct BlurSpec {
  int kernel_size = 13;
  double sigma = 10.0;

  std::vector<double> taps() const { return kern::gaussian_taps(kernel_size, sigma); }
};

// Area downsampling to target x target. Rejects upsampling: a larger target
// than the source signals a misconfigured loss resolution.
inline Image downsample(const Image& img, std::int64_t target) {
  UNVALLEY_CHECK(target >= 1, ShapeError, "downsample target must be >= 1, got ", target);
  UNVALLEY_CHECK(target <= img.height() && target <= img.width(), ShapeError,
                 "downsample to ", target, " from ", img.height(), "x", img.width(),
                 " would upsample");
  const auto rows = kern::area_plan(img.height(), target);
  const auto cols = kern::area_plan(img.width(), target);
  Image out(target, target);
  for (std::int64_t c = 0; c < 3; ++c)
    kern::resample_plane(img.plane(c), out.plane(c), img.height(), img.width(), rows, cols);
  return out;
}

inline Image gaussian_blur(const Image& img, const BlurSpec& spec) {
  UNVALLEY_CHECK(img.square(), ShapeError, "gaussian_blur expects a square image, got ",
                 img.height(), "x", img.width());
  const auto taps = spec.taps();
  Image out(img.height(), img.width());
  for (std::int64_t c = 0; c < 3; ++c)
    kern::gaussian_blur_plane(img.plane(c), out.plane(c), img.height(), img.width(), taps);
  return out;
}

inline Image horizontal_flip(const Image& img) {
  Image out(img.height(), img.width());
  for (std::int64_t c = 0; c < 3; ++c)
    kern::flip_h_plane(img.plane(c), out.plane(c), img.height(), img.width());
  return out;
}

namespace detail {

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriteCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngWriteCloser() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

// [-1,1] -> [0,255], round half away from zero. An all-zero image therefore
// stores as 128.
inline unsigned char quantize(double v) {
  const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
  return static_cast<unsigned char>(std::lround(u));
}

inline double dequantize(unsigned char b) { return double(b) / 255.0 * 2.0 - 1.0; }

}  // namespace detail

// Loads an 8-bit RGB(A) PNG; palette images are expanded, alpha is dropped
// with a warning, grayscale and 16-bit inputs are rejected.
inline Image load_image(const std::filesystem::path& path) {
  detail::PngReadCloser ctx;
  ctx.fp = std::fopen(path.string().c_str(), "rb");
  UNVALLEY_CHECK(ctx.fp, IoError, "cannot open image file: ", path.string());

  unsigned char sig[8] = {0};
  if (std::fread(sig, 1, 8, ctx.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());

  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  UNVALLEY_CHECK(ctx.png, IoError, "libpng init failed");
  ctx.info = png_create_info_struct(ctx.png);
  UNVALLEY_CHECK(ctx.info, IoError, "libpng info init failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw IoError("corrupt PNG: " + path.string());

  png_init_io(ctx.png, ctx.fp);
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);

  const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
  const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
  const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);
  const int color_type = png_get_color_type(ctx.png, ctx.info);

  UNVALLEY_CHECK(bit_depth == 8 || color_type == PNG_COLOR_TYPE_PALETTE, IoError,
                 "unsupported PNG bit depth ", bit_depth, " in ", path.string(),
                 " (8-bit required)");
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    throw IoError("non-3-channel PNG (grayscale): " + path.string());
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);

  bool had_alpha = (color_type & PNG_COLOR_MASK_ALPHA) != 0 ||
                   png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS);
  if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(ctx.png);
  if (had_alpha) {
    std::cerr << "warning: dropping alpha channel while loading " << path.string() << "\n";
    png_set_strip_alpha(ctx.png);
  }
  png_read_update_info(ctx.png, ctx.info);
  UNVALLEY_CHECK(png_get_channels(ctx.png, ctx.info) == 3, IoError,
                 "non-3-channel PNG: ", path.string());

  std::vector<unsigned char> rowbuf(static_cast<std::size_t>(w) * 3);
  Image img(std::int64_t(h), std::int64_t(w));
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(ctx.png, rowbuf.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, std::int64_t(y), std::int64_t(x)) =
            detail::dequantize(rowbuf[std::size_t(x) * 3 + std::size_t(c)]);
  }
  png_read_end(ctx.png, nullptr);
  return img;
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::PngWriteCloser ctx;
  ctx.fp = std::fopen(path.string().c_str(), "wb");
  UNVALLEY_CHECK(ctx.fp, IoError, "cannot open file for writing: ", path.string());

  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  UNVALLEY_CHECK(ctx.png, IoError, "libpng init failed");
  ctx.info = png_create_info_struct(ctx.png);
  UNVALLEY_CHECK(ctx.info, IoError, "libpng info init failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw IoError("PNG write failed: " + path.string());

  png_init_io(ctx.png, ctx.fp);
  png_set_IHDR(ctx.png, ctx.info, png_uint_32(img.width()), png_uint_32(img.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);

  std::vector<unsigned char> rowbuf(static_cast<std::size_t>(img.width()) * 3);
  for (std::int64_t y = 0; y < img.height(); ++y) {
    for (std::int64_t x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c)
        rowbuf[std::size_t(x) * 3 + std::size_t(c)] = detail::quantize(img.at(c, y, x));
    png_write_row(ctx.png, rowbuf.data());
  }
  png_write_end(ctx.png, nullptr);
}

}  // namespace unvalley

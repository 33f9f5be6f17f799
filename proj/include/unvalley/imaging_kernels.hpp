#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "unvalley/common.hpp"

// Low-level raster kernels on raw double planes. Shared by the pure image
// functions and the autodiff ops so both paths compute identical pixels.
namespace unvalley::kern {

// Normalized 1-d Gaussian taps, kernel_size odd.
inline std::vector<double> gaussian_taps(int kernel_size, double sigma) {
  UNVALLEY_CHECK(kernel_size >= 1 && kernel_size % 2 == 1, ShapeError,
                 "gaussian kernel_size must be odd and >= 1, got ", kernel_size);
  UNVALLEY_CHECK(sigma > 0.0, ShapeError, "gaussian sigma must be > 0, got ", sigma);
  std::vector<double> taps(static_cast<std::size_t>(kernel_size));
  const int r = kernel_size / 2;
  double sum = 0.0;
  for (int i = 0; i < kernel_size; ++i) {
    const double d = double(i - r);
    taps[std::size_t(i)] = std::exp(-0.5 * d * d / (sigma * sigma));
    sum += taps[std::size_t(i)];
  }
  for (auto& t : taps) t /= sum;
  return taps;
}

// Reflect-101 border index (gfedcb|abcdefgh|gfedcba).
inline std::int64_t reflect101(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

// Separable correlation along rows of an (h,w) plane with reflect-101 edges.
inline void conv1d_rows(const double* src, double* dst, std::int64_t h, std::int64_t w,
                        const std::vector<double>& taps) {
  const std::int64_t r = std::int64_t(taps.size()) / 2;
  for (std::int64_t y = 0; y < h; ++y) {
    const double* row = src + y * w;
    double* out = dst + y * w;
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t k = -r; k <= r; ++k)
        acc += taps[std::size_t(k + r)] * row[reflect101(x + k, w)];
      out[x] = acc;
    }
  }
}

inline void conv1d_cols(const double* src, double* dst, std::int64_t h, std::int64_t w,
                        const std::vector<double>& taps) {
  const std::int64_t r = std::int64_t(taps.size()) / 2;
  for (std::int64_t y = 0; y < h; ++y) {
    double* out = dst + y * w;
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t k = -r; k <= r; ++k)
        acc += taps[std::size_t(k + r)] * src[reflect101(y + k, h) * w + x];
      out[x] = acc;
    }
  }
}

inline void gaussian_blur_plane(const double* src, double* dst, std::int64_t h, std::int64_t w,
                                const std::vector<double>& taps) {
  std::vector<double> tmp(static_cast<std::size_t>(h * w));
  conv1d_rows(src, tmp.data(), h, w, taps);
  conv1d_cols(tmp.data(), dst, h, w, taps);
}

// Adjoint of gaussian_blur_plane (scatter form; reflect padding makes the
// operator non-symmetric near edges).
inline void gaussian_blur_plane_adjoint(const double* grad_out, double* grad_in, std::int64_t h,
                                        std::int64_t w, const std::vector<double>& taps) {
  const std::int64_t r = std::int64_t(taps.size()) / 2;
  std::vector<double> tmp(static_cast<std::size_t>(h * w), 0.0);
  // adjoint of column pass
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double g = grad_out[y * w + x];
      if (g == 0.0) continue;
      for (std::int64_t k = -r; k <= r; ++k)
        tmp[std::size_t(reflect101(y + k, h) * w + x)] += taps[std::size_t(k + r)] * g;
    }
  // adjoint of row pass
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double g = tmp[std::size_t(y * w + x)];
      if (g == 0.0) continue;
      for (std::int64_t k = -r; k <= r; ++k)
        grad_in[y * w + reflect101(x + k, w)] += taps[std::size_t(k + r)] * g;
    }
}

// One output sample of a 1-d area (box) resampling plan.
struct ResampleTap {
  std::int64_t first;                // first contributing source index
  std::vector<double> weights;       // weights, sum to 1
};

// Area-average plan mapping n_in samples to n_out (n_out <= n_in). Each
// output covers the source interval [i*s, (i+1)*s) with s = n_in/n_out;
// integer factors reduce to exact block means.
inline std::vector<ResampleTap> area_plan(std::int64_t n_in, std::int64_t n_out) {
  UNVALLEY_CHECK(n_out >= 1 && n_out <= n_in, ShapeError, "area_plan: invalid sizes ", n_in,
                 " -> ", n_out);
  std::vector<ResampleTap> plan(static_cast<std::size_t>(n_out));
  const double s = double(n_in) / double(n_out);
  for (std::int64_t i = 0; i < n_out; ++i) {
    const double lo = double(i) * s;
    const double hi = double(i + 1) * s;
    const auto first = std::int64_t(std::floor(lo));
    const auto last = std::min<std::int64_t>(n_in - 1, std::int64_t(std::ceil(hi)) - 1);
    ResampleTap tap;
    tap.first = first;
    double sum = 0.0;
    for (std::int64_t j = first; j <= last; ++j) {
      const double cover = std::min(hi, double(j + 1)) - std::max(lo, double(j));
      tap.weights.push_back(std::max(0.0, cover));
      sum += std::max(0.0, cover);
    }
    for (auto& wgt : tap.weights) wgt /= sum;
    plan[std::size_t(i)] = std::move(tap);
  }
  return plan;
}

inline void resample_plane(const double* src, double* dst, std::int64_t h_in, std::int64_t w_in,
                           const std::vector<ResampleTap>& rows,
                           const std::vector<ResampleTap>& cols) {
  const auto h_out = std::int64_t(rows.size());
  const auto w_out = std::int64_t(cols.size());
  std::vector<double> tmp(static_cast<std::size_t>(h_out * w_in));
  for (std::int64_t y = 0; y < h_out; ++y) {
    const auto& rt = rows[std::size_t(y)];
    for (std::int64_t x = 0; x < w_in; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < rt.weights.size(); ++k)
        acc += rt.weights[k] * src[(rt.first + std::int64_t(k)) * w_in + x];
      tmp[std::size_t(y * w_in + x)] = acc;
    }
  }
  for (std::int64_t y = 0; y < h_out; ++y)
    for (std::int64_t x = 0; x < w_out; ++x) {
      const auto& ct = cols[std::size_t(x)];
      double acc = 0.0;
      for (std::size_t k = 0; k < ct.weights.size(); ++k)
        acc += ct.weights[k] * tmp[std::size_t(y * w_in + ct.first + std::int64_t(k))];
      dst[y * w_out + x] = acc;
    }
}

inline void resample_plane_adjoint(const double* grad_out, double* grad_in, std::int64_t h_in,
                                   std::int64_t w_in, const std::vector<ResampleTap>& rows,
                                   const std::vector<ResampleTap>& cols) {
  const auto h_out = std::int64_t(rows.size());
  const auto w_out = std::int64_t(cols.size());
  std::vector<double> tmp(static_cast<std::size_t>(h_out * w_in), 0.0);
  for (std::int64_t y = 0; y < h_out; ++y)
    for (std::int64_t x = 0; x < w_out; ++x) {
      const auto& ct = cols[std::size_t(x)];
      const double g = grad_out[y * w_out + x];
      for (std::size_t k = 0; k < ct.weights.size(); ++k)
        tmp[std::size_t(y * w_in + ct.first + std::int64_t(k))] += ct.weights[k] * g;
    }
  for (std::int64_t y = 0; y < h_out; ++y) {
    const auto& rt = rows[std::size_t(y)];
    for (std::int64_t x = 0; x < w_in; ++x) {
      const double g = tmp[std::size_t(y * w_in + x)];
      if (g == 0.0) continue;
      for (std::size_t k = 0; k < rt.weights.size(); ++k)
        grad_in[(rt.first + std::int64_t(k)) * w_in + x] += rt.weights[k] * g;
    }
  }
}

// 2x bilinear upsample on the half-pixel grid: out(i) samples in((i+0.5)/2-0.5)
// with clamped edges, so taps are (0.75, 0.25) everywhere.
inline void upsample2_plane(const double* src, double* dst, std::int64_t h, std::int64_t w) {
  const std::int64_t H = 2 * h, W = 2 * w;
  std::vector<double> tmp(static_cast<std::size_t>(H * w));
  for (std::int64_t y = 0; y < H; ++y) {
    const std::int64_t base = y / 2;
    const std::int64_t other = (y % 2 == 0) ? std::max<std::int64_t>(0, base - 1)
                                            : std::min<std::int64_t>(h - 1, base + 1);
    for (std::int64_t x = 0; x < w; ++x)
      tmp[std::size_t(y * w + x)] = 0.75 * src[base * w + x] + 0.25 * src[other * w + x];
  }
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const std::int64_t base = x / 2;
      const std::int64_t other = (x % 2 == 0) ? std::max<std::int64_t>(0, base - 1)
                                              : std::min<std::int64_t>(w - 1, base + 1);
      dst[y * W + x] =
          0.75 * tmp[std::size_t(y * w + base)] + 0.25 * tmp[std::size_t(y * w + other)];
    }
}

inline void upsample2_plane_adjoint(const double* grad_out, double* grad_in, std::int64_t h,
                                    std::int64_t w) {
  const std::int64_t H = 2 * h, W = 2 * w;
  std::vector<double> tmp(static_cast<std::size_t>(H * w), 0.0);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const std::int64_t base = x / 2;
      const std::int64_t other = (x % 2 == 0) ? std::max<std::int64_t>(0, base - 1)
                                              : std::min<std::int64_t>(w - 1, base + 1);
      const double g = grad_out[y * W + x];
      tmp[std::size_t(y * w + base)] += 0.75 * g;
      tmp[std::size_t(y * w + other)] += 0.25 * g;
    }
  for (std::int64_t y = 0; y < H; ++y) {
    const std::int64_t base = y / 2;
    const std::int64_t other = (y % 2 == 0) ? std::max<std::int64_t>(0, base - 1)
                                            : std::min<std::int64_t>(h - 1, base + 1);
    for (std::int64_t x = 0; x < w; ++x) {
      const double g = tmp[std::size_t(y * w + x)];
      grad_in[base * w + x] += 0.75 * g;
      grad_in[other * w + x] += 0.25 * g;
    }
  }
}

inline void flip_h_plane(const double* src, double* dst, std::int64_t h, std::int64_t w) {
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) dst[y * w + x] = src[y * w + (w - 1 - x)];
}

}  // namespace unvalley::kern

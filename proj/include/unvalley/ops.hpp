#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "unvalley/autodiff.hpp"
#include "unvalley/imaging_kernels.hpp"

// Differentiable tensor ops. Forward math lives in the function body, the
// reverse pass in the captured closure; heavy spatial kernels delegate to
// unvalley::kern so the pure image path computes identical pixels.
namespace unvalley::ops {

using ad::Node;
using ad::NodePtr;
using ad::Var;
using ad::make_op;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace detail {

inline void accum_if(const NodePtr& p, const Tensor& g) {
  if (p->requires_grad) p->accum_grad(g);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  UNVALLEY_CHECK(a.value().same_shape(b.value()), ShapeError, "add: shape mismatch ",
                 shape_str(a.value().shape()), " vs ", shape_str(b.value().shape()));
  Tensor out = a.value();
  out.add_(b.value());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    detail::accum_if(n.parents[0], n.grad);
    detail::accum_if(n.parents[1], n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  UNVALLEY_CHECK(a.value().same_shape(b.value()), ShapeError, "sub: shape mismatch");
  Tensor out = a.value();
  out.add_(b.value(), -1.0);
  return make_op(std::move(out), {a, b}, [](Node& n) {
    detail::accum_if(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor g = n.grad;
      g.mul_(-1.0);
      n.parents[1]->accum_grad(g);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  UNVALLEY_CHECK(a.value().same_shape(b.value()), ShapeError, "mul: shape mismatch");
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  UNVALLEY_CHECK(a.value().same_shape(b.value()), ShapeError, "div: shape mismatch");
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v += c;
  return make_op(std::move(out), {a}, [](Node& n) { detail::accum_if(n.parents[0], n.grad); });
}

inline Var mul_scalar(const Var& a, double c) {
  Tensor out = a.value();
  out.mul_(c);
  return make_op(std::move(out), {a}, [c](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor g = n.grad;
      g.mul_(c);
      n.parents[0]->accum_grad(g);
    }
  });
}

inline Var abs_val(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = std::fabs(v);
  return make_op(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
  });
}

inline Var square(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v *= v;
  return make_op(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * n.grad[i] * x[i];
  });
}

// sqrt(x + eps); eps keeps the gradient finite at zero inputs.
inline Var sqrt_eps(const Var& a, double eps = 0.0) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = std::sqrt(v + eps);
  return make_op(std::move(out), {a}, [eps](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * 0.5 / std::sqrt(x[i] + eps);
  });
}

inline Var rsqrt_eps(const Var& a, double eps) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = 1.0 / std::sqrt(v + eps);
  return make_op(std::move(out), {a}, [eps](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double r = 1.0 / std::sqrt(x[i] + eps);
      g[i] += n.grad[i] * (-0.5 * r * r * r);
    }
  });
}

inline Var tanh_op(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = std::tanh(v);
  return make_op(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
  });
}

inline Var leaky_relu(const Var& a, double alpha = 0.2, double gain = 1.0) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = (v >= 0.0 ? v : alpha * v) * gain;
  return make_op(std::move(out), {a}, [alpha, gain](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * (x[i] >= 0.0 ? gain : alpha * gain);
  });
}

inline double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline Var softplus(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = softplus_scalar(v);
  return make_op(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] / (1.0 + std::exp(-x[i]));
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a.value().sum());
  return make_op(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    const double s = n.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

inline Var mean_all(const Var& a) {
  const double inv = 1.0 / double(a.value().numel());
  Tensor out = Tensor::scalar(a.value().sum() * inv);
  return make_op(std::move(out), {a}, [inv](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    const double s = n.grad[0] * inv;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

// Sums away all dims after the first `keep`, e.g. (O,C,k,k) keep=2 -> (O,C).
inline Var sum_tail(const Var& a, std::int64_t keep) {
  const Shape& s = a.value().shape();
  UNVALLEY_CHECK(keep >= 0 && keep < a.value().ndim(), ShapeError, "sum_tail: keep=", keep,
                 " out of range for ", shape_str(s));
  Shape out_shape(s.begin(), s.begin() + keep);
  const std::int64_t rows = shape_numel(out_shape);
  const std::int64_t cols = a.value().numel() / std::max<std::int64_t>(rows, 1);
  Tensor out(out_shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) acc += a.value()[r * cols + c];
    out[r] = acc;
  }
  return make_op(std::move(out), {a}, [rows, cols](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c) g[r * cols + c] += n.grad[r];
  });
}

// (N,C,H,W) -> (N,C) spatial mean.
inline Var mean_hw(const Var& a) {
  const Tensor& x = a.value();
  UNVALLEY_CHECK(x.ndim() == 4, ShapeError, "mean_hw expects 4-d input");
  const std::int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({x.dim(0), x.dim(1)});
  for (std::int64_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    out[i] = acc / double(hw);
  }
  return make_op(std::move(out), {a}, [nc, hw](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < nc; ++i) {
      const double s = n.grad[i] / double(hw);
      for (std::int64_t j = 0; j < hw; ++j) g[i * hw + j] += s;
    }
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(shape);
  return make_op(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->accum_grad(n.grad.reshaped(n.parents[0]->value.shape()));
  });
}

// Row r of a (R,C) matrix as (1,C).
inline Var select_row(const Var& a, std::int64_t r) {
  const Tensor& x = a.value();
  UNVALLEY_CHECK(x.ndim() == 2 && r >= 0 && r < x.dim(0), ShapeError, "select_row: row ", r,
                 " from ", shape_str(x.shape()));
  const std::int64_t c = x.dim(1);
  Tensor out({1, c});
  for (std::int64_t i = 0; i < c; ++i) out[i] = x[r * c + i];
  return make_op(std::move(out), {a}, [r, c](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < c; ++i) g[r * c + i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  UNVALLEY_CHECK(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(0), ShapeError,
                 "matmul: ", shape_str(A.shape()), " x ", shape_str(B.shape()));
  const std::int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor out({M, N});
  MatMap(out.data(), M, N).noalias() =
      ConstMatMap(A.data(), M, K) * ConstMatMap(B.data(), K, N);
  return make_op(std::move(out), {a, b}, [M, K, N](Node& n) {
    ConstMatMap dY(n.grad.data(), M, N);
    if (n.parents[0]->requires_grad) {
      Tensor& gA = n.parents[0]->ensure_grad();
      MatMap(gA.data(), M, K).noalias() +=
          dY * ConstMatMap(n.parents[1]->value.data(), K, N).transpose();
    }
    if (n.parents[1]->requires_grad) {
      Tensor& gB = n.parents[1]->ensure_grad();
      MatMap(gB.data(), K, N).noalias() +=
          ConstMatMap(n.parents[0]->value.data(), M, K).transpose() * dY;
    }
  });
}

// Fully connected layer: y = x * W^T + b with x (N,K), W (O,K), b (O).
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& B = b.value();
  UNVALLEY_CHECK(X.ndim() == 2 && W.ndim() == 2 && X.dim(1) == W.dim(1), ShapeError,
                 "linear: x ", shape_str(X.shape()), " w ", shape_str(W.shape()));
  UNVALLEY_CHECK(B.ndim() == 1 && B.dim(0) == W.dim(0), ShapeError, "linear: bias shape");
  const std::int64_t N = X.dim(0), K = X.dim(1), O = W.dim(0);
  Tensor out({N, O});
  MatMap Y(out.data(), N, O);
  Y.noalias() = ConstMatMap(X.data(), N, K) * ConstMatMap(W.data(), O, K).transpose();
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < O; ++j) out[i * O + j] += B[j];
  return make_op(std::move(out), {x, w, b}, [N, K, O](Node& n) {
    ConstMatMap dY(n.grad.data(), N, O);
    if (n.parents[0]->requires_grad) {
      MatMap(n.parents[0]->ensure_grad().data(), N, K).noalias() +=
          dY * ConstMatMap(n.parents[1]->value.data(), O, K);
    }
    if (n.parents[1]->requires_grad) {
      MatMap(n.parents[1]->ensure_grad().data(), O, K).noalias() +=
          dY.transpose() * ConstMatMap(n.parents[0]->value.data(), N, K);
    }
    if (n.parents[2]->requires_grad) {
      Tensor& gb = n.parents[2]->ensure_grad();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < O; ++j) gb[j] += n.grad[i * O + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Channel broadcasts
// ---------------------------------------------------------------------------

// y[n,c,h,w] = x[n,c,h,w] * s[n,c]
inline Var scale_channels(const Var& x, const Var& s) {
  const Tensor& X = x.value();
  const Tensor& S = s.value();
  UNVALLEY_CHECK(X.ndim() == 4 && S.ndim() == 2 && S.dim(0) == X.dim(0) && S.dim(1) == X.dim(1),
                 ShapeError, "scale_channels: x ", shape_str(X.shape()), " s ",
                 shape_str(S.shape()));
  const std::int64_t NC = X.dim(0) * X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (std::int64_t i = 0; i < NC; ++i) {
    const double f = S[i];
    for (std::int64_t j = 0; j < HW; ++j) out[i * HW + j] *= f;
  }
  return make_op(std::move(out), {x, s}, [NC, HW](Node& n) {
    const Tensor& X = n.parents[0]->value;
    const Tensor& S = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < NC; ++i) {
        const double f = S[i];
        for (std::int64_t j = 0; j < HW; ++j) g[i * HW + j] += n.grad[i * HW + j] * f;
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < NC; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < HW; ++j) acc += n.grad[i * HW + j] * X[i * HW + j];
        g[i] += acc;
      }
    }
  });
}

// y[n,c,h,w] = x[n,c,h,w] + b[c]
inline Var add_bias_channels(const Var& x, const Var& b) {
  const Tensor& X = x.value();
  const Tensor& B = b.value();
  UNVALLEY_CHECK(X.ndim() == 4 && B.ndim() == 1 && B.dim(0) == X.dim(1), ShapeError,
                 "add_bias_channels: x ", shape_str(X.shape()), " b ", shape_str(B.shape()));
  const std::int64_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (std::int64_t n0 = 0; n0 < N; ++n0)
    for (std::int64_t c = 0; c < C; ++c) {
      const double f = B[c];
      for (std::int64_t j = 0; j < HW; ++j) out[(n0 * C + c) * HW + j] += f;
    }
  return make_op(std::move(out), {x, b}, [N, C, HW](Node& n) {
    detail::accum_if(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t n0 = 0; n0 < N; ++n0)
        for (std::int64_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < HW; ++j) acc += n.grad[(n0 * C + c) * HW + j];
          g[c] += acc;
        }
    }
  });
}

// y (N,C) = a (N,C) * w (C), broadcast over rows.
inline Var mul_row_bcast(const Var& a, const Var& w) {
  const Tensor& A = a.value();
  const Tensor& W = w.value();
  UNVALLEY_CHECK(A.ndim() == 2 && W.ndim() == 1 && W.dim(0) == A.dim(1), ShapeError,
                 "mul_row_bcast shapes");
  const std::int64_t N = A.dim(0), C = A.dim(1);
  Tensor out = A;
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < C; ++j) out[i * C + j] *= W[j];
  return make_op(std::move(out), {a, w}, [N, C](Node& n) {
    const Tensor& A = n.parents[0]->value;
    const Tensor& W = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < C; ++j) g[i * C + j] += n.grad[i * C + j] * W[j];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < C; ++j) g[j] += n.grad[i * C + j] * A[i * C + j];
    }
  });
}

// y[n,c,h,w] = x + strength * noise[n or 0, 0, h, w]; strength is a scalar Var.
inline Var add_scaled_noise(const Var& x, const Var& noise, const Var& strength) {
  const Tensor& X = x.value();
  const Tensor& M = noise.value();
  UNVALLEY_CHECK(X.ndim() == 4 && M.ndim() == 4 && M.dim(1) == 1 && M.dim(2) == X.dim(2) &&
                     M.dim(3) == X.dim(3) && (M.dim(0) == X.dim(0) || M.dim(0) == 1),
                 ShapeError, "add_scaled_noise: x ", shape_str(X.shape()), " noise ",
                 shape_str(M.shape()));
  UNVALLEY_CHECK(strength.value().numel() == 1, ShapeError, "noise strength must be scalar");
  const std::int64_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  const bool shared = M.dim(0) == 1;
  const double sv = strength.value()[0];
  Tensor out = X;
  for (std::int64_t n0 = 0; n0 < N; ++n0) {
    const double* m = M.data() + (shared ? 0 : n0 * HW);
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t j = 0; j < HW; ++j) out[(n0 * C + c) * HW + j] += sv * m[j];
  }
  return make_op(std::move(out), {x, noise, strength}, [N, C, HW, shared, sv](Node& n) {
    detail::accum_if(n.parents[0], n.grad);
    const Tensor& M = n.parents[1]->value;
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t n0 = 0; n0 < N; ++n0) {
        double* gm = g.data() + (shared ? 0 : n0 * HW);
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t j = 0; j < HW; ++j) gm[j] += sv * n.grad[(n0 * C + c) * HW + j];
      }
    }
    if (n.parents[2]->requires_grad) {
      double acc = 0.0;
      for (std::int64_t n0 = 0; n0 < N; ++n0) {
        const double* m = M.data() + (shared ? 0 : n0 * HW);
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t j = 0; j < HW; ++j) acc += m[j] * n.grad[(n0 * C + c) * HW + j];
      }
      n.parents[2]->ensure_grad()[0] += acc;
    }
  });
}

// Weighted channel sum with constant weights: (N,C,H,W) -> (N,1,H,W).
inline Var channel_weighted_sum(const Var& x, std::vector<double> weights) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4 && std::int64_t(weights.size()) == X.dim(1), ShapeError,
                 "channel_weighted_sum: weight count");
  const std::int64_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out({N, 1, X.dim(2), X.dim(3)});
  for (std::int64_t n0 = 0; n0 < N; ++n0)
    for (std::int64_t c = 0; c < C; ++c) {
      const double f = weights[std::size_t(c)];
      for (std::int64_t j = 0; j < HW; ++j) out[n0 * HW + j] += f * X[(n0 * C + c) * HW + j];
    }
  return make_op(std::move(out), {x}, [N, C, HW, weights = std::move(weights)](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t n0 = 0; n0 < N; ++n0)
      for (std::int64_t c = 0; c < C; ++c) {
        const double f = weights[std::size_t(c)];
        for (std::int64_t j = 0; j < HW; ++j) g[(n0 * C + c) * HW + j] += f * n.grad[n0 * HW + j];
      }
  });
}

// LPIPS-style unit normalization across channels at every spatial position.
inline Var channel_l2_normalize(const Var& x, double eps = 1e-10) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4, ShapeError, "channel_l2_normalize expects 4-d input");
  const std::int64_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  Tensor rinv({N, HW});
  for (std::int64_t n0 = 0; n0 < N; ++n0)
    for (std::int64_t j = 0; j < HW; ++j) {
      double ss = 0.0;
      for (std::int64_t c = 0; c < C; ++c) {
        const double v = X[(n0 * C + c) * HW + j];
        ss += v * v;
      }
      const double r = 1.0 / std::sqrt(ss + eps);
      rinv[n0 * HW + j] = r;
      for (std::int64_t c = 0; c < C; ++c) out[(n0 * C + c) * HW + j] *= r;
    }
  return make_op(std::move(out), {x}, [N, C, HW, rinv = std::move(rinv)](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& X = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t n0 = 0; n0 < N; ++n0)
      for (std::int64_t j = 0; j < HW; ++j) {
        const double r = rinv[n0 * HW + j];
        double dot = 0.0;
        for (std::int64_t c = 0; c < C; ++c)
          dot += X[(n0 * C + c) * HW + j] * n.grad[(n0 * C + c) * HW + j];
        const double r3dot = r * r * r * dot;
        for (std::int64_t c = 0; c < C; ++c)
          g[(n0 * C + c) * HW + j] +=
              r * n.grad[(n0 * C + c) * HW + j] - X[(n0 * C + c) * HW + j] * r3dot;
      }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, double* col, std::int64_t C, std::int64_t H, std::int64_t W,
                   std::int64_t kh, std::int64_t kw) {
  const std::int64_t ph = kh / 2, pw = kw / 2, HW = H * W;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < kh; ++i)
      for (std::int64_t j = 0; j < kw; ++j, ++row) {
        double* dst = col + row * HW;
        const double* src = x + c * HW;
        for (std::int64_t y = 0; y < H; ++y) {
          const std::int64_t sy = y + i - ph;
          if (sy < 0 || sy >= H) {
            for (std::int64_t xx = 0; xx < W; ++xx) dst[y * W + xx] = 0.0;
            continue;
          }
          for (std::int64_t xx = 0; xx < W; ++xx) {
            const std::int64_t sx = xx + j - pw;
            dst[y * W + xx] = (sx < 0 || sx >= W) ? 0.0 : src[sy * W + sx];
          }
        }
      }
}

inline void col2im_accum(const double* col, double* x, std::int64_t C, std::int64_t H,
                         std::int64_t W, std::int64_t kh, std::int64_t kw) {
  const std::int64_t ph = kh / 2, pw = kw / 2, HW = H * W;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < kh; ++i)
      for (std::int64_t j = 0; j < kw; ++j, ++row) {
        const double* src = col + row * HW;
        double* dst = x + c * HW;
        for (std::int64_t y = 0; y < H; ++y) {
          const std::int64_t sy = y + i - ph;
          if (sy < 0 || sy >= H) continue;
          for (std::int64_t xx = 0; xx < W; ++xx) {
            const std::int64_t sx = xx + j - pw;
            if (sx >= 0 && sx < W) dst[sy * W + sx] += src[y * W + xx];
          }
        }
      }
}

}  // namespace detail

// 2-d convolution (cross-correlation), stride 1, zero "same" padding, odd
// kernel. x (N,C,H,W), w (O,C,kh,kw) -> (N,O,H,W).
inline Var conv2d(const Var& x, const Var& w) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  UNVALLEY_CHECK(X.ndim() == 4 && W.ndim() == 4 && W.dim(1) == X.dim(1), ShapeError,
                 "conv2d: x ", shape_str(X.shape()), " w ", shape_str(W.shape()));
  UNVALLEY_CHECK(W.dim(2) % 2 == 1 && W.dim(3) % 2 == 1, ShapeError,
                 "conv2d requires odd kernel");
  const std::int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const std::int64_t O = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  const std::int64_t CKK = C * kh * kw, HW = H * Wd;

  Tensor out({N, O, H, Wd});
  std::vector<double> col(static_cast<std::size_t>(CKK * HW));
  for (std::int64_t n0 = 0; n0 < N; ++n0) {
    detail::im2col(X.data() + n0 * C * HW, col.data(), C, H, Wd, kh, kw);
    MatMap(out.data() + n0 * O * HW, O, HW).noalias() =
        ConstMatMap(W.data(), O, CKK) * ConstMatMap(col.data(), CKK, HW);
  }
  return make_op(std::move(out), {x, w}, [N, C, H, Wd, O, kh, kw, CKK, HW](Node& n) {
    const Tensor& X = n.parents[0]->value;
    const Tensor& W = n.parents[1]->value;
    const bool need_dx = n.parents[0]->requires_grad;
    const bool need_dw = n.parents[1]->requires_grad;
    if (!need_dx && !need_dw) return;
    std::vector<double> col(static_cast<std::size_t>(CKK * HW));
    std::vector<double> dcol(need_dx ? static_cast<std::size_t>(CKK * HW) : 0);
    Tensor* gx = need_dx ? &n.parents[0]->ensure_grad() : nullptr;
    Tensor* gw = need_dw ? &n.parents[1]->ensure_grad() : nullptr;
    for (std::int64_t n0 = 0; n0 < N; ++n0) {
      ConstMatMap dY(n.grad.data() + n0 * O * HW, O, HW);
      if (need_dw) {
        detail::im2col(X.data() + n0 * C * HW, col.data(), C, H, Wd, kh, kw);
        MatMap(gw->data(), O, CKK).noalias() +=
            dY * ConstMatMap(col.data(), CKK, HW).transpose();
      }
      if (need_dx) {
        MatMap(dcol.data(), CKK, HW).noalias() =
            ConstMatMap(W.data(), O, CKK).transpose() * dY;
        detail::col2im_accum(dcol.data(), gx->data() + n0 * C * HW, C, H, Wd, kh, kw);
      }
    }
  });
}

inline Var avg_pool2(const Var& x) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4 && X.dim(2) % 2 == 0 && X.dim(3) % 2 == 0, ShapeError,
                 "avg_pool2 expects even spatial dims, got ", shape_str(X.shape()));
  const std::int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::int64_t Ho = H / 2, Wo = W / 2;
  Tensor out({X.dim(0), X.dim(1), Ho, Wo});
  for (std::int64_t i = 0; i < NC; ++i) {
    const double* src = X.data() + i * H * W;
    double* dst = out.data() + i * Ho * Wo;
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx)
        dst[y * Wo + xx] = 0.25 * (src[(2 * y) * W + 2 * xx] + src[(2 * y) * W + 2 * xx + 1] +
                                   src[(2 * y + 1) * W + 2 * xx] +
                                   src[(2 * y + 1) * W + 2 * xx + 1]);
  }
  return make_op(std::move(out), {x}, [NC, H, W, Ho, Wo](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < NC; ++i) {
      const double* src = n.grad.data() + i * Ho * Wo;
      double* dst = g.data() + i * H * W;
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t xx = 0; xx < Wo; ++xx) {
          const double v = 0.25 * src[y * Wo + xx];
          dst[(2 * y) * W + 2 * xx] += v;
          dst[(2 * y) * W + 2 * xx + 1] += v;
          dst[(2 * y + 1) * W + 2 * xx] += v;
          dst[(2 * y + 1) * W + 2 * xx + 1] += v;
        }
    }
  });
}

inline Var upsample2(const Var& x) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4, ShapeError, "upsample2 expects 4-d input");
  const std::int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out({X.dim(0), X.dim(1), 2 * H, 2 * W});
  for (std::int64_t i = 0; i < NC; ++i)
    kern::upsample2_plane(X.data() + i * H * W, out.data() + i * 4 * H * W, H, W);
  return make_op(std::move(out), {x}, [NC, H, W](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < NC; ++i)
      kern::upsample2_plane_adjoint(n.grad.data() + i * 4 * H * W, g.data() + i * H * W, H, W);
  });
}

// Area resampling to out_h x out_w (downsampling only), per plane.
inline Var resample_area(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4, ShapeError, "resample_area expects 4-d input");
  const std::int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
  auto rows = kern::area_plan(H, out_h);
  auto cols = kern::area_plan(W, out_w);
  Tensor out({X.dim(0), X.dim(1), out_h, out_w});
  for (std::int64_t i = 0; i < NC; ++i)
    kern::resample_plane(X.data() + i * H * W, out.data() + i * out_h * out_w, H, W, rows, cols);
  return make_op(std::move(out), {x},
                 [NC, H, W, out_h, out_w, rows = std::move(rows), cols = std::move(cols)](Node& n) {
                   if (!n.parents[0]->requires_grad) return;
                   Tensor& g = n.parents[0]->ensure_grad();
                   for (std::int64_t i = 0; i < NC; ++i)
                     kern::resample_plane_adjoint(n.grad.data() + i * out_h * out_w,
                                                  g.data() + i * H * W, H, W, rows, cols);
                 });
}

inline Var gaussian_blur_op(const Var& x, const std::vector<double>& taps) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4, ShapeError, "gaussian_blur_op expects 4-d input");
  const std::int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out(X.shape());
  for (std::int64_t i = 0; i < NC; ++i)
    kern::gaussian_blur_plane(X.data() + i * H * W, out.data() + i * H * W, H, W, taps);
  return make_op(std::move(out), {x}, [NC, H, W, taps](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < NC; ++i)
      kern::gaussian_blur_plane_adjoint(n.grad.data() + i * H * W, g.data() + i * H * W, H, W,
                                        taps);
  });
}

inline Var flip_h(const Var& x) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4, ShapeError, "flip_h expects 4-d input");
  const std::int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out(X.shape());
  for (std::int64_t i = 0; i < NC; ++i)
    kern::flip_h_plane(X.data() + i * H * W, out.data() + i * H * W, H, W);
  return make_op(std::move(out), {x}, [NC, H, W](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    std::vector<double> tmp(static_cast<std::size_t>(H * W));
    for (std::int64_t i = 0; i < NC; ++i) {
      kern::flip_h_plane(n.grad.data() + i * H * W, tmp.data(), H, W);
      for (std::int64_t j = 0; j < H * W; ++j) g[i * H * W + j] += tmp[std::size_t(j)];
    }
  });
}

// Circular shift by (dy,dx): y[h,w] = x[(h-dy) mod H, (w-dx) mod W].
inline Var roll2d(const Var& x, std::int64_t dy, std::int64_t dx) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4, ShapeError, "roll2d expects 4-d input");
  const std::int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
  auto mod = [](std::int64_t a, std::int64_t m) { return ((a % m) + m) % m; };
  Tensor out(X.shape());
  for (std::int64_t i = 0; i < NC; ++i)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t xx = 0; xx < W; ++xx)
        out[(i * H + y) * W + xx] = X[(i * H + mod(y - dy, H)) * W + mod(xx - dx, W)];
  return make_op(std::move(out), {x}, [NC, H, W, dy, dx, mod](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < NC; ++i)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t xx = 0; xx < W; ++xx)
          g[(i * H + mod(y - dy, H)) * W + mod(xx - dx, W)] += n.grad[(i * H + y) * W + xx];
  });
}

// Per-sample zero-fill integer translation (augmentation path).
inline Var translate_per_sample(const Var& x, std::vector<std::pair<int, int>> shifts) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4 && std::int64_t(shifts.size()) == X.dim(0), ShapeError,
                 "translate_per_sample: one (dy,dx) per sample");
  const std::int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out(X.shape());
  for (std::int64_t n0 = 0; n0 < N; ++n0) {
    const auto [dy, dx] = shifts[std::size_t(n0)];
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t xx = 0; xx < W; ++xx) {
          const std::int64_t sy = y - dy, sx = xx - dx;
          out[((n0 * C + c) * H + y) * W + xx] =
              (sy < 0 || sy >= H || sx < 0 || sx >= W) ? 0.0
                                                       : X[((n0 * C + c) * H + sy) * W + sx];
        }
  }
  return make_op(std::move(out), {x}, [N, C, H, W, shifts = std::move(shifts)](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t n0 = 0; n0 < N; ++n0) {
      const auto [dy, dx] = shifts[std::size_t(n0)];
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t xx = 0; xx < W; ++xx) {
            const std::int64_t sy = y - dy, sx = xx - dx;
            if (sy >= 0 && sy < H && sx >= 0 && sx < W)
              g[((n0 * C + c) * H + sy) * W + sx] += n.grad[((n0 * C + c) * H + y) * W + xx];
          }
    }
  });
}

// Per-sample horizontal flip where mask[n] is set (augmentation path).
inline Var flip_h_per_sample(const Var& x, std::vector<char> mask) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4 && std::int64_t(mask.size()) == X.dim(0), ShapeError,
                 "flip_h_per_sample: one flag per sample");
  const std::int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out = X;
  for (std::int64_t n0 = 0; n0 < N; ++n0) {
    if (!mask[std::size_t(n0)]) continue;
    for (std::int64_t c = 0; c < C; ++c)
      kern::flip_h_plane(X.data() + (n0 * C + c) * H * W, out.data() + (n0 * C + c) * H * W, H,
                         W);
  }
  return make_op(std::move(out), {x}, [N, C, H, W, mask = std::move(mask)](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    std::vector<double> tmp(static_cast<std::size_t>(H * W));
    for (std::int64_t n0 = 0; n0 < N; ++n0)
      for (std::int64_t c = 0; c < C; ++c) {
        const double* src = n.grad.data() + (n0 * C + c) * H * W;
        double* dst = g.data() + (n0 * C + c) * H * W;
        if (mask[std::size_t(n0)]) {
          kern::flip_h_plane(src, tmp.data(), H, W);
          for (std::int64_t j = 0; j < H * W; ++j) dst[j] += tmp[std::size_t(j)];
        } else {
          for (std::int64_t j = 0; j < H * W; ++j) dst[j] += src[j];
        }
      }
  });
}

// Per-sample channel affine with constant coefficients (color jitter):
// y = x * scale[n,c] + shift[n,c].
inline Var channel_affine_const(const Var& x, Tensor scale, Tensor shift) {
  const Tensor& X = x.value();
  UNVALLEY_CHECK(X.ndim() == 4 && scale.ndim() == 2 && scale.same_shape(shift) &&
                     scale.dim(0) == X.dim(0) && scale.dim(1) == X.dim(1),
                 ShapeError, "channel_affine_const shapes");
  const std::int64_t NC = X.dim(0) * X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (std::int64_t i = 0; i < NC; ++i) {
    const double a = scale[i], b = shift[i];
    for (std::int64_t j = 0; j < HW; ++j) out[i * HW + j] = out[i * HW + j] * a + b;
  }
  return make_op(std::move(out), {x}, [NC, HW, scale = std::move(scale)](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < NC; ++i) {
      const double a = scale[i];
      for (std::int64_t j = 0; j < HW; ++j) g[i * HW + j] += a * n.grad[i * HW + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

inline Var mean_abs_diff(const Var& a, const Var& b) { return mean_all(abs_val(sub(a, b))); }

inline Var mean_sq_diff(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

}  // namespace unvalley::ops

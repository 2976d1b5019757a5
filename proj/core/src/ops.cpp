#include "geomattn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "geomattn/error.hpp"

namespace geomattn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using Impl = std::shared_ptr<detail::TensorImpl>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(a.shape()));
  }
}

template <typename F>
Tensor unary(const char* op, const Tensor& a, F&& value_fn, std::vector<double> local_grad) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = value_fn(in[i]);
  Impl A = a.impl();
  return detail::make_result(op, a.shape(), std::move(out), {&a},
                             [A, d = std::move(local_grad)](std::span<const double> g) {
                               auto ga = detail::grad_sink(A);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * d[i];
                             });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  Impl A = a.impl(), B = b.impl();
  return detail::make_result("add", a.shape(), std::move(out), {&a, &b},
                             [A, B](std::span<const double> g) {
                               for (const Impl& t : {A, B}) {
                                 auto gt = detail::grad_sink(t);
                                 for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  Impl A = a.impl(), B = b.impl();
  return detail::make_result("sub", a.shape(), std::move(out), {&a, &b},
                             [A, B](std::span<const double> g) {
                               auto ga = detail::grad_sink(A);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                               auto gb = detail::grad_sink(B);
                               for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  Impl A = a.impl(), B = b.impl();
  return detail::make_result("mul", a.shape(), std::move(out), {&a, &b},
                             [A, B](std::span<const double> g) {
                               auto ga = detail::grad_sink(A);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * B->data[i];
                               auto gb = detail::grad_sink(B);
                               for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * A->data[i];
                             });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double v) { return v + s; },
               std::vector<double>(a.numel(), 1.0));
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double v) { return v * s; }, std::vector<double>(a.numel(), s));
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
  std::vector<double> d = out;
  Impl A = a.impl();
  return detail::make_result("exp", a.shape(), std::move(out), {&a},
                             [A, d = std::move(d)](std::span<const double> g) {
                               auto ga = detail::grad_sink(A);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * d[i];
                             });
}

Tensor log(const Tensor& a) {
  auto in = a.data();
  std::vector<double> d(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!(in[i] > 0.0)) throw NumericError("log of non-positive value " + std::to_string(in[i]));
    d[i] = 1.0 / in[i];
  }
  return unary("log", a, [](double v) { return std::log(v); }, std::move(d));
}

Tensor relu(const Tensor& a) {
  auto in = a.data();
  std::vector<double> d(in.size());
  const bool tracing = detail::tracing_branches();
  for (std::size_t i = 0; i < in.size(); ++i) {
    d[i] = in[i] > 0.0 ? 1.0 : 0.0;
    if (tracing) detail::trace_branch(in[i] > 0.0 ? (i << 1) | 1 : i << 1);
  }
  return unary("relu", a, [](double v) { return v > 0.0 ? v : 0.0; }, std::move(d));
}

Tensor softplus(const Tensor& a) {
  auto in = a.data();
  std::vector<double> d(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) d[i] = 1.0 / (1.0 + std::exp(-in[i]));
  return unary(
      "softplus", a,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      std::move(d));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Impl A = a.impl();
  return detail::make_result("sum", {}, {s}, {&a}, [A](std::span<const double> g) {
    auto ga = detail::grad_sink(A);
    for (double& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  Impl A = a.impl();
  return detail::make_result("reshape", std::move(shape), std::move(out), {&a},
                             [A](std::span<const double> g) {
                               auto ga = detail::grad_sink(A);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                             });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.dim(0), d = a.dim(1), m = b.dim(1);
  if (b.dim(0) != d) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  MutMap(out.data(), n, m).noalias() = ConstMap(a.data().data(), n, d) * ConstMap(b.data().data(), d, m);
  Impl A = a.impl(), B = b.impl();
  return detail::make_result(
      "matmul", {n, m}, std::move(out), {&a, &b}, [A, B, n, d, m](std::span<const double> g) {
        ConstMap G(g.data(), n, m);
        if (auto ga = detail::grad_sink(A); !ga.empty()) {
          MutMap(ga.data(), n, d).noalias() += G * ConstMap(B->data.data(), d, m).transpose();
        }
        if (auto gb = detail::grad_sink(B); !gb.empty()) {
          MutMap(gb.data(), d, m).noalias() += ConstMap(A->data.data(), n, d).transpose() * G;
        }
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t n = a.dim(0), d = a.dim(1), m = b.dim(0);
  if (b.dim(1) != d) {
    throw ShapeError("matmul_nt: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  std::vector<double> out(n * m, 0.0);
  MutMap(out.data(), n, m).noalias() =
      ConstMap(a.data().data(), n, d) * ConstMap(b.data().data(), m, d).transpose();
  Impl A = a.impl(), B = b.impl();
  return detail::make_result(
      "matmul_nt", {n, m}, std::move(out), {&a, &b}, [A, B, n, d, m](std::span<const double> g) {
        ConstMap G(g.data(), n, m);
        if (auto ga = detail::grad_sink(A); !ga.empty()) {
          MutMap(ga.data(), n, d).noalias() += G * ConstMap(B->data.data(), m, d);
        }
        if (auto gb = detail::grad_sink(B); !gb.empty()) {
          MutMap(gb.data(), m, d).noalias() += G.transpose() * ConstMap(A->data.data(), n, d);
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  Tensor y = matmul(x, weight);
  if (!bias) return y;
  require_rank(*bias, 1, "linear bias");
  const std::size_t n = y.dim(0), m = y.dim(1);
  if (bias->dim(0) != m) throw ShapeError("linear: bias length does not match output width");
  std::vector<double> out(y.data().begin(), y.data().end());
  auto bv = bias->data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bv[j];
  Impl Y = y.impl(), Bi = bias->impl();
  return detail::make_result("bias_add", {n, m}, std::move(out), {&y, &*bias},
                             [Y, Bi, n, m](std::span<const double> g) {
                               if (auto gy = detail::grad_sink(Y); !gy.empty())
                                 for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g[i];
                               if (auto gb = detail::grad_sink(Bi); !gb.empty())
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
                             });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, co, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::size_t cols = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const double* plane = img + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* dst = col + ((ci * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* row = dst + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(row, row + g.wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0
                                                                           : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
  const std::size_t cols = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    double* plane = img + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* src = col + ((ci * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w))
              dst[static_cast<std::size_t>(ix)] += src[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), stride, pad, 0, 0};
  if (kernel.dim(1) != g.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, got " + std::to_string(g.c));
  }
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t rows = g.rows(), cols = g.cols();
  std::vector<double> out(g.n * g.co * cols, 0.0);
  std::vector<double> col(rows * cols);
  ConstMap K(kernel.data().data(), g.co, rows);
  const double* xin = x.data().data();
  for (std::size_t i = 0; i < g.n; ++i) {
    im2col(xin + i * g.c * g.h * g.w, g, col.data());
    MutMap(out.data() + i * g.co * cols, g.co, cols).noalias() = K * ConstMap(col.data(), rows, cols);
  }

  Impl X = x.impl(), Kr = kernel.impl();
  return detail::make_result(
      "conv2d", {g.n, g.co, g.ho, g.wo}, std::move(out), {&x, &kernel},
      [X, Kr, g](std::span<const double> grad) {
        const std::size_t rows = g.rows(), cols = g.cols();
        auto gx = detail::grad_sink(X);
        auto gk = detail::grad_sink(Kr);
        std::vector<double> col(rows * cols);
        ConstMap K(Kr->data.data(), g.co, rows);
        for (std::size_t i = 0; i < g.n; ++i) {
          ConstMap G(grad.data() + i * g.co * cols, g.co, cols);
          if (!gk.empty()) {
            im2col(X->data.data() + i * g.c * g.h * g.w, g, col.data());
            MutMap(gk.data(), g.co, rows).noalias() += G * ConstMap(col.data(), rows, cols).transpose();
          }
          if (!gx.empty()) {
            MutMap(col.data(), rows, cols).noalias() = K.transpose() * G;
            col2im(col.data(), g, gx.data() + i * g.c * g.h * g.w);
          }
        }
      });
}

RunningStats::RunningStats(std::size_t channels)
    : mean(Tensor::zeros({channels})), var(Tensor::ones({channels})), count(Tensor::zeros({1})) {}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const std::optional<Tensor>& beta,
                  RunningStats& stats, Mode mode, BatchNormOptions options) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batch_norm: expected [n,c] or [n,c,h,w], got " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.numel() / std::max<std::size_t>(1, n * c);
  if (gamma.shape() != Shape{c} || (beta && beta->shape() != Shape{c})) {
    throw ShapeError("batch_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  if (stats.mean.shape() != Shape{c}) {
    throw ShapeError("batch_norm: running statistics sized for a different channel count");
  }
  const std::size_t m = n * spatial;
  auto in = x.data();
  auto gv = gamma.data();
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(c);
  std::vector<double> out(in.size());

  if (mode == Mode::train) {
    if (m < 2) throw ShapeError("batch_norm: train mode needs at least 2 values per channel");
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = in.data() + (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) mu += p[s];
      }
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = in.data() + (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) var += (p[s] - mu) * (p[s] - mu);
      }
      var /= static_cast<double>(m);
      inv_std[ch] = 1.0 / std::sqrt(var + options.eps);
      rm[ch] = (1.0 - options.momentum) * rm[ch] + options.momentum * mu;
      rv[ch] = (1.0 - options.momentum) * rv[ch] +
               options.momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) xhat[base + s] = (in[base + s] - mu) * inv_std[ch];
      }
    }
    stats.count.mutable_data()[0] += 1.0;
  } else {
    if (stats.updates() == 0) {
      throw Error("batch_norm: eval mode requested before any running statistics exist");
    }
    auto rm = stats.mean.data();
    auto rv = stats.var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + options.eps);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) xhat[base + s] = (in[base + s] - rm[ch]) * inv_std[ch];
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * spatial;
      const double shift = beta ? beta->data()[ch] : 0.0;
      for (std::size_t s = 0; s < spatial; ++s) out[base + s] = gv[ch] * xhat[base + s] + shift;
    }
  }

  Impl X = x.impl(), Gm = gamma.impl();
  Impl Bt = beta ? beta->impl() : nullptr;
  const bool train = mode == Mode::train;
  auto backward = [X, Gm, Bt, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, spatial,
                   m, train](std::span<const double> g) {
    auto gx = detail::grad_sink(X);
    auto gg = detail::grad_sink(Gm);
    std::span<double> gb = Bt ? detail::grad_sink(Bt) : std::span<double>{};
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          sum_g += g[base + s];
          sum_gx += g[base + s] * xhat[base + s];
        }
      }
      if (!gg.empty()) gg[ch] += sum_gx;
      if (!gb.empty()) gb[ch] += sum_g;
      if (gx.empty()) continue;
      const double gamma_ch = Gm->data[ch];
      if (train) {
        const double k = gamma_ch * inv_std[ch] / static_cast<double>(m);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t base = (i * c + ch) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) {
            gx[base + s] += k * (static_cast<double>(m) * g[base + s] - sum_g - xhat[base + s] * sum_gx);
          }
        }
      } else {
        const double k = gamma_ch * inv_std[ch];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t base = (i * c + ch) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) gx[base + s] += k * g[base + s];
        }
      }
    }
  };
  if (beta) return detail::make_result("batch_norm", x.shape(), std::move(out), {&x, &gamma, &*beta}, std::move(backward));
  return detail::make_result("batch_norm", x.shape(), std::move(out), {&x, &gamma}, std::move(backward));
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  auto in = x.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += in[i * hw + k];
    out[i] = s / static_cast<double>(hw);
  }
  Impl X = x.impl();
  return detail::make_result("global_avg_pool", {n, c}, std::move(out), {&x},
                             [X, n, c, hw](std::span<const double> g) {
                               auto gx = detail::grad_sink(X);
                               const double inv = 1.0 / static_cast<double>(hw);
                               for (std::size_t i = 0; i < n * c; ++i)
                                 for (std::size_t k = 0; k < hw; ++k) gx[i * hw + k] += g[i] * inv;
                             });
}

Tensor concat(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat");
  require_rank(b, 2, "concat");
  const std::size_t n = a.dim(0), d1 = a.dim(1), d2 = b.dim(1);
  if (b.dim(0) != n) {
    throw ShapeError("concat: leading dimensions differ " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t d = d1 + d2;
  std::vector<double> out(n * d);
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * d1, d1, out.data() + i * d);
    std::copy_n(y.data() + i * d2, d2, out.data() + i * d + d1);
  }
  Impl A = a.impl(), B = b.impl();
  return detail::make_result("concat", {n, d}, std::move(out), {&a, &b},
                             [A, B, n, d1, d2](std::span<const double> g) {
                               const std::size_t d = d1 + d2;
                               if (auto ga = detail::grad_sink(A); !ga.empty())
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d1; ++j) ga[i * d1 + j] += g[i * d + j];
                               if (auto gb = detail::grad_sink(B); !gb.empty())
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d2; ++j) gb[i * d2 + j] += g[i * d + d1 + j];
                             });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_rows: trailing shapes differ " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  Impl A = a.impl(), B = b.impl();
  const std::size_t split = a.numel();
  return detail::make_result("concat_rows", std::move(shape), std::move(out), {&a, &b},
                             [A, B, split](std::span<const double> g) {
                               if (auto ga = detail::grad_sink(A); !ga.empty())
                                 for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                               if (auto gb = detail::grad_sink(B); !gb.empty())
                                 for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
                             });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  const std::size_t row = a.numel() / std::max<std::size_t>(1, shape[0]);
  shape[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  Impl A = a.impl();
  const std::size_t offset = begin * row;
  return detail::make_result("slice_rows", std::move(shape), std::move(out), {&a},
                             [A, offset](std::span<const double> g) {
                               auto ga = detail::grad_sink(A);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
                             });
}

Tensor l2_normalize(const Tensor& v, double eps) {
  require_rank(v, 2, "l2_normalize");
  const std::size_t n = v.dim(0), d = v.dim(1);
  auto in = v.data();
  std::vector<double> out(in.size());
  std::vector<double> denom(n);
  const bool tracing = detail::tracing_branches();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += in[i * d + j] * in[i * d + j];
    const double norm = std::sqrt(ss);
    denom[i] = std::max(norm, eps);
    if (tracing) detail::trace_branch(norm > eps ? (i << 1) | 1 : i << 1);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = in[i * d + j] / denom[i];
  }
  std::vector<double> y = out;
  Impl V = v.impl();
  return detail::make_result(
      "l2_normalize", v.shape(), std::move(out), {&v},
      [V, y = std::move(y), denom = std::move(denom), n, d, eps](std::span<const double> g) {
        auto gv = detail::grad_sink(V);
        for (std::size_t i = 0; i < n; ++i) {
          const double* yi = y.data() + i * d;
          const double* gi = g.data() + i * d;
          const bool clamped = !(denom[i] > eps);
          double dot = 0.0;
          if (!clamped)
            for (std::size_t j = 0; j < d; ++j) dot += yi[j] * gi[j];
          for (std::size_t j = 0; j < d; ++j) gv[i * d + j] += (gi[j] - yi[j] * dot) / denom[i];
        }
      });
}

Tensor mul_spatial(const Tensor& x, const Tensor& mask) {
  require_rank(x, 4, "mul_spatial input");
  require_rank(mask, 3, "mul_spatial mask");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (mask.dim(0) != n || mask.dim(1) != x.dim(2) || mask.dim(2) != x.dim(3)) {
    throw ShapeError("mul_spatial: mask " + to_string(mask.shape()) +
                     " does not match spatial layout of " + to_string(x.shape()));
  }
  auto xv = x.data();
  auto qv = mask.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < hw; ++k)
        out[(i * c + ch) * hw + k] = xv[(i * c + ch) * hw + k] * qv[i * hw + k];
  Impl X = x.impl(), Q = mask.impl();
  return detail::make_result("mul_spatial", x.shape(), std::move(out), {&x, &mask},
                             [X, Q, n, c, hw](std::span<const double> g) {
                               auto gx = detail::grad_sink(X);
                               auto gq = detail::grad_sink(Q);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t k = 0; k < hw; ++k) {
                                     const std::size_t idx = (i * c + ch) * hw + k;
                                     if (!gx.empty()) gx[idx] += g[idx] * Q->data[i * hw + k];
                                     if (!gq.empty()) gq[i * hw + k] += g[idx] * X->data[idx];
                                   }
                             });
}

}  // namespace geomattn

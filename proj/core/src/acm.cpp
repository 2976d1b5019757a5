#include "geomattn/acm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "geomattn/checkpoint.hpp"
#include "geomattn/error.hpp"
#include "geomattn/image.hpp"
#include "geomattn/ops.hpp"

namespace geomattn {

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;

struct Window {
  std::size_t r0, r1, c0, c1;  // inclusive bounds
};

Window window_at(std::size_t u, std::size_t v, std::size_t radius, std::size_t h, std::size_t w) {
  return {u >= radius ? u - radius : 0, std::min(h - 1, u + radius), v >= radius ? v - radius : 0,
          std::min(w - 1, v + radius)};
}

Tensor as_batched(const Tensor& t, const char* op) {
  if (t.rank() == 4) return t;
  if (t.rank() == 3) return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
  throw ShapeError(std::string(op) + ": expected [c,h,w] or [n,c,h,w], got " + to_string(t.shape()));
}

}  // namespace

void AcmConfig::validate() const {
  if (neighborhood == 0 || neighborhood % 2 == 0) {
    throw ConfigError("ACM neighborhood must be an odd positive integer, got " +
                      std::to_string(neighborhood));
  }
}

Tensor positive_activation(const Tensor& raw) { return add_scalar(softplus(raw), 1e-6); }

Tensor neighborhood_softmax(const Tensor& local, std::size_t neighborhood) {
  AcmConfig{neighborhood}.validate();
  const bool single = local.rank() == 3;
  const Tensor L = as_batched(local, "neighborhood_softmax");
  const std::size_t n = L.dim(0), c = L.dim(1), h = L.dim(2), w = L.dim(3);
  const std::size_t radius = neighborhood / 2;
  const std::size_t planes = n * c, hw = h * w;
  auto in = L.data();
  std::vector<double> out(in.size());
  std::vector<double> window_max(in.size());
  std::vector<double> window_sum(in.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* plane = in.data() + p * hw;
    for (std::size_t u = 0; u < h; ++u) {
      for (std::size_t v = 0; v < w; ++v) {
        const Window win = window_at(u, v, radius, h, w);
        double mx = plane[win.r0 * w + win.c0];
        for (std::size_t a = win.r0; a <= win.r1; ++a)
          for (std::size_t b = win.c0; b <= win.c1; ++b) mx = std::max(mx, plane[a * w + b]);
        double s = 0.0;
        for (std::size_t a = win.r0; a <= win.r1; ++a)
          for (std::size_t b = win.c0; b <= win.c1; ++b) s += std::exp(plane[a * w + b] - mx);
        const std::size_t idx = p * hw + u * w + v;
        window_max[idx] = mx;
        window_sum[idx] = s;
        out[idx] = std::exp(plane[u * w + v] - mx) / s;
      }
    }
  }
  std::vector<double> m = out;
  Impl X = L.impl();
  Tensor result = detail::make_result(
      "neighborhood_softmax", L.shape(), std::move(out), {&L},
      [X, m = std::move(m), window_max = std::move(window_max), window_sum = std::move(window_sum),
       planes, h, w, radius](std::span<const double> g) {
        auto gx = detail::grad_sink(X);
        const std::size_t hw = h * w;
        std::vector<double> coef(hw);
        for (std::size_t p = 0; p < planes; ++p) {
          const std::size_t off = p * hw;
          const double* plane = X->data.data() + off;
          for (std::size_t k = 0; k < hw; ++k) coef[k] = g[off + k] * m[off + k] / window_sum[off + k];
          for (std::size_t a = 0; a < h; ++a) {
            for (std::size_t b = 0; b < w; ++b) {
              // Truncated square windows are symmetric: (a,b) in N(u,v) iff (u,v) in N(a,b).
              const Window win = window_at(a, b, radius, h, w);
              double acc = 0.0;
              for (std::size_t u = win.r0; u <= win.r1; ++u)
                for (std::size_t v = win.c0; v <= win.c1; ++v)
                  acc += coef[u * w + v] * std::exp(plane[a * w + b] - window_max[off + u * w + v]);
              const std::size_t idx = off + a * w + b;
              gx[idx] += g[idx] * m[idx] - acc;
            }
          }
        }
      });
  return single ? reshape(result, local.shape()) : result;
}

Tensor channel_nms(const Tensor& local) {
  const bool single = local.rank() == 3;
  const Tensor L = as_batched(local, "channel_nms");
  const std::size_t n = L.dim(0), c = L.dim(1), hw = L.dim(2) * L.dim(3);
  auto in = L.data();
  for (double v : in) {
    if (!(v > 0.0)) throw NumericError("channel_nms requires strictly positive activations");
  }
  std::vector<double> out(in.size());
  std::vector<std::size_t> argmax(n * hw);
  const bool tracing = detail::tracing_branches();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < hw; ++k) {
      std::size_t best = 0;
      for (std::size_t t = 1; t < c; ++t)
        if (in[(i * c + t) * hw + k] > in[(i * c + best) * hw + k]) best = t;
      argmax[i * hw + k] = best;
      if (tracing) detail::trace_branch(best);
      const double mx = in[(i * c + best) * hw + k];
      for (std::size_t t = 0; t < c; ++t) out[(i * c + t) * hw + k] = in[(i * c + t) * hw + k] / mx;
    }
  }
  Impl X = L.impl();
  Tensor result = detail::make_result(
      "channel_nms", L.shape(), std::move(out), {&L},
      [X, argmax = std::move(argmax), n, c, hw](std::span<const double> g) {
        auto gx = detail::grad_sink(X);
        const auto& x = X->data;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t best = argmax[i * hw + k];
            const double mx = x[(i * c + best) * hw + k];
            double cross = 0.0;
            for (std::size_t t = 0; t < c; ++t) {
              const std::size_t idx = (i * c + t) * hw + k;
              gx[idx] += g[idx] / mx;
              cross += g[idx] * x[idx];
            }
            gx[(i * c + best) * hw + k] -= cross / (mx * mx);
          }
        }
      });
  return single ? reshape(result, local.shape()) : result;
}

Tensor channel_max(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("channel_max: expected [n,c,h,w], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c == 0) throw ShapeError("channel_max: no channels");
  auto in = x.data();
  std::vector<double> out(n * hw);
  std::vector<std::size_t> source(n * hw);
  const bool tracing = detail::tracing_branches();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < hw; ++k) {
      std::size_t best = 0;
      for (std::size_t t = 1; t < c; ++t)
        if (in[(i * c + t) * hw + k] > in[(i * c + best) * hw + k]) best = t;
      if (tracing) detail::trace_branch(best);
      source[i * hw + k] = (i * c + best) * hw + k;
      out[i * hw + k] = in[source[i * hw + k]];
    }
  }
  Impl X = x.impl();
  return detail::make_result("channel_max", {n, x.dim(2), x.dim(3)}, std::move(out), {&x},
                             [X, source = std::move(source)](std::span<const double> g) {
                               auto gx = detail::grad_sink(X);
                               for (std::size_t j = 0; j < source.size(); ++j) gx[source[j]] += g[j];
                             });
}

Tensor spatial_normalize(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("spatial_normalize: expected [n,h,w], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> totals(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += in[i * hw + k];
    if (!(s > 0.0)) throw NumericError("spatial_normalize: plane sum is not positive");
    totals[i] = s;
    for (std::size_t k = 0; k < hw; ++k) out[i * hw + k] = in[i * hw + k] / s;
  }
  std::vector<double> q = out;
  Impl X = x.impl();
  return detail::make_result(
      "spatial_normalize", x.shape(), std::move(out), {&x},
      [X, q = std::move(q), totals = std::move(totals), n, hw](std::span<const double> g) {
        auto gx = detail::grad_sink(X);
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t k = 0; k < hw; ++k) dot += g[i * hw + k] * q[i * hw + k];
          for (std::size_t k = 0; k < hw; ++k) gx[i * hw + k] += (g[i * hw + k] - dot) / totals[i];
        }
      });
}

AttentionMask attention_mask(const Tensor& local, const AcmConfig& config) {
  config.validate();
  const bool single = local.rank() == 3;
  const Tensor L = as_batched(local, "attention_mask");
  Tensor m = neighborhood_softmax(L, config.neighborhood);
  Tensor g = channel_nms(L);
  Tensor q_tilde = channel_max(mul(m, g));
  Tensor q = spatial_normalize(q_tilde);
  AttentionMask mask;
  if (single) {
    mask.q = reshape(q, {L.dim(2), L.dim(3)});
  } else {
    mask.q = q;
  }
  if (config.keep_intermediates) {
    mask.m = single ? reshape(m, local.shape()) : m;
    mask.g = single ? reshape(g, local.shape()) : g;
    mask.q_tilde = single ? reshape(q_tilde, {L.dim(2), L.dim(3)}) : q_tilde;
  }
  return mask;
}

void write_mask_pgm(const std::filesystem::path& path, const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("write_mask_pgm: expected [h,w], got " + to_string(mask.shape()));
  auto v = mask.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  std::vector<double> scaled(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = range > 0.0 ? (v[i] - *lo) / range : 0.0;
  write_pgm(path, Tensor({1, mask.dim(0), mask.dim(1)}, std::move(scaled)));
}

void write_mask_sidecar(const std::filesystem::path& path, const Tensor& mask) {
  write_container(path, {{"mask", mask.detach()}});
}

}  // namespace geomattn

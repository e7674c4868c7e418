// SPDX-License-Identifier: Apache-2.0
#include "ulab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ulab/errors.hpp"
#include "ulab/kernels.hpp"

namespace ulab {
namespace {

using detail::make_result;
using detail::wants_grad;

const kernels::Table& K() { return kernels::active(); }

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class F, class D>
Tensor unary(const Tensor& x, F f, D df) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p->value[i], self.value[i]);
  });
}

void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, double* col) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = col + ((ci * k + ki) * k + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            row[oy * wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                                    ? 0.0
                                    : x[(ci * h + iy) * w + ix];
          }
        }
      }
}

void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, double* x) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((ci * k + ki) * k + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(ci * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "add");
  std::vector<double> out(a.values());
  K().axpy(1.0, b.values().data(), out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (wants_grad(p)) K().axpy(1.0, self.grad.data(), p->ensure_grad().data(), self.grad.size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  K().axpy(-1.0, b.values().data(), out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self.parents[0]))
      K().axpy(1.0, self.grad.data(), self.parents[0]->ensure_grad().data(), self.grad.size());
    if (wants_grad(self.parents[1]))
      K().axpy(-1.0, self.grad.data(), self.parents[1]->ensure_grad().data(), self.grad.size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants_grad(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  K().scale(s, out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    K().axpy(s, self.grad.data(), self.parents[0]->ensure_grad().data(), self.grad.size());
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (auto& v : out) v += s;
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    K().axpy(1.0, self.grad.data(), self.parents[0]->ensure_grad().data(), self.grad.size());
  });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double th = std::tanh(c * (v + 0.044715 * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  require(k == kb, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  K().gemm(trans_a, trans_b, m, n, k, a.values().data(), b.values().data(), out.data(), false);
  return make_result({m, n}, std::move(out), {a, b}, [=](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double* dc = self.grad.data();
    if (wants_grad(pa)) {
      double* ga = pa->ensure_grad().data();
      if (!trans_a)
        K().gemm(false, !trans_b, m, k, n, dc, pb->value.data(), ga, true);
      else
        K().gemm(trans_b, true, k, m, n, pb->value.data(), dc, ga, true);
    }
    if (wants_grad(pb)) {
      double* gb = pb->ensure_grad().data();
      if (!trans_b)
        K().gemm(!trans_a, false, k, n, m, pa->value.data(), dc, gb, true);
      else
        K().gemm(true, trans_a, n, k, m, dc, pa->value.data(), gb, true);
    }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t d = bias.size();
  require(x.rank() >= 1 && x.shape().back() == d, "add_row_bias: width mismatch");
  std::vector<double> out(x.values());
  const std::size_t rows = out.size() / d;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += bias[j];
  return make_result(x.shape(), std::move(out), {x, bias}, [rows, d](Node& self) {
    if (wants_grad(self.parents[0]))
      K().axpy(1.0, self.grad.data(), self.parents[0]->ensure_grad().data(), self.grad.size());
    if (wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w, false, true);
  return bias.defined() ? add_row_bias(y, bias) : y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result(std::move(shape), x.values(), {x}, [](Node& self) {
    K().axpy(1.0, self.grad.data(), self.parents[0]->ensure_grad().data(), self.grad.size());
  });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2 || x.rank() == 3, "transpose: rank 2 or 3 required");
  const bool batched = x.rank() == 3;
  const std::size_t b = batched ? x.dim(0) : 1;
  const std::size_t r = x.dim(batched ? 1 : 0);
  const std::size_t c = x.dim(batched ? 2 : 1);
  std::vector<double> out(x.size());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[bi * r * c + j * r + i] = x[bi * r * c + i * c + j];
  Shape s = batched ? Shape{b, c, r} : Shape{c, r};
  return make_result(std::move(s), std::move(out), {x}, [b, r, c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[bi * r * c + i * c + j] += self.grad[bi * r * c + j * r + i];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d: expects x [n,c,h,w] and w [o,c,k,k]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  require(w.dim(1) == c && w.dim(3) == k, "conv2d: weight " + shape_str(w.shape()) +
                                              " incompatible with input " + shape_str(x.shape()));
  require(h + 2 * pad >= k && wd + 2 * pad >= k && stride >= 1, "conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t ckk = c * k * k, hw = ho * wo;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  std::vector<double> out(n * o * hw);
  std::vector<double> col(pointwise ? 0 : ckk * hw);
  for (std::size_t ni = 0; ni < n; ++ni) {
    const double* xn = x.values().data() + ni * c * h * wd;
    const double* src = xn;
    if (!pointwise) {
      im2col(xn, c, h, wd, k, stride, pad, ho, wo, col.data());
      src = col.data();
    }
    double* on = out.data() + ni * o * hw;
    K().gemm(false, false, o, hw, ckk, w.values().data(), src, on, false);
    if (bias.defined())
      for (std::size_t oi = 0; oi < o; ++oi)
        for (std::size_t p = 0; p < hw; ++p) on[oi * hw + p] += bias[oi];
  }
  return make_result({n, o, ho, wo}, std::move(out), {x, w, bias}, [=](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    std::vector<double> colb(pointwise ? 0 : ckk * hw), dcol(pointwise ? 0 : ckk * hw);
    for (std::size_t ni = 0; ni < n; ++ni) {
      const double* dout = self.grad.data() + ni * o * hw;
      if (wants_grad(pb)) {
        auto& gb = pb->ensure_grad();
        for (std::size_t oi = 0; oi < o; ++oi)
          for (std::size_t p = 0; p < hw; ++p) gb[oi] += dout[oi * hw + p];
      }
      const double* xn = px->value.data() + ni * c * h * wd;
      if (wants_grad(pw)) {
        const double* src = xn;
        if (!pointwise) {
          im2col(xn, c, h, wd, k, stride, pad, ho, wo, colb.data());
          src = colb.data();
        }
        K().gemm(false, true, o, ckk, hw, dout, src, pw->ensure_grad().data(), true);
      }
      if (wants_grad(px)) {
        double* gx = px->ensure_grad().data() + ni * c * h * wd;
        if (pointwise) {
          K().gemm(true, false, ckk, hw, o, pw->value.data(), dout, gx, true);
        } else {
          K().gemm(true, false, ckk, hw, o, pw->value.data(), dout, dcol.data(), false);
          col2im(dcol.data(), c, h, wd, k, stride, pad, ho, wo, gx);
        }
      }
    }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require(x.rank() == 4, "upsample: expects NCHW");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(nc * 4 * h * w);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
  return make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x}, [nc, h, w](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t p = 0; p < nc; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (ca + cb) * hw);
  for (std::size_t ni = 0; ni < n; ++ni) {
    std::copy_n(a.values().data() + ni * ca * hw, ca * hw, out.data() + ni * (ca + cb) * hw);
    std::copy_n(b.values().data() + ni * cb * hw, cb * hw, out.data() + ni * (ca + cb) * hw + ca * hw);
  }
  return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [=](Node& self) {
    for (std::size_t ni = 0; ni < n; ++ni) {
      const double* g = self.grad.data() + ni * (ca + cb) * hw;
      if (wants_grad(self.parents[0]))
        K().axpy(1.0, g, self.parents[0]->ensure_grad().data() + ni * ca * hw, ca * hw);
      if (wants_grad(self.parents[1]))
        K().axpy(1.0, g + ca * hw, self.parents[1]->ensure_grad().data() + ni * cb * hw, cb * hw);
    }
  });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  require(x.rank() == 4 && begin < end && end <= x.dim(1), "slice_channels: bad range");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), cs = end - begin;
  std::vector<double> out(n * cs * hw);
  for (std::size_t ni = 0; ni < n; ++ni)
    std::copy_n(x.values().data() + (ni * c + begin) * hw, cs * hw, out.data() + ni * cs * hw);
  return make_result({n, cs, x.dim(2), x.dim(3)}, std::move(out), {x}, [=](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t ni = 0; ni < n; ++ni)
      K().axpy(1.0, self.grad.data() + ni * cs * hw, g.data() + (ni * c + begin) * hw, cs * hw);
  });
}

Tensor add_channel_vector(const Tensor& x, const Tensor& v) {
  require(x.rank() == 4 && v.size() == x.dim(0) * x.dim(1), "add_channel_vector: shape mismatch");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.values());
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] += v[p];
  return make_result(x.shape(), std::move(out), {x, v}, [nc, hw](Node& self) {
    if (wants_grad(self.parents[0]))
      K().axpy(1.0, self.grad.data(), self.parents[0]->ensure_grad().data(), self.grad.size());
    if (wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < hw; ++i) g[p] += self.grad[p * hw + i];
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool: expects NCHW");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(nc, 0.0);
  for (std::size_t p = 0; p < nc; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
    out[p] = s / static_cast<double>(hw);
  }
  return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [nc, hw](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t p = 0; p < nc; ++p)
      for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += self.grad[p] / static_cast<double>(hw);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = gamma.size();
  require(x.shape().back() == d && beta.size() == d, "layer_norm: width mismatch");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
                       auto& px = self.parents[0];
                       auto& pg = self.parents[1];
                       auto& pb = self.parents[2];
                       const auto& gv = pg->value;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * d;
                         const double* xh = xhat.data() + r * d;
                         if (wants_grad(pg)) {
                           auto& gg = pg->ensure_grad();
                           for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xh[j];
                         }
                         if (wants_grad(pb)) {
                           auto& gb = pb->ensure_grad();
                           for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
                         }
                         if (wants_grad(px)) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = dy[j] * gv[j];
                             m1 += dxh;
                             m2 += dxh * xh[j];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           double* gx = px->ensure_grad().data() + r * d;
                           for (std::size_t j = 0; j < d; ++j)
                             gx[j] += inv[r] * (dy[j] * gv[j] - m1 - xh[j] * m2);
                         }
                       }
                     });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() == 4, "group_norm: expects NCHW");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(groups >= 1 && c % groups == 0 && gamma.size() == c && beta.size() == c,
          "group_norm: channels must divide into groups and match affine size");
  const std::size_t cg = c / groups, m = cg * hw;
  std::vector<double> out(x.size()), xhat(x.size()), inv(n * groups);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (ni * c + g * cg) * hw;
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += x[base + i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) var += (x[base + i] - mu) * (x[base + i] - mu);
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      inv[ni * groups + g] = is;
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t ch = g * cg + i / hw;
        xhat[base + i] = (x[base + i] - mu) * is;
        out[base + i] = xhat[base + i] * gamma[ch] + beta[ch];
      }
    }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
                       auto& px = self.parents[0];
                       auto& pg = self.parents[1];
                       auto& pb = self.parents[2];
                       const auto& gv = pg->value;
                       for (std::size_t ni = 0; ni < n; ++ni)
                         for (std::size_t g = 0; g < groups; ++g) {
                           const std::size_t base = (ni * c + g * cg) * hw;
                           const double* dy = self.grad.data() + base;
                           const double* xh = xhat.data() + base;
                           if (wants_grad(pg) || wants_grad(pb)) {
                             for (std::size_t i = 0; i < m; ++i) {
                               const std::size_t ch = g * cg + i / hw;
                               if (wants_grad(pg)) pg->ensure_grad()[ch] += dy[i] * xh[i];
                               if (wants_grad(pb)) pb->ensure_grad()[ch] += dy[i];
                             }
                           }
                           if (wants_grad(px)) {
                             double m1 = 0.0, m2 = 0.0;
                             for (std::size_t i = 0; i < m; ++i) {
                               const double dxh = dy[i] * gv[g * cg + i / hw];
                               m1 += dxh;
                               m2 += dxh * xh[i];
                             }
                             m1 /= static_cast<double>(m);
                             m2 /= static_cast<double>(m);
                             double* gx = px->ensure_grad().data() + base;
                             const double is = inv[ni * groups + g];
                             for (std::size_t i = 0; i < m; ++i)
                               gx[i] += is * (dy[i] * gv[g * cg + i / hw] - m1 - xh[i] * m2);
                           }
                         }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: rank-3 q, k, v required");
  const std::size_t b = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
  require(k.dim(0) == b && v.dim(0) == b && k.dim(2) == d && v.dim(2) == d && v.dim(1) == lk,
          "attention: q/k/v shapes disagree");
  require(heads >= 1 && d % heads == 0, "attention: width not divisible by heads");
  require(!causal || lq == lk, "attention: causal mask needs equal lengths");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto gather = [&](const double* src, std::size_t len, std::size_t h, double* dst) {
    for (std::size_t i = 0; i < len; ++i) std::copy_n(src + i * d + h * dh, dh, dst + i * dh);
  };

  std::vector<double> out(b * lq * d), probs(b * heads * lq * lk);
  std::vector<double> qh(lq * dh), kh(lk * dh), vh(lk * dh), oh(lq * dh);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h) {
      gather(q.values().data() + bi * lq * d, lq, h, qh.data());
      gather(k.values().data() + bi * lk * d, lk, h, kh.data());
      gather(v.values().data() + bi * lk * d, lk, h, vh.data());
      double* pm = probs.data() + (bi * heads + h) * lq * lk;
      K().gemm(false, true, lq, lk, dh, qh.data(), kh.data(), pm, false);
      for (std::size_t i = 0; i < lq; ++i) {
        double* row = pm + i * lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          row[j] = (causal && j > i) ? -std::numeric_limits<double>::infinity() : row[j] * sc;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < lk; ++j) row[j] /= z;
      }
      K().gemm(false, false, lq, dh, lk, pm, vh.data(), oh.data(), false);
      for (std::size_t i = 0; i < lq; ++i) std::copy_n(oh.data() + i * dh, dh, out.data() + (bi * lq + i) * d + h * dh);
    }

  return make_result({b, lq, d}, std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    auto& pv = self.parents[2];
    std::vector<double> qh(lq * dh), kh(lk * dh), vh(lk * dh), doh(lq * dh);
    std::vector<double> dq(lq * dh), dk(lk * dh), dv(lk * dh), dp(lq * lk);
    auto scatter = [&](const double* src, std::size_t len, std::size_t h, double* dst) {
      for (std::size_t i = 0; i < len; ++i) K().axpy(1.0, src + i * dh, dst + i * d + h * dh, dh);
    };
    auto pick = [&](const double* src, std::size_t len, std::size_t h, double* dst) {
      for (std::size_t i = 0; i < len; ++i) std::copy_n(src + i * d + h * dh, dh, dst + i * dh);
    };
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h) {
        const double* pm = probs.data() + (bi * heads + h) * lq * lk;
        pick(self.grad.data() + bi * lq * d, lq, h, doh.data());
        pick(pq->value.data() + bi * lq * d, lq, h, qh.data());
        pick(pk->value.data() + bi * lk * d, lk, h, kh.data());
        pick(pv->value.data() + bi * lk * d, lk, h, vh.data());
        if (wants_grad(pv)) {
          K().gemm(true, false, lk, dh, lq, pm, doh.data(), dv.data(), false);
          scatter(dv.data(), lk, h, pv->ensure_grad().data() + bi * lk * d);
        }
        if (!wants_grad(pq) && !wants_grad(pk)) continue;
        K().gemm(false, true, lq, lk, dh, doh.data(), vh.data(), dp.data(), false);
        for (std::size_t i = 0; i < lq; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < lk; ++j) s += dp[i * lk + j] * pm[i * lk + j];
          for (std::size_t j = 0; j < lk; ++j) dp[i * lk + j] = pm[i * lk + j] * (dp[i * lk + j] - s) * sc;
        }
        if (wants_grad(pq)) {
          K().gemm(false, false, lq, dh, lk, dp.data(), kh.data(), dq.data(), false);
          scatter(dq.data(), lq, h, pq->ensure_grad().data() + bi * lq * d);
        }
        if (wants_grad(pk)) {
          K().gemm(true, false, lk, dh, lq, dp.data(), qh.data(), dk.data(), false);
          scatter(dk.data(), lk, h, pk->ensure_grad().data() + bi * lk * d);
        }
      }
  });
}

Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
  require(table.rank() == 2, "embedding: table must be [vocab, d]");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < vocab, "embedding: id out of range");
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  return make_result({ids.size(), d}, std::move(out), {table}, [ids, d](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) K().axpy(1.0, self.grad.data() + i * d, g.data() + ids[i] * d, d);
  });
}

Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require(x.rank() == 2, "select_rows: rank-2 input required");
  const std::size_t d = x.dim(1);
  for (auto r : rows) require(r < x.dim(0), "select_rows: row out of range");
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.values().data() + rows[i] * d, d, out.data() + i * d);
  return make_result({rows.size(), d}, std::move(out), {x}, [rows, d](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i) K().axpy(1.0, self.grad.data() + i * d, g.data() + rows[i] * d, d);
  });
}

Tensor append_token(const Tensor& e, const Tensor& token) {
  require(e.rank() == 2 && token.size() == e.dim(1), "append_token: width mismatch");
  const std::size_t n = e.dim(0), d = e.dim(1);
  std::vector<double> out(n * 2 * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(e.values().data() + i * d, d, out.data() + i * 2 * d);
    std::copy_n(token.values().data(), d, out.data() + i * 2 * d + d);
  }
  return make_result({n, 2, d}, std::move(out), {e, token}, [n, d](Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      if (wants_grad(self.parents[0]))
        K().axpy(1.0, self.grad.data() + i * 2 * d, self.parents[0]->ensure_grad().data() + i * d, d);
      if (wants_grad(self.parents[1]))
        K().axpy(1.0, self.grad.data() + i * 2 * d + d, self.parents[1]->ensure_grad().data(), d);
    }
  });
}

Tensor normalize_rows(const Tensor& x, double eps) {
  require(x.rank() == 2, "normalize_rows: rank-2 input required");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.size()), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = x.values().data() + i * d;
    norms[i] = std::sqrt(K().dot(r, r, d)) + eps;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = r[j] / norms[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [n, d, norms = std::move(norms)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double* y = self.value.data() + i * d;
      const double* dy = self.grad.data() + i * d;
      const double yd = K().dot(y, dy, d);
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (dy[j] - y[j] * yd) / norms[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s / n}, {x}, [n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0] / n;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  require(a.size() > 0, "mse: empty input");
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return make_result({1}, {s / n}, {a, b}, [n](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double c = 2.0 * self.grad[0] / n;
    if (wants_grad(pa)) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * (pa->value[i] - pb->value[i]);
    }
    if (wants_grad(pb)) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= c * (pa->value[i] - pb->value[i]);
    }
  });
}

Tensor frobenius_norm(const Tensor& x) {
  const double nrm = std::sqrt(K().dot(x.values().data(), x.values().data(), x.size()));
  return make_result({1}, {nrm}, {x}, [nrm](Node& self) {
    if (nrm == 0.0) return;  // subgradient 0 at the origin
    auto& p = self.parents[0];
    K().axpy(self.grad[0] / nrm, p->value.data(), p->ensure_grad().data(), p->value.size());
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "cross_entropy: one label per row required");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> soft(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] < c, "cross_entropy: label out of range");
    const double* r = logits.values().data() + i * c;
    const double mx = *std::max_element(r, r + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(r[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) soft[i * c + j] = std::exp(r[j] - lz);
    loss += lz - r[labels[i]];
  }
  loss /= static_cast<double>(n);
  return make_result({1}, {loss}, {logits}, [n, c, labels, soft = std::move(soft)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += s * (soft[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
  });
}

}  // namespace ulab

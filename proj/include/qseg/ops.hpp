#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "qseg/parallel.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

template <typename T>
struct ConvParams {
  Tensor<T> weight;        // (c_out, c_in/groups, kh, kw)
  std::vector<T> bias;     // length c_out
  int stride = 1;
  int padding = 0;         // zero padding, same on all sides
  int groups = 1;

  int c_out() const { return weight.n(); }
  int c_in() const { return weight.c() * groups; }
  int kh() const { return weight.h(); }
  int kw() const { return weight.w(); }
};

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma, beta, running_mean, running_var;  // length c
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);
  bool training = false;

  int channels() const { return static_cast<int>(gamma.size()); }
};

namespace detail {

template <typename T>
void conv_check(const Tensor<T>& x, const ConvParams<T>& p) {
  if (p.groups < 1 || p.c_in() % p.groups != 0 || p.c_out() % p.groups != 0)
    throw std::invalid_argument("conv2d: groups must divide c_in and c_out");
  if (x.c() != p.c_in())
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.c()) +
                                " channels, filter expects " + std::to_string(p.c_in()));
  if (static_cast<int>(p.bias.size()) != p.c_out())
    throw std::invalid_argument("conv2d: bias length != c_out");
  if (p.stride < 1 || p.padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  if (x.h() + 2 * p.padding < p.kh() || x.w() + 2 * p.padding < p.kw())
    throw std::invalid_argument("conv2d: kernel larger than padded input");
}

}  // namespace detail

// Direct convolution. Each output element accumulates its receptive-field dot
// product in (ic, kh, kw) order into a double accumulator, the same order and
// precision as the naive per-site definition, so reorderings for speed cannot
// change results.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::conv_check(x, p);
  using A = accum_t<T>;
  const int kh = p.kh(), kw = p.kw(), s = p.stride, pad = p.padding;
  const int oh = (x.h() + 2 * pad - kh) / s + 1;
  const int ow = (x.w() + 2 * pad - kw) / s + 1;
  const int cin_g = p.weight.c();            // channels per group
  const int cout_g = p.c_out() / p.groups;   // filters per group
  Tensor<T> y(x.n(), p.c_out(), oh, ow);

  parallel_for(0, static_cast<std::int64_t>(x.n()) * p.c_out(), [&](std::int64_t job) {
    const int n = static_cast<int>(job / p.c_out());
    const int oc = static_cast<int>(job % p.c_out());
    const int g = oc / cout_g;
    std::vector<A> acc(static_cast<std::size_t>(oh) * ow, static_cast<A>(p.bias[oc]));
    for (int icg = 0; icg < cin_g; ++icg) {
      const T* in = x.plane(n, g * cin_g + icg);
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const A wv = static_cast<A>(p.weight.at(oc, icg, ky, kx));
          if (wv == A(0)) continue;
          for (int y0 = 0; y0 < oh; ++y0) {
            const int iy = y0 * s - pad + ky;
            if (iy < 0 || iy >= x.h()) continue;
            A* arow = acc.data() + static_cast<std::size_t>(y0) * ow;
            const T* irow = in + static_cast<std::size_t>(iy) * x.w();
            // valid ox range: 0 <= ox*s - pad + kx < w
            int x0 = 0, x1 = ow;
            if (s == 1) {
              x0 = std::max(0, pad - kx);
              x1 = std::min(ow, x.w() + pad - kx);
              const int off = kx - pad;
              for (int ox = x0; ox < x1; ++ox) arow[ox] += wv * static_cast<A>(irow[ox + off]);
            } else {
              for (int ox = x0; ox < x1; ++ox) {
                const int ix = ox * s - pad + kx;
                if (ix < 0 || ix >= x.w()) continue;
                arow[ox] += wv * static_cast<A>(irow[ix]);
              }
            }
          }
        }
      }
    }
    T* out = y.plane(n, oc);
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
  });
  return y;
}

// 2x2/stride-2 max pool. `indices` records, for each pooled value, the flat
// h*w position of the selected maximum inside its (n, c) plane; ties go to the
// smallest flat index so unpooling is platform-independent.
template <typename T>
std::pair<Tensor<T>, Tensor<std::int32_t>> maxpool2x2(const Tensor<T>& x) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0)
    throw std::invalid_argument("maxpool2x2: spatial dims must be even, got " + x.shape_str());
  const int oh = x.h() / 2, ow = x.w() / 2;
  Tensor<T> pooled(x.n(), x.c(), oh, ow);
  Tensor<std::int32_t> indices(x.n(), x.c(), oh, ow);
  parallel_for(0, static_cast<std::int64_t>(x.n()) * x.c(), [&](std::int64_t job) {
    const int n = static_cast<int>(job / x.c());
    const int c = static_cast<int>(job % x.c());
    const T* in = x.plane(n, c);
    T* pout = pooled.plane(n, c);
    std::int32_t* iout = indices.plane(n, c);
    for (int y0 = 0; y0 < oh; ++y0) {
      for (int x0 = 0; x0 < ow; ++x0) {
        const int base = (2 * y0) * x.w() + 2 * x0;
        const int cand[4] = {base, base + 1, base + x.w(), base + x.w() + 1};
        int best = cand[0];
        T bv = in[cand[0]];
        for (int k = 1; k < 4; ++k) {
          if (in[cand[k]] > bv) {  // strict: ties keep the smaller flat index
            bv = in[cand[k]];
            best = cand[k];
          }
        }
        pout[y0 * ow + x0] = bv;
        iout[y0 * ow + x0] = best;
      }
    }
  });
  return {std::move(pooled), std::move(indices)};
}

// Scatter of pooled values back to their recorded argmax positions; every
// other element is `fill` (0 for float tensors, the zero point for int8).
template <typename T>
Tensor<T> max_unpool2x2(const Tensor<T>& pooled, const Tensor<std::int32_t>& indices,
                        int out_h, int out_w, T fill = T{}) {
  if (!(pooled.n() == indices.n() && pooled.c() == indices.c() &&
        pooled.h() == indices.h() && pooled.w() == indices.w()))
    throw std::invalid_argument("max_unpool2x2: pooled and indices shapes differ");
  if (out_h != 2 * pooled.h() || out_w != 2 * pooled.w())
    throw std::invalid_argument("max_unpool2x2: output spatial dims must be 2x pooled dims");
  Tensor<T> y = Tensor<T>::full(pooled.n(), pooled.c(), out_h, out_w, fill);
  const std::int32_t plane_sz = out_h * out_w;
  for (int n = 0; n < pooled.n(); ++n) {
    for (int c = 0; c < pooled.c(); ++c) {
      const T* pin = pooled.plane(n, c);
      const std::int32_t* idx = indices.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < static_cast<std::size_t>(pooled.h()) * pooled.w(); ++i) {
        if (idx[i] < 0 || idx[i] >= plane_sz)
          throw std::invalid_argument("max_unpool2x2: index out of range");
        out[idx[i]] = pin[i];
      }
    }
  }
  return y;
}

// Same-size average pool with odd kernel, stride 1. Border windows divide by
// the count of in-bounds elements, so a constant input stays exactly constant.
// Computed with a per-plane double summed-area table.
template <typename T>
Tensor<T> avgpool_same(const Tensor<T>& x, int k) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("avgpool_same: kernel must be odd");
  const int r = (k - 1) / 2;
  const int H = x.h(), W = x.w();
  Tensor<T> y(x.n(), x.c(), H, W);
  parallel_for(0, static_cast<std::int64_t>(x.n()) * x.c(), [&](std::int64_t job) {
    const int n = static_cast<int>(job / x.c());
    const int c = static_cast<int>(job % x.c());
    const T* in = x.plane(n, c);
    T* out = y.plane(n, c);
    // sat[(y+1)*(W+1) + (x+1)] = sum of in[0..y, 0..x]
    std::vector<double> sat(static_cast<std::size_t>(H + 1) * (W + 1), 0.0);
    for (int yy = 0; yy < H; ++yy) {
      double row = 0.0;
      for (int xx = 0; xx < W; ++xx) {
        row += static_cast<double>(in[yy * W + xx]);
        sat[(yy + 1) * (W + 1) + (xx + 1)] = sat[yy * (W + 1) + (xx + 1)] + row;
      }
    }
    for (int yy = 0; yy < H; ++yy) {
      const int y0 = std::max(0, yy - r), y1 = std::min(H - 1, yy + r);
      for (int xx = 0; xx < W; ++xx) {
        const int x0 = std::max(0, xx - r), x1 = std::min(W - 1, xx + r);
        const double sum = sat[(y1 + 1) * (W + 1) + (x1 + 1)] - sat[y0 * (W + 1) + (x1 + 1)] -
                           sat[(y1 + 1) * (W + 1) + x0] + sat[y0 * (W + 1) + x0];
        const int cnt = (y1 - y0 + 1) * (x1 - x0 + 1);
        out[yy * W + xx] = static_cast<T>(sum / cnt);
      }
    }
  });
  return y;
}

template <typename T>
struct BnBatchStats {
  std::vector<accum_t<T>> mean, var;  // biased variance over (n, h, w)
};

template <typename T>
Tensor<T> batchnorm_eval(const Tensor<T>& x, const BatchNormParams<T>& p) {
  if (p.channels() != x.c())
    throw std::invalid_argument("batchnorm: params have " + std::to_string(p.channels()) +
                                " channels, input has " + std::to_string(x.c()));
  using A = accum_t<T>;
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  parallel_for(0, x.c(), [&](std::int64_t c) {
    const A inv = A(1) / std::sqrt(static_cast<A>(p.running_var[c]) + static_cast<A>(p.eps));
    const A g = static_cast<A>(p.gamma[c]) * inv;
    const A b = static_cast<A>(p.beta[c]) - g * static_cast<A>(p.running_mean[c]);
    for (int n = 0; n < x.n(); ++n) {
      const T* in = x.plane(n, static_cast<int>(c));
      T* out = y.plane(n, static_cast<int>(c));
      const std::size_t sz = static_cast<std::size_t>(x.h()) * x.w();
      for (std::size_t i = 0; i < sz; ++i) out[i] = static_cast<T>(g * static_cast<A>(in[i]) + b);
    }
  });
  return y;
}

// Train-mode batch norm: normalizes with batch statistics over (n, h, w) and
// updates the running stats in place: r <- (1-momentum)*r + momentum*batch.
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, BatchNormParams<T>& p,
                          BnBatchStats<T>* stats_out = nullptr,
                          Tensor<T>* xhat_out = nullptr) {
  if (p.channels() != x.c()) throw std::invalid_argument("batchnorm: channel mismatch");
  using A = accum_t<T>;
  const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
  const A m = static_cast<A>(x.n()) * static_cast<A>(plane);
  BnBatchStats<T> stats;
  stats.mean.assign(x.c(), A(0));
  stats.var.assign(x.c(), A(0));
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  if (xhat_out) *xhat_out = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  parallel_for(0, x.c(), [&](std::int64_t cj) {
    const int c = static_cast<int>(cj);
    A sum = 0, sq = 0;
    for (int n = 0; n < x.n(); ++n) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const A v = static_cast<A>(in[i]);
        sum += v;
        sq += v * v;
      }
    }
    const A mean = sum / m;
    A var = sq / m - mean * mean;
    if (var < A(0)) var = A(0);  // guard tiny negative from cancellation
    stats.mean[c] = mean;
    stats.var[c] = var;
    const A inv = A(1) / std::sqrt(var + static_cast<A>(p.eps));
    const A g = static_cast<A>(p.gamma[c]);
    const A b = static_cast<A>(p.beta[c]);
    for (int n = 0; n < x.n(); ++n) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      T* xh = xhat_out ? xhat_out->plane(n, c) : nullptr;
      for (std::size_t i = 0; i < plane; ++i) {
        const A norm = (static_cast<A>(in[i]) - mean) * inv;
        if (xh) xh[i] = static_cast<T>(norm);
        out[i] = static_cast<T>(g * norm + b);
      }
    }
  });
  for (int c = 0; c < x.c(); ++c) {
    const A mom = static_cast<A>(p.momentum);
    p.running_mean[c] = static_cast<T>((A(1) - mom) * static_cast<A>(p.running_mean[c]) + mom * stats.mean[c]);
    p.running_var[c] = static_cast<T>((A(1) - mom) * static_cast<A>(p.running_var[c]) + mom * stats.var[c]);
  }
  if (stats_out) *stats_out = std::move(stats);
  return y;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p) {
  return p.training ? batchnorm_train(x, p) : batchnorm_eval(x, p);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.numel(); ++i)
    if (y.data()[i] < T(0)) y.data()[i] = T(0);
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double z = static_cast<double>(x.data()[i]);
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    y.data()[i] = static_cast<T>(p);
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shapes differ, " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y.data()[i] += b.data()[i];
  return y;
}

}  // namespace qseg

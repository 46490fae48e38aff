#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qseg/model.hpp"
#include "qseg/ops.hpp"
#include "qseg/parallel.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

// ---------------------------------------------------------------------------
// Per-operation backward kernels (stride-1 convolutions, which is all the
// network uses). Everything accumulates in double like the forward kernels.

template <typename T>
void conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& dy,
                     Tensor<T>* dx, Tensor<T>* dweight, std::vector<T>* dbias) {
  if (p.stride != 1) throw std::invalid_argument("conv2d_backward: stride must be 1");
  using A = accum_t<T>;
  const int kh = p.kh(), kw = p.kw(), pad = p.padding;
  const int cin_g = p.weight.c();
  const int cout_g = p.c_out() / p.groups;
  const int H = x.h(), W = x.w(), OH = dy.h(), OW = dy.w();

  if (dx) {
    *dx = Tensor<T>(x.n(), x.c(), H, W);
    parallel_for(0, static_cast<std::int64_t>(x.n()) * x.c(), [&](std::int64_t job) {
      const int n = static_cast<int>(job / x.c());
      const int ic = static_cast<int>(job % x.c());
      const int g = ic / cin_g;
      const int icg = ic % cin_g;
      std::vector<A> acc(static_cast<std::size_t>(H) * W, A(0));
      for (int ocg = 0; ocg < cout_g; ++ocg) {
        const int oc = g * cout_g + ocg;
        const T* dyp = dy.plane(n, oc);
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const A wv = static_cast<A>(p.weight.at(oc, icg, ky, kx));
            if (wv == A(0)) continue;
            for (int iy = 0; iy < H; ++iy) {
              const int oy = iy + pad - ky;
              if (oy < 0 || oy >= OH) continue;
              const int x0 = std::max(0, kx - pad);
              const int x1 = std::min(W, OW + kx - pad);
              A* arow = acc.data() + static_cast<std::size_t>(iy) * W;
              const T* drow = dyp + static_cast<std::size_t>(oy) * OW - kx + pad;
              for (int ix = x0; ix < x1; ++ix) arow[ix] += wv * static_cast<A>(drow[ix]);
            }
          }
        }
      }
      T* out = dx->plane(n, ic);
      for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
    });
  }

  if (dweight) {
    *dweight = Tensor<T>(p.weight.n(), p.weight.c(), kh, kw);
    parallel_for(0, p.c_out(), [&](std::int64_t ocj) {
      const int oc = static_cast<int>(ocj);
      const int g = oc / cout_g;
      for (int icg = 0; icg < cin_g; ++icg) {
        const int ic = g * cin_g + icg;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            A acc = 0;
            for (int n = 0; n < x.n(); ++n) {
              const T* xp = x.plane(n, ic);
              const T* dyp = dy.plane(n, oc);
              for (int oy = 0; oy < OH; ++oy) {
                const int iy = oy - pad + ky;
                if (iy < 0 || iy >= H) continue;
                const int x0 = std::max(0, pad - kx);
                const int x1 = std::min(OW, W + pad - kx);
                const T* xrow = xp + static_cast<std::size_t>(iy) * W - pad + kx;
                const T* drow = dyp + static_cast<std::size_t>(oy) * OW;
                for (int ox = x0; ox < x1; ++ox)
                  acc += static_cast<A>(drow[ox]) * static_cast<A>(xrow[ox]);
              }
            }
            dweight->at(oc, icg, ky, kx) = static_cast<T>(acc);
          }
        }
      }
    });
  }

  if (dbias) {
    dbias->assign(p.c_out(), T(0));
    for (int oc = 0; oc < p.c_out(); ++oc) {
      A acc = 0;
      for (int n = 0; n < dy.n(); ++n) {
        const T* dyp = dy.plane(n, oc);
        for (std::size_t i = 0; i < static_cast<std::size_t>(OH) * OW; ++i)
          acc += static_cast<A>(dyp[i]);
      }
      (*dbias)[oc] = static_cast<T>(acc);
    }
  }
}

// dX for max pool: route each pooled gradient to its recorded argmax.
template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& dpooled, const Tensor<std::int32_t>& indices,
                              int in_h, int in_w) {
  Tensor<T> dx(dpooled.n(), dpooled.c(), in_h, in_w);
  for (int n = 0; n < dpooled.n(); ++n)
    for (int c = 0; c < dpooled.c(); ++c) {
      const T* dp = dpooled.plane(n, c);
      const std::int32_t* idx = indices.plane(n, c);
      T* out = dx.plane(n, c);
      const std::size_t sz = static_cast<std::size_t>(dpooled.h()) * dpooled.w();
      for (std::size_t i = 0; i < sz; ++i) out[idx[i]] = dp[i];
    }
  return dx;
}

// dX for max unpool: gather gradients from the scattered positions.
template <typename T>
Tensor<T> max_unpool2x2_backward(const Tensor<T>& dout, const Tensor<std::int32_t>& indices) {
  Tensor<T> dp(indices.n(), indices.c(), indices.h(), indices.w());
  for (int n = 0; n < indices.n(); ++n)
    for (int c = 0; c < indices.c(); ++c) {
      const T* dop = dout.plane(n, c);
      const std::int32_t* idx = indices.plane(n, c);
      T* out = dp.plane(n, c);
      const std::size_t sz = static_cast<std::size_t>(indices.h()) * indices.w();
      for (std::size_t i = 0; i < sz; ++i) out[i] = dop[idx[i]];
    }
  return dp;
}

// dX for relu given the post-activation tensor (y > 0 iff pre-activation > 0).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& post, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i)
    if (post.data()[i] <= T(0)) dx.data()[i] = T(0);
  return dx;
}

// Train-mode batch norm backward (biased batch variance).
template <typename T>
Tensor<T> batchnorm_train_backward(const Tensor<T>& xhat, const BnBatchStats<T>& stats,
                                   const std::vector<T>& gamma, T eps, const Tensor<T>& dy,
                                   std::vector<T>* dgamma, std::vector<T>* dbeta) {
  using A = accum_t<T>;
  const std::size_t plane = static_cast<std::size_t>(xhat.h()) * xhat.w();
  const A m = static_cast<A>(xhat.n()) * static_cast<A>(plane);
  Tensor<T> dx(xhat.n(), xhat.c(), xhat.h(), xhat.w());
  dgamma->assign(xhat.c(), T(0));
  dbeta->assign(xhat.c(), T(0));
  parallel_for(0, xhat.c(), [&](std::int64_t cj) {
    const int c = static_cast<int>(cj);
    A sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < xhat.n(); ++n) {
      const T* dyp = dy.plane(n, c);
      const T* xh = xhat.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += static_cast<A>(dyp[i]);
        sum_dy_xhat += static_cast<A>(dyp[i]) * static_cast<A>(xh[i]);
      }
    }
    (*dbeta)[c] = static_cast<T>(sum_dy);
    (*dgamma)[c] = static_cast<T>(sum_dy_xhat);
    const A inv = A(1) / std::sqrt(stats.var[c] + static_cast<A>(eps));
    const A g_inv = static_cast<A>(gamma[c]) * inv;
    const A mean_dy = sum_dy / m;
    const A mean_dy_xhat = sum_dy_xhat / m;
    for (int n = 0; n < xhat.n(); ++n) {
      const T* dyp = dy.plane(n, c);
      const T* xh = xhat.plane(n, c);
      T* out = dx.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i)
        out[i] = static_cast<T>(g_inv * (static_cast<A>(dyp[i]) - mean_dy -
                                         static_cast<A>(xh[i]) * mean_dy_xhat));
    }
  });
  return dx;
}

// ---------------------------------------------------------------------------
// Forward trace and full-network backward.

template <typename T>
struct BlockTrace {
  Tensor<T> x;      // block input
  Tensor<T> xhat1;  // bn1 normalized activations
  BnBatchStats<T> st1;
  Tensor<T> t;      // post relu1
  Tensor<T> pw;     // 1x1 conv output
  Tensor<T> xhat2;
  BnBatchStats<T> st2;
  Tensor<T> u;      // post relu2
  Tensor<T> out;    // t + u
};

template <typename T>
struct ForwardTrace {
  std::array<BlockTrace<T>, 7> blocks;
  Tensor<std::int32_t> i1, i2, i3;
  Tensor<T> d7;  // head input
  Tensor<T> logits;
};

template <typename T>
struct ConvGrads {
  Tensor<T> weight;
  std::vector<T> bias;
};

template <typename T>
struct BnGrads {
  std::vector<T> gamma, beta;
};

template <typename T>
struct BlockGrads {
  ConvGrads<T> conv3x3, conv1x1, dw3x3;
  BnGrads<T> bn1, bn2;
};

template <typename T>
struct ModelGrads {
  std::array<BlockGrads<T>, 7> blocks;
  ConvGrads<T> head;
};

namespace detail {

template <typename T>
const Tensor<T>& convblock_train(ConvBlockParams<T>& blk, const Tensor<T>& x,
                                 BlockTrace<T>& tr) {
  tr.x = x;
  Tensor<T> c3 = conv2d(x, blk.conv3x3);
  Tensor<T> bn1out = batchnorm_train(c3, blk.bn1, &tr.st1, &tr.xhat1);
  tr.t = relu(bn1out);
  tr.pw = conv2d(tr.t, blk.conv1x1);
  Tensor<T> dwo = conv2d(tr.pw, blk.dw3x3);
  Tensor<T> bn2out = batchnorm_train(dwo, blk.bn2, &tr.st2, &tr.xhat2);
  tr.u = relu(bn2out);
  tr.out = add(tr.t, tr.u);
  return tr.out;
}

// Returns d(block input); fills this block's parameter gradients.
template <typename T>
Tensor<T> convblock_backward(const ConvBlockParams<T>& blk, const BlockTrace<T>& tr,
                             const Tensor<T>& dout, BlockGrads<T>& g) {
  Tensor<T> dbn2out = relu_backward(tr.u, dout);
  Tensor<T> ddwo = batchnorm_train_backward(tr.xhat2, tr.st2, blk.bn2.gamma, blk.bn2.eps,
                                            dbn2out, &g.bn2.gamma, &g.bn2.beta);
  Tensor<T> dpw;
  conv2d_backward(tr.pw, blk.dw3x3, ddwo, &dpw, &g.dw3x3.weight, &g.dw3x3.bias);
  Tensor<T> dt_main;
  conv2d_backward(tr.t, blk.conv1x1, dpw, &dt_main, &g.conv1x1.weight, &g.conv1x1.bias);
  Tensor<T> dt = add(dt_main, dout);  // t feeds both conv1x1 and the inner skip
  Tensor<T> dbn1out = relu_backward(tr.t, dt);
  Tensor<T> dc3 = batchnorm_train_backward(tr.xhat1, tr.st1, blk.bn1.gamma, blk.bn1.eps,
                                           dbn1out, &g.bn1.gamma, &g.bn1.beta);
  Tensor<T> dx;
  conv2d_backward(tr.x, blk.conv3x3, dc3, &dx, &g.conv3x3.weight, &g.conv3x3.bias);
  return dx;
}

}  // namespace detail

// Train-mode forward: batch-norm uses batch statistics and updates running
// stats; all intermediates the backward pass needs are kept in the trace.
template <typename T>
const Tensor<T>& forward_train(ModelGraph<T>& m, const Tensor<T>& x, ForwardTrace<T>& tr) {
  if (m.folded) throw std::invalid_argument("forward_train: model must be unfolded");
  detail::check_forward_input(m, x);

  const Tensor<T>& e1 = detail::convblock_train(m.blocks[0], x, tr.blocks[0]);
  auto [p1, i1] = maxpool2x2(e1);
  tr.i1 = std::move(i1);
  const Tensor<T>& e2 = detail::convblock_train(m.blocks[1], p1, tr.blocks[1]);
  auto [p2, i2] = maxpool2x2(e2);
  tr.i2 = std::move(i2);
  const Tensor<T>& e3 = detail::convblock_train(m.blocks[2], p2, tr.blocks[2]);
  auto [p3, i3] = maxpool2x2(e3);
  tr.i3 = std::move(i3);

  const Tensor<T>& b4o = detail::convblock_train(m.blocks[3], p3, tr.blocks[3]);
  Tensor<T> mres = add(b4o, p3);

  Tensor<T> d5in = add(max_unpool2x2(mres, tr.i3, e3.h(), e3.w()), e3);
  const Tensor<T>& d5 = detail::convblock_train(m.blocks[4], d5in, tr.blocks[4]);

  Tensor<T> d6in = add(max_unpool2x2(d5, tr.i2, e2.h(), e2.w()), e2);
  const Tensor<T>& d6 = detail::convblock_train(m.blocks[5], d6in, tr.blocks[5]);

  Tensor<T> d7in = add(max_unpool2x2(d6, tr.i1, e1.h(), e1.w()), e1);
  const Tensor<T>& b7o = detail::convblock_train(m.blocks[6], d7in, tr.blocks[6]);
  tr.d7 = add(b7o, d7in);

  tr.logits = conv2d(tr.d7, m.head);
  return tr.logits;
}

// Reverse pass for every trainable parameter. Skip adds duplicate gradients
// into both branches; pool/unpool route through the recorded indices.
template <typename T>
void backward(const ModelGraph<T>& m, const ForwardTrace<T>& tr, const Tensor<T>& dlogits,
              ModelGrads<T>& g) {
  if (tr.logits.empty()) throw std::invalid_argument("backward: no forward trace");

  Tensor<T> dd7;
  conv2d_backward(tr.d7, m.head, dlogits, &dd7, &g.head.weight, &g.head.bias);

  // d7 = b7o + d7in; d7in also feeds block 7
  Tensor<T> dd7in_block = detail::convblock_backward(m.blocks[6], tr.blocks[6], dd7, g.blocks[6]);
  Tensor<T> dd7in = add(dd7in_block, dd7);

  Tensor<T> de1 = dd7in;  // skip to encoder 1
  Tensor<T> dd6 = max_unpool2x2_backward(dd7in, tr.i1);
  Tensor<T> dd6in = detail::convblock_backward(m.blocks[5], tr.blocks[5], dd6, g.blocks[5]);

  Tensor<T> de2 = dd6in;
  Tensor<T> dd5 = max_unpool2x2_backward(dd6in, tr.i2);
  Tensor<T> dd5in = detail::convblock_backward(m.blocks[4], tr.blocks[4], dd5, g.blocks[4]);

  Tensor<T> de3 = dd5in;
  Tensor<T> dm = max_unpool2x2_backward(dd5in, tr.i3);

  // m = b4o + p3; p3 also feeds block 4
  Tensor<T> dp3 = add(detail::convblock_backward(m.blocks[3], tr.blocks[3], dm, g.blocks[3]), dm);

  de3 = add(de3, maxpool2x2_backward(dp3, tr.i3, tr.blocks[2].out.h(), tr.blocks[2].out.w()));
  Tensor<T> dp2 = detail::convblock_backward(m.blocks[2], tr.blocks[2], de3, g.blocks[2]);

  de2 = add(de2, maxpool2x2_backward(dp2, tr.i2, tr.blocks[1].out.h(), tr.blocks[1].out.w()));
  Tensor<T> dp1 = detail::convblock_backward(m.blocks[1], tr.blocks[1], de2, g.blocks[1]);

  de1 = add(de1, maxpool2x2_backward(dp1, tr.i1, tr.blocks[0].out.h(), tr.blocks[0].out.w()));
  detail::convblock_backward(m.blocks[0], tr.blocks[0], de1, g.blocks[0]);
}

// Visits every trainable parameter span in a fixed canonical order:
// fn(name, T* values, std::size_t count). Gradient spans traverse in the
// identical order so the two can be zipped.
template <typename T, typename Fn>
void for_each_param_span(ModelGraph<T>& m, Fn&& fn) {
  for (int b = 0; b < 7; ++b) {
    const std::string p = "b" + std::to_string(b + 1) + ".";
    auto& blk = m.blocks[b];
    fn(p + "conv3x3.weight", blk.conv3x3.weight.data(), blk.conv3x3.weight.numel());
    fn(p + "conv3x3.bias", blk.conv3x3.bias.data(), blk.conv3x3.bias.size());
    fn(p + "bn1.gamma", blk.bn1.gamma.data(), blk.bn1.gamma.size());
    fn(p + "bn1.beta", blk.bn1.beta.data(), blk.bn1.beta.size());
    fn(p + "conv1x1.weight", blk.conv1x1.weight.data(), blk.conv1x1.weight.numel());
    fn(p + "conv1x1.bias", blk.conv1x1.bias.data(), blk.conv1x1.bias.size());
    fn(p + "dw3x3.weight", blk.dw3x3.weight.data(), blk.dw3x3.weight.numel());
    fn(p + "dw3x3.bias", blk.dw3x3.bias.data(), blk.dw3x3.bias.size());
    fn(p + "bn2.gamma", blk.bn2.gamma.data(), blk.bn2.gamma.size());
    fn(p + "bn2.beta", blk.bn2.beta.data(), blk.bn2.beta.size());
  }
  fn("head.weight", m.head.weight.data(), m.head.weight.numel());
  fn("head.bias", m.head.bias.data(), m.head.bias.size());
}

template <typename T, typename Fn>
void for_each_grad_span(ModelGrads<T>& g, Fn&& fn) {
  for (int b = 0; b < 7; ++b) {
    const std::string p = "b" + std::to_string(b + 1) + ".";
    auto& blk = g.blocks[b];
    fn(p + "conv3x3.weight", blk.conv3x3.weight.data(), blk.conv3x3.weight.numel());
    fn(p + "conv3x3.bias", blk.conv3x3.bias.data(), blk.conv3x3.bias.size());
    fn(p + "bn1.gamma", blk.bn1.gamma.data(), blk.bn1.gamma.size());
    fn(p + "bn1.beta", blk.bn1.beta.data(), blk.bn1.beta.size());
    fn(p + "conv1x1.weight", blk.conv1x1.weight.data(), blk.conv1x1.weight.numel());
    fn(p + "conv1x1.bias", blk.conv1x1.bias.data(), blk.conv1x1.bias.size());
    fn(p + "dw3x3.weight", blk.dw3x3.weight.data(), blk.dw3x3.weight.numel());
    fn(p + "dw3x3.bias", blk.dw3x3.bias.data(), blk.dw3x3.bias.size());
    fn(p + "bn2.gamma", blk.bn2.gamma.data(), blk.bn2.gamma.size());
    fn(p + "bn2.beta", blk.bn2.beta.data(), blk.bn2.beta.size());
  }
  fn("head.weight", g.head.weight.data(), g.head.weight.numel());
  fn("head.bias", g.head.bias.data(), g.head.bias.size());
}

}  // namespace qseg

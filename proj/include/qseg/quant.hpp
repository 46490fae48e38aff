#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qseg/errors.hpp"
#include "qseg/model.hpp"
#include "qseg/ops.hpp"
#include "qseg/parallel.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

// ---------------------------------------------------------------------------
// Fixed-point requantization. A real ratio r in (0, 2) is encoded as
// multiplier * 2^(-31-shift) with multiplier in [2^30, 2^31) and shift >= -1
// (shift -1 is the normalized form of ratios in [1, 2), e.g. exactly 1.0).

struct Requant {
  std::int32_t multiplier = 0;
  int shift = 0;

  double real() const { return multiplier * std::ldexp(1.0, -31 - shift); }
};

inline Requant encode_requant(double ratio, const std::string& what) {
  if (!(ratio > 0))
    throw numeric_error("requant ratio must be positive at " + what);
  int e = 0;
  const double f = std::frexp(ratio, &e);  // ratio = f * 2^e, f in [0.5, 1)
  std::int64_t m = std::llround(f * 2147483648.0);
  if (m == (1ll << 31)) {
    m >>= 1;
    ++e;
  }
  const int shift = -e;
  if (shift < -1 || shift > 63)
    throw numeric_error("requant ratio " + std::to_string(ratio) + " out of range at " + what);
  return {static_cast<std::int32_t>(m), shift};
}

// round(acc * multiplier * 2^(-31-shift)), half away from zero, pure integers.
inline std::int64_t requant_round(std::int64_t acc, std::int32_t multiplier, int shift) {
  const int n = 31 + shift;  // >= 30
  const __int128 prod = static_cast<__int128>(acc) * multiplier;
  if (n >= 127) return 0;
  const __int128 half = static_cast<__int128>(1) << (n - 1);
  if (prod >= 0) return static_cast<std::int64_t>((prod + half) >> n);
  return -static_cast<std::int64_t>((-prod + half) >> n);
}

inline std::int8_t requantize(std::int32_t acc, std::int32_t multiplier, int shift,
                              int out_zero) {
  const std::int64_t v = requant_round(acc, multiplier, shift) + out_zero;
  return static_cast<std::int8_t>(std::clamp<std::int64_t>(v, -128, 127));
}

// ---------------------------------------------------------------------------
// Quantized model structures.

struct ActSite {
  std::string name;
  float scale = 0.f;
  int zero_point = 0;  // int8 domain
};

struct QConv {
  Tensor<std::int8_t> weight;        // same layout as the float conv
  std::vector<std::int32_t> bias;    // at scale s_in * s_w[oc]
  std::vector<float> weight_scales;  // per output channel, symmetric
  std::vector<Requant> requant;      // per output channel: s_in*s_w/s_out
  int padding = 0;
  int groups = 1;
  int in_site = 0, out_site = 0;
  bool relu_after = false;  // clamp at the output zero point

  int c_out() const { return weight.n(); }
  int c_in() const { return weight.c() * groups; }
};

struct QAdd {
  int a_site = 0, b_site = 0, out_site = 0;
  Requant a_rescale, b_rescale;  // s_a/s_out and s_b/s_out
};

struct QBlock {
  QConv conv3x3, conv1x1, dw3x3;
  QAdd inner;  // t + u
};

struct QuantizedModel {
  std::vector<LayerSpec> specs;
  std::vector<ActSite> sites;  // indexed by SiteId
  std::array<QBlock, 7> blocks;
  QAdd m_add, skip5, skip6, skip7, res7;
  QConv head;
  int in_channels = 3;
};

// Running min/max per activation site; zero is always inside the range so
// padding and ReLU zeros stay exactly representable.
struct CalibRange {
  double min_seen = 0.0;
  double max_seen = 0.0;
};

// ---------------------------------------------------------------------------
// Batch-norm folding: w' = w * g/sqrt(var+eps) per output channel,
// b' = (b - mean) * g/sqrt(var+eps) + beta. The BN vectors are dropped.

inline ModelGraph<float> fold_batchnorm(const ModelGraph<float>& model) {
  if (model.folded) return model;
  ModelGraph<float> out = model;
  auto fold_into = [](ConvParams<float>& conv, const BatchNormParams<float>& bn) {
    for (int oc = 0; oc < conv.c_out(); ++oc) {
      const double var = bn.running_var[oc];
      if (var <= 0.0)
        throw numeric_error("fold_batchnorm: non-positive running variance at channel " +
                            std::to_string(oc));
      const double factor = bn.gamma[oc] / std::sqrt(var + static_cast<double>(bn.eps));
      for (int ic = 0; ic < conv.weight.c(); ++ic)
        for (int ky = 0; ky < conv.weight.h(); ++ky)
          for (int kx = 0; kx < conv.weight.w(); ++kx)
            conv.weight.at(oc, ic, ky, kx) =
                static_cast<float>(conv.weight.at(oc, ic, ky, kx) * factor);
      conv.bias[oc] = static_cast<float>((conv.bias[oc] - bn.running_mean[oc]) * factor +
                                         bn.beta[oc]);
    }
  };
  for (auto& blk : out.blocks) {
    fold_into(blk.conv3x3, blk.bn1);
    fold_into(blk.dw3x3, blk.bn2);
    blk.bn1 = BatchNormParams<float>{};
    blk.bn2 = BatchNormParams<float>{};
  }
  out.folded = true;
  return out;
}

// Runs the float forward on every image and widens per-site ranges.
inline std::vector<CalibRange> calibrate(const ModelGraph<float>& folded,
                                         const std::vector<Tensor<float>>& images) {
  if (!folded.folded) throw std::invalid_argument("calibrate: fold batch norm first");
  if (images.empty()) throw std::invalid_argument("calibrate: empty sample list");
  std::vector<CalibRange> ranges(kNumSites);
  for (const auto& img : images) {
    forward_float<float>(folded, img, [&](int site, const Tensor<float>& t) {
      auto& r = ranges[site];
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double v = t.data()[i];
        if (v < r.min_seen) r.min_seen = v;
        if (v > r.max_seen) r.max_seen = v;
      }
    });
  }
  return ranges;
}

namespace detail {

inline ActSite make_site(const std::string& name, const CalibRange& r) {
  if (r.max_seen == r.min_seen)
    throw numeric_error("degenerate calibration range at site " + name);
  ActSite s;
  s.name = name;
  s.scale = static_cast<float>((r.max_seen - r.min_seen) / 255.0);
  const long zp = std::lround(-r.min_seen / s.scale) - 128;
  s.zero_point = static_cast<int>(std::clamp<long>(zp, -128, 127));
  return s;
}

inline QConv quantize_conv(const ConvParams<float>& conv, const ActSite& in_site,
                           const ActSite& out_site, int in_idx, int out_idx, bool relu_after,
                           const std::string& name) {
  QConv q;
  q.padding = conv.padding;
  q.groups = conv.groups;
  q.in_site = in_idx;
  q.out_site = out_idx;
  q.relu_after = relu_after;
  q.weight = Tensor<std::int8_t>(conv.weight.n(), conv.weight.c(), conv.weight.h(),
                                 conv.weight.w());
  const std::size_t per_oc = conv.weight.numel() / conv.c_out();
  q.weight_scales.resize(conv.c_out());
  q.requant.resize(conv.c_out());
  q.bias.resize(conv.c_out());
  for (int oc = 0; oc < conv.c_out(); ++oc) {
    const float* w = conv.weight.data() + oc * per_oc;
    double maxabs = 0;
    for (std::size_t i = 0; i < per_oc; ++i) maxabs = std::max(maxabs, std::fabs(double(w[i])));
    const double s_w = maxabs > 0 ? maxabs / 127.0 : 1.0 / 127.0;
    q.weight_scales[oc] = static_cast<float>(s_w);
    std::int8_t* qw = q.weight.data() + oc * per_oc;
    for (std::size_t i = 0; i < per_oc; ++i) {
      const long v = std::lround(w[i] / s_w);
      qw[i] = static_cast<std::int8_t>(std::clamp<long>(v, -127, 127));
    }
    const double bias_scale = static_cast<double>(in_site.scale) * s_w;
    const long long bq = std::llround(conv.bias[oc] / bias_scale);
    if (bq > std::numeric_limits<std::int32_t>::max() ||
        bq < std::numeric_limits<std::int32_t>::min())
      throw numeric_error("quantized bias overflows int32 at " + name);
    q.bias[oc] = static_cast<std::int32_t>(bq);
    q.requant[oc] = encode_requant(bias_scale / out_site.scale, name + " requant");
  }
  return q;
}

inline QAdd make_add(const std::vector<ActSite>& sites, int a, int b, int out,
                     const std::string& name) {
  QAdd add;
  add.a_site = a;
  add.b_site = b;
  add.out_site = out;
  add.a_rescale = encode_requant(double(sites[a].scale) / sites[out].scale, name + ".a");
  add.b_rescale = encode_requant(double(sites[b].scale) / sites[out].scale, name + ".b");
  return add;
}

}  // namespace detail

// Post-training quantization of a folded model: per-channel symmetric int8
// weights (scale max|w|/127), per-tensor asymmetric int8 activations
// (scale (max-min)/255), int32 biases, fixed-point requantization.
inline QuantizedModel quantize_model(const ModelGraph<float>& folded,
                                     const std::vector<CalibRange>& ranges) {
  if (!folded.folded) throw std::invalid_argument("quantize_model: fold batch norm first");
  if (ranges.size() != static_cast<std::size_t>(kNumSites))
    throw std::invalid_argument("quantize_model: wrong calibration range count");
  QuantizedModel q;
  q.specs = folded.specs;
  q.in_channels = folded.in_channels;
  const auto names = site_names();
  q.sites.resize(kNumSites);
  for (int i = 0; i < kNumSites; ++i) q.sites[i] = detail::make_site(names[i], ranges[i]);

  // block input sites follow the dataflow
  const int block_in[7] = {kSiteInput, site_out(0), site_out(1), site_out(2),
                           kSiteD5In,  kSiteD6In,   kSiteD7In};
  for (int b = 0; b < 7; ++b) {
    const std::string bn = "b" + std::to_string(b + 1);
    const auto& blk = folded.blocks[b];
    q.blocks[b].conv3x3 =
        detail::quantize_conv(blk.conv3x3, q.sites[block_in[b]], q.sites[site_t(b)],
                              block_in[b], site_t(b), true, bn + ".conv3x3");
    q.blocks[b].conv1x1 =
        detail::quantize_conv(blk.conv1x1, q.sites[site_t(b)], q.sites[site_pw(b)], site_t(b),
                              site_pw(b), false, bn + ".conv1x1");
    q.blocks[b].dw3x3 =
        detail::quantize_conv(blk.dw3x3, q.sites[site_pw(b)], q.sites[site_u(b)], site_pw(b),
                              site_u(b), true, bn + ".dw3x3");
    q.blocks[b].inner =
        detail::make_add(q.sites, site_t(b), site_u(b), site_out(b), bn + ".inner");
  }
  q.m_add = detail::make_add(q.sites, site_out(3), site_out(2), kSiteM, "m");
  q.skip5 = detail::make_add(q.sites, kSiteM, site_out(2), kSiteD5In, "d5.in");
  q.skip6 = detail::make_add(q.sites, site_out(4), site_out(1), kSiteD6In, "d6.in");
  q.skip7 = detail::make_add(q.sites, site_out(5), site_out(0), kSiteD7In, "d7.in");
  q.res7 = detail::make_add(q.sites, site_out(6), kSiteD7In, kSiteB7Res, "b7.res");
  q.head = detail::quantize_conv(folded.head, q.sites[kSiteB7Res], q.sites[kSiteHeadOut],
                                 kSiteB7Res, kSiteHeadOut, false, "head");
  return q;
}

// ---------------------------------------------------------------------------
// Integer inference.

template <typename T>
Tensor<std::int8_t> quantize_tensor(const Tensor<T>& x, float scale, int zero_point) {
  Tensor<std::int8_t> q(x.n(), x.c(), x.h(), x.w());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const long v = std::lround(static_cast<double>(x.data()[i]) / scale) + zero_point;
    q.data()[i] = static_cast<std::int8_t>(std::clamp<long>(v, -128, 127));
  }
  return q;
}

inline Tensor<float> dequantize_tensor(const Tensor<std::int8_t>& q, float scale,
                                       int zero_point) {
  Tensor<float> x(q.n(), q.c(), q.h(), q.w());
  for (std::size_t i = 0; i < q.numel(); ++i)
    x.data()[i] = scale * (static_cast<int>(q.data()[i]) - zero_point);
  return x;
}

// Execution log for auditing the integer path and checking determinism.
struct QuantTrace {
  struct Op {
    std::string name;
    std::string domain;  // "float" | "int8" | "int32"
  };
  std::vector<Op> ops;
  std::vector<std::pair<std::string, Tensor<std::int8_t>>> tensors;
};

namespace detail {

// int8 x int8 -> int32 convolution with zero-point-corrected inputs, int32
// bias add, per-channel requantization. Accumulates in int64 and refuses to
// wrap silently: an accumulator outside int32 is a hard error.
inline Tensor<std::int8_t> qconv2d(const Tensor<std::int8_t>& x, const QConv& p, int in_zero,
                                   int out_zero, const std::string& name) {
  const int kh = p.weight.h(), kw = p.weight.w(), pad = p.padding;
  const int oh = x.h() + 2 * pad - kh + 1;
  const int ow = x.w() + 2 * pad - kw + 1;
  const int cin_g = p.weight.c();
  const int cout_g = p.c_out() / p.groups;
  if (x.c() != p.c_in()) throw std::invalid_argument("qconv2d: channel mismatch at " + name);
  Tensor<std::int8_t> y(x.n(), p.c_out(), oh, ow);
  const std::int8_t lo = p.relu_after ? static_cast<std::int8_t>(out_zero)
                                      : static_cast<std::int8_t>(-128);
  parallel_for(0, static_cast<std::int64_t>(x.n()) * p.c_out(), [&](std::int64_t job) {
    const int n = static_cast<int>(job / p.c_out());
    const int oc = static_cast<int>(job % p.c_out());
    const int g = oc / cout_g;
    std::vector<std::int64_t> acc(static_cast<std::size_t>(oh) * ow, 0);
    for (int icg = 0; icg < cin_g; ++icg) {
      const std::int8_t* in = x.plane(n, g * cin_g + icg);
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const std::int32_t wv = p.weight.at(oc, icg, ky, kx);
          if (wv == 0) continue;
          for (int y0 = 0; y0 < oh; ++y0) {
            const int iy = y0 - pad + ky;
            if (iy < 0 || iy >= x.h()) continue;
            const int x0 = std::max(0, pad - kx);
            const int x1 = std::min(ow, x.w() + pad - kx);
            std::int64_t* arow = acc.data() + static_cast<std::size_t>(y0) * ow;
            const std::int8_t* irow = in + static_cast<std::size_t>(iy) * x.w() + kx - pad;
            for (int ox = x0; ox < x1; ++ox)
              arow[ox] += static_cast<std::int64_t>(wv) * (static_cast<std::int32_t>(irow[ox]) - in_zero);
          }
        }
      }
    }
    const Requant rq = p.requant[oc];
    const std::int32_t bias = p.bias[oc];
    std::int8_t* out = y.plane(n, oc);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const std::int64_t a = acc[i] + bias;
      if (a > std::numeric_limits<std::int32_t>::max() ||
          a < std::numeric_limits<std::int32_t>::min())
        throw numeric_error("int32 accumulator overflow in " + name);
      const std::int64_t v = requant_round(a, rq.multiplier, rq.shift) + out_zero;
      out[i] = static_cast<std::int8_t>(
          std::clamp<std::int64_t>(v, static_cast<std::int64_t>(lo), 127));
    }
  });
  return y;
}

// Both operands are rescaled to the sum-site scale in a fixed-point form with
// 8 guard bits, added, and rounded once to int8. The single final rounding
// keeps the add's error at half an output step instead of one per operand.
// `key_out`, when requested, receives the pre-rounding guard-bit sums; they
// order consistently with the rounded int8 values (rounding is monotone) and
// let the encoder pools resolve int8 ties the way the float path would.
inline Tensor<std::int8_t> qadd_tensors(const Tensor<std::int8_t>& a, int zp_a,
                                        const Tensor<std::int8_t>& b, int zp_b,
                                        const QAdd& add, int zp_out,
                                        Tensor<std::int32_t>* key_out = nullptr) {
  if (!a.same_shape(b)) throw std::invalid_argument("qadd: shapes differ");
  constexpr int kGuardBits = 8;
  Tensor<std::int8_t> y(a.n(), a.c(), a.h(), a.w());
  if (key_out) *key_out = Tensor<std::int32_t>(a.n(), a.c(), a.h(), a.w());
  parallel_for(0, a.n(), [&](std::int64_t n) {
    const std::size_t plane = static_cast<std::size_t>(a.c()) * a.h() * a.w();
    const std::int8_t* ap = a.data() + n * plane;
    const std::int8_t* bp = b.data() + n * plane;
    std::int8_t* yp = y.data() + n * plane;
    std::int32_t* kp = key_out ? key_out->data() + n * plane : nullptr;
    for (std::size_t i = 0; i < plane; ++i) {
      const std::int64_t va =
          requant_round(static_cast<std::int32_t>(ap[i]) - zp_a, add.a_rescale.multiplier,
                        add.a_rescale.shift - kGuardBits);
      const std::int64_t vb =
          requant_round(static_cast<std::int32_t>(bp[i]) - zp_b, add.b_rescale.multiplier,
                        add.b_rescale.shift - kGuardBits);
      const std::int64_t sum = va + vb;
      if (kp)
        kp[i] = static_cast<std::int32_t>(
            std::clamp<std::int64_t>(sum, std::numeric_limits<std::int32_t>::min(),
                                     std::numeric_limits<std::int32_t>::max()));
      const std::int64_t half = 1ll << (kGuardBits - 1);
      const std::int64_t v =
          (sum >= 0 ? (sum + half) >> kGuardBits : -((-sum + half) >> kGuardBits)) + zp_out;
      yp[i] = static_cast<std::int8_t>(std::clamp<std::int64_t>(v, -128, 127));
    }
  });
  return y;
}

// 2x2 max pool over int8 values where equal int8 candidates are ordered by
// the guard-bit key (then smallest flat index). The key never contradicts the
// int8 ordering, so pooled values are unchanged; only tie routing improves.
inline std::pair<Tensor<std::int8_t>, Tensor<std::int32_t>> maxpool2x2_keyed(
    const Tensor<std::int8_t>& x, const Tensor<std::int32_t>& key) {
  if (!(x.n() == key.n() && x.c() == key.c() && x.h() == key.h() && x.w() == key.w()))
    throw std::invalid_argument("maxpool2x2_keyed: key shape mismatch");
  if (x.h() % 2 != 0 || x.w() % 2 != 0)
    throw std::invalid_argument("maxpool2x2_keyed: spatial dims must be even");
  const int oh = x.h() / 2, ow = x.w() / 2;
  Tensor<std::int8_t> pooled(x.n(), x.c(), oh, ow);
  Tensor<std::int32_t> indices(x.n(), x.c(), oh, ow);
  parallel_for(0, static_cast<std::int64_t>(x.n()) * x.c(), [&](std::int64_t job) {
    const int n = static_cast<int>(job / x.c());
    const int c = static_cast<int>(job % x.c());
    const std::int8_t* in = x.plane(n, c);
    const std::int32_t* kin = key.plane(n, c);
    std::int8_t* pout = pooled.plane(n, c);
    std::int32_t* iout = indices.plane(n, c);
    for (int y0 = 0; y0 < oh; ++y0) {
      for (int x0 = 0; x0 < ow; ++x0) {
        const int base = (2 * y0) * x.w() + 2 * x0;
        const int cand[4] = {base, base + 1, base + x.w(), base + x.w() + 1};
        int best = cand[0];
        for (int k = 1; k < 4; ++k) {
          const int i = cand[k];
          if (in[i] > in[best] || (in[i] == in[best] && kin[i] > kin[best])) best = i;
        }
        pout[y0 * ow + x0] = in[best];
        iout[y0 * ow + x0] = best;
      }
    }
  });
  return {std::move(pooled), std::move(indices)};
}

}  // namespace detail

// Integer forward pass: float arithmetic happens exactly twice, quantizing the
// input and dequantizing the head output; everything between is int8/int32.
inline Tensor<float> forward_quantized(const QuantizedModel& m, const Tensor<float>& x,
                                       QuantTrace* trace = nullptr) {
  if (x.c() != m.in_channels)
    throw std::invalid_argument("forward_quantized: wrong channel count");
  if (x.h() % 8 != 0 || x.w() % 8 != 0)
    throw std::invalid_argument("forward_quantized: dims must be divisible by 8");

  auto log_op = [&](const std::string& name, const char* domain) {
    if (trace) trace->ops.push_back({name, domain});
  };
  auto log_tensor = [&](const std::string& name, const Tensor<std::int8_t>& t) {
    if (trace) trace->tensors.emplace_back(name, t);
  };
  const auto& sites = m.sites;
  auto zp = [&](int site) { return sites[site].zero_point; };

  Tensor<std::int8_t> qx = quantize_tensor(x, sites[kSiteInput].scale, zp(kSiteInput));
  log_op("quantize_input", "float");
  log_tensor("input", qx);

  auto run_block = [&](int b, const Tensor<std::int8_t>& in, int in_site,
                       Tensor<std::int32_t>* key_out = nullptr) {
    const QBlock& blk = m.blocks[b];
    const std::string bn = "b" + std::to_string(b + 1);
    Tensor<std::int8_t> t =
        detail::qconv2d(in, blk.conv3x3, zp(in_site), zp(blk.conv3x3.out_site), bn + ".conv3x3");
    log_op(bn + ".conv3x3+relu", "int8");
    log_tensor(sites[blk.conv3x3.out_site].name, t);
    Tensor<std::int8_t> v =
        detail::qconv2d(t, blk.conv1x1, zp(blk.conv1x1.in_site), zp(blk.conv1x1.out_site),
                        bn + ".conv1x1");
    log_op(bn + ".conv1x1", "int8");
    log_tensor(sites[blk.conv1x1.out_site].name, v);
    Tensor<std::int8_t> u = detail::qconv2d(v, blk.dw3x3, zp(blk.dw3x3.in_site),
                                            zp(blk.dw3x3.out_site), bn + ".dw3x3");
    log_op(bn + ".dw3x3+relu", "int8");
    log_tensor(sites[blk.dw3x3.out_site].name, u);
    Tensor<std::int8_t> out =
        detail::qadd_tensors(t, zp(blk.inner.a_site), u, zp(blk.inner.b_site), blk.inner,
                             zp(blk.inner.out_site), key_out);
    log_op(bn + ".inner_add", "int8");
    log_tensor(sites[blk.inner.out_site].name, out);
    return out;
  };

  Tensor<std::int32_t> k1, k2, k3;
  Tensor<std::int8_t> e1 = run_block(0, qx, kSiteInput, &k1);
  auto [p1, i1] = detail::maxpool2x2_keyed(e1, k1);
  log_op("pool1", "int8");
  Tensor<std::int8_t> e2 = run_block(1, p1, site_out(0), &k2);
  auto [p2, i2] = detail::maxpool2x2_keyed(e2, k2);
  log_op("pool2", "int8");
  Tensor<std::int8_t> e3 = run_block(2, p2, site_out(1), &k3);
  auto [p3, i3] = detail::maxpool2x2_keyed(e3, k3);
  log_op("pool3", "int8");

  Tensor<std::int8_t> b4o = run_block(3, p3, site_out(2));
  Tensor<std::int8_t> mres =
      detail::qadd_tensors(b4o, zp(m.m_add.a_site), p3, zp(m.m_add.b_site), m.m_add,
                           zp(m.m_add.out_site));
  log_op("m_add", "int8");
  log_tensor("m", mres);

  Tensor<std::int8_t> up5 =
      max_unpool2x2(mres, i3, e3.h(), e3.w(), static_cast<std::int8_t>(zp(kSiteM)));
  log_op("unpool3", "int8");
  Tensor<std::int8_t> d5in = detail::qadd_tensors(up5, zp(m.skip5.a_site), e3,
                                                  zp(m.skip5.b_site), m.skip5,
                                                  zp(m.skip5.out_site));
  log_op("skip5_add", "int8");
  log_tensor("d5.in", d5in);
  Tensor<std::int8_t> d5 = run_block(4, d5in, kSiteD5In);

  Tensor<std::int8_t> up6 =
      max_unpool2x2(d5, i2, e2.h(), e2.w(), static_cast<std::int8_t>(zp(site_out(4))));
  log_op("unpool2", "int8");
  Tensor<std::int8_t> d6in = detail::qadd_tensors(up6, zp(m.skip6.a_site), e2,
                                                  zp(m.skip6.b_site), m.skip6,
                                                  zp(m.skip6.out_site));
  log_op("skip6_add", "int8");
  log_tensor("d6.in", d6in);
  Tensor<std::int8_t> d6 = run_block(5, d6in, kSiteD6In);

  Tensor<std::int8_t> up7 =
      max_unpool2x2(d6, i1, e1.h(), e1.w(), static_cast<std::int8_t>(zp(site_out(5))));
  log_op("unpool1", "int8");
  Tensor<std::int8_t> d7in = detail::qadd_tensors(up7, zp(m.skip7.a_site), e1,
                                                  zp(m.skip7.b_site), m.skip7,
                                                  zp(m.skip7.out_site));
  log_op("skip7_add", "int8");
  log_tensor("d7.in", d7in);
  Tensor<std::int8_t> b7o = run_block(6, d7in, kSiteD7In);
  Tensor<std::int8_t> d7 = detail::qadd_tensors(b7o, zp(m.res7.a_site), d7in,
                                                zp(m.res7.b_site), m.res7,
                                                zp(m.res7.out_site));
  log_op("res7_add", "int8");
  log_tensor("b7.res", d7);

  Tensor<std::int8_t> qlogits =
      detail::qconv2d(d7, m.head, zp(kSiteB7Res), zp(kSiteHeadOut), "head");
  log_op("head", "int8");
  log_tensor("head.out", qlogits);

  Tensor<float> logits =
      dequantize_tensor(qlogits, sites[kSiteHeadOut].scale, zp(kSiteHeadOut));
  log_op("dequantize_head", "float");
  return logits;
}

}  // namespace qseg

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qseg/ops.hpp"
#include "qseg/rng.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

enum class LayerLocation { kEncoder, kIntermediate, kDecoder, kHead };
enum class LayerKind { kConvBlockPool, kConvBlock, kUnpoolConvBlock, kConvHead };

struct LayerSpec {
  int index = 0;  // 1-based
  LayerLocation location = LayerLocation::kEncoder;
  LayerKind kind = LayerKind::kConvBlock;
  int c_in = 0;
  int c_out = 0;
};

inline const char* to_string(LayerLocation l) {
  switch (l) {
    case LayerLocation::kEncoder: return "encoder";
    case LayerLocation::kIntermediate: return "intermediate";
    case LayerLocation::kDecoder: return "decoder";
    case LayerLocation::kHead: return "head";
  }
  return "?";
}

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kConvBlockPool: return "convblock_pool";
    case LayerKind::kConvBlock: return "convblock";
    case LayerKind::kUnpoolConvBlock: return "unpool_convblock";
    case LayerKind::kConvHead: return "conv_head";
  }
  return "?";
}

// The 8-layer configuration. Channel widths are parameterized so tests can
// shrink the network; the topology (pools, unpools, skip wiring) is fixed.
inline std::vector<LayerSpec> make_layer_specs(int in_channels = 3,
                                               std::array<int, 3> widths = {16, 32, 64}) {
  const int a = widths[0], b = widths[1], c = widths[2];
  return {
      {1, LayerLocation::kEncoder, LayerKind::kConvBlockPool, in_channels, a},
      {2, LayerLocation::kEncoder, LayerKind::kConvBlockPool, a, b},
      {3, LayerLocation::kEncoder, LayerKind::kConvBlockPool, b, c},
      {4, LayerLocation::kIntermediate, LayerKind::kConvBlock, c, c},
      {5, LayerLocation::kDecoder, LayerKind::kUnpoolConvBlock, c, b},
      {6, LayerLocation::kDecoder, LayerKind::kUnpoolConvBlock, b, a},
      {7, LayerLocation::kDecoder, LayerKind::kUnpoolConvBlock, a, a},
      {8, LayerLocation::kHead, LayerKind::kConvHead, a, 1},
  };
}

inline std::vector<LayerSpec> default_layer_specs() { return make_layer_specs(); }

// Skip wiring makes hard demands on the channel chain; reject anything that
// could not execute before any parameters are allocated.
inline void validate_specs(const std::vector<LayerSpec>& s) {
  auto fail = [](const std::string& why) {
    throw std::invalid_argument("layer specs: " + why);
  };
  if (s.size() != 8) fail("expected 8 layers");
  for (int i = 1; i < 4; ++i)
    if (s[i].c_in != s[i - 1].c_out) fail("encoder chain broken at layer " + std::to_string(i + 1));
  if (s[3].c_in != s[3].c_out) fail("intermediate residual needs c_in == c_out");
  if (s[4].c_in != s[2].c_out) fail("decoder 5 input must match encoder 3 output");
  if (s[4].c_out != s[1].c_out) fail("skip e2: decoder 5 output must match encoder 2 output");
  if (s[5].c_in != s[4].c_out) fail("decoder chain broken at layer 6");
  if (s[5].c_out != s[0].c_out) fail("skip e1: decoder 6 output must match encoder 1 output");
  if (s[6].c_in != s[5].c_out || s[6].c_out != s[6].c_in)
    fail("decoder 7 residual needs c_in == c_out == encoder 1 output");
  if (s[7].c_in != s[6].c_out || s[7].c_out != 1) fail("head must map layer-7 channels to 1");
}

template <typename T>
struct ConvBlockParams {
  ConvParams<T> conv3x3;  // c_in -> c_out, pad 1
  BatchNormParams<T> bn1;
  ConvParams<T> conv1x1;  // c_out -> c_out
  ConvParams<T> dw3x3;    // depthwise, groups == c_out, pad 1
  BatchNormParams<T> bn2;
};

template <typename T>
struct ModelGraph {
  std::vector<LayerSpec> specs;
  std::vector<ConvBlockParams<T>> blocks;  // 7 conv blocks
  ConvParams<T> head;                      // 3x3, pad 1, bias, no activation
  bool folded = false;                     // batch norm absorbed into conv weights
  int in_channels = 3;
  std::uint64_t seed = 0;

  std::size_t parameter_count() const {
    auto conv_count = [](const ConvParams<T>& p) { return p.weight.numel() + p.bias.size(); };
    std::size_t total = 0;
    for (const auto& b : blocks) {
      total += conv_count(b.conv3x3) + conv_count(b.conv1x1) + conv_count(b.dw3x3);
      total += b.bn1.gamma.size() + b.bn1.beta.size();
      total += b.bn2.gamma.size() + b.bn2.beta.size();
    }
    return total + conv_count(head);
  }

  template <typename U>
  ModelGraph<U> cast() const {
    ModelGraph<U> out;
    out.specs = specs;
    out.folded = folded;
    out.in_channels = in_channels;
    out.seed = seed;
    auto conv_cast = [](const ConvParams<T>& p) {
      ConvParams<U> q;
      q.weight = p.weight.template cast<U>();
      q.bias.assign(p.bias.begin(), p.bias.end());
      q.stride = p.stride;
      q.padding = p.padding;
      q.groups = p.groups;
      return q;
    };
    auto bn_cast = [](const BatchNormParams<T>& p) {
      BatchNormParams<U> q;
      q.gamma.assign(p.gamma.begin(), p.gamma.end());
      q.beta.assign(p.beta.begin(), p.beta.end());
      q.running_mean.assign(p.running_mean.begin(), p.running_mean.end());
      q.running_var.assign(p.running_var.begin(), p.running_var.end());
      q.eps = static_cast<U>(p.eps);
      q.momentum = static_cast<U>(p.momentum);
      q.training = p.training;
      return q;
    };
    for (const auto& b : blocks) {
      ConvBlockParams<U> nb;
      nb.conv3x3 = conv_cast(b.conv3x3);
      nb.bn1 = bn_cast(b.bn1);
      nb.conv1x1 = conv_cast(b.conv1x1);
      nb.dw3x3 = conv_cast(b.dw3x3);
      nb.bn2 = bn_cast(b.bn2);
      out.blocks.push_back(std::move(nb));
    }
    out.head = conv_cast(head);
    return out;
  }
};

namespace detail {

template <typename T>
ConvParams<T> init_conv(Rng& rng, int c_out, int c_in, int k, int pad, int groups) {
  ConvParams<T> p;
  p.weight = Tensor<T>(c_out, c_in / groups, k, k);
  p.bias.assign(c_out, T(0));
  p.padding = pad;
  p.groups = groups;
  // fan-in scaled uniform (Kaiming style for ReLU nets)
  const double fan_in = static_cast<double>(c_in / groups) * k * k;
  const double limit = std::sqrt(6.0 / fan_in);
  for (std::size_t i = 0; i < p.weight.numel(); ++i)
    p.weight.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
  return p;
}

template <typename T>
BatchNormParams<T> init_bn(int c) {
  BatchNormParams<T> p;
  p.gamma.assign(c, T(1));
  p.beta.assign(c, T(0));
  p.running_mean.assign(c, T(0));
  p.running_var.assign(c, T(1));
  return p;
}

}  // namespace detail

template <typename T = float>
ModelGraph<T> build_model(std::uint64_t seed, std::vector<LayerSpec> specs = default_layer_specs()) {
  validate_specs(specs);
  ModelGraph<T> m;
  m.specs = std::move(specs);
  m.in_channels = m.specs.front().c_in;
  m.seed = seed;
  Rng rng(splitmix64(seed ^ 0x51a9e46733cbd04bULL));
  for (int i = 0; i < 7; ++i) {
    const auto& s = m.specs[i];
    ConvBlockParams<T> b;
    b.conv3x3 = detail::init_conv<T>(rng, s.c_out, s.c_in, 3, 1, 1);
    b.bn1 = detail::init_bn<T>(s.c_out);
    b.conv1x1 = detail::init_conv<T>(rng, s.c_out, s.c_out, 1, 0, 1);
    b.dw3x3 = detail::init_conv<T>(rng, s.c_out, s.c_out, 3, 1, s.c_out);
    b.bn2 = detail::init_bn<T>(s.c_out);
    m.blocks.push_back(std::move(b));
  }
  m.head = detail::init_conv<T>(rng, 1, m.specs[7].c_in, 3, 1, 1);
  return m;
}

// ---------------------------------------------------------------------------
// Activation sites: every tensor edge of the resolved dataflow, in execution
// order. Calibration observes float values here and quantized inference
// carries one (scale, zero point) per site.

inline constexpr int kNumBlocks = 7;

enum SiteId : int {
  kSiteInput = 0,
  // per-block sites at 1 + 4*block: t (post relu1), pw (1x1 out), u (post relu2), out (t+u)
  kSiteM = 1 + 4 * kNumBlocks,  // block4 outer residual sum
  kSiteD5In,
  kSiteD6In,
  kSiteD7In,
  kSiteB7Res,  // block7 outer residual sum
  kSiteHeadOut,
  kNumSites
};

inline int site_t(int block) { return 1 + 4 * block; }
inline int site_pw(int block) { return 2 + 4 * block; }
inline int site_u(int block) { return 3 + 4 * block; }
inline int site_out(int block) { return 4 + 4 * block; }

inline std::vector<std::string> site_names() {
  std::vector<std::string> names(kNumSites);
  names[kSiteInput] = "input";
  for (int b = 0; b < kNumBlocks; ++b) {
    const std::string p = "b" + std::to_string(b + 1);
    names[site_t(b)] = p + ".t";
    names[site_pw(b)] = p + ".pw";
    names[site_u(b)] = p + ".u";
    names[site_out(b)] = p + ".out";
  }
  names[kSiteM] = "m";
  names[kSiteD5In] = "d5.in";
  names[kSiteD6In] = "d6.in";
  names[kSiteD7In] = "d7.in";
  names[kSiteB7Res] = "b7.res";
  names[kSiteHeadOut] = "head.out";
  return names;
}

template <typename T>
using SiteObserver = std::function<void(int site, const Tensor<T>&)>;

namespace detail {

template <typename T>
Tensor<T> convblock_eval(const ConvBlockParams<T>& blk, bool folded, const Tensor<T>& x,
                         int block_idx, const SiteObserver<T>& observe) {
  Tensor<T> t = conv2d(x, blk.conv3x3);
  if (!folded) t = batchnorm_eval(t, blk.bn1);
  t = relu(t);
  if (observe) observe(site_t(block_idx), t);
  Tensor<T> v = conv2d(t, blk.conv1x1);
  if (observe) observe(site_pw(block_idx), v);
  Tensor<T> u = conv2d(v, blk.dw3x3);
  if (!folded) u = batchnorm_eval(u, blk.bn2);
  u = relu(u);
  if (observe) observe(site_u(block_idx), u);
  Tensor<T> out = add(t, u);
  if (observe) observe(site_out(block_idx), out);
  return out;
}

template <typename T>
void check_forward_input(const ModelGraph<T>& m, const Tensor<T>& x) {
  if (x.c() != m.in_channels)
    throw std::invalid_argument("forward: input has " + std::to_string(x.c()) +
                                " channels, model expects " + std::to_string(m.in_channels));
  if (x.h() % 8 != 0 || x.w() % 8 != 0)
    throw std::invalid_argument("forward: spatial dims must be divisible by 8, got " +
                                x.shape_str());
}

}  // namespace detail

// Float forward pass in eval mode (running batch-norm statistics). Returns
// logits; sigmoid is applied by callers that need probabilities.
template <typename T>
Tensor<T> forward_float(const ModelGraph<T>& m, const Tensor<T>& x,
                        const SiteObserver<T>& observe = {}) {
  detail::check_forward_input(m, x);
  if (observe) observe(kSiteInput, x);

  Tensor<T> e1 = detail::convblock_eval(m.blocks[0], m.folded, x, 0, observe);
  auto [p1, i1] = maxpool2x2(e1);
  Tensor<T> e2 = detail::convblock_eval(m.blocks[1], m.folded, p1, 1, observe);
  auto [p2, i2] = maxpool2x2(e2);
  Tensor<T> e3 = detail::convblock_eval(m.blocks[2], m.folded, p2, 2, observe);
  auto [p3, i3] = maxpool2x2(e3);

  Tensor<T> b4o = detail::convblock_eval(m.blocks[3], m.folded, p3, 3, observe);
  Tensor<T> mres = add(b4o, p3);
  if (observe) observe(kSiteM, mres);

  Tensor<T> d5in = add(max_unpool2x2(mres, i3, e3.h(), e3.w()), e3);
  if (observe) observe(kSiteD5In, d5in);
  Tensor<T> d5 = detail::convblock_eval(m.blocks[4], m.folded, d5in, 4, observe);

  Tensor<T> d6in = add(max_unpool2x2(d5, i2, e2.h(), e2.w()), e2);
  if (observe) observe(kSiteD6In, d6in);
  Tensor<T> d6 = detail::convblock_eval(m.blocks[5], m.folded, d6in, 5, observe);

  Tensor<T> d7in = add(max_unpool2x2(d6, i1, e1.h(), e1.w()), e1);
  if (observe) observe(kSiteD7In, d7in);
  Tensor<T> b7o = detail::convblock_eval(m.blocks[6], m.folded, d7in, 6, observe);
  Tensor<T> d7 = add(b7o, d7in);
  if (observe) observe(kSiteB7Res, d7);

  Tensor<T> logits = conv2d(d7, m.head);
  if (observe) observe(kSiteHeadOut, logits);
  return logits;
}

// Multiply-accumulate count of one forward pass at the given input size.
inline std::uint64_t mac_count(const std::vector<LayerSpec>& specs, int h, int w) {
  validate_specs(specs);
  auto conv_macs = [](std::uint64_t cin_per_group, std::uint64_t cout, std::uint64_t k,
                      std::uint64_t hh, std::uint64_t ww) {
    return k * k * cin_per_group * cout * hh * ww;
  };
  // spatial scale per block: full, /2, /4, /8, /4, /2, full; head at full
  const int div[7] = {1, 2, 4, 8, 4, 2, 1};
  std::uint64_t total = 0;
  for (int b = 0; b < 7; ++b) {
    const std::uint64_t hh = static_cast<std::uint64_t>(h) / div[b];
    const std::uint64_t ww = static_cast<std::uint64_t>(w) / div[b];
    const std::uint64_t cin = specs[b].c_in, cout = specs[b].c_out;
    total += conv_macs(cin, cout, 3, hh, ww);   // 3x3
    total += conv_macs(cout, cout, 1, hh, ww);  // 1x1
    total += conv_macs(1, cout, 3, hh, ww);     // depthwise 3x3
  }
  total += conv_macs(specs[7].c_in, 1, 3, h, w);  // head
  return total;
}

}  // namespace qseg

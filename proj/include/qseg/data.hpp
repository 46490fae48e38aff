#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qseg/image_io.hpp"
#include "qseg/ops.hpp"
#include "qseg/rng.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

// One training/evaluation pair: image in [0,1], strictly binary mask.
struct Sample {
  Tensor<float> image;  // (1, 3, h, w)
  Tensor<float> mask;   // (1, 1, h, w)
  std::string id;

  void validate() const {
    if (image.h() != mask.h() || image.w() != mask.w() || image.c() != 3 || mask.c() != 1)
      throw std::invalid_argument("Sample " + id + ": image/mask shape mismatch");
    for (std::size_t i = 0; i < image.numel(); ++i) {
      const float v = image.data()[i];
      if (!(v >= 0.f && v <= 1.f))
        throw std::invalid_argument("Sample " + id + ": image values outside [0,1]");
    }
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      const float v = mask.data()[i];
      if (v != 0.f && v != 1.f)
        throw std::invalid_argument("Sample " + id + ": mask not binary");
    }
  }
};

struct DatasetIndex {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::string warning;  // nonempty when the directory deviates from 28 pairs
  std::string root;
};

// ---------------------------------------------------------------------------
// Geometry helpers (shared by augmentation and the loaders).

inline void flip_horizontal(Tensor<float>& t) {
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < t.h(); ++y) {
        float* row = t.plane(n, c) + static_cast<std::size_t>(y) * t.w();
        std::reverse(row, row + t.w());
      }
}

inline void flip_vertical(Tensor<float>& t) {
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < t.h() / 2; ++y) {
        float* a = t.plane(n, c) + static_cast<std::size_t>(y) * t.w();
        float* b = t.plane(n, c) + static_cast<std::size_t>(t.h() - 1 - y) * t.w();
        std::swap_ranges(a, a + t.w(), b);
      }
}

// Rotation about the image center by inverse mapping. Bilinear samples clamp
// coordinates (edge replication); nearest rounds then clamps.
inline Tensor<float> rotate(const Tensor<float>& t, double degrees, bool bilinear) {
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (t.h() - 1) / 2.0, cx = (t.w() - 1) / 2.0;
  Tensor<float> out(t.n(), t.c(), t.h(), t.w());
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) {
      const float* in = t.plane(n, c);
      float* op = out.plane(n, c);
      for (int y = 0; y < t.h(); ++y)
        for (int x = 0; x < t.w(); ++x) {
          const double dy = y - cy, dx = x - cx;
          const double sy = cy + (sn * dx + cs * dy);
          const double sx = cx + (cs * dx - sn * dy);
          float v;
          if (bilinear) {
            const double fy = std::clamp(sy, 0.0, static_cast<double>(t.h() - 1));
            const double fx = std::clamp(sx, 0.0, static_cast<double>(t.w() - 1));
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, t.h() - 1), x1 = std::min(x0 + 1, t.w() - 1);
            const double ay = fy - y0, ax = fx - x0;
            const double top = in[y0 * t.w() + x0] * (1 - ax) + in[y0 * t.w() + x1] * ax;
            const double bot = in[y1 * t.w() + x0] * (1 - ax) + in[y1 * t.w() + x1] * ax;
            v = static_cast<float>(top * (1 - ay) + bot * ay);
          } else {
            const int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, t.h() - 1);
            const int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, t.w() - 1);
            v = in[iy * t.w() + ix];
          }
          op[y * t.w() + x] = v;
        }
    }
  return out;
}

inline Tensor<float> resize_bilinear(const Tensor<float>& t, int oh, int ow) {
  Tensor<float> out(t.n(), t.c(), oh, ow);
  const double sy = static_cast<double>(t.h()) / oh;
  const double sx = static_cast<double>(t.w()) / ow;
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) {
      const float* in = t.plane(n, c);
      float* op = out.plane(n, c);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(t.h() - 1));
          const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(t.w() - 1));
          const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
          const int y1 = std::min(y0 + 1, t.h() - 1), x1 = std::min(x0 + 1, t.w() - 1);
          const double ay = fy - y0, ax = fx - x0;
          const double top = in[y0 * t.w() + x0] * (1 - ax) + in[y0 * t.w() + x1] * ax;
          const double bot = in[y1 * t.w() + x0] * (1 - ax) + in[y1 * t.w() + x1] * ax;
          op[y * ow + x] = static_cast<float>(top * (1 - ay) + bot * ay);
        }
    }
  return out;
}

inline Tensor<float> resize_nearest(const Tensor<float>& t, int oh, int ow) {
  Tensor<float> out(t.n(), t.c(), oh, ow);
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const int iy = std::min(static_cast<int>((y + 0.5) * t.h() / oh), t.h() - 1);
          const int ix = std::min(static_cast<int>((x + 0.5) * t.w() / ow), t.w() - 1);
          out.at(n, c, y, x) = t.at(n, c, iy, ix);
        }
  return out;
}

inline void binarize_mask(Tensor<float>& m, float threshold = 0.5f) {
  for (std::size_t i = 0; i < m.numel(); ++i)
    m.data()[i] = m.data()[i] >= threshold ? 1.f : 0.f;
}

// ---------------------------------------------------------------------------
// Augmentation: brightness jitter (image only), random flips, small rotation;
// geometric draws are applied identically to image and mask.

struct AugmentConfig {
  double brightness = 0.2;  // multiplicative jitter in [1-b, 1+b]
  double flip_prob = 0.5;
  double max_rotation_deg = 1.0;
};

inline Sample augment(const Sample& s, Rng& rng, const AugmentConfig& cfg = {}) {
  Sample out = s;
  // all four draws happen unconditionally so the stream stays aligned
  const double factor = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  const bool hflip = rng.bernoulli(cfg.flip_prob);
  const bool vflip = rng.bernoulli(cfg.flip_prob);
  const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);

  for (std::size_t i = 0; i < out.image.numel(); ++i)
    out.image.data()[i] =
        std::clamp(static_cast<float>(factor * out.image.data()[i]), 0.f, 1.f);
  if (hflip) {
    flip_horizontal(out.image);
    flip_horizontal(out.mask);
  }
  if (vflip) {
    flip_vertical(out.image);
    flip_vertical(out.mask);
  }
  if (angle != 0.0) {
    out.image = rotate(out.image, angle, /*bilinear=*/true);
    out.mask = rotate(out.mask, angle, /*bilinear=*/false);
    binarize_mask(out.mask);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic vessel generator: branching dark strokes on a smooth bright
// background. Deterministic per (seed, index); foreground fraction lands in
// [2%, 30%] by construction.

namespace detail {

// Stamps a disc and returns how many pixels flipped to foreground.
inline int stamp_disc(Tensor<float>& mask, double cy, double cx, double radius) {
  int added = 0;
  const int r = static_cast<int>(std::ceil(radius));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const int y = static_cast<int>(std::lround(cy)) + dy;
      const int x = static_cast<int>(std::lround(cx)) + dx;
      if (y < 0 || y >= mask.h() || x < 0 || x >= mask.w()) continue;
      if (dy * dy + dx * dx > radius * radius) continue;
      float& px = mask.at(0, 0, y, x);
      if (px == 0.f) {
        px = 1.f;
        ++added;
      }
    }
  return added;
}

inline void draw_stroke(Tensor<float>& mask, Rng& rng, int width, int depth, int& fg_count,
                        int fg_limit, double start_y, double start_x, double heading) {
  const int max_steps = static_cast<int>(1.5 * std::max(mask.h(), mask.w()));
  const double radius = width * 0.5;
  const double curve_bias = rng.uniform(-0.02, 0.02);
  double y = start_y, x = start_x, theta = heading;
  for (int step = 0; step < max_steps; ++step) {
    if (fg_count >= fg_limit) return;
    fg_count += stamp_disc(mask, y, x, radius);
    y += std::sin(theta);
    x += std::cos(theta);
    theta += rng.uniform(-0.22, 0.22) + curve_bias;
    if (y < -2 || y > mask.h() + 1 || x < -2 || x > mask.w() + 1) return;
    if (depth < 2 && width > 1 && rng.bernoulli(0.03)) {
      const double split = theta + (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.4, 0.9);
      draw_stroke(mask, rng, width - 1, depth + 1, fg_count, fg_limit, y, x, split);
    }
  }
}

}  // namespace detail

inline Sample synth_vessel_sample(std::uint64_t seed, int h, int w) {
  if (h % 8 != 0 || w % 8 != 0)
    throw std::invalid_argument("synth_vessels: dims must be divisible by 8");
  Rng rng(seed);
  Sample s;
  s.id = "syn:" + std::to_string(seed);
  s.mask = Tensor<float>(1, 1, h, w);

  const int total = h * w;
  const int target = static_cast<int>(total * rng.uniform(0.05, 0.16));
  const int limit = static_cast<int>(total * 0.27);
  int fg = 0;
  for (int stroke = 0; stroke < 40 && fg < target; ++stroke) {
    // start on a random border, heading inward
    const int side = rng.range_int(0, 3);
    double y, x, heading;
    switch (side) {
      case 0: y = 0; x = rng.uniform(0, w - 1); heading = rng.uniform(0.3, 2.8); break;
      case 1: y = h - 1; x = rng.uniform(0, w - 1); heading = -rng.uniform(0.3, 2.8); break;
      case 2: y = rng.uniform(0, h - 1); x = 0; heading = rng.uniform(-1.2, 1.2); break;
      default: y = rng.uniform(0, h - 1); x = w - 1; heading = 3.1415926 + rng.uniform(-1.2, 1.2); break;
    }
    static const int kWidths[8] = {1, 2, 2, 2, 3, 3, 3, 4};
    const int width = kWidths[rng.below(8)];
    detail::draw_stroke(s.mask, rng, width, 0, fg, limit, y, x, heading);
  }

  // bright low-frequency background, dark correlated vessel color
  const double base = rng.uniform(0.60, 0.85);
  double chan_base[3], chan_vessel[3];
  const double dark = rng.uniform(0.08, 0.30);
  for (int c = 0; c < 3; ++c) {
    chan_base[c] = base * rng.uniform(0.92, 1.0);
    chan_vessel[c] = dark * rng.uniform(0.85, 1.05);
  }
  const double fy1 = rng.uniform(0.5, 2.0), fx1 = rng.uniform(0.5, 2.0);
  const double ph1 = rng.uniform(0, 6.28), amp1 = rng.uniform(0.03, 0.07);
  const double fy2 = rng.uniform(3.0, 9.0), fx2 = rng.uniform(3.0, 9.0);
  const double ph2 = rng.uniform(0, 6.28), amp2 = rng.uniform(0.02, 0.04);

  Tensor<float> soft = avgpool_same(s.mask, 3);
  s.image = Tensor<float>(1, 3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double wave =
          amp1 * std::cos(6.2831853 * (fy1 * y / h + fx1 * x / w) + ph1) +
          amp2 * std::cos(6.2831853 * (fy2 * y / h - fx2 * x / w) + ph2);
      const double m = 0.65 * s.mask.at(0, 0, y, x) + 0.35 * soft.at(0, 0, y, x);
      const double lum = rng.uniform(-0.045, 0.045);  // correlated pixel grain
      for (int c = 0; c < 3; ++c) {
        const double bg = chan_base[c] + wave;
        const double v =
            bg * (1.0 - m) + chan_vessel[c] * m + lum + rng.uniform(-0.015, 0.015);
        s.image.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

inline std::vector<Sample> synth_vessels(std::uint64_t seed, int count, int h, int w) {
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(synth_vessel_sample(splitmix64(seed + 0x9e37ULL * i), h, w));
  return out;
}

// ---------------------------------------------------------------------------
// Conversions and file export.

inline Tensor<float> image_to_tensor(const ImageU8& img) {
  Tensor<float> t(1, 3, img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = img.channels == 1 ? 0 : c;
        t.at(0, c, y, x) = img.at(y, x, src) / 255.f;
      }
  return t;
}

inline Tensor<float> mask_to_tensor(const ImageU8& img) {
  Tensor<float> t(1, 1, img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      // luminance midpoint binarization
      int v = 0;
      for (int c = 0; c < img.channels; ++c) v += img.at(y, x, c);
      t.at(0, 0, y, x) = (v / img.channels) >= 128 ? 1.f : 0.f;
    }
  return t;
}

inline ImageU8 tensor_to_image(const Tensor<float>& t, int n = 0) {
  ImageU8 img;
  img.w = t.w();
  img.h = t.h();
  img.channels = t.c() == 1 ? 1 : 3;
  img.pixels.resize(static_cast<std::size_t>(img.w) * img.h * img.channels);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const float v = std::clamp(t.at(n, c, y, x), 0.f, 1.f);
        img.pixels[(y * static_cast<std::size_t>(img.w) + x) * img.channels + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.f));
      }
  return img;
}

inline void export_sample_png(const Sample& s, const std::string& dir,
                              const std::string& stem) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_png((fs::path(dir) / (stem + "_image.png")).string(), tensor_to_image(s.image));
  write_png((fs::path(dir) / (stem + "_mask.png")).string(), tensor_to_image(s.mask));
}

// ---------------------------------------------------------------------------
// CHASE_DB1 loader.

namespace detail {

// Bottom/right edge-replicate pad to multiples of 8, then center crop when the
// source is at least the target size, else bilinear (image) / nearest (mask).
inline void fit_resolution(Tensor<float>& image, Tensor<float>& mask, int th, int tw) {
  auto pad_to8 = [](const Tensor<float>& t) {
    const int nh = (t.h() + 7) / 8 * 8, nw = (t.w() + 7) / 8 * 8;
    if (nh == t.h() && nw == t.w()) return t;
    Tensor<float> out(t.n(), t.c(), nh, nw);
    for (int n = 0; n < t.n(); ++n)
      for (int c = 0; c < t.c(); ++c)
        for (int y = 0; y < nh; ++y)
          for (int x = 0; x < nw; ++x)
            out.at(n, c, y, x) = t.at(n, c, std::min(y, t.h() - 1), std::min(x, t.w() - 1));
    return out;
  };
  image = pad_to8(image);
  mask = pad_to8(mask);
  if (image.h() >= th && image.w() >= tw) {
    const int oy = (image.h() - th) / 2, ox = (image.w() - tw) / 2;
    auto crop = [&](const Tensor<float>& t) {
      Tensor<float> out(t.n(), t.c(), th, tw);
      for (int n = 0; n < t.n(); ++n)
        for (int c = 0; c < t.c(); ++c)
          for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x) out.at(n, c, y, x) = t.at(n, c, y + oy, x + ox);
      return out;
    };
    image = crop(image);
    mask = crop(mask);
  } else {
    image = resize_bilinear(image, th, tw);
    mask = resize_nearest(mask, th, tw);
  }
  binarize_mask(mask);
}

}  // namespace detail

// Pairs every image with its first-observer annotation, sorts by file stem,
// and splits the first 20 into train and the rest into val (the 20:8 split on
// the full 28-image set). A non-28 directory loads with a warning.
inline DatasetIndex load_chase(const std::string& dir, int target_h, int target_w) {
  namespace fs = std::filesystem;
  if (target_h % 8 != 0 || target_w % 8 != 0)
    throw std::invalid_argument("load_chase: target resolution must be divisible by 8");
  if (!fs::is_directory(dir)) throw io_error("load_chase: not a directory: " + dir);

  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string stem = entry.path().stem().string();
    const std::string ext = entry.path().extension().string();
    if (ext != ".jpg" && ext != ".jpeg" && ext != ".png" && ext != ".JPG") continue;
    if (stem.find("stHO") != std::string::npos || stem.find("ndHO") != std::string::npos)
      continue;  // annotation files
    images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });

  DatasetIndex idx;
  idx.root = dir;
  std::vector<Sample> all;
  for (const auto& img_path : images) {
    fs::path mask_path;
    for (const char* ext : {".png", ".jpg", ".gif", ".tif"}) {
      fs::path p = img_path.parent_path() / (img_path.stem().string() + "_1stHO" + ext);
      if (fs::exists(p)) {
        mask_path = p;
        break;
      }
    }
    if (mask_path.empty())
      throw io_error("load_chase: no first-observer mask for image " + img_path.string());
    Sample s;
    s.id = img_path.stem().string();
    s.image = image_to_tensor(read_image(img_path.string()));
    s.mask = mask_to_tensor(read_image(mask_path.string()));
    if (s.image.h() != s.mask.h() || s.image.w() != s.mask.w())
      throw io_error("load_chase: image/mask size mismatch for " + s.id);
    detail::fit_resolution(s.image, s.mask, target_h, target_w);
    all.push_back(std::move(s));
  }
  if (all.empty()) throw io_error("load_chase: no images found in " + dir);

  std::size_t n_train;
  if (all.size() == 28) {
    n_train = 20;
  } else {
    n_train = all.size() - std::max<std::size_t>(1, (all.size() * 8 + 14) / 28);
    if (n_train == 0) n_train = all.size() > 1 ? all.size() - 1 : 1;
    idx.warning = "expected 28 CHASE pairs, found " + std::to_string(all.size()) +
                  "; split " + std::to_string(n_train) + "/" +
                  std::to_string(all.size() - n_train);
  }
  for (std::size_t i = 0; i < all.size(); ++i)
    (i < n_train ? idx.train : idx.val).push_back(std::move(all[i]));
  return idx;
}

}  // namespace qseg

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "qseg/data.hpp"
#include "qseg/rng.hpp"

namespace fs = std::filesystem;
using qseg::Sample;
using qseg::Tensor;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("qseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// CHASE-like directory with the real naming scheme, tiny images.
void write_fake_chase(const fs::path& dir, int count) {
  qseg::Rng rng(500);
  for (int i = 0; i < count; ++i) {
    const char side = i % 2 == 0 ? 'L' : 'R';
    char stem[32];
    std::snprintf(stem, sizeof(stem), "Image_%02d%c", i / 2 + 1, side);
    qseg::ImageU8 img;
    img.w = 40;
    img.h = 33;  // odd height exercises the pad-to-8 path
    img.channels = 3;
    img.pixels.resize(40 * 33 * 3);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    qseg::write_jpeg((dir / (std::string(stem) + ".jpg")).string(), img);
    qseg::ImageU8 mask;
    mask.w = 40;
    mask.h = 33;
    mask.channels = 1;
    mask.pixels.assign(40 * 33, 0);
    for (int k = 0; k < 200; ++k) mask.pixels[rng.below(40 * 33)] = 255;
    qseg::write_png((dir / (std::string(stem) + "_1stHO.png")).string(), mask);
    // second observer present but must be ignored
    qseg::write_png((dir / (std::string(stem) + "_2ndHO.png")).string(), mask);
  }
}

}  // namespace

TEST(SynthVessels, DeterministicAndValid) {
  auto a = qseg::synth_vessels(42, 3, 64, 64);
  auto b = qseg::synth_vessels(42, 3, 64, 64);
  ASSERT_EQ(a.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_TRUE(a[i].image == b[i].image);
    EXPECT_TRUE(a[i].mask == b[i].mask);
    a[i].validate();
  }
  auto c = qseg::synth_vessels(43, 1, 64, 64);
  EXPECT_FALSE(a[0].image == c[0].image);
}

TEST(SynthVessels, ForegroundFractionInBand) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto s = qseg::synth_vessel_sample(seed, 64, 64);
    double fg = 0;
    for (std::size_t i = 0; i < s.mask.numel(); ++i) fg += s.mask.data()[i];
    const double frac = fg / s.mask.numel();
    ASSERT_GE(frac, 0.02) << "seed " << seed;
    ASSERT_LE(frac, 0.30) << "seed " << seed;
  }
}

TEST(SynthVessels, RejectsBadDims) {
  EXPECT_THROW(qseg::synth_vessel_sample(1, 60, 64), std::invalid_argument);
}

TEST(Augment, DoubleHorizontalFlipIsIdentity) {
  auto s = qseg::synth_vessel_sample(7, 32, 32);
  Sample flipped = s;
  qseg::flip_horizontal(flipped.image);
  qseg::flip_horizontal(flipped.mask);
  qseg::flip_horizontal(flipped.image);
  qseg::flip_horizontal(flipped.mask);
  EXPECT_TRUE(flipped.image == s.image);
  EXPECT_TRUE(flipped.mask == s.mask);
  Sample vflipped = s;
  qseg::flip_vertical(vflipped.mask);
  qseg::flip_vertical(vflipped.mask);
  EXPECT_TRUE(vflipped.mask == s.mask);
}

TEST(Augment, OutputAlwaysValidAndReproducible) {
  auto s = qseg::synth_vessel_sample(11, 32, 32);
  for (int trial = 0; trial < 20; ++trial) {
    qseg::Rng rng(trial);
    auto out = qseg::augment(s, rng);
    out.validate();  // binary mask, [0,1] image
  }
  qseg::Rng r1(5), r2(5);
  auto a = qseg::augment(s, r1);
  auto b = qseg::augment(s, r2);
  EXPECT_TRUE(a.image == b.image);
  EXPECT_TRUE(a.mask == b.mask);
}

TEST(Augment, BrightnessMatchesScalarOracle) {
  auto s = qseg::synth_vessel_sample(13, 32, 32);
  qseg::AugmentConfig cfg;
  cfg.flip_prob = 0.0;
  cfg.max_rotation_deg = 0.0;
  qseg::Rng rng(9);
  qseg::Rng replay(9);
  auto out = qseg::augment(s, rng, cfg);
  const double factor = replay.uniform(0.8, 1.2);
  for (std::size_t i = 0; i < s.image.numel(); ++i) {
    const float want = std::clamp(static_cast<float>(factor * s.image.data()[i]), 0.f, 1.f);
    ASSERT_FLOAT_EQ(out.image.data()[i], want);
    ASSERT_LE(out.image.data()[i], 1.f);
    ASSERT_GE(out.image.data()[i], 0.f);
  }
  EXPECT_TRUE(out.mask == s.mask);
}

TEST(Augment, GeometryPreservesForegroundCount) {
  // flips exactly; rotation <= 1 degree with nearest resampling within 2%
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    auto s = qseg::synth_vessel_sample(seed, 64, 64);
    double before = 0;
    for (std::size_t i = 0; i < s.mask.numel(); ++i) before += s.mask.data()[i];

    Sample f = s;
    qseg::flip_horizontal(f.mask);
    double after_flip = 0;
    for (std::size_t i = 0; i < f.mask.numel(); ++i) after_flip += f.mask.data()[i];
    ASSERT_EQ(before, after_flip);

    qseg::Rng rng(seed * 31 + 7);
    const double angle = rng.uniform(-1.0, 1.0);
    auto rotated = qseg::rotate(s.mask, angle, /*bilinear=*/false);
    qseg::binarize_mask(rotated);
    double after = 0;
    for (std::size_t i = 0; i < rotated.numel(); ++i) after += rotated.data()[i];
    ASSERT_NEAR(after, before, 0.02 * before) << "seed " << seed << " angle " << angle;
  }
}

TEST(ImageIo, PngRoundTripAndJpegDecode) {
  auto dir = temp_dir("imageio");
  qseg::ImageU8 img;
  img.w = 17;
  img.h = 9;
  img.channels = 3;
  img.pixels.resize(17 * 9 * 3);
  qseg::Rng rng(3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  const auto png_path = (dir / "t.png").string();
  qseg::write_png(png_path, img);
  auto back = qseg::read_image(png_path);
  EXPECT_EQ(back.w, 17);
  EXPECT_EQ(back.h, 9);
  EXPECT_EQ(back.pixels, img.pixels);  // PNG is lossless

  const auto jpg_path = (dir / "t.jpg").string();
  qseg::write_jpeg(jpg_path, img, 95);
  auto jback = qseg::read_image(jpg_path);
  EXPECT_EQ(jback.w, 17);
  EXPECT_EQ(jback.h, 9);
  EXPECT_THROW(qseg::read_image((dir / "missing.png").string()), qseg::io_error);
}

TEST(LoadChase, FullDirectorySplitsTwentyEight) {
  auto dir = temp_dir("chase_full");
  write_fake_chase(dir, 28);
  auto idx = qseg::load_chase(dir.string(), 32, 40);
  EXPECT_EQ(idx.train.size(), 20u);
  EXPECT_EQ(idx.val.size(), 8u);
  EXPECT_TRUE(idx.warning.empty());
  for (const auto& s : idx.train) {
    EXPECT_EQ(s.image.h(), 32);
    EXPECT_EQ(s.image.w(), 40);
    s.validate();  // [0,1] image, binary mask
  }
  // deterministic: same directory loads identically
  auto idx2 = qseg::load_chase(dir.string(), 32, 40);
  for (std::size_t i = 0; i < idx.train.size(); ++i) {
    EXPECT_EQ(idx.train[i].id, idx2.train[i].id);
    EXPECT_TRUE(idx.train[i].image == idx2.train[i].image);
  }
  EXPECT_EQ(idx.val[0].id, idx2.val[0].id);
  // split is disjoint and ordered lexicographically
  for (const auto& tr : idx.train)
    for (const auto& va : idx.val) EXPECT_NE(tr.id, va.id);
}

TEST(LoadChase, MissingMaskNamesTheOrphan) {
  auto dir = temp_dir("chase_orphan");
  write_fake_chase(dir, 6);
  fs::remove(dir / "Image_02L_1stHO.png");
  try {
    qseg::load_chase(dir.string(), 32, 40);
    FAIL() << "expected io_error";
  } catch (const qseg::io_error& e) {
    EXPECT_NE(std::string(e.what()).find("Image_02L"), std::string::npos);
  }
}

TEST(LoadChase, NonStandardCountWarnsWithRatioSplit) {
  auto dir = temp_dir("chase_partial");
  write_fake_chase(dir, 14);
  auto idx = qseg::load_chase(dir.string(), 32, 40);
  EXPECT_FALSE(idx.warning.empty());
  EXPECT_EQ(idx.train.size() + idx.val.size(), 14u);
  EXPECT_EQ(idx.val.size(), 4u);  // 14 * 8/28 = 4
}

TEST(ExportSample, WritesPngPair) {
  auto dir = temp_dir("export");
  auto s = qseg::synth_vessel_sample(3, 32, 32);
  qseg::export_sample_png(s, dir.string(), "sample0");
  EXPECT_TRUE(fs::exists(dir / "sample0_image.png"));
  EXPECT_TRUE(fs::exists(dir / "sample0_mask.png"));
  auto mask = qseg::read_image((dir / "sample0_mask.png").string());
  for (auto p : mask.pixels) EXPECT_TRUE(p == 0 || p == 255);
}

// qseg: batch CLI for the Q-Segment engine.
// Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric failure, 5 internal.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qseg/data.hpp"
#include "qseg/metrics.hpp"
#include "qseg/model.hpp"
#include "qseg/parallel.hpp"
#include "qseg/qsm.hpp"
#include "qseg/quant.hpp"
#include "qseg/train.hpp"

namespace fs = std::filesystem;
using qseg::Tensor;

namespace {

struct SizeOpt {
  int h = 64, w = 64;
};

SizeOpt parse_size(const std::string& s) {
  SizeOpt sz;
  const auto x = s.find('x');
  if (x == std::string::npos) throw CLI::ValidationError("--size", "expected HxW, got " + s);
  sz.h = std::stoi(s.substr(0, x));
  sz.w = std::stoi(s.substr(x + 1));
  if (sz.h <= 0 || sz.w <= 0 || sz.h % 8 != 0 || sz.w % 8 != 0)
    throw CLI::ValidationError("--size", "dims must be positive multiples of 8");
  return sz;
}

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void echo_config(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [k, v] : kv) os << "config." << k << " = " << v << "\n";
}

// Loads synthetic or CHASE data; synthetic uses fixed 20 train / 8 val.
qseg::DatasetIndex load_dataset(const std::string& data_dir, bool synthetic,
                                std::uint64_t seed, int h, int w, int synth_train,
                                int synth_val) {
  if (synthetic) {
    qseg::DatasetIndex idx;
    idx.root = "synthetic:" + std::to_string(seed);
    idx.train = qseg::synth_vessels(seed, synth_train, h, w);
    idx.val = qseg::synth_vessels(seed ^ 0x5555u, synth_val, h, w);
    return idx;
  }
  if (data_dir.empty())
    throw CLI::ValidationError("--data", "provide a CHASE directory or pass --synthetic");
  auto idx = qseg::load_chase(data_dir, h, w);
  if (!idx.warning.empty()) std::cerr << "warning: " << idx.warning << "\n";
  return idx;
}

// Pads to multiples of 8 by edge replication, runs the model, crops back.
Tensor<float> infer_probabilities(const qseg::ModelGraph<float>* fm,
                                  const qseg::QuantizedModel* qm, const Tensor<float>& image) {
  const int h = image.h(), w = image.w();
  const int ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  Tensor<float> padded(1, 3, ph, pw);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x)
        padded.at(0, c, y, x) = image.at(0, c, std::min(y, h - 1), std::min(x, w - 1));
  Tensor<float> logits = fm ? qseg::forward_float(*fm, padded)
                            : qseg::forward_quantized(*qm, padded);
  auto probs = qseg::sigmoid(logits);
  Tensor<float> out(1, 1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(0, 0, y, x) = probs.at(0, 0, y, x);
  return out;
}

int run_summary(const std::string& model_path, const SizeOpt& size) {
  std::vector<qseg::LayerSpec> specs = qseg::default_layer_specs();
  std::size_t params = 0;
  if (!model_path.empty() && qseg::qsm_peek_kind(model_path) == qseg::QsmKind::kQuantized) {
    auto qm = qseg::load_quantized_model(model_path);
    specs = qm.specs;
    params = 0;  // quantized files carry folded parameters only
  } else if (!model_path.empty()) {
    auto m = qseg::load_float_model(model_path);
    specs = m.specs;
    params = m.parameter_count();
  } else {
    params = qseg::build_model<float>(0, specs).parameter_count();
  }
  echo_config(std::cout, {{"model", model_path.empty() ? "(default)" : model_path},
                          {"size", std::to_string(size.h) + "x" + std::to_string(size.w)}});

  std::printf("%-5s %-14s %-18s %6s %6s %14s\n", "layer", "location", "kind", "c_in", "c_out",
              "out shape");
  // layer outputs: encoders post-pool, decoders post-unpool+block
  const int div[8] = {2, 4, 8, 8, 4, 2, 1, 1};
  for (int i = 0; i < 8; ++i)
    std::printf("%-5d %-14s %-18s %6d %6d %9dx%d\n", specs[i].index,
                qseg::to_string(specs[i].location), qseg::to_string(specs[i].kind),
                specs[i].c_in, specs[i].c_out, size.h / div[i], size.w / div[i]);
  if (params > 0) std::printf("parameters: %zu\n", params);
  std::printf("mac_count @%dx%d: %llu\n", size.h, size.w,
              static_cast<unsigned long long>(qseg::mac_count(specs, size.h, size.w)));
  std::printf("estimated float file size: %zu bytes\n", qseg::estimate_float_file_size(specs));
  std::printf("estimated int8 file size: %zu bytes\n", qseg::estimate_int8_file_size(specs));
  if (!model_path.empty())
    std::printf("actual file size: %ju bytes\n",
                static_cast<std::uintmax_t>(fs::file_size(model_path)));
  return 0;
}

struct TrainOpts {
  std::string data_dir, out_dir = "qseg_run";
  bool synthetic = false;
  std::string size_str = "64x64";
  qseg::TrainConfig cfg;
  int synth_count = 20;
};

int run_train(const TrainOpts& o) {
  const SizeOpt size = parse_size(o.size_str);
  fs::create_directories(o.out_dir);
  std::ofstream log(fs::path(o.out_dir) / "train_log.txt", std::ios::trunc);
  if (!log) throw qseg::io_error("cannot write training log in " + o.out_dir);

  const std::vector<std::pair<std::string, std::string>> kv = {
      {"augment", o.cfg.augment ? "true" : "false"},
      {"batch_size", std::to_string(o.cfg.batch_size)},
      {"data", o.synthetic ? "synthetic" : o.data_dir},
      {"epochs", std::to_string(o.cfg.epochs)},
      {"lambda", fmt_g(o.cfg.lambda)},
      {"lr0", fmt_g(o.cfg.lr0)},
      {"max_steps", std::to_string(o.cfg.max_steps)},
      {"out", o.out_dir},
      {"restart_period", std::to_string(o.cfg.restart_period)},
      {"seed", std::to_string(o.cfg.seed)},
      {"size", o.size_str},
      {"target_val_dice", fmt_g(o.cfg.target_val_dice)},
      {"threshold", fmt_g(o.cfg.threshold)},
  };
  echo_config(log, kv);
  echo_config(std::cout, kv);

  auto data = load_dataset(o.data_dir, o.synthetic, o.cfg.seed, size.h, size.w, o.synth_count,
                           8);
  auto res = qseg::train(o.cfg, data.train, data.val, &log);
  qseg::save_model(res.best, (fs::path(o.out_dir) / "best.qsm").string());
  qseg::save_model(res.final, (fs::path(o.out_dir) / "final.qsm").string());
  std::printf("steps: %d\nbest val dice: %.6f (epoch %d)\ncheckpoints: %s/best.qsm %s/final.qsm\n",
              res.steps, res.best_val_dice, res.best_epoch, o.out_dir.c_str(),
              o.out_dir.c_str());
  if (!res.logs.empty()) {
    const double first = res.logs.front().mean_loss;
    const double last = res.logs.back().mean_loss;
    std::printf("loss: first %.6f last %.6f drop %.1f%%\n", first, last,
                first > 0 ? 100.0 * (1.0 - last / first) : 0.0);
  }
  return 0;
}

int run_quantize(const std::string& model_path, const std::string& out_path,
                 const std::string& data_dir, bool synthetic, std::uint64_t seed,
                 const std::string& size_str, int calib_count) {
  const SizeOpt size = parse_size(size_str);
  echo_config(std::cout, {{"calib", std::to_string(calib_count)},
                          {"data", synthetic ? "synthetic" : data_dir},
                          {"model", model_path},
                          {"out", out_path},
                          {"seed", std::to_string(seed)},
                          {"size", size_str}});
  auto model = qseg::load_float_model(model_path);
  auto folded = qseg::fold_batchnorm(model);

  auto data = load_dataset(data_dir, synthetic, seed, size.h, size.w, calib_count, 0);
  std::vector<Tensor<float>> calib;
  for (const auto& s : data.train) {
    calib.push_back(s.image);
    if (static_cast<int>(calib.size()) >= calib_count) break;
  }
  if (calib.empty()) throw qseg::io_error("quantize: no calibration images");

  auto qm = qseg::quantize_model(folded, qseg::calibrate(folded, calib));
  qseg::save_model(qm, out_path);

  double mean_abs = 0, worst = 0;
  std::size_t count = 0;
  qseg::ConfusionCounts agree;
  for (const auto& img : calib) {
    auto fl = qseg::forward_float(folded, img);
    auto ql = qseg::forward_quantized(qm, img);
    auto fp = qseg::sigmoid(fl);
    auto qp = qseg::sigmoid(ql);
    Tensor<float> fmask = fp;
    for (std::size_t i = 0; i < fmask.numel(); ++i)
      fmask.data()[i] = fmask.data()[i] >= 0.5f ? 1.f : 0.f;
    agree += qseg::confusion(qp, fmask, 0.5);
    for (std::size_t i = 0; i < fl.numel(); ++i) {
      const double d = std::fabs(double(fl.data()[i]) - ql.data()[i]);
      mean_abs += d;
      worst = std::max(worst, d);
      ++count;
    }
  }
  mean_abs /= count;
  std::printf("file: %s (%ju bytes)\n", out_path.c_str(),
              static_cast<std::uintmax_t>(fs::file_size(out_path)));
  std::printf("calibration agreement: mean|dlogit|=%.6f max|dlogit|=%.6f mask_dice=%.6f\n",
              mean_abs, worst, qseg::dice_from_counts(agree));
  return 0;
}

int run_infer(const std::string& model_path, const std::string& image_path,
              const std::string& out_dir, double threshold, bool force_quantized,
              bool raw_logits) {
  echo_config(std::cout, {{"image", image_path},
                          {"model", model_path},
                          {"out", out_dir},
                          {"quantized", force_quantized ? "true" : "false"},
                          {"threshold", fmt_g(threshold)}});
  const auto kind = qseg::qsm_peek_kind(model_path);
  if (force_quantized && kind != qseg::QsmKind::kQuantized)
    throw qseg::io_error("--quantized requested but " + model_path + " is a float model");

  qseg::ModelGraph<float> fm;
  qseg::QuantizedModel qm;
  if (kind == qseg::QsmKind::kQuantized) qm = qseg::load_quantized_model(model_path);
  else fm = qseg::load_float_model(model_path);

  auto img = qseg::image_to_tensor(qseg::read_image(image_path));
  auto probs = infer_probabilities(kind == qseg::QsmKind::kFloat ? &fm : nullptr,
                                   kind == qseg::QsmKind::kQuantized ? &qm : nullptr, img);

  fs::create_directories(out_dir);
  const std::string stem = fs::path(image_path).stem().string();
  qseg::ImageU8 prob_png;
  prob_png.w = probs.w();
  prob_png.h = probs.h();
  prob_png.channels = 1;
  prob_png.pixels.resize(probs.numel());
  qseg::ImageU8 mask_png = prob_png;
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    prob_png.pixels[i] = static_cast<std::uint8_t>(std::lround(probs.data()[i] * 255.f));
    mask_png.pixels[i] = probs.data()[i] >= threshold ? 255 : 0;
  }
  const auto prob_path = fs::path(out_dir) / (stem + "_prob.png");
  const auto mask_path = fs::path(out_dir) / (stem + "_mask.png");
  qseg::write_png(prob_path.string(), prob_png);
  qseg::write_png(mask_path.string(), mask_png);
  if (raw_logits) {
    std::ofstream raw(fs::path(out_dir) / (stem + "_prob.f32"), std::ios::binary);
    raw.write(reinterpret_cast<const char*>(probs.data()),
              static_cast<std::streamsize>(probs.numel() * sizeof(float)));
  }
  std::printf("wrote %s and %s (%dx%d)\n", prob_path.c_str(), mask_path.c_str(), probs.w(),
              probs.h());
  return 0;
}

int run_eval(const std::string& model_path, const std::string& data_dir, bool synthetic,
             std::uint64_t seed, const std::string& size_str, double threshold,
             const std::string& out_path, bool self_consistency) {
  const SizeOpt size = parse_size(size_str);
  echo_config(std::cout, {{"data", synthetic ? "synthetic" : data_dir},
                          {"model", model_path},
                          {"out", out_path.empty() ? "(stdout)" : out_path},
                          {"seed", std::to_string(seed)},
                          {"self", self_consistency ? "true" : "false"},
                          {"size", size_str},
                          {"threshold", fmt_g(threshold)}});
  const auto kind = qseg::qsm_peek_kind(model_path);
  qseg::ModelGraph<float> fm;
  qseg::QuantizedModel qm;
  if (kind == qseg::QsmKind::kQuantized) qm = qseg::load_quantized_model(model_path);
  else fm = qseg::load_float_model(model_path);

  auto data = load_dataset(data_dir, synthetic, seed, size.h, size.w, 0, 8);
  if (data.val.empty()) throw qseg::io_error("eval: empty validation split");

  std::vector<Tensor<float>> probs, gts;
  for (const auto& s : data.val) {
    auto p = infer_probabilities(kind == qseg::QsmKind::kFloat ? &fm : nullptr,
                                 kind == qseg::QsmKind::kQuantized ? &qm : nullptr, s.image);
    if (self_consistency) {
      Tensor<float> gt = p;
      for (std::size_t i = 0; i < gt.numel(); ++i)
        gt.data()[i] = gt.data()[i] >= threshold ? 1.f : 0.f;
      gts.push_back(std::move(gt));
    } else {
      gts.push_back(s.mask);
    }
    probs.push_back(std::move(p));
  }
  auto report = qseg::evaluate(probs, gts, threshold);
  const std::string doc = report.to_json();
  if (out_path.empty()) {
    std::cout << doc << "\n";
  } else {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw qseg::io_error("cannot write " + out_path);
    f << doc << "\n";
  }
  return 0;
}

int run_bench(const std::string& model_path, const std::string& size_str, int iters,
              const std::string& out_path) {
  const SizeOpt size = parse_size(size_str);
  if (iters < 1) throw CLI::ValidationError("--iters", "must be >= 1");
  echo_config(std::cout, {{"iters", std::to_string(iters)},
                          {"model", model_path.empty() ? "(default)" : model_path},
                          {"size", size_str}});

  qseg::ModelGraph<float> fm;
  qseg::QuantizedModel qm;
  bool quantized = false;
  std::vector<qseg::LayerSpec> specs;
  if (!model_path.empty() && qseg::qsm_peek_kind(model_path) == qseg::QsmKind::kQuantized) {
    qm = qseg::load_quantized_model(model_path);
    specs = qm.specs;
    quantized = true;
  } else if (!model_path.empty()) {
    fm = qseg::load_float_model(model_path);
    specs = fm.specs;
  } else {
    fm = qseg::build_model<float>(0);
    specs = fm.specs;
  }

  Tensor<float> x(1, 3, size.h, size.w);
  qseg::Rng rng(1);
  for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(rng.uniform());

  auto run_once = [&]() {
    if (quantized) qseg::forward_quantized(qm, x);
    else qseg::forward_float(fm, x);
  };
  run_once();  // warmup
  run_once();
  std::vector<double> ms(iters);
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_once();
    ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
  }
  double mean = 0;
  for (double v : ms) mean += v;
  mean /= iters;
  std::sort(ms.begin(), ms.end());
  const double p50 = ms[(iters - 1) / 2];
  const double p95 = ms[static_cast<int>(0.95 * (iters - 1))];

  std::ostringstream csv;
  csv << "mode,h,w,iters,mean_ms,p50_ms,p95_ms,mac_count\n";
  csv << (quantized ? "int8" : "float") << "," << size.h << "," << size.w << "," << iters << ","
      << fmt_g(mean) << "," << fmt_g(p50) << "," << fmt_g(p95) << ","
      << qseg::mac_count(specs, size.h, size.w) << "\n";
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw qseg::io_error("cannot write " + out_path);
    f << csv.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Q-Segment: quantized retinal vessel segmentation engine"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read defaults from a config file (flags override)");
  int threads = 1;
  app.add_option("--threads", threads, "worker threads for tensor kernels");

  // summary
  auto* c_sum = app.add_subcommand("summary", "print the layer table and size estimates");
  std::string sum_model, sum_size = "960x960";
  c_sum->add_option("--model", sum_model, "QSM file (optional)");
  c_sum->add_option("--size", sum_size, "input resolution HxW");

  // train
  auto* c_train = app.add_subcommand("train", "train a model");
  TrainOpts to;
  std::uint64_t train_seed = 0;
  int train_steps = 0;
  bool no_augment = false;
  c_train->add_option("--data", to.data_dir, "CHASE_DB1 directory");
  c_train->add_flag("--synthetic", to.synthetic, "use the synthetic vessel dataset");
  c_train->add_option("--out", to.out_dir, "output directory");
  c_train->add_option("--seed", train_seed, "random seed");
  c_train->add_option("--size", to.size_str, "training resolution HxW");
  c_train->add_option("--steps", train_steps, "stop after N optimization steps");
  c_train->add_option("--epochs", to.cfg.epochs, "epoch count");
  c_train->add_option("--batch", to.cfg.batch_size, "batch size");
  c_train->add_option("--lr", to.cfg.lr0, "initial learning rate");
  c_train->add_option("--restart", to.cfg.restart_period, "warm restart period (epochs)");
  c_train->add_option("--lambda", to.cfg.lambda, "weight-map coefficient");
  c_train->add_option("--target-dice", to.cfg.target_val_dice, "early stop at this val Dice");
  c_train->add_option("--synthetic-count", to.synth_count, "synthetic training samples");
  c_train->add_flag("--no-augment", no_augment, "disable augmentation");

  // quantize
  auto* c_quant = app.add_subcommand("quantize", "post-training int8 quantization");
  std::string q_model, q_out = "model_int8.qsm", q_data, q_size = "64x64";
  std::uint64_t q_seed = 0;
  int q_calib = 8;
  bool q_synth = false;
  c_quant->add_option("--model", q_model, "float QSM file")->required();
  c_quant->add_option("--out", q_out, "output QSM file");
  c_quant->add_option("--data", q_data, "CHASE_DB1 directory for calibration");
  c_quant->add_flag("--synthetic", q_synth, "calibrate on synthetic images");
  c_quant->add_option("--seed", q_seed, "random seed");
  c_quant->add_option("--size", q_size, "calibration resolution HxW");
  c_quant->add_option("--calib", q_calib, "calibration image count");

  // infer
  auto* c_infer = app.add_subcommand("infer", "segment one image");
  std::string i_model, i_image, i_out = ".";
  double i_threshold = 0.5;
  bool i_quant = false, i_raw = false;
  c_infer->add_option("--model", i_model, "QSM file")->required();
  c_infer->add_option("--image", i_image, "input image (PNG or JPEG)")->required();
  c_infer->add_option("--out", i_out, "output directory");
  c_infer->add_option("--threshold", i_threshold, "mask threshold");
  c_infer->add_flag("--quantized", i_quant, "require integer inference");
  c_infer->add_flag("--raw-logits", i_raw, "also dump raw float probabilities");

  // eval
  auto* c_eval = app.add_subcommand("eval", "metrics over the validation split");
  std::string e_model, e_data, e_out, e_size = "64x64";
  std::uint64_t e_seed = 0;
  double e_threshold = 0.5;
  bool e_synth = false, e_self = false;
  c_eval->add_option("--model", e_model, "QSM file")->required();
  c_eval->add_option("--data", e_data, "CHASE_DB1 directory");
  c_eval->add_flag("--synthetic", e_synth, "evaluate on the synthetic val split");
  c_eval->add_option("--out", e_out, "write the JSON report here");
  c_eval->add_option("--seed", e_seed, "random seed");
  c_eval->add_option("--size", e_size, "resolution HxW");
  c_eval->add_option("--threshold", e_threshold, "mask threshold");
  c_eval->add_flag("--self", e_self, "score against the model's own thresholded output");

  // bench
  auto* c_bench = app.add_subcommand("bench", "host-side forward latency (not in-sensor)");
  std::string b_model, b_size = "64x64", b_out;
  int b_iters = 10;
  c_bench->add_option("--model", b_model, "QSM file (default: fresh float model)");
  c_bench->add_option("--size", b_size, "input resolution HxW");
  c_bench->add_option("--iters", b_iters, "timed iterations");
  c_bench->add_option("--out", b_out, "write the CSV here");

  try {
    app.parse(argc, argv);
    qseg::set_num_threads(threads);
    if (*c_sum) return run_summary(sum_model, parse_size(sum_size));
    if (*c_train) {
      to.cfg.seed = train_seed;
      to.cfg.max_steps = train_steps;
      to.cfg.augment = !no_augment;
      return run_train(to);
    }
    if (*c_quant)
      return run_quantize(q_model, q_out, q_data, q_synth, q_seed, q_size, q_calib);
    if (*c_infer) return run_infer(i_model, i_image, i_out, i_threshold, i_quant, i_raw);
    if (*c_eval)
      return run_eval(e_model, e_data, e_synth, e_seed, e_size, e_threshold, e_out, e_self);
    if (*c_bench) return run_bench(b_model, b_size, b_iters, b_out);
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const qseg::io_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const qseg::numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
}

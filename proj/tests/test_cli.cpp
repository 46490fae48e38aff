#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qseg/data.hpp"
#include "qseg/qsm.hpp"
#include "qseg/quant.hpp"

namespace fs = std::filesystem;

namespace {

const char* kCli = QSEG_CLI_PATH;

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  static int counter = 0;
  const fs::path outfile =
      fs::temp_directory_path() / ("qseg_cli_out_" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string(kCli) + " " + args + " > " + outfile.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream f(outfile);
  std::stringstream ss;
  ss << f.rdbuf();
  r.out = ss.str();
  fs::remove(outfile);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  static fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "qseg_cli_work";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

// one trained checkpoint shared by the quantize/infer/eval tests
fs::path trained_dir() {
  static fs::path dir = [] {
    fs::path p = work_dir() / "trained";
    auto r = run("train --synthetic --synthetic-count 1 --steps 200 --seed 7 --lr 0.05 "
                 "--batch 1 --size 32x32 --out " +
                 p.string());
    EXPECT_EQ(r.code, 0) << r.out;
    return p;
  }();
  return dir;
}

}  // namespace

TEST(CliSummary, LayerTableAndParameterCount) {
  auto r = run("summary --size 64x64");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("config.size = 64x64"), std::string::npos);
  EXPECT_NE(r.out.find("parameters: 100673"), std::string::npos);
  // 8 layer rows with the Table-style channel chain
  for (const char* row : {"1 ", "2 ", "3 ", "4 ", "5 ", "6 ", "7 ", "8 "})
    EXPECT_NE(r.out.find(std::string("\n") + row), std::string::npos) << "row " << row;
  EXPECT_NE(r.out.find("convblock_pool"), std::string::npos);
  EXPECT_NE(r.out.find("conv_head"), std::string::npos);
}

TEST(CliTrain, OverfitRunLogsLossDropAndIsByteIdentical) {
  const fs::path d1 = work_dir() / "r1";
  const std::string cmd =
      "train --synthetic --synthetic-count 1 --steps 200 --seed 7 --lr 0.05 --batch 1 "
      "--size 32x32 --out " +
      d1.string();
  auto r1 = run(cmd);
  ASSERT_EQ(r1.code, 0) << r1.out;
  EXPECT_TRUE(fs::exists(d1 / "best.qsm"));
  EXPECT_TRUE(fs::exists(d1 / "final.qsm"));

  // loss drop >= 90% from the run log
  const std::string log = slurp(d1 / "train_log.txt");
  double first = -1, last = -1;
  std::istringstream ls(log);
  std::string line;
  while (std::getline(ls, line)) {
    const auto p = line.find("loss=");
    if (p == std::string::npos) continue;
    const double v = std::stod(line.substr(p + 5));
    if (first < 0) first = v;
    last = v;
  }
  ASSERT_GT(first, 0);
  EXPECT_LE(last, 0.1 * first) << "first " << first << " last " << last;

  // identical flags rerun into the same directory: byte-identical artifacts
  const std::string log1 = log;
  const std::string best1 = slurp(d1 / "best.qsm");
  auto r2 = run(cmd);
  ASSERT_EQ(r2.code, 0);
  EXPECT_EQ(log1, slurp(d1 / "train_log.txt"));
  EXPECT_EQ(best1, slurp(d1 / "best.qsm"));
}

TEST(CliTrain, DefaultsEchoPaperConfiguration) {
  const fs::path d = work_dir() / "defaults";
  auto r = run("train --synthetic --synthetic-count 1 --steps 1 --size 16x16 --out " +
               d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("config.batch_size = 8"), std::string::npos);
  EXPECT_NE(r.out.find("config.lr0 = 0.001"), std::string::npos);
  EXPECT_NE(r.out.find("config.restart_period = 20"), std::string::npos);
  EXPECT_NE(r.out.find("config.epochs = 4000"), std::string::npos);
}

TEST(CliQuantize, DeterministicFileWithinBudgetAndHonestReport) {
  const fs::path model = trained_dir() / "best.qsm";
  const fs::path q1 = work_dir() / "q1.qsm";
  const fs::path q2 = work_dir() / "q2.qsm";
  const std::string flags = " --synthetic --seed 7 --size 32x32 --calib 6 --model " +
                            model.string() + " --out ";
  auto r1 = run("quantize" + flags + q1.string());
  ASSERT_EQ(r1.code, 0) << r1.out;
  auto r2 = run("quantize" + flags + q2.string());
  ASSERT_EQ(r2.code, 0);
  EXPECT_EQ(slurp(q1), slurp(q2));
  EXPECT_LE(fs::file_size(q1), 130000u);

  // the printed mean|dlogit| must match an independent recomputation from the
  // two saved models over the same calibration set
  const auto pos = r1.out.find("mean|dlogit|=");
  ASSERT_NE(pos, std::string::npos) << r1.out;
  const double reported = std::stod(r1.out.substr(pos + 13));

  auto fm = qseg::fold_batchnorm(qseg::load_float_model(model.string()));
  auto qm = qseg::load_quantized_model(q1.string());
  auto calib = qseg::synth_vessels(7, 6, 32, 32);
  double mean = 0;
  std::size_t n = 0;
  for (const auto& s : calib) {
    auto fl = qseg::forward_float(fm, s.image);
    auto ql = qseg::forward_quantized(qm, s.image);
    for (std::size_t i = 0; i < fl.numel(); ++i) {
      mean += std::fabs(double(fl.data()[i]) - ql.data()[i]);
      ++n;
    }
  }
  mean /= n;
  EXPECT_NEAR(reported, mean, 1e-4) << r1.out;
}

TEST(CliInfer, PngOutputsMatchSourceSizeAndBinaryMask) {
  // odd-sized input exercises the pad-to-8 / crop-back path
  auto sample = qseg::synth_vessel_sample(11, 64, 64);
  qseg::Tensor<float> odd(1, 3, 33, 41);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 33; ++y)
      for (int x = 0; x < 41; ++x) odd.at(0, c, y, x) = sample.image.at(0, c, y, x);
  const fs::path img = work_dir() / "odd.png";
  qseg::write_png(img.string(), qseg::tensor_to_image(odd));

  const fs::path out = work_dir() / "infer_out";
  auto r = run("infer --model " + (trained_dir() / "best.qsm").string() + " --image " +
               img.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  auto prob = qseg::read_image((out / "odd_prob.png").string());
  auto mask = qseg::read_image((out / "odd_mask.png").string());
  EXPECT_EQ(prob.w, 41);
  EXPECT_EQ(prob.h, 33);
  EXPECT_EQ(mask.w, 41);
  EXPECT_EQ(mask.h, 33);
  for (auto px : mask.pixels) EXPECT_TRUE(px == 0 || px == 255);
}

TEST(CliInfer, FloatVsQuantizedMasksAgree) {
  const fs::path q = work_dir() / "q1.qsm";  // produced by the quantize test
  if (!fs::exists(q)) GTEST_SKIP() << "quantize test artifact missing";
  auto sample = qseg::synth_vessel_sample(21, 32, 32);
  const fs::path img = work_dir() / "agree.png";
  qseg::write_png(img.string(), qseg::tensor_to_image(sample.image));

  const fs::path fout = work_dir() / "agree_float";
  const fs::path qout = work_dir() / "agree_quant";
  ASSERT_EQ(run("infer --model " + (trained_dir() / "best.qsm").string() + " --image " +
                img.string() + " --out " + fout.string())
                .code,
            0);
  ASSERT_EQ(run("infer --quantized --model " + q.string() + " --image " + img.string() +
                " --out " + qout.string())
                .code,
            0);
  auto fmask = qseg::read_image((fout / "agree_mask.png").string());
  auto qmask = qseg::read_image((qout / "agree_mask.png").string());
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < fmask.pixels.size(); ++i) {
    const bool a = qmask.pixels[i] > 0, b = fmask.pixels[i] > 0;
    if (a && b) ++tp;
    else if (a) ++fp;
    else if (b) ++fn;
  }
  const double dice = tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  EXPECT_GE(dice, 0.98);
}

TEST(CliInfer, ModeMismatchRejected) {
  auto sample = qseg::synth_vessel_sample(3, 32, 32);
  const fs::path img = work_dir() / "mm.png";
  qseg::write_png(img.string(), qseg::tensor_to_image(sample.image));
  auto r = run("infer --quantized --model " + (trained_dir() / "best.qsm").string() +
               " --image " + img.string() + " --out " + (work_dir() / "mm_out").string());
  EXPECT_EQ(r.code, 3);  // i/o class: file kind mismatch
}

TEST(CliEval, ReportSchemaAndSelfConsistency) {
  const fs::path rep = work_dir() / "report.json";
  auto r = run("eval --model " + (trained_dir() / "best.qsm").string() +
               " --synthetic --seed 7 --size 32x32 --out " + rep.string());
  ASSERT_EQ(r.code, 0) << r.out;
  auto j = nlohmann::json::parse(slurp(rep));
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  std::vector<std::string> want = {"accuracy", "auc",       "dice", "fn",      "fp",
                                   "n_images", "threshold", "tn",   "tp"};
  std::sort(want.begin(), want.end());
  EXPECT_EQ(keys, want);
  EXPECT_EQ(j["n_images"], 8);

  auto rs = run("eval --self --model " + (trained_dir() / "best.qsm").string() +
                " --synthetic --seed 7 --size 32x32");
  ASSERT_EQ(rs.code, 0);
  auto js = nlohmann::json::parse(rs.out.substr(rs.out.find('{')));
  EXPECT_DOUBLE_EQ(js["dice"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(js["accuracy"].get<double>(), 1.0);
}

TEST(CliBench, CsvShapeAndMacCount) {
  const fs::path csv = work_dir() / "bench.csv";
  auto r = run("bench --size 32x32 --iters 5 --out " + csv.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string body = slurp(csv);
  EXPECT_NE(body.find("mode,h,w,iters,mean_ms,p50_ms,p95_ms,mac_count"), std::string::npos);
  // mac_count is input-shape-only: recompute analytically
  const auto want = qseg::mac_count(qseg::default_layer_specs(), 32, 32);
  EXPECT_NE(body.find("," + std::to_string(want)), std::string::npos) << body;
  // p50 <= p95 by construction
  std::istringstream ss(body);
  std::string header, row;
  std::getline(ss, header);
  std::getline(ss, row);
  std::vector<std::string> cols;
  std::string c;
  std::istringstream rs(row);
  while (std::getline(rs, c, ',')) cols.push_back(c);
  ASSERT_EQ(cols.size(), 8u);
  EXPECT_LE(std::stod(cols[5]), std::stod(cols[6]));

  auto r2 = run("bench --size 32x32 --iters 3");
  ASSERT_EQ(r2.code, 0);
  EXPECT_NE(r2.out.find("," + std::to_string(want)), std::string::npos);
}

TEST(CliErrors, DistinctExitCodes) {
  EXPECT_EQ(run("nonsense-subcommand").code, 2);
  EXPECT_EQ(run("train --synthetic --size 60x60 --out /tmp/x").code, 2);  // not /8
  EXPECT_EQ(run("eval --model /nonexistent.qsm --synthetic").code, 3);
  EXPECT_EQ(run("--help").code, 0);
}

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "qseg/autograd.hpp"
#include "qseg/loss.hpp"
#include "qseg/model.hpp"
#include "qseg/rng.hpp"

using qseg::Tensor;

namespace {

Tensor<double> random_tensor(qseg::Rng& rng, int n, int c, int h, int w, double lo = -1,
                             double hi = 1) {
  Tensor<double> t(n, c, h, w);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

Tensor<double> random_mask(qseg::Rng& rng, int n, int h, int w) {
  Tensor<double> m(n, 1, h, w);
  for (std::size_t i = 0; i < m.numel(); ++i) m.data()[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
  return m;
}

struct ParamRef {
  std::string name;
  double* ptr;
  double grad;
};

}  // namespace

// One 1x1 conv with one weight and one bias on a 1x1 image: closed-form chain.
// y = w*x + b, L = 0.5*y^2  =>  dL/dw = y*x, dL/db = y.
TEST(Gradients, SingleConvClosedForm) {
  Tensor<double> x(1, 1, 1, 1);
  x.at(0, 0, 0, 0) = 0.7;
  qseg::ConvParams<double> p;
  p.weight = Tensor<double>::full(1, 1, 1, 1, 1.3);
  p.bias = {0.2};
  auto y = qseg::conv2d(x, p);
  Tensor<double> dy(1, 1, 1, 1);
  dy.at(0, 0, 0, 0) = y.at(0, 0, 0, 0);  // dL/dy for L = 0.5*y^2
  Tensor<double> dx, dw;
  std::vector<double> db;
  qseg::conv2d_backward(x, p, dy, &dx, &dw, &db);
  const double yv = 1.3 * 0.7 + 0.2;
  EXPECT_NEAR(dw.at(0, 0, 0, 0), yv * 0.7, 1e-12);
  EXPECT_NEAR(db[0], yv, 1e-12);
  EXPECT_NEAR(dx.at(0, 0, 0, 0), yv * 1.3, 1e-12);
}

TEST(Gradients, ConvBackwardMatchesFiniteDifferences) {
  qseg::Rng rng(3);
  auto x = random_tensor(rng, 2, 3, 6, 6);
  qseg::ConvParams<double> p;
  p.weight = random_tensor(rng, 4, 3, 3, 3);
  p.bias = {0.1, -0.2, 0.3, 0.0};
  p.padding = 1;
  auto dy = random_tensor(rng, 2, 4, 6, 6);
  // L = sum(dy .* conv(x)) so dL/dtheta has dy as upstream gradient
  auto eval = [&]() {
    auto y = qseg::conv2d(x, p);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += dy.data()[i] * y.data()[i];
    return s;
  };
  Tensor<double> dx, dw;
  std::vector<double> db;
  qseg::conv2d_backward(x, p, dy, &dx, &dw, &db);
  qseg::Rng pick(5);
  for (int probe = 0; probe < 30; ++probe) {
    const std::size_t wi = pick.below(static_cast<std::uint32_t>(p.weight.numel()));
    const double fd = oracle::central_diff<double>(eval, p.weight.data()[wi], 1e-6);
    ASSERT_LE(oracle::rel_err(dw.data()[wi], fd), 1e-6);
    const std::size_t xi = pick.below(static_cast<std::uint32_t>(x.numel()));
    const double fdx = oracle::central_diff<double>(eval, x.data()[xi], 1e-6);
    ASSERT_LE(oracle::rel_err(dx.data()[xi], fdx), 1e-6);
  }
  for (int oc = 0; oc < 4; ++oc) {
    const double fd = oracle::central_diff<double>(eval, p.bias[oc], 1e-6);
    ASSERT_LE(oracle::rel_err(db[oc], fd), 1e-6);
  }
}

TEST(Gradients, DepthwiseConvBackwardMatchesFiniteDifferences) {
  qseg::Rng rng(7);
  auto x = random_tensor(rng, 1, 4, 6, 6);
  qseg::ConvParams<double> p;
  p.weight = random_tensor(rng, 4, 1, 3, 3);
  p.bias = {0, 0, 0, 0};
  p.padding = 1;
  p.groups = 4;
  auto dy = random_tensor(rng, 1, 4, 6, 6);
  auto eval = [&]() {
    auto y = qseg::conv2d(x, p);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += dy.data()[i] * y.data()[i];
    return s;
  };
  Tensor<double> dx, dw;
  std::vector<double> db;
  qseg::conv2d_backward(x, p, dy, &dx, &dw, &db);
  for (std::size_t wi = 0; wi < p.weight.numel(); ++wi) {
    const double fd = oracle::central_diff<double>(eval, p.weight.data()[wi], 1e-6);
    ASSERT_LE(oracle::rel_err(dw.data()[wi], fd), 1e-6);
  }
}

TEST(Gradients, BatchNormTrainBackwardMatchesFiniteDifferences) {
  qseg::Rng rng(11);
  auto x = random_tensor(rng, 2, 3, 4, 4);
  auto dy = random_tensor(rng, 2, 3, 4, 4);
  qseg::BatchNormParams<double> p0;
  p0.gamma = {1.1, 0.9, 1.3};
  p0.beta = {0.1, -0.3, 0.0};
  p0.running_mean.assign(3, 0);
  p0.running_var.assign(3, 1);
  auto eval = [&]() {
    auto p = p0;  // discard running-stat updates
    auto y = qseg::batchnorm_train(x, p);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += dy.data()[i] * y.data()[i];
    return s;
  };
  auto p = p0;
  qseg::BnBatchStats<double> stats;
  Tensor<double> xhat;
  qseg::batchnorm_train(x, p, &stats, &xhat);
  std::vector<double> dgamma, dbeta;
  auto dx = qseg::batchnorm_train_backward(xhat, stats, p0.gamma, p0.eps, dy, &dgamma, &dbeta);
  for (int c = 0; c < 3; ++c) {
    ASSERT_LE(oracle::rel_err(dgamma[c], oracle::central_diff<double>(eval, p0.gamma[c], 1e-6)),
              1e-6);
    ASSERT_LE(oracle::rel_err(dbeta[c], oracle::central_diff<double>(eval, p0.beta[c], 1e-6)),
              1e-6);
  }
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t xi = rng.below(static_cast<std::uint32_t>(x.numel()));
    const double fd = oracle::central_diff<double>(eval, x.data()[xi], 1e-6);
    ASSERT_LE(oracle::rel_err(dx.data()[xi], fd), 1e-5);
  }
}

TEST(Gradients, InnerResidualSplitsGradientAcrossBranches) {
  // With the depthwise path's final BN gamma zeroed, the u branch is dead and
  // the block gradient w.r.t. its input must equal the t-branch gradient alone.
  auto specs = qseg::make_layer_specs(3, {4, 6, 8});
  auto model = qseg::build_model<double>(19, specs);
  qseg::Rng rng(20);
  auto x = random_tensor(rng, 1, 3, 8, 8, 0, 1);

  auto run = [&](bool zero_u_branch) {
    auto m = model;
    if (zero_u_branch)
      for (auto& g : m.blocks[0].bn2.gamma) g = 0.0;
    qseg::BlockTrace<double> tr;
    qseg::detail::convblock_train(m.blocks[0], x, tr);
    auto dout = Tensor<double>::full(1, 4, 8, 8, 1.0);
    qseg::BlockGrads<double> bg;
    return qseg::detail::convblock_backward(m.blocks[0], tr, dout, bg);
  };
  auto with_u = run(false);
  auto without_u = run(true);
  // sanity: they differ when the branch is live
  double diff = 0;
  for (std::size_t i = 0; i < with_u.numel(); ++i)
    diff += std::fabs(with_u.data()[i] - without_u.data()[i]);
  EXPECT_GT(diff, 1e-6);

  // dead branch: gradient equals conv3x3/bn1/relu path backward of dout alone
  auto m2 = model;
  for (auto& g : m2.blocks[0].bn2.gamma) g = 0.0;
  qseg::BlockTrace<double> tr;
  qseg::detail::convblock_train(m2.blocks[0], x, tr);
  auto dout = Tensor<double>::full(1, 4, 8, 8, 1.0);
  // manual t-branch-only backward: dt = dout (+ conv1x1 path which still
  // propagates into t even when bn2.gamma == 0? no: bn2 backward scales by
  // gamma, so nothing flows back through the u branch)
  qseg::BlockGrads<double> bg;
  auto dx_block = qseg::detail::convblock_backward(m2.blocks[0], tr, dout, bg);
  auto dbn1out = qseg::relu_backward(tr.t, dout);
  std::vector<double> dg, db2;
  auto dc3 = qseg::batchnorm_train_backward(tr.xhat1, tr.st1, m2.blocks[0].bn1.gamma,
                                            m2.blocks[0].bn1.eps, dbn1out, &dg, &db2);
  Tensor<double> dx_manual;
  qseg::conv2d_backward<double>(tr.x, m2.blocks[0].conv3x3, dc3, &dx_manual, nullptr, nullptr);
  for (std::size_t i = 0; i < dx_block.numel(); ++i)
    ASSERT_NEAR(dx_block.data()[i], dx_manual.data()[i], 1e-9);
}

// The master gradcheck: full Q-Segment at 16x16 input, loss gradient of every
// parameter group probed against central finite differences.
TEST(Gradients, FullNetworkFiniteDifferenceCheck) {
  auto model = qseg::build_model<double>(123);
  qseg::Rng rng(77);
  auto x = random_tensor(rng, 2, 3, 16, 16, 0, 1);
  auto gt = random_mask(rng, 2, 16, 16);

  qseg::ForwardTrace<double> trace;
  qseg::forward_train(model, x, trace);
  Tensor<double> dlogits;
  qseg::loss(trace.logits, gt, 5.0, &dlogits);
  qseg::ModelGrads<double> grads;
  qseg::backward(model, trace, dlogits, grads);

  // flatten analytic gradients into name-indexed spans
  std::vector<std::pair<std::string, std::vector<double>>> gmap;
  qseg::for_each_grad_span(grads, [&](const std::string& name, double* g, std::size_t cnt) {
    gmap.emplace_back(name, std::vector<double>(g, g + cnt));
  });

  auto eval = [&]() {
    auto m = model;  // copy so BN running-stat updates don't accumulate
    qseg::ForwardTrace<double> tr;
    qseg::forward_train(m, x, tr);
    return qseg::loss(tr.logits, gt, 5.0).total;
  };

  std::vector<ParamRef> probes;
  std::size_t span_idx = 0;
  qseg::Rng pick(99);
  qseg::for_each_param_span(model, [&](const std::string& name, double* p, std::size_t cnt) {
    ASSERT_EQ(name, gmap[span_idx].first);
    // at least 5 coordinates from every parameter group
    for (int k = 0; k < 5; ++k) {
      const std::size_t i = pick.below(static_cast<std::uint32_t>(cnt));
      probes.push_back({name, p + i, gmap[span_idx].second[i]});
    }
    ++span_idx;
  });
  ASSERT_GE(probes.size(), 200u);

  double worst = 0;
  std::string worst_name;
  for (auto& pr : probes) {
    const double fd = oracle::central_diff<double>(eval, *pr.ptr, 1e-6);
    // denominator floor 1e-6: a conv bias feeding a batch norm has exactly
    // zero gradient, and near-zero coordinates must compare absolutely
    const double err = std::fabs(pr.grad - fd) / std::max({std::fabs(pr.grad), std::fabs(fd), 1e-6});
    if (err > worst) {
      worst = err;
      worst_name = pr.name;
    }
  }
  EXPECT_LE(worst, 1e-2) << "worst at " << worst_name;
}

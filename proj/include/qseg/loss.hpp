#pragma once

#include <cmath>
#include <string>

#include "qseg/ops.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

inline constexpr int kWeightMapPoolK = 31;

struct LossOutput {
  double wbce = 0;   // weighted binary cross-entropy, batch mean
  double wiou = 0;   // weighted IoU loss, batch mean
  double total = 0;  // (wbce + wiou) / 2
};

template <typename T>
void check_binary_mask(const Tensor<T>& gt, const std::string& what) {
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const T v = gt.data()[i];
    if (v != T(0) && v != T(1))
      throw std::invalid_argument(what + ": mask must be strictly binary");
  }
}

// Boundary-emphasizing pixel weights: w = 1 + lambda * |avgpool31(gt) - gt|.
// Constant masks give w == 1 everywhere because the average pool divides by
// the in-bounds count.
template <typename T>
Tensor<T> weight_map(const Tensor<T>& gt, double lambda, int k = kWeightMapPoolK) {
  if (lambda < 0) throw std::invalid_argument("weight_map: lambda must be >= 0");
  check_binary_mask(gt, "weight_map");
  Tensor<T> pooled = avgpool_same(gt, k);
  Tensor<T> w(gt.n(), gt.c(), gt.h(), gt.w());
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double d = std::fabs(static_cast<double>(pooled.data()[i]) -
                               static_cast<double>(gt.data()[i]));
    w.data()[i] = static_cast<T>(1.0 + lambda * d);
  }
  return w;
}

namespace detail {

inline double stable_sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// per-pixel cross-entropy on logits: max(z,0) - z*y + log(1 + exp(-|z|))
inline double stable_bce(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
}

}  // namespace detail

// Weighted BCE + weighted IoU on logits. Components are computed per image
// and averaged over the batch; total is the mean of the two components.
// When `dlogits` is non-null it receives d(total)/d(logits).
template <typename T>
LossOutput loss(const Tensor<T>& logits, const Tensor<T>& gt, double lambda,
                Tensor<T>* dlogits = nullptr) {
  if (!logits.same_shape(gt))
    throw std::invalid_argument("loss: logits " + logits.shape_str() + " vs gt " +
                                gt.shape_str());
  check_binary_mask(gt, "loss");
  Tensor<T> w = weight_map(gt, lambda);
  if (dlogits) *dlogits = Tensor<T>(logits.n(), logits.c(), logits.h(), logits.w());

  const int B = logits.n();
  const std::size_t plane = static_cast<std::size_t>(logits.c()) * logits.h() * logits.w();
  LossOutput out;
  for (int n = 0; n < B; ++n) {
    const T* z = logits.data() + n * plane;
    const T* y = gt.data() + n * plane;
    const T* wp = w.data() + n * plane;
    double sum_w = 0, sum_wbce = 0, inter = 0, uni = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double zi = z[i], yi = y[i], wi = wp[i];
      const double p = detail::stable_sigmoid(zi);
      sum_w += wi;
      sum_wbce += wi * detail::stable_bce(zi, yi);
      inter += wi * p * yi;
      uni += wi * (p + yi - p * yi);
    }
    const double wbce_i = sum_wbce / sum_w;
    const double wiou_i = 1.0 - (inter + 1.0) / (uni + 1.0);
    out.wbce += wbce_i / B;
    out.wiou += wiou_i / B;

    if (dlogits) {
      // d(wbce_i)/dz = w*(p - y)/sum_w
      // d(wiou_i)/dp = -(w*y*(U+1) - (I+1)*w*(1-y)) / (U+1)^2,  dp/dz = p(1-p)
      const double inv_u1 = 1.0 / (uni + 1.0);
      const double i1 = inter + 1.0;
      T* dz = dlogits->data() + n * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double zi = z[i], yi = y[i], wi = wp[i];
        const double p = detail::stable_sigmoid(zi);
        const double d_bce = wi * (p - yi) / sum_w;
        const double d_iou_dp =
            -(wi * yi * inv_u1 - i1 * wi * (1.0 - yi) * inv_u1 * inv_u1);
        const double d_iou = d_iou_dp * p * (1.0 - p);
        dz[i] = static_cast<T>(0.5 * (d_bce + d_iou) / B);
      }
    }
  }
  out.total = 0.5 * (out.wbce + out.wiou);
  return out;
}

}  // namespace qseg

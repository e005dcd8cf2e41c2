#pragma once

#include <string>
#include <vector>

#include "ivan/error.hpp"
#include "ivan/tensor.hpp"

namespace ivan {

struct MetricConfig {
  enum class Range { ReferenceMax, Fixed };

  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  bool ssim_global = false;  // one window covering the whole image
  Range range = Range::ReferenceMax;
  double fixed_range = 1.0;
  int entropy_levels = 256;
  double hist_lo = 0.0;  // declared intensity range for histograms
  double hist_hi = 1.0;
  int piella_window = 7;
  int piella_step = 1;

  void validate() const;
};

using Plane = RowMatrix<double>;

/// 20 log10(Max / RMSE); +infinity when the images are identical.
double psnr(const Tensord& y, const Tensord& pred, const MetricConfig& cfg = {});
/// Windowed SSIM averaged over positions, then over planes.
double ssim(const Tensord& y, const Tensord& pred, const MetricConfig& cfg = {});
double nmse(const Tensord& y, const Tensord& pred);

double avg_gradient(const Plane& x);
double spatial_frequency(const Plane& x);
double entropy(const Plane& x, const MetricConfig& cfg = {});
double q_mi(const Plane& x1, const Plane& x2, const Plane& fused, const MetricConfig& cfg = {});
double q_piella(const Plane& x1, const Plane& x2, const Plane& fused, const MetricConfig& cfg = {});

/// Universal quality index of two equally sized windows; a zero denominator
/// factor counts as 1.
double q0(const Plane& a, const Plane& b);

/// Channel mean of a single image (fusion metrics take single planes).
Plane to_plane(const Tensord& x);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
  std::size_t excluded = 0;  // non-finite values skipped
};

/// Mean and population standard deviation of the finite values; throws if
/// none remain.
Aggregate aggregate(const std::vector<double>& values);

/// aggregate() for report columns: a column without finite values summarises
/// to +inf when every value is +inf (identical images) and NaN otherwise.
Aggregate summarize(const std::vector<double>& values);

}  // namespace ivan

#include "ivan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ivan {

void MetricConfig::validate() const {
  if (ssim_window < 3 || ssim_window % 2 == 0) throw ConfigError("ssim_window must be odd and >= 3");
  if (piella_window < 3 || piella_window % 2 == 0) throw ConfigError("piella_window must be odd and >= 3");
  if (piella_step < 1) throw ConfigError("piella_step must be >= 1");
  if (entropy_levels < 2) throw ConfigError("entropy_levels must be >= 2");
  if (!(ssim_sigma > 0.0)) throw ConfigError("ssim_sigma must be positive");
  if (!(hist_hi > hist_lo)) throw ConfigError("histogram range is degenerate");
  if (range == Range::Fixed && !(fixed_range > 0.0)) throw ConfigError("fixed dynamic range must be positive");
}

namespace {

void same_shape(const Tensord& a, const Tensord& b, const char* what) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(what) + ": shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  }
  if (a.size() == 0) throw ShapeError(std::string(what) + ": empty image");
}

void same_shape(const Plane& a, const Plane& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": plane shapes differ");
}

double dynamic_range(const Tensord& y, const MetricConfig& cfg) {
  if (cfg.range == MetricConfig::Range::Fixed) return cfg.fixed_range;
  return y.values().maxCoeff();
}

// Weighted moments with the first sample as shift, so constant windows have
// exactly zero variance and their exact value as mean.
struct Moments {
  double mu_a, mu_b, var_a, var_b, cov;
};

template <typename A, typename B, typename W>
Moments moments(const A& a, const B& b, const W& w) {
  const double a0 = a(0, 0), b0 = b(0, 0);
  double sa = 0, sb = 0;
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      sa += w(i, j) * (a(i, j) - a0);
      sb += w(i, j) * (b(i, j) - b0);
    }
  }
  Moments m{a0 + sa, b0 + sb, 0, 0, 0};
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      const double da = a(i, j) - m.mu_a, db = b(i, j) - m.mu_b;
      m.var_a += w(i, j) * da * da;
      m.var_b += w(i, j) * db * db;
      m.cov += w(i, j) * da * db;
    }
  }
  return m;
}

Plane gaussian_window(int size, double sigma) {
  Plane w(size, size);
  const int r = size / 2;
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) w(i, j) = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2.0 * sigma * sigma));
  }
  return w / w.sum();
}

double ssim_plane(const Eigen::Map<const Plane>& y, const Eigen::Map<const Plane>& p, const Plane& window, double c1,
                  double c2) {
  const Index k = window.rows();
  const Index ny = y.rows() - k + 1, nx = y.cols() - k + 1;
  double total = 0.0;
  for (Index i = 0; i < ny; ++i) {
    for (Index j = 0; j < nx; ++j) {
      const Moments m = moments(y.block(i, j, k, k), p.block(i, j, k, k), window);
      total += ((2.0 * m.mu_a * m.mu_b + c1) * (2.0 * m.cov + c2)) /
               ((m.mu_a * m.mu_a + m.mu_b * m.mu_b + c1) * (m.var_a + m.var_b + c2));
    }
  }
  return total / static_cast<double>(ny * nx);
}

std::vector<int> quantize(const Plane& x, const MetricConfig& cfg) {
  std::vector<int> bins(static_cast<std::size_t>(x.size()));
  const double scale = static_cast<double>(cfg.entropy_levels) / (cfg.hist_hi - cfg.hist_lo);
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    if (!std::isfinite(v)) throw NumericError("histogram: non-finite sample");
    const long b = static_cast<long>(std::floor((v - cfg.hist_lo) * scale));
    bins[static_cast<std::size_t>(i)] = static_cast<int>(std::clamp<long>(b, 0, cfg.entropy_levels - 1));
  }
  return bins;
}

double entropy_of(const std::vector<double>& counts, double total) {
  double h = 0.0;
  for (double c : counts) {
    if (c > 0) {
      const double p = c / total;
      h -= p * std::log2(p);
    }
  }
  return h;
}

double mutual_information(const std::vector<int>& a, const std::vector<int>& b, int levels, double& ha, double& hb) {
  const std::size_t L = static_cast<std::size_t>(levels);
  std::vector<double> joint(L * L, 0.0), pa(L, 0.0), pb(L, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(a[i]) * L + static_cast<std::size_t>(b[i])] += 1.0;
    pa[static_cast<std::size_t>(a[i])] += 1.0;
    pb[static_cast<std::size_t>(b[i])] += 1.0;
  }
  const double n = static_cast<double>(a.size());
  ha = entropy_of(pa, n);
  hb = entropy_of(pb, n);
  double mi = 0.0;
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      const double c = joint[i * L + j];
      if (c > 0) mi += (c / n) * std::log2((c * n) / (pa[i] * pb[j]));
    }
  }
  return mi;
}

void check_plane(const Plane& x, const char* what) {
  if (x.rows() < 2 || x.cols() < 2) throw ShapeError(std::string(what) + ": image must be at least 2x2");
}

}  // namespace

double psnr(const Tensord& y, const Tensord& pred, const MetricConfig& cfg) {
  same_shape(y, pred, "psnr");
  const double mse = (y.values() - pred.values()).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  const double peak = dynamic_range(y, cfg);
  if (!(peak > 0.0)) throw NumericError("psnr: reference maximum must be positive");
  return 20.0 * std::log10(peak / std::sqrt(mse));
}

double ssim(const Tensord& y, const Tensord& pred, const MetricConfig& cfg) {
  cfg.validate();
  same_shape(y, pred, "ssim");
  const double L = dynamic_range(y, cfg);
  const double c1 = (cfg.ssim_k1 * L) * (cfg.ssim_k1 * L), c2 = (cfg.ssim_k2 * L) * (cfg.ssim_k2 * L);
  Plane window;
  if (cfg.ssim_global) {
    window = Plane::Constant(y.height(), y.width(), 1.0 / static_cast<double>(y.height() * y.width()));
  } else {
    if (y.height() < cfg.ssim_window || y.width() < cfg.ssim_window) {
      throw ShapeError("ssim: image " + std::to_string(y.height()) + "x" + std::to_string(y.width()) +
                       " is smaller than the window");
    }
    window = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
  }
  double total = 0.0;
  for (Index n = 0; n < y.batch(); ++n) {
    for (Index c = 0; c < y.channels(); ++c) total += ssim_plane(y.plane(n, c), pred.plane(n, c), window, c1, c2);
  }
  return total / static_cast<double>(y.batch() * y.channels());
}

double nmse(const Tensord& y, const Tensord& pred) {
  same_shape(y, pred, "nmse");
  const double ref = y.values().square().sum();
  if (ref == 0.0) throw NumericError("nmse: reference image is all zero");
  return (y.values() - pred.values()).square().sum() / ref;
}

double avg_gradient(const Plane& x) {
  check_plane(x, "avg_gradient");
  double total = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const double dh = i + 1 < x.rows() ? x(i + 1, j) - x(i, j) : 0.0;
      const double dw = j + 1 < x.cols() ? x(i, j + 1) - x(i, j) : 0.0;
      total += std::sqrt(dh * dh + dw * dw);
    }
  }
  return total / static_cast<double>(x.size());
}

double spatial_frequency(const Plane& x) {
  check_plane(x, "spatial_frequency");
  const double n = static_cast<double>(x.size());
  const double rf2 = (x.rightCols(x.cols() - 1) - x.leftCols(x.cols() - 1)).squaredNorm() / n;
  const double cf2 = (x.bottomRows(x.rows() - 1) - x.topRows(x.rows() - 1)).squaredNorm() / n;
  return std::sqrt(rf2 + cf2);
}

double entropy(const Plane& x, const MetricConfig& cfg) {
  cfg.validate();
  if (x.size() == 0) throw ShapeError("entropy: empty image");
  std::vector<double> counts(static_cast<std::size_t>(cfg.entropy_levels), 0.0);
  for (int b : quantize(x, cfg)) counts[static_cast<std::size_t>(b)] += 1.0;
  return entropy_of(counts, static_cast<double>(x.size()));
}

double q_mi(const Plane& x1, const Plane& x2, const Plane& fused, const MetricConfig& cfg) {
  cfg.validate();
  same_shape(x1, fused, "q_mi");
  same_shape(x2, fused, "q_mi");
  if (fused.size() == 0) throw ShapeError("q_mi: empty image");
  const auto b1 = quantize(x1, cfg), b2 = quantize(x2, cfg), bf = quantize(fused, cfg);
  double h1 = 0, h2 = 0, hf = 0, hf2 = 0;
  const double mi1 = mutual_information(b1, bf, cfg.entropy_levels, h1, hf);
  const double mi2 = mutual_information(b2, bf, cfg.entropy_levels, h2, hf2);
  if (h1 == 0.0 || h2 == 0.0) throw NumericError("q_mi: source image has zero entropy");
  return 2.0 * (mi1 / (h1 + hf) + mi2 / (h2 + hf));
}

double q0(const Plane& a, const Plane& b) {
  same_shape(a, b, "q0");
  const Plane w = Plane::Constant(a.rows(), a.cols(), 1.0 / static_cast<double>(a.size()));
  const Moments m = moments(a, b, w);
  const double vs = m.var_a + m.var_b, ms = m.mu_a * m.mu_a + m.mu_b * m.mu_b;
  const double structure = vs == 0.0 ? 1.0 : 2.0 * m.cov / vs;
  const double luminance = ms == 0.0 ? 1.0 : 2.0 * m.mu_a * m.mu_b / ms;
  return structure * luminance;
}

double q_piella(const Plane& x1, const Plane& x2, const Plane& fused, const MetricConfig& cfg) {
  cfg.validate();
  same_shape(x1, fused, "q_piella");
  same_shape(x2, fused, "q_piella");
  const Index k = cfg.piella_window;
  if (fused.rows() < k || fused.cols() < k) throw ShapeError("q_piella: window larger than image");
  const Plane w = Plane::Constant(k, k, 1.0 / static_cast<double>(k * k));
  double total = 0.0;
  Index windows = 0;
  for (Index i = 0; i + k <= fused.rows(); i += cfg.piella_step) {
    for (Index j = 0; j + k <= fused.cols(); j += cfg.piella_step) {
      const Plane a = x1.block(i, j, k, k), b = x2.block(i, j, k, k), f = fused.block(i, j, k, k);
      const double va = moments(a, a, w).var_a, vb = moments(b, b, w).var_a;
      const double lambda = (va + vb) == 0.0 ? 0.5 : va / (va + vb);
      total += lambda * q0(a, f) + (1.0 - lambda) * q0(b, f);
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

Plane to_plane(const Tensord& x) {
  if (x.batch() != 1) throw ShapeError("to_plane: expected a single image");
  Plane p = Plane::Zero(x.height(), x.width());
  for (Index c = 0; c < x.channels(); ++c) p += x.plane(0, c);
  return x.channels() == 1 ? p : Plane(p / static_cast<double>(x.channels()));
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  double sum = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) {
      sum += v;
      ++a.count;
    } else {
      ++a.excluded;
    }
  }
  if (a.count == 0) throw ShapeError("aggregate: no finite values");
  a.mean = sum / static_cast<double>(a.count);
  double sq = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) sq += (v - a.mean) * (v - a.mean);
  }
  a.std = std::sqrt(sq / static_cast<double>(a.count));
  return a;
}

Aggregate summarize(const std::vector<double>& values) {
  if (values.empty()) throw ShapeError("summarize: no values");
  const bool any_finite = std::any_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  if (any_finite) return aggregate(values);
  Aggregate a;
  a.excluded = values.size();
  const bool all_inf = std::all_of(values.begin(), values.end(), [](double v) { return v == HUGE_VAL; });
  a.mean = all_inf ? HUGE_VAL : std::numeric_limits<double>::quiet_NaN();
  a.std = all_inf ? 0.0 : std::numeric_limits<double>::quiet_NaN();
  return a;
}

}  // namespace ivan

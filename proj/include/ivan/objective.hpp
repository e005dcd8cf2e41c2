#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ivan/error.hpp"
#include "ivan/flow.hpp"
#include "ivan/tensor.hpp"

namespace ivan {

enum class LossNorm { L1, L2 };

std::string loss_norm_name(LossNorm n);
LossNorm parse_loss_norm(const std::string& s);

struct TrainConfig {
  double lambda = 1.0;
  LossNorm loss_norm = LossNorm::L2;
  int epochs = 300;
  double lr0 = 1e-4;
  int halve_every = 50;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
  bool rotate = true;      // random right-angle rotation per record and epoch

  void validate() const;
};

/// Learning rate for a zero-based epoch: lr0 halved every `halve_every` epochs.
double lr_at(int epoch, const TrainConfig& cfg);

struct LossParts {
  double total = 0.0;
  double forward = 0.0;   // ||f(X) - Y||
  double backward = 0.0;  // ||f^-1(Y) - X||
};

/// Per-element normalised residual norm: RMS for L2, mean |.| for L1.
template <typename Derived>
double residual_norm(const Eigen::MatrixBase<Derived>& diff, LossNorm norm) {
  const double count = static_cast<double>(diff.size());
  if (count == 0) return 0.0;
  if (norm == LossNorm::L2) return std::sqrt(diff.template cast<double>().squaredNorm() / count);
  return diff.template cast<double>().cwiseAbs().sum() / count;
}

/// d residual_norm / d diff, scaled by `weight`. Zero residual gives zero.
template <typename Scalar>
RowMatrix<Scalar> residual_norm_grad(const RowMatrix<Scalar>& diff, double value, LossNorm norm, double weight) {
  const double count = static_cast<double>(diff.size());
  if (norm == LossNorm::L2) {
    if (value == 0.0) return RowMatrix<Scalar>::Zero(diff.rows(), diff.cols());
    return diff * static_cast<Scalar>(weight / (count * value));
  }
  return (diff.array().sign() * static_cast<Scalar>(weight / count)).matrix();
}

/// Gradients are stored in a zero-initialised model of identical topology.
template <typename Scalar>
using GradientSet = FlowModel<Scalar>;

namespace detail {
template <typename Scalar>
void check_pair(const Features<Scalar>& x, const Features<Scalar>& y) {
  if (x.values.rows() != y.values.rows() || x.values.cols() != y.values.cols() || !(x.grid == y.grid)) {
    throw ShapeError("loss: X and Y must have identical shapes");
  }
}
}  // namespace detail

template <typename Scalar>
LossParts loss_total(const FlowModel<Scalar>& model, const Features<Scalar>& x, const Features<Scalar>& y,
                     const TrainConfig& cfg, Workspace<Scalar>& ws) {
  detail::check_pair(x, y);
  LossParts parts;
  const Features<Scalar> fx = model_forward(model, x, static_cast<ForwardTape<Scalar>*>(nullptr), ws);
  parts.forward = residual_norm(fx.values - y.values, cfg.loss_norm);
  const Features<Scalar> gy = model_inverse(model, y, static_cast<InverseTape<Scalar>*>(nullptr), ws);
  parts.backward = residual_norm(gy.values - x.values, cfg.loss_norm);
  parts.total = cfg.lambda * parts.forward + parts.backward;
  if (!std::isfinite(parts.total)) throw NumericError("non-finite loss");
  return parts;
}

template <typename Scalar>
LossParts loss_total(const FlowModel<Scalar>& model, const PlaneTensor<Scalar>& x, const PlaneTensor<Scalar>& y,
                     const TrainConfig& cfg) {
  if (!(x.shape() == y.shape())) throw ShapeError("loss: X " + x.shape().str() + " and Y " + y.shape().str() + " differ");
  Workspace<Scalar> ws;
  return loss_total(model, to_features(x), to_features(y), cfg, ws);
}

template <typename Scalar>
struct GradientResult {
  LossParts loss;
  GradientSet<Scalar> grads;
};

namespace detail {
template <typename Scalar>
void check_gradients(const GradientSet<Scalar>& grads) {
  visit_parameters(grads, [](const std::string& name, const auto& p) {
    if (!p.allFinite()) throw NumericError("non-finite gradient in " + name);
  });
}
}  // namespace detail

/// Exact gradient of lambda*||f(X)-Y|| + ||f^-1(Y)-X|| w.r.t. every parameter.
template <typename Scalar>
GradientResult<Scalar> backward(const FlowModel<Scalar>& model, const Features<Scalar>& x, const Features<Scalar>& y,
                                const TrainConfig& cfg, Workspace<Scalar>& ws) {
  detail::check_pair(x, y);
  GradientResult<Scalar> result{{}, zeros_like(model)};
  {
    ForwardTape<Scalar> tape;
    const Features<Scalar> fx = model_forward(model, x, &tape, ws);
    const RowMatrix<Scalar> diff = fx.values - y.values;
    result.loss.forward = residual_norm(diff, cfg.loss_norm);
    if (cfg.lambda != 0.0) {
      model_forward_backward(model, tape, x.grid, residual_norm_grad(diff, result.loss.forward, cfg.loss_norm, cfg.lambda),
                             result.grads, ws);
    }
  }
  {
    InverseTape<Scalar> tape;
    const Features<Scalar> gy = model_inverse(model, y, &tape, ws);
    const RowMatrix<Scalar> diff = gy.values - x.values;
    result.loss.backward = residual_norm(diff, cfg.loss_norm);
    model_inverse_backward(model, tape, y.grid, residual_norm_grad(diff, result.loss.backward, cfg.loss_norm, 1.0),
                           result.grads, ws);
  }
  result.loss.total = cfg.lambda * result.loss.forward + result.loss.backward;
  if (!std::isfinite(result.loss.total)) throw NumericError("non-finite loss");
  detail::check_gradients(result.grads);
  return result;
}

template <typename Scalar>
GradientResult<Scalar> backward(const FlowModel<Scalar>& model, const PlaneTensor<Scalar>& x, const PlaneTensor<Scalar>& y,
                                const TrainConfig& cfg) {
  if (!(x.shape() == y.shape())) throw ShapeError("backward: X and Y shapes differ");
  Workspace<Scalar> ws;
  return backward(model, to_features(x), to_features(y), cfg, ws);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct ParamCheck {
  std::string name;
  Index count = 0;
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  Index kink_crossings = 0;  // elements whose +-h stencil crosses an activation kink
};

struct GradCheckReport {
  std::vector<ParamCheck> arrays;
  double max_rel_error = 0.0;
  std::string worst_array;
  Index kink_crossings = 0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor: |a - n| / max(|a|, |n|, floor). Guards elements whose
  // true gradient is at round-off level.
  double floor = 1e-6;
  // Evaluate the finite differences with Leaky ReLU sign patterns frozen at
  // the unperturbed point. The loss is only piecewise smooth; without this a
  // stencil straddling a kink measures a one-sided slope mix instead of the
  // derivative.
  bool freeze_activations = true;
  // Optional hook applied to the analytic gradients before comparison; used
  // as a negative control.
  std::function<void(GradientSet<double>&)> tamper;
};

/// Relative error between an analytic and a numeric derivative; 0 when both
/// vanish.
inline double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central differences on every parameter
/// element. Never throws on mismatch; reports instead.
GradCheckReport grad_check(const FlowModel<double>& model, const PlaneTensor<double>& x, const PlaneTensor<double>& y,
                           const TrainConfig& cfg, const GradCheckOptions& options = {});

// ---------------------------------------------------------------------------
// Adam.

template <typename Scalar>
struct AdamState {
  GradientSet<Scalar> first;
  GradientSet<Scalar> second;
  long step = 0;
  bool initialized = false;
};

/// One bias-corrected Adam update. State is zero-initialised on first use.
template <typename Scalar>
void adam_step(FlowModel<Scalar>& params, const GradientSet<Scalar>& grads, AdamState<Scalar>& state, double lr,
               const TrainConfig& cfg) {
  if (!state.initialized) {
    state.first = zeros_like(params);
    state.second = zeros_like(params);
    state.step = 0;
    state.initialized = true;
  }
  auto p = parameter_spans(params);
  const auto g = parameter_spans(grads);
  auto m = parameter_spans(state.first);
  auto v = parameter_spans(state.second);
  if (g.size() != p.size() || m.size() != p.size()) throw ShapeError("adam_step: gradient/parameter layout mismatch");
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const Scalar c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(b1, static_cast<double>(state.step))));
  const Scalar c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(b2, static_cast<double>(state.step))));
  const Scalar lr_s = static_cast<Scalar>(lr), eps = static_cast<Scalar>(cfg.adam_eps);
  const Scalar b1s = static_cast<Scalar>(b1), b2s = static_cast<Scalar>(b2);
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (g[a].size() != p[a].size()) throw ShapeError("adam_step: gradient shape mismatch");
    for (std::size_t i = 0; i < p[a].size(); ++i) {
      const Scalar gi = g[a][i];
      m[a][i] = b1s * m[a][i] + (Scalar(1) - b1s) * gi;
      v[a][i] = b2s * v[a][i] + (Scalar(1) - b2s) * gi * gi;
      const Scalar update = lr_s * (m[a][i] * c1) / (std::sqrt(v[a][i] * c2) + eps);
      if (!std::isfinite(update)) throw NumericError("adam_step: non-finite update");
      p[a][i] -= update;
    }
  }
}

/// Scales gradients so their global L2 norm is at most max_norm.
template <typename Scalar>
double clip_gradients(GradientSet<Scalar>& grads, double max_norm) {
  double sq = 0.0;
  for (auto s : parameter_spans(grads))
    for (Scalar v : s) sq += double(v) * double(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const Scalar k = static_cast<Scalar>(max_norm / norm);
    for (auto s : parameter_spans(grads))
      for (Scalar& v : s) v *= k;
  }
  return norm;
}

}  // namespace ivan

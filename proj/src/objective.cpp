#include "ivan/objective.hpp"

#include <algorithm>
#include <utility>

namespace ivan {

std::string loss_norm_name(LossNorm n) { return n == LossNorm::L1 ? "l1" : "l2"; }

LossNorm parse_loss_norm(const std::string& s) {
  if (s == "l1" || s == "L1") return LossNorm::L1;
  if (s == "l2" || s == "L2") return LossNorm::L2;
  throw ConfigError("unknown loss norm '" + s + "' (expected l1|l2)");
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (halve_every < 1) throw ConfigError("halve_every must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be non-negative");
  return std::ldexp(cfg.lr0, -(epoch / cfg.halve_every));
}

GradCheckReport grad_check(const FlowModel<double>& model, const PlaneTensor<double>& x, const PlaneTensor<double>& y,
                           const TrainConfig& cfg, const GradCheckOptions& options) {
  GradCheckReport report;
  if (model.blocks.empty()) return report;
  Workspace<double> ws;
  const Features<double> fx = to_features(x), fy = to_features(y);
  GradientResult<double> analytic = backward(model, fx, fy, cfg, ws);

  ActivationPatterns patterns;
  if (options.freeze_activations) {
    ws.patterns = &patterns;
    patterns.start(ActivationPatterns::Mode::Record);
  }
  const LossParts at = loss_total(model, fx, fy, cfg, ws);
  // A term that is exactly zero sits at the kink of its norm, where the
  // analytic side reports the subgradient 0; leave it out of the differences.
  const double wf = at.forward == 0.0 ? 0.0 : cfg.lambda, wb = at.backward == 0.0 ? 0.0 : 1.0;
  auto eval = [&](const FlowModel<double>& m, bool& crossed) {
    if (options.freeze_activations) patterns.start(ActivationPatterns::Mode::Replay);
    const LossParts parts = loss_total(m, fx, fy, cfg, ws);
    crossed = crossed || patterns.flips > 0;
    return wf * parts.forward + wb * parts.backward;
  };
  if (options.tamper) options.tamper(analytic.grads);

  FlowModel<double> probe = model;
  auto params = parameter_spans(probe);
  const auto grads = parameter_spans(std::as_const(analytic.grads));
  const auto names = parameter_names(probe);
  const double h = options.step;

  for (std::size_t a = 0; a < params.size(); ++a) {
    ParamCheck check;
    check.name = names[a];
    check.count = static_cast<Index>(params[a].size());
    for (std::size_t i = 0; i < params[a].size(); ++i) {
      const double saved = params[a][i];
      bool crossed = false;
      params[a][i] = saved + h;
      const double plus = eval(probe, crossed);
      params[a][i] = saved - h;
      const double minus = eval(probe, crossed);
      params[a][i] = saved;
      if (crossed) ++check.kink_crossings;
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = relative_error(grads[a][i], numeric, options.floor);
      if (err > check.max_rel_error || check.worst_index < 0) {
        check.max_rel_error = err;
        check.worst_index = static_cast<Index>(i);
        check.worst_analytic = grads[a][i];
        check.worst_numeric = numeric;
      }
    }
    report.kink_crossings += check.kink_crossings;
    if (check.max_rel_error > report.max_rel_error || report.worst_array.empty()) {
      report.max_rel_error = check.max_rel_error;
      report.worst_array = check.name;
    }
    report.arrays.push_back(std::move(check));
  }
  return report;
}

}  // namespace ivan

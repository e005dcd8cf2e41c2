#include "ivan/pipeline.hpp"

#include <cmath>

namespace ivan {

Direction parse_direction(const std::string& s) {
  if (s == "forward") return Direction::Forward;
  if (s == "inverse") return Direction::Inverse;
  throw ConfigError("unknown direction '" + s + "' (expected forward|inverse)");
}

std::string direction_name(Direction d) { return d == Direction::Forward ? "forward" : "inverse"; }

ImageSet<float> infer(const FlowModel<float>& model, const AugmentationPlan& plan, const ImageSet<float>& inputs,
                      Direction direction) {
  if (model.channels != plan.channels) throw ShapeError("infer: model and plan channel counts differ");
  const PlaneTensor<float> x = augment(plan, inputs, input_side(direction));
  const PlaneTensor<float> y = direction == Direction::Forward ? model_forward(model, x) : model_inverse(model, x);
  return deaugment(plan, y, output_side(direction));
}

Tensord to_unit_range(const PlaneTensor<float>& x) {
  typename Tensord::Array v = (x.values().cast<double>() + 1.0) * 0.5;
  return Tensord(x.shape(), std::move(v));
}

EvalSummary evaluate_direction(const FlowModel<float>& model, const AugmentationPlan& plan, const Dataset& data,
                               Direction direction, const MetricConfig& cfg) {
  if (data.empty()) throw ShapeError("evaluate: no records");
  EvalSummary out;
  std::vector<double> p, s, n;
  for (const auto& rec : data) {
    const ImageSet<float> pred = infer(model, plan, rec.images, direction);
    for (const auto& m : plan.modalities(output_side(direction))) {
      auto truth = rec.images.find(m.name);
      if (truth == rec.images.end()) throw ShapeError("evaluate: record " + rec.id + " lacks " + m.name);
      const Tensord y = to_unit_range(truth->second), yhat = to_unit_range(pred.at(m.name));
      ImageScore score{rec.id, m.name, psnr(y, yhat, cfg), ssim(y, yhat, cfg), nmse(y, yhat)};
      p.push_back(score.psnr);
      s.push_back(score.ssim);
      n.push_back(score.nmse);
      out.images.push_back(std::move(score));
    }
  }
  out.psnr = summarize(p);
  out.ssim = summarize(s);
  out.nmse = summarize(n);
  return out;
}

namespace {

template <typename Scalar>
double roundtrip_error(const FlowModel<Scalar>& model, const PlaneTensor<Scalar>& x, std::string& where) {
  const PlaneTensor<Scalar> back = model_inverse(model, model_forward(model, x));
  Index worst = 0;
  const double err = static_cast<double>((back.values() - x.values()).abs().maxCoeff(&worst));
  const Index hw = x.height() * x.width();
  where = "element (n=" + std::to_string(worst / (x.channels() * hw)) + ", c=" + std::to_string((worst / hw) % x.channels()) +
          ", y=" + std::to_string((worst % hw) / x.width()) + ", x=" + std::to_string(worst % x.width()) + ")";
  return err;
}

}  // namespace

RoundTripReport roundtrip_check(const FlowModel<float>& model, Index height, Index width, Index batch, std::uint64_t seed) {
  Rng rng(seed);
  Tensord x(batch, model.channels, height, width);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
  RoundTripReport r;
  std::string wf, wd;
  r.max_abs_float = roundtrip_error(model, x.cast<float>(), wf);
  r.max_abs_double = roundtrip_error(model.cast<double>(), x, wd);
  r.worst = r.max_abs_float > 1e-3 ? "float32 " + wf : "float64 " + wd;
  return r;
}

}  // namespace ivan

#pragma once

#include <string>
#include <vector>

#include "ivan/augmentation.hpp"
#include "ivan/flow.hpp"
#include "ivan/metrics.hpp"
#include "ivan/trainer.hpp"

namespace ivan {

enum class Direction { Forward, Inverse };

Direction parse_direction(const std::string& s);
std::string direction_name(Direction d);

/// Side consumed by a direction (sources for forward, targets for inverse).
inline Side input_side(Direction d) { return d == Direction::Forward ? Side::Source : Side::Target; }
inline Side output_side(Direction d) { return d == Direction::Forward ? Side::Target : Side::Source; }

/// augment -> forward or inverse -> deaugment, on normalized images.
ImageSet<float> infer(const FlowModel<float>& model, const AugmentationPlan& plan, const ImageSet<float>& inputs,
                      Direction direction);

/// Maps [-1, 1] onto [0, 1] in double precision for scoring.
Tensord to_unit_range(const PlaneTensor<float>& x);

struct ImageScore {
  std::string record;
  std::string modality;
  double psnr = 0.0;
  double ssim = 0.0;
  double nmse = 0.0;
};

struct EvalSummary {
  std::vector<ImageScore> images;
  Aggregate psnr, ssim, nmse;
};

/// Runs every record through the model in one direction and scores each
/// produced modality against the record's ground truth, on [0, 1] images.
EvalSummary evaluate_direction(const FlowModel<float>& model, const AugmentationPlan& plan, const Dataset& data,
                               Direction direction, const MetricConfig& cfg = {});

struct RoundTripReport {
  double max_abs_float = 0.0;
  double max_abs_double = 0.0;
  std::string worst;  // description of the worst location
  bool passed(double tol_float = 1e-3, double tol_double = 1e-8) const {
    return max_abs_float <= tol_float && max_abs_double <= tol_double;
  }
};

/// Random inputs in [-1, 1] through inverse(forward(.)) at both precisions.
RoundTripReport roundtrip_check(const FlowModel<float>& model, Index height, Index width, Index batch, std::uint64_t seed);

}  // namespace ivan

#pragma once

#include <map>
#include <string>
#include <vector>

#include "ivan/error.hpp"
#include "ivan/tensor.hpp"

namespace ivan {

struct Modality {
  std::string name;
  int channels = 1;  // 1 (grayscale) or 3 (colour)

  bool operator==(const Modality&) const = default;
};

enum class Side { Source, Target };
enum class DedupRule { Mean, First };

/// One channel slot of the augmented stack: which modality (index into the
/// side's modality list) and which native channel of it.
struct Slot {
  std::size_t modality = 0;
  int channel = 0;

  bool operator==(const Slot&) const = default;
};

/// Maps source and target modalities onto one common, even channel count by
/// replicating whole modalities round-robin.
struct AugmentationPlan {
  std::vector<Modality> sources;
  std::vector<Modality> targets;
  Index channels = 0;
  std::vector<Slot> source_layout;
  std::vector<Slot> target_layout;
  DedupRule dedup = DedupRule::Mean;

  const std::vector<Modality>& modalities(Side side) const { return side == Side::Source ? sources : targets; }
  const std::vector<Slot>& layout(Side side) const { return side == Side::Source ? source_layout : target_layout; }

  /// Number of slots holding copies of (modality, channel) on a side.
  int replication(Side side, std::size_t modality, int channel) const;

  bool operator==(const AugmentationPlan&) const = default;
};

/// Named single-record images; each tensor is N x native_channels x H x W.
template <typename Scalar>
using ImageSet = std::map<std::string, PlaneTensor<Scalar>>;

/// Smallest even C >= min_channels at which both sides replicate by whole
/// modalities; falls back to padding with the last modality's channels.
AugmentationPlan plan_for(const std::vector<Modality>& sources, const std::vector<Modality>& targets,
                          Index min_channels = 0, DedupRule dedup = DedupRule::Mean);

/// Validates totality and replication invariants; throws ShapeError.
void validate_plan(const AugmentationPlan& plan);

std::string plan_to_text(const AugmentationPlan& plan);
AugmentationPlan plan_from_text(const std::string& text);

std::string side_name(Side side);
std::string dedup_name(DedupRule rule);
DedupRule parse_dedup(const std::string& s);

/// Parses "T1,PD" or "PET:3,T1" (name[:channels]) lists.
std::vector<Modality> parse_modalities(const std::string& list);
std::string format_modalities(const std::vector<Modality>& list);

template <typename Scalar>
PlaneTensor<Scalar> augment(const AugmentationPlan& plan, const ImageSet<Scalar>& images, Side side) {
  const auto& mods = plan.modalities(side);
  const auto& layout = plan.layout(side);
  Shape shape;
  bool first = true;
  for (const auto& m : mods) {
    auto it = images.find(m.name);
    if (it == images.end()) throw ShapeError("augment: missing modality " + m.name);
    const auto& img = it->second;
    if (img.channels() != m.channels) {
      throw ShapeError("augment: modality " + m.name + " has " + std::to_string(img.channels()) + " channels, plan expects " +
                       std::to_string(m.channels));
    }
    if (first) {
      shape = img.shape();
      first = false;
    } else if (img.batch() != shape.batch || img.height() != shape.height || img.width() != shape.width) {
      throw ShapeError("augment: spatial mismatch for modality " + m.name);
    }
  }
  shape.channels = plan.channels;
  PlaneTensor<Scalar> out(shape);
  for (Index n = 0; n < shape.batch; ++n) {
    for (std::size_t slot = 0; slot < layout.size(); ++slot) {
      const auto& src = images.at(mods[layout[slot].modality].name);
      out.plane(n, static_cast<Index>(slot)) = src.plane(n, layout[slot].channel);
    }
  }
  return out;
}

template <typename Scalar>
ImageSet<Scalar> deaugment(const AugmentationPlan& plan, const PlaneTensor<Scalar>& stacked, Side side) {
  if (stacked.channels() != plan.channels) {
    throw ShapeError("deaugment: tensor has " + std::to_string(stacked.channels()) + " channels, plan has " +
                     std::to_string(plan.channels));
  }
  const auto& mods = plan.modalities(side);
  const auto& layout = plan.layout(side);
  ImageSet<Scalar> out;
  for (std::size_t mi = 0; mi < mods.size(); ++mi) {
    PlaneTensor<Scalar> img(stacked.batch(), mods[mi].channels, stacked.height(), stacked.width());
    for (int c = 0; c < mods[mi].channels; ++c) {
      for (Index n = 0; n < stacked.batch(); ++n) {
        auto dst = img.plane(n, c);
        int copies = 0;
        for (std::size_t slot = 0; slot < layout.size(); ++slot) {
          if (layout[slot].modality != mi || layout[slot].channel != c) continue;
          ++copies;
          if (copies == 1) {
            dst = stacked.plane(n, static_cast<Index>(slot));
            if (plan.dedup == DedupRule::First) break;
          } else {
            // Running mean: identical copies reproduce the value bitwise.
            dst += (stacked.plane(n, static_cast<Index>(slot)) - dst) / static_cast<Scalar>(copies);
          }
        }
      }
    }
    out.emplace(mods[mi].name, std::move(img));
  }
  return out;
}

}  // namespace ivan

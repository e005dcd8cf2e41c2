#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ivan/augmentation.hpp"
#include "ivan/error.hpp"
#include "ivan/flow.hpp"
#include "ivan/objective.hpp"
#include "ivan/tensor.hpp"
#include "ivan/trainer.hpp"

namespace ivan {

// ---------------------------------------------------------------------------
// Phantoms.

/// Intensity map from anatomy a in [0, 1] to one modality, plus the additive
/// structures the modality shows. Output is mapped to [-1, 1].
struct ModalityPreset {
  enum class Curve { Identity, Flip, Gamma, Scale, ScaledFlip };
  std::string name;
  Curve curve = Curve::Identity;
  double param = 1.0;  // gamma exponent or gain
  bool show_lesions = false;
  double lesion_value = 1.0;
  bool show_bone = false;
  double bone_value = 1.0;

  double apply(double anatomy, bool lesion, bool bone) const;
};

/// Built-in presets: T1, T2, PD, CT, FUSED (the latter a T2/CT composite).
ModalityPreset phantom_preset(const std::string& name);
std::vector<std::string> phantom_preset_names();

struct PhantomSpec {
  std::uint64_t seed = 0;
  Index height = 32;
  Index width = 32;
  Index count = 250;
  int min_ellipses = 3;
  int max_ellipses = 6;
  std::vector<ModalityPreset> modalities;  // empty: every preset
  bool lesions = true;  // master toggles over the presets' structure flags
  bool bone = true;

  void validate() const;
};

/// Pure function of the spec. Record ids are "phantom_<index>".
Dataset generate_phantoms(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Intensity scaling and rotation.

/// Affine map of [lo, hi] onto [-1, 1]; values outside are clamped first.
template <typename Scalar>
PlaneTensor<Scalar> normalize(const PlaneTensor<Scalar>& raw, double lo, double hi) {
  if (!(hi > lo)) throw ShapeError("normalize: degenerate range");
  typename PlaneTensor<Scalar>::Array v =
      ((2.0 * raw.values().template cast<double>().cwiseMax(lo).cwiseMin(hi) - (lo + hi)) / (hi - lo)).template cast<Scalar>();
  return PlaneTensor<Scalar>(raw.shape(), std::move(v));
}

template <typename Scalar>
PlaneTensor<Scalar> denormalize(const PlaneTensor<Scalar>& x, double lo, double hi) {
  if (!(hi > lo)) throw ShapeError("denormalize: degenerate range");
  typename PlaneTensor<Scalar>::Array v =
      ((x.values().template cast<double>() * (hi - lo) + (lo + hi)) / 2.0).template cast<Scalar>();
  return PlaneTensor<Scalar>(x.shape(), std::move(v));
}

/// Counter-clockwise rotation by quarter_turns * 90 degrees (any integer).
template <typename Scalar>
PlaneTensor<Scalar> rotate90(const PlaneTensor<Scalar>& x, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return x;
  const Index h = x.height(), w = x.width();
  const bool swap = (k % 2) == 1;
  PlaneTensor<Scalar> out(x.batch(), x.channels(), swap ? w : h, swap ? h : w);
  for (Index n = 0; n < x.batch(); ++n) {
    for (Index c = 0; c < x.channels(); ++c) {
      const auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      if (k == 1) {
        dst = src.transpose().colwise().reverse();
      } else if (k == 2) {
        dst = src.reverse();
      } else {
        dst = src.transpose().rowwise().reverse();
      }
    }
  }
  return out;
}

/// Angles must be multiples of 90 degrees in {0, 90, 180, 270}.
template <typename Scalar>
std::vector<PlaneTensor<Scalar>> rotate_augment(const PlaneTensor<Scalar>& x, const std::vector<int>& angles) {
  std::vector<PlaneTensor<Scalar>> out;
  for (int a : angles) {
    if (a != 0 && a != 90 && a != 180 && a != 270) throw ShapeError("unsupported rotation angle " + std::to_string(a));
    out.push_back(rotate90(x, a / 90));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6) images.

struct RawImage {
  PlaneTensor<float> pixels;  // 1 x C x H x W, integer sample values
  int maxval = 255;
};

RawImage load_image(const std::string& path);
/// Samples are rounded and must lie in [0, maxval]; maxval in [1, 65535].
/// PPM output requires 3 channels and maxval <= 255.
void save_image(const std::string& path, const PlaneTensor<float>& pixels, int maxval = 255);

/// Loads and maps [0, maxval] onto [-1, 1].
PlaneTensor<float> load_normalized(const std::string& path);
/// Maps [-1, 1] onto [0, maxval], rounding and clamping.
void save_normalized(const std::string& path, const PlaneTensor<float>& x, int maxval = 255);

// ---------------------------------------------------------------------------
// Dataset manifests.
//
//   modality NAME CHANNELS LO HI
//   record ID SPLIT NAME=PATH [NAME=PATH ...]
//
// Paths are relative to the manifest's directory unless absolute.

struct ManifestModality {
  Modality modality;
  double lo = 0.0;
  double hi = 255.0;
};

struct ManifestRecord {
  std::string id;
  std::string split;  // train | test
  std::map<std::string, std::string> files;
};

struct DatasetManifest {
  std::vector<ManifestModality> modalities;
  std::vector<ManifestRecord> records;
  std::string base_dir;

  void validate() const;
  const ManifestModality& find(const std::string& name) const;
};

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);

/// Loads and normalizes every record of a split ("" for all records).
Dataset load_dataset(const DatasetManifest& manifest, const std::string& split);

/// Writes a phantom dataset as 16-bit PGMs plus manifest.txt under `dir`;
/// the first `train_count` records are the train split.
DatasetManifest write_phantom_dataset(const std::string& dir, const Dataset& data, Index train_count);

// ---------------------------------------------------------------------------
// Checkpoints (.ivan).

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  FlowModel<float> model;
  AugmentationPlan plan;
  TrainConfig config;
  int epoch = 0;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Files.

std::string read_file(const std::string& path);
/// Writes to a temporary sibling and renames over the target.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace ivan

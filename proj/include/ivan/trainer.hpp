#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ivan/augmentation.hpp"
#include "ivan/flow.hpp"
#include "ivan/objective.hpp"

namespace ivan {

/// One registered multi-modal sample; every image has batch 1.
struct Record {
  std::string id;
  ImageSet<float> images;
};

using Dataset = std::vector<Record>;

struct EpochLog {
  int epoch = 0;  // zero-based
  double lr = 0.0;
  LossParts loss;  // means over the epoch's samples
};

/// Return false to stop training after this epoch.
using EpochCallback = std::function<bool(const EpochLog&, const FlowModel<float>&)>;

/// Stacks the augmented source and target tensors of several records.
std::pair<PlaneTensor<float>, PlaneTensor<float>> make_batch(const AugmentationPlan& plan,
                                                              const std::vector<const ImageSet<float>*>& records);

/// Epoch loop: seeded shuffle, optional right-angle rotation per record,
/// batching, bidirectional loss, Adam with the halving schedule.
std::vector<EpochLog> train(FlowModel<float>& model, const Dataset& data, const AugmentationPlan& plan,
                            const TrainConfig& cfg, const EpochCallback& on_epoch = {});

std::string loss_csv_header();
std::string loss_csv_row(const EpochLog& log);

}  // namespace ivan

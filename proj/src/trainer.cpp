#include "ivan/trainer.hpp"

#include <charconv>

#include "ivan/dataio.hpp"

namespace ivan {

std::pair<PlaneTensor<float>, PlaneTensor<float>> make_batch(const AugmentationPlan& plan,
                                                              const std::vector<const ImageSet<float>*>& records) {
  std::vector<PlaneTensor<float>> xs, ys;
  xs.reserve(records.size());
  ys.reserve(records.size());
  for (const auto* r : records) {
    xs.push_back(augment(plan, *r, Side::Source));
    ys.push_back(augment(plan, *r, Side::Target));
  }
  return {concat_batch(xs), concat_batch(ys)};
}

namespace {

ImageSet<float> rotated(const ImageSet<float>& images, int quarter_turns) {
  ImageSet<float> out;
  for (const auto& [name, img] : images) out.emplace(name, rotate90(img, quarter_turns));
  return out;
}

}  // namespace

std::vector<EpochLog> train(FlowModel<float>& model, const Dataset& data, const AugmentationPlan& plan,
                            const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.epochs == 0) return {};
  if (data.empty()) throw ShapeError("train: dataset is empty");
  if (model.channels != plan.channels) throw ShapeError("train: model and plan channel counts differ");

  Rng rng(cfg.seed);
  AdamState<float> adam;
  Workspace<float> ws;
  std::vector<EpochLog> logs;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const std::vector<std::size_t> order = rng.permutation(data.size());
    LossParts sum;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
      const std::size_t stop = std::min(order.size(), start + batch);
      std::vector<ImageSet<float>> turned;
      std::vector<const ImageSet<float>*> members;
      turned.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const auto& rec = data[order[i]].images;
        if (cfg.rotate) {
          turned.push_back(rotated(rec, static_cast<int>(rng.below(4))));
          members.push_back(&turned.back());
        } else {
          members.push_back(&rec);
        }
      }
      try {
        const auto [x, y] = make_batch(plan, members);
        GradientResult<float> g = backward(model, to_features(x), to_features(y), cfg, ws);
        if (cfg.clip_norm > 0.0) clip_gradients(g.grads, cfg.clip_norm);
        adam_step(model, g.grads, adam, lr, cfg);
        const double n = static_cast<double>(stop - start);
        sum.total += g.loss.total * n;
        sum.forward += g.loss.forward * n;
        sum.backward += g.loss.backward * n;
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " +
                           e.what());
      }
    }
    const double n = static_cast<double>(data.size());
    EpochLog log{epoch, lr, {sum.total / n, sum.forward / n, sum.backward / n}};
    logs.push_back(log);
    if (on_epoch && !on_epoch(log, model)) break;
  }
  return logs;
}

std::string loss_csv_header() { return "epoch,lr,loss_total,loss_forward,loss_backward"; }

namespace {
std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
}  // namespace

std::string loss_csv_row(const EpochLog& log) {
  return std::to_string(log.epoch) + "," + shortest(log.lr) + "," + shortest(log.loss.total) + "," +
         shortest(log.loss.forward) + "," + shortest(log.loss.backward);
}

}  // namespace ivan

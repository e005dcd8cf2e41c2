#include "doctest.h"

#include "ivan/dataio.hpp"
#include "ivan/objective.hpp"
#include "ivan/trainer.hpp"

#include <limits>
#include <utility>

using namespace ivan;

namespace {

template <typename Scalar>
PlaneTensor<Scalar> random_tensor(Rng& rng, Index n, Index c, Index h, Index w) {
  PlaneTensor<Scalar> t(n, c, h, w);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
  return t;
}

template <typename Scalar>
FlowModel<Scalar> identity_model(Index channels, Index blocks, Index hidden) {
  Rng rng(0);
  FlowModel<Scalar> m = init_model<Scalar>(ModelTopology{channels, blocks, hidden}, rng);
  for (auto& b : m.blocks) b.mixing.setIdentity();
  return m;
}

FlowModel<double> random_model(Rng& rng, Index channels, Index blocks, Index hidden, double scale) {
  FlowModel<double> m = init_model<double>(ModelTopology{channels, blocks, hidden}, rng);
  randomize_final_layers(m, rng, scale);
  return m;
}

bool all_zero(const FlowModel<double>& g) {
  bool zero = true;
  visit_parameters(g, [&](const std::string&, const auto& p) { zero = zero && (p.array() == 0.0).all(); });
  return zero;
}

}  // namespace

TEST_CASE("loss of an identity model") {
  const auto m = identity_model<double>(2, 2, 4);
  Rng rng(1);
  const Tensord x = random_tensor<double>(rng, 2, 2, 5, 5);
  TrainConfig cfg;
  const LossParts zero = loss_total(m, x, x, cfg);
  CHECK(zero.total == 0.0);

  const Tensord y(x.shape(), x.values() + 1.0);
  const LossParts one = loss_total(m, x, y, cfg);
  CHECK(one.forward == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(one.backward == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(one.total == doctest::Approx(2.0).epsilon(1e-14));

  cfg.loss_norm = LossNorm::L1;
  CHECK(loss_total(m, x, y, cfg).total == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("lambda scales only the forward term") {
  Rng rng(2);
  const auto m = random_model(rng, 2, 2, 4, 0.5);
  const Tensord x = random_tensor<double>(rng, 1, 2, 6, 6), y = random_tensor<double>(rng, 1, 2, 6, 6);
  TrainConfig cfg;
  cfg.lambda = 1.5;
  const LossParts a = loss_total(m, x, y, cfg);
  cfg.lambda = 3.0;
  const LossParts b = loss_total(m, x, y, cfg);
  CHECK(b.forward == a.forward);
  CHECK(b.backward == a.backward);
  CHECK(b.total == cfg.lambda * b.forward + b.backward);
  // d(loss)/d(lambda) is the forward part.
  CHECK((b.total - a.total) / 1.5 == doctest::Approx(a.forward).epsilon(1e-12));
  CHECK_THROWS_AS(loss_total(m, x, random_tensor<double>(rng, 1, 2, 5, 6), cfg), ShapeError);
}

TEST_CASE("gradients vanish at zero residual") {
  const auto m = identity_model<double>(2, 2, 4);
  Rng rng(3);
  const Tensord x = random_tensor<double>(rng, 2, 2, 5, 5);
  for (LossNorm norm : {LossNorm::L2, LossNorm::L1}) {
    TrainConfig cfg;
    cfg.loss_norm = norm;
    const auto g = backward(m, x, model_forward(m, x), cfg);
    CHECK(g.loss.total == 0.0);
    CHECK(all_zero(g.grads));
  }
}

TEST_CASE("mixing-only model on one pixel matches the closed-form gradient") {
  // f(x) = W x with identity couplings; loss = rms(Wx - y) + rms(W^-1 y - x).
  FlowModel<double> m = identity_model<double>(2, 1, 1);
  m.blocks[0].mixing << 1.5, -0.4, 0.3, 0.9;
  Tensord x(1, 2, 1, 1), y(1, 2, 1, 1);
  x.data()[0] = 0.7;
  x.data()[1] = -0.2;
  y.data()[0] = -0.1;
  y.data()[1] = 0.4;
  const auto g = backward(m, x, y, TrainConfig{});

  const double a = 1.5, b = -0.4, c = 0.3, d = 0.9;
  const double x0 = 0.7, x1 = -0.2, y0 = -0.1, y1 = 0.4;
  // Forward residual and its RMS gradient d/dW_ij = r_i x_j / (2 rms).
  const double r0 = a * x0 + b * x1 - y0, r1 = c * x0 + d * x1 - y1;
  const double rms_f = std::sqrt((r0 * r0 + r1 * r1) / 2.0);
  double gw[2][2] = {{r0 * x0 / (2 * rms_f), r0 * x1 / (2 * rms_f)}, {r1 * x0 / (2 * rms_f), r1 * x1 / (2 * rms_f)}};
  // Inverse residual with V = W^-1 written out for the 2x2 case.
  const double det = a * d - b * c;
  const double v[2][2] = {{d / det, -b / det}, {-c / det, a / det}};
  const double s0 = v[0][0] * y0 + v[0][1] * y1 - x0, s1 = v[1][0] * y0 + v[1][1] * y1 - x1;
  const double rms_b = std::sqrt((s0 * s0 + s1 * s1) / 2.0);
  const double gv[2][2] = {{s0 * y0 / (2 * rms_b), s0 * y1 / (2 * rms_b)}, {s1 * y0 / (2 * rms_b), s1 * y1 / (2 * rms_b)}};
  // dV_kl/dW_ij = -V_ki V_jl.
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k)
        for (int l = 0; l < 2; ++l) gw[i][j] -= gv[k][l] * v[k][i] * v[j][l];

  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(g.grads.blocks[0].mixing(i, j) == doctest::Approx(gw[i][j]).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences on random draws") {
  Rng rng(4);
  for (int draw = 0; draw < 10; ++draw) {
    const Index ch = draw % 3 == 2 ? 4 : 2;
    const auto m = random_model(rng, ch, 2, 4, rng.uniform(0.1, 1.0));
    const Tensord x = random_tensor<double>(rng, 2, ch, 6, 6), y = random_tensor<double>(rng, 2, ch, 6, 6);
    TrainConfig cfg;
    cfg.lambda = rng.uniform(0.0, 2.0);
    cfg.loss_norm = draw % 4 == 3 ? LossNorm::L1 : LossNorm::L2;
    const GradCheckReport r = grad_check(m, x, y, cfg);
    INFO("draw " << draw << " worst " << r.worst_array);
    CHECK(r.max_rel_error <= 1e-4);
    CHECK(r.arrays.size() == parameter_names(m).size());
  }
}

TEST_CASE("grad_check edge cases and negative control") {
  FlowModel<double> empty;
  Tensord x(1, 2, 4, 4);
  CHECK(grad_check(empty, x, x, TrainConfig{}).arrays.empty());

  const auto id = identity_model<double>(2, 1, 3);
  Rng rng(5);
  const Tensord xr = random_tensor<double>(rng, 1, 2, 4, 4);
  const GradCheckReport zero = grad_check(id, xr, xr, TrainConfig{});
  CHECK(zero.max_rel_error == 0.0);
  const GradCheckReport shifted = grad_check(id, xr, Tensord(xr.shape(), xr.values() + 0.5), TrainConfig{});
  CHECK(shifted.passed(1e-4));
  CHECK(relative_error(0.0, 0.0, 1e-6) == 0.0);

  const auto m = random_model(rng, 2, 1, 3, 0.5);
  const Tensord y = random_tensor<double>(rng, 1, 2, 4, 4);
  GradCheckOptions sabotage;
  sabotage.tamper = [](GradientSet<double>& g) { g.blocks[0].coupling.s.layers[2].weight(0, 0) += 1e-2; };
  const GradCheckReport bad = grad_check(m, xr, y, TrainConfig{}, sabotage);
  CHECK_FALSE(bad.passed(1e-4));
  CHECK(bad.worst_array == "block0.s.conv2.weight");
}

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 1e-4);
  CHECK(lr_at(50, cfg) == 5e-5);
  CHECK(lr_at(149, cfg) == 2.5e-5);
  double prev = lr_at(0, cfg);
  for (int e = 1; e < 400; ++e) {
    const double lr = lr_at(e, cfg);
    CHECK(lr <= prev);
    CHECK((lr == prev) == (e % cfg.halve_every != 0));
    prev = lr;
  }
  CHECK_THROWS_AS(lr_at(-1, cfg), ConfigError);
}

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr0 = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.halve_every = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_loss_norm("l1") == LossNorm::L1);
  CHECK_THROWS_AS(parse_loss_norm("l3"), ConfigError);
}

TEST_CASE("adam step") {
  Rng rng(6);
  FlowModel<float> p = init_model<float>(ModelTopology{2, 1, 2}, rng);
  const FlowModel<float> before = p;
  AdamState<float> state;
  TrainConfig cfg;
  adam_step(p, zeros_like(p), state, 1e-3, cfg);
  CHECK(state.step == 1);
  const auto a = parameter_spans(std::as_const(p)), b = parameter_spans(before);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::equal(a[i].begin(), a[i].end(), b[i].begin()));

  // First bias-corrected step moves every parameter by about lr against g.
  AdamState<float> fresh;
  FlowModel<float> q = before;
  GradientSet<float> g = zeros_like(q);
  for (auto s : parameter_spans(g))
    for (float& v : s) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  adam_step(q, g, fresh, 1e-3, cfg);
  const auto qs = parameter_spans(std::as_const(q)), gs = parameter_spans(std::as_const(g));
  for (std::size_t i = 0; i < qs.size(); ++i)
    for (std::size_t j = 0; j < qs[i].size(); ++j) {
      const double step = double(qs[i][j]) - double(b[i][j]);
      CHECK(std::abs(step) == doctest::Approx(1e-3).epsilon(1e-3));
      CHECK((step < 0) == (gs[i][j] > 0));
    }

  FlowModel<float> r1 = before, r2 = before;
  AdamState<float> s1, s2;
  for (int k = 0; k < 5; ++k) {
    adam_step(r1, g, s1, 1e-3, cfg);
    adam_step(r2, g, s2, 1e-3, cfg);
  }
  const auto x1 = parameter_spans(std::as_const(r1)), x2 = parameter_spans(std::as_const(r2));
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(std::equal(x1[i].begin(), x1[i].end(), x2[i].begin()));
}

TEST_CASE("gradient clipping") {
  Rng rng(7);
  FlowModel<double> g = zeros_like(init_model<double>(ModelTopology{2, 1, 2}, rng));
  g.blocks[0].mixing(0, 0) = 3.0;
  g.blocks[0].mixing(1, 1) = 4.0;
  CHECK(clip_gradients(g, 1.0) == 5.0);
  CHECK(g.blocks[0].mixing(1, 1) == doctest::Approx(0.8));
  CHECK(clip_gradients(g, 0.0) == doctest::Approx(1.0));
}

namespace {

Dataset tiny_dataset() {
  PhantomSpec spec;
  spec.seed = 3;
  spec.count = 8;
  spec.height = spec.width = 12;
  return generate_phantoms(spec);
}

}  // namespace

TEST_CASE("train: zero epochs leaves the model unchanged") {
  const Dataset data = tiny_dataset();
  const auto plan = plan_for(parse_modalities("T1,PD"), parse_modalities("T2"));
  Rng rng(8);
  FlowModel<float> m = init_model<float>(ModelTopology{2, 2, 4}, rng);
  const FlowModel<float> before = m;
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK(train(m, data, plan, cfg).empty());
  const auto a = parameter_spans(std::as_const(m)), b = parameter_spans(before);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::equal(a[i].begin(), a[i].end(), b[i].begin()));
}

TEST_CASE("train: loss decreases and runs are reproducible") {
  const Dataset data = tiny_dataset();
  const auto plan = plan_for(parse_modalities("T1,PD"), parse_modalities("T2"));
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr0 = 1e-3;
  cfg.batch_size = 3;
  cfg.seed = 5;
  auto run = [&] {
    Rng rng(9);
    FlowModel<float> m = init_model<float>(ModelTopology{2, 2, 4}, rng);
    std::string csv;
    for (const auto& log : train(m, data, plan, cfg)) csv += loss_csv_row(log) + "\n";
    return std::make_pair(csv, m);
  };
  const auto [csv1, m1] = run();
  const auto [csv2, m2] = run();
  CHECK(csv1 == csv2);
  const auto a = parameter_spans(m1), b = parameter_spans(m2);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::equal(a[i].begin(), a[i].end(), b[i].begin()));

  Rng rng(9);
  FlowModel<float> m = init_model<float>(ModelTopology{2, 2, 4}, rng);
  const auto logs = train(m, data, plan, cfg);
  REQUIRE(logs.size() == 30);
  CHECK(logs.back().loss.total < 0.6 * logs.front().loss.total);
  for (std::size_t i = 1; i < logs.size(); ++i) CHECK(logs[i].lr <= logs[i - 1].lr);
  CHECK(logs[0].lr == 1e-3);
  CHECK(logs.back().loss.total == doctest::Approx(cfg.lambda * logs.back().loss.forward + logs.back().loss.backward));

  int calls = 0;
  Rng rng2(9);
  FlowModel<float> stopped = init_model<float>(ModelTopology{2, 2, 4}, rng2);
  CHECK(train(stopped, data, plan, cfg, [&](const EpochLog&, const FlowModel<float>&) { return ++calls < 3; }).size() == 3);
}

TEST_CASE("train reports divergence with its position") {
  const Dataset data = tiny_dataset();
  const auto plan = plan_for(parse_modalities("T1,PD"), parse_modalities("T2"));
  Rng rng(10);
  FlowModel<float> m = init_model<float>(ModelTopology{2, 1, 4}, rng);
  m.blocks[0].coupling.t.layers[4].bias[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(m, data, plan, cfg);
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 0, batch 0") != std::string::npos);
  }
  CHECK_THROWS_AS(train(m, Dataset{}, plan, cfg), ShapeError);
}

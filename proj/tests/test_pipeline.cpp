#include "doctest.h"

#include "ivan/config.hpp"
#include "ivan/pipeline.hpp"

using namespace ivan;

namespace {

FlowModel<float> identity_model(Index channels) {
  Rng rng(0);
  FlowModel<float> m = init_model<float>(ModelTopology{channels, 3, 4}, rng);
  for (auto& b : m.blocks) b.mixing.setIdentity();
  return m;
}

Tensorf random_image(Rng& rng, Index c, Index h, Index w) {
  Tensorf t(1, c, h, w);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

}  // namespace

TEST_CASE("direction names") {
  CHECK(parse_direction("forward") == Direction::Forward);
  CHECK(direction_name(Direction::Inverse) == "inverse");
  CHECK(input_side(Direction::Inverse) == Side::Target);
  CHECK(output_side(Direction::Inverse) == Side::Source);
  CHECK_THROWS_AS(parse_direction("sideways"), ConfigError);
}

TEST_CASE("identity model passes images through") {
  Rng rng(1);
  const Tensorf a = random_image(rng, 1, 6, 5);
  const auto plan = plan_for(parse_modalities("T1"), parse_modalities("T2"));
  const auto out = infer(identity_model(plan.channels), plan, {{"T1", a}}, Direction::Forward);
  REQUIRE(out.count("T2") == 1);
  CHECK((out.at("T2").values() == a.values()).all());
  const auto back = infer(identity_model(plan.channels), plan, {{"T2", a}}, Direction::Inverse);
  CHECK((back.at("T1").values() == a.values()).all());
}

TEST_CASE("fusing identical sources through an identity model returns the source") {
  Rng rng(2);
  const Tensorf a = random_image(rng, 1, 7, 7);
  const auto plan = plan_for(parse_modalities("T2,CT"), parse_modalities("FUSED"));
  const auto out = infer(identity_model(plan.channels), plan, {{"T2", a}, {"CT", a}}, Direction::Forward);
  CHECK((out.at("FUSED").values() - a.values()).abs().maxCoeff() == 0.0f);
}

TEST_CASE("forward then inverse on the raw output restores the augmented input") {
  Rng rng(3);
  const auto plan = plan_for(parse_modalities("PET:3,T1"), parse_modalities("T2"));
  FlowModel<float> m = init_model<float>(ModelTopology{plan.channels, 4, 6}, rng);
  randomize_final_layers(m, rng, 0.3);
  const ImageSet<float> in{{"PET", random_image(rng, 3, 9, 8)}, {"T1", random_image(rng, 1, 9, 8)}};
  const Tensorf x = augment(plan, in, Side::Source);
  const Tensorf back = model_inverse(m, model_forward(m, x));
  CHECK((back.values() - x.values()).abs().maxCoeff() <= 1e-3f);
  CHECK_THROWS_AS(infer(m, plan, {{"T1", random_image(rng, 1, 9, 8)}}, Direction::Forward), ShapeError);
}

TEST_CASE("evaluation of a perfect model") {
  PhantomSpec spec;
  spec.count = 3;
  spec.height = spec.width = 12;
  spec.modalities = {phantom_preset("T1")};
  Dataset data = generate_phantoms(spec);
  for (auto& r : data) r.images.emplace("COPY", r.images.at("T1"));
  const auto plan = plan_for(parse_modalities("T1"), parse_modalities("COPY"));
  MetricConfig cfg;
  cfg.ssim_window = 5;
  const EvalSummary s = evaluate_direction(identity_model(plan.channels), plan, data, Direction::Forward, cfg);
  CHECK(s.images.size() == 3);
  for (const auto& img : s.images) {
    CHECK(img.psnr == HUGE_VAL);
    CHECK(img.ssim == 1.0);
    CHECK(img.nmse == 0.0);
  }
  CHECK(s.psnr.mean == HUGE_VAL);
  CHECK(s.psnr.excluded == 3);
  CHECK(s.ssim.mean == 1.0);
  CHECK(s.nmse.std == 0.0);
}

TEST_CASE("unit range mapping") {
  Tensorf x(1, 1, 1, 3);
  x.values() << -1.0f, 0.0f, 1.0f;
  const Tensord u = to_unit_range(x);
  CHECK(u.data()[0] == 0.0);
  CHECK(u.data()[1] == 0.5);
  CHECK(u.data()[2] == 1.0);
}

TEST_CASE("round-trip report") {
  Rng rng(4);
  FlowModel<float> m = init_model<float>(ModelTopology{4, 4, 6}, rng);
  randomize_final_layers(m, rng, 0.5);
  const RoundTripReport r = roundtrip_check(m, 10, 12, 2, 9);
  CHECK(r.passed());
  CHECK(r.max_abs_float > 0.0);
  CHECK(r.max_abs_double <= 1e-8);
  const RoundTripReport fresh = roundtrip_check(identity_model(4), 8, 8, 1, 1);
  CHECK(fresh.max_abs_float == 0.0);
  CHECK(fresh.max_abs_double == 0.0);
}

TEST_CASE("config text round trip") {
  RunConfig c;
  apply_config_text(c, "# comment\nseed = 42\n\ntrain.lambda = 0.5   # inline\ntrain.loss_norm = l1\n"
                       "phantom.modalities = T1,T2\nmodel.hidden = 12\nmetrics.range = fixed\nphantom.bone = false\n");
  CHECK(c.train.seed == 42);
  CHECK(c.train.lambda == 0.5);
  CHECK(c.train.loss_norm == LossNorm::L1);
  CHECK(c.phantom.modalities.size() == 2);
  CHECK(c.model.hidden == 12);
  CHECK(c.metrics.range == MetricConfig::Range::Fixed);
  CHECK_FALSE(c.phantom.bone);

  c.train.lr0 = 0.1 + 0.2;  // not exactly representable in short decimal
  const std::string text = resolved_config_text(c);
  RunConfig d;
  apply_config_text(d, text);
  CHECK(resolved_config_text(d) == text);
  CHECK(d.train.lr0 == c.train.lr0);
  for (const auto& key : config_keys()) CHECK(text.find(key + " = ") != std::string::npos);
}

TEST_CASE("config errors") {
  RunConfig c;
  CHECK_THROWS_AS(apply_config_text(c, "trian.epochs = 3\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "train.epochs = three\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "train.epochs = 3.5\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "train.rotate = maybe\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "just words\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "phantom.modalities = T1,XX\n"), ConfigError);
  CHECK_NOTHROW(c.validate());
  c.phantom_train = c.phantom.count + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

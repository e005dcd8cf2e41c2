#include "doctest.h"

#include "ivan/augmentation.hpp"
#include "ivan/rng.hpp"

using namespace ivan;

namespace {

std::vector<Modality> mods(std::initializer_list<std::pair<const char*, int>> list) {
  std::vector<Modality> out;
  for (auto [n, c] : list) out.push_back({n, c});
  return out;
}

std::vector<std::string> names(const AugmentationPlan& p, Side side) {
  std::vector<std::string> out;
  for (const auto& s : p.layout(side)) {
    std::string n = p.modalities(side)[s.modality].name;
    if (p.modalities(side)[s.modality].channels == 3) n += "." + std::string(1, "rgb"[s.channel]);
    out.push_back(n);
  }
  return out;
}

Tensorf constant(float v, Index c = 1) { return Tensorf::constant({1, c, 1, 1}, v); }

}  // namespace

TEST_CASE("plan_for: two sources, one target") {
  const auto p = plan_for(mods({{"T1", 1}, {"PD", 1}}), mods({{"T2", 1}}));
  CHECK(p.channels == 2);
  CHECK(names(p, Side::Source) == std::vector<std::string>{"T1", "PD"});
  CHECK(names(p, Side::Target) == std::vector<std::string>{"T2", "T2"});
}

TEST_CASE("plan_for: grayscale pair to colour") {
  const auto p = plan_for(mods({{"T1", 1}, {"T2", 1}}), mods({{"PET", 3}}));
  CHECK(p.channels == 6);
  CHECK(names(p, Side::Source) == std::vector<std::string>{"T1", "T2", "T1", "T2", "T1", "T2"});
  CHECK(names(p, Side::Target) == std::vector<std::string>{"PET.r", "PET.g", "PET.b", "PET.r", "PET.g", "PET.b"});
}

TEST_CASE("plan_for: one to one duplicates both sides") {
  const auto p = plan_for(mods({{"T1", 1}}), mods({{"T2", 1}}));
  CHECK(p.channels == 2);
  CHECK(names(p, Side::Source) == std::vector<std::string>{"T1", "T1"});
  CHECK(names(p, Side::Target) == std::vector<std::string>{"T2", "T2"});
}

TEST_CASE("plan_for: one to many and minimum channel count") {
  const auto p = plan_for(mods({{"T1", 1}}), mods({{"T2", 1}, {"PD", 1}, {"CT", 1}}));
  CHECK(p.channels == 6);
  CHECK(names(p, Side::Target) == std::vector<std::string>{"T2", "PD", "CT", "T2", "PD", "CT"});
  const auto q = plan_for(mods({{"T1", 1}, {"PD", 1}}), mods({{"T2", 1}}), 6);
  CHECK(q.channels == 6);
  CHECK(q.replication(Side::Target, 0, 0) == 6);
  CHECK(q.replication(Side::Source, 1, 0) == 3);
}

TEST_CASE("plan_for: padding with the last modality when no whole layout fits") {
  // 5 source and 3 target channels have no common even multiple up to 8, so
  // the last source modality pads the layout.
  const auto p = plan_for(mods({{"PET", 3}, {"T1", 1}, {"T2", 1}}), mods({{"CT", 3}}));
  CHECK(p.channels == 6);
  CHECK(names(p, Side::Source) == std::vector<std::string>{"PET.r", "PET.g", "PET.b", "T1", "T2", "T2"});
  CHECK(names(p, Side::Target) == std::vector<std::string>{"CT.r", "CT.g", "CT.b", "CT.r", "CT.g", "CT.b"});
}

TEST_CASE("plan_for rejects bad modality lists") {
  CHECK_THROWS_AS(plan_for({}, mods({{"T2", 1}})), ShapeError);
  CHECK_THROWS_AS(plan_for(mods({{"T1", 1}}), {}), ShapeError);
  CHECK_THROWS_AS(plan_for(mods({{"T1", 2}}), mods({{"T2", 1}})), ShapeError);
  CHECK_THROWS_AS(plan_for(mods({{"T1", 1}, {"T1", 1}}), mods({{"T2", 1}})), ShapeError);
}

TEST_CASE("plan invariants hold across regimes") {
  const std::vector<std::vector<Modality>> lists = {
      mods({{"A", 1}}), mods({{"A", 1}, {"B", 1}}), mods({{"A", 3}}), mods({{"A", 1}, {"B", 3}}),
      mods({{"A", 1}, {"B", 1}, {"C", 1}})};
  for (const auto& s : lists) {
    for (auto t : lists) {
      for (auto& m : t) m.name = "t" + m.name;
      for (Index min_c : {0, 4, 10}) {
        const auto p = plan_for(s, t, min_c);
        CHECK(p.channels % 2 == 0);
        CHECK(p.channels >= min_c);
        CHECK(static_cast<Index>(p.source_layout.size()) == p.channels);
        CHECK(static_cast<Index>(p.target_layout.size()) == p.channels);
        for (Side side : {Side::Source, Side::Target}) {
          const auto& ms = p.modalities(side);
          for (std::size_t mi = 0; mi < ms.size(); ++mi)
            for (int c = 0; c < ms[mi].channels; ++c) CHECK(p.replication(side, mi, c) >= 1);
        }
        CHECK(plan_from_text(plan_to_text(p)) == p);
      }
    }
  }
}

TEST_CASE("augment stacks planes in layout order") {
  const auto p = plan_for(mods({{"A", 1}}), mods({{"B", 1}}));
  ImageSet<float> imgs{{"A", constant(5.0f)}};
  const Tensorf x = augment(p, imgs, Side::Source);
  CHECK(x.channels() == 2);
  CHECK(x.data()[0] == 5.0f);
  CHECK(x.data()[1] == 5.0f);

  const auto q = plan_for(mods({{"T1", 1}, {"T2", 1}}), mods({{"PET", 3}}));
  const Tensorf y = augment(q, ImageSet<float>{{"T1", constant(1.0f)}, {"T2", constant(2.0f)}}, Side::Source);
  for (Index c = 0; c < 6; ++c) CHECK(y.data()[c] == (c % 2 == 0 ? 1.0f : 2.0f));
}

TEST_CASE("augment errors") {
  const auto p = plan_for(mods({{"T1", 1}, {"PD", 1}}), mods({{"T2", 1}}));
  CHECK_THROWS_AS(augment(p, ImageSet<float>{{"T1", constant(1.0f)}}, Side::Source), ShapeError);
  CHECK_THROWS_AS(augment(p, ImageSet<float>{{"T1", constant(1.0f)}, {"PD", Tensorf(1, 1, 2, 2)}}, Side::Source), ShapeError);
  CHECK_THROWS_AS(augment(p, ImageSet<float>{{"T1", constant(1.0f)}, {"PD", constant(1.0f, 3)}}, Side::Source), ShapeError);
}

TEST_CASE("deaugment collapses replicated slots") {
  const auto p = plan_for(mods({{"T1", 1}, {"PD", 1}}), mods({{"T2", 1}}));
  Tensorf stacked(1, 2, 1, 1);
  stacked.data()[0] = 3.0f;
  stacked.data()[1] = 5.0f;
  CHECK(deaugment(p, stacked, Side::Target).at("T2").data()[0] == 4.0f);
  stacked.data()[0] = stacked.data()[1] = 7.0f;
  CHECK(deaugment(p, stacked, Side::Target).at("T2").data()[0] == 7.0f);
  AugmentationPlan first = p;
  first.dedup = DedupRule::First;
  CHECK(deaugment(first, stacked, Side::Target).at("T2").data()[0] == 7.0f);
  CHECK_THROWS_AS(deaugment(p, Tensorf(1, 4, 1, 1), Side::Target), ShapeError);

  const auto q = plan_for(mods({{"T1", 1}, {"T2", 1}}), mods({{"PET", 3}}));
  Tensorf pet(1, 6, 1, 1);
  for (Index c = 0; c < 6; ++c) pet.data()[c] = static_cast<float>(c % 3 + 1);
  const Tensorf back = deaugment(q, pet, Side::Target).at("PET");
  CHECK(back.channels() == 3);
  for (Index c = 0; c < 3; ++c) CHECK(back.data()[c] == static_cast<float>(c + 1));
}

TEST_CASE("deaugment inverts augment bitwise under both rules") {
  Rng rng(3);
  for (DedupRule rule : {DedupRule::Mean, DedupRule::First}) {
    for (Index min_c : {0, 6, 8}) {
      auto p = plan_for(mods({{"A", 1}, {"B", 3}}), mods({{"C", 1}}), min_c, rule);
      ImageSet<float> imgs;
      for (const auto& [name, ch] : std::vector<std::pair<std::string, Index>>{{"A", 1}, {"B", 3}}) {
        Tensorf t(2, ch, 5, 4);
        for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(rng.uniform(-1, 1));
        imgs.emplace(name, t);
      }
      const auto back = deaugment(p, augment(p, imgs, Side::Source), Side::Source);
      for (const auto& [name, img] : imgs) CHECK((back.at(name).values() == img.values()).all());
    }
  }
}

TEST_CASE("plan text round trip and validation") {
  const auto p = plan_for(mods({{"T1", 1}, {"T2", 1}}), mods({{"PET", 3}}), 0, DedupRule::First);
  CHECK(plan_from_text(plan_to_text(p)) == p);
  std::string bad = plan_to_text(p);
  bad.replace(bad.find("plan.channels = 6"), 17, "plan.channels = 4");
  CHECK_THROWS_AS(plan_from_text(bad), FormatError);
  CHECK_THROWS_AS(plan_from_text("plan.channels = 2\n"), FormatError);
  CHECK(parse_modalities("PET:3,T1") == mods({{"PET", 3}, {"T1", 1}}));
  CHECK(format_modalities(mods({{"PET", 3}, {"T1", 1}})) == "PET:3,T1");
  CHECK_THROWS_AS(parse_modalities("PET:2"), ConfigError);
}

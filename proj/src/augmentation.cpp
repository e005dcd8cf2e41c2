#include "ivan/augmentation.hpp"

#include <numeric>
#include <set>
#include <sstream>

namespace ivan {

namespace {

Index total_channels(const std::vector<Modality>& mods) {
  Index n = 0;
  for (const auto& m : mods) n += m.channels;
  return n;
}

void check_modalities(const std::vector<Modality>& mods, const char* what) {
  if (mods.empty()) throw ShapeError(std::string("plan_for: empty ") + what + " modality list");
  std::set<std::string> names;
  for (const auto& m : mods) {
    if (m.name.empty()) throw ShapeError("plan_for: modality with empty name");
    if (m.channels != 1 && m.channels != 3) throw ShapeError("modality " + m.name + ": channels must be 1 or 3");
    if (!names.insert(m.name).second) throw ShapeError("plan_for: duplicate modality " + m.name);
  }
}

// Whole-modality round robin, then pad with the last modality's channels.
std::vector<Slot> build_layout(const std::vector<Modality>& mods, Index channels) {
  std::vector<Slot> layout;
  const Index total = total_channels(mods);
  const Index rounds = channels / total;
  for (Index r = 0; r < rounds; ++r) {
    for (std::size_t mi = 0; mi < mods.size(); ++mi) {
      for (int c = 0; c < mods[mi].channels; ++c) layout.push_back({mi, c});
    }
  }
  const std::size_t last = mods.size() - 1;
  for (int c = 0; static_cast<Index>(layout.size()) < channels; c = (c + 1) % mods[last].channels) {
    layout.push_back({last, c});
  }
  return layout;
}

}  // namespace

int AugmentationPlan::replication(Side side, std::size_t modality, int channel) const {
  int n = 0;
  for (const auto& s : layout(side)) n += (s.modality == modality && s.channel == channel) ? 1 : 0;
  return n;
}

AugmentationPlan plan_for(const std::vector<Modality>& sources, const std::vector<Modality>& targets,
                          Index min_channels, DedupRule dedup) {
  check_modalities(sources, "source");
  check_modalities(targets, "target");
  const Index s = total_channels(sources), t = total_channels(targets);
  Index lo = std::max({min_channels, s, t, Index(2)});
  lo += lo % 2;
  // Mixing matrices stay small; whole-modality layouts are searched up to 8
  // channels (or the requested minimum, if larger).
  const Index hi = std::max<Index>(lo, 8);
  Index chosen = lo;
  for (Index c = lo; c <= hi; c += 2) {
    if (c % s == 0 && c % t == 0) {
      chosen = c;
      break;
    }
  }
  AugmentationPlan plan;
  plan.sources = sources;
  plan.targets = targets;
  plan.channels = chosen;
  plan.source_layout = build_layout(sources, chosen);
  plan.target_layout = build_layout(targets, chosen);
  plan.dedup = dedup;
  validate_plan(plan);
  return plan;
}

void validate_plan(const AugmentationPlan& plan) {
  if (plan.channels < 2 || plan.channels % 2 != 0) throw ShapeError("plan channel count must be even and >= 2");
  for (Side side : {Side::Source, Side::Target}) {
    const auto& mods = plan.modalities(side);
    const auto& layout = plan.layout(side);
    if (mods.empty()) throw ShapeError("plan has no " + side_name(side) + " modalities");
    if (static_cast<Index>(layout.size()) != plan.channels) {
      throw ShapeError(side_name(side) + " layout has " + std::to_string(layout.size()) + " slots, expected " +
                       std::to_string(plan.channels));
    }
    for (const auto& slot : layout) {
      if (slot.modality >= mods.size() || slot.channel < 0 || slot.channel >= mods[slot.modality].channels) {
        throw ShapeError(side_name(side) + " layout references an unknown modality channel");
      }
    }
    for (std::size_t mi = 0; mi < mods.size(); ++mi) {
      for (int c = 0; c < mods[mi].channels; ++c) {
        if (plan.replication(side, mi, c) < 1) {
          throw ShapeError(side_name(side) + " layout never places " + mods[mi].name + " channel " + std::to_string(c));
        }
      }
    }
  }
}

std::string side_name(Side side) { return side == Side::Source ? "source" : "target"; }

std::string dedup_name(DedupRule rule) { return rule == DedupRule::Mean ? "mean" : "first"; }

DedupRule parse_dedup(const std::string& s) {
  if (s == "mean") return DedupRule::Mean;
  if (s == "first") return DedupRule::First;
  throw ConfigError("unknown dedup rule '" + s + "' (expected mean|first)");
}

std::vector<Modality> parse_modalities(const std::string& list) {
  std::vector<Modality> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    Modality m;
    const auto colon = item.find(':');
    m.name = item.substr(0, colon);
    if (colon != std::string::npos) {
      const std::string ch = item.substr(colon + 1);
      if (ch != "1" && ch != "3") throw ConfigError("modality " + m.name + ": channel count must be 1 or 3");
      m.channels = ch == "3" ? 3 : 1;
    }
    out.push_back(m);
  }
  return out;
}

std::string format_modalities(const std::vector<Modality>& list) {
  std::string out;
  for (const auto& m : list) {
    if (!out.empty()) out += ',';
    out += m.name;
    if (m.channels != 1) out += ":" + std::to_string(m.channels);
  }
  return out;
}

namespace {

std::string format_layout(const std::vector<Slot>& layout) {
  std::string out;
  for (const auto& s : layout) {
    if (!out.empty()) out += ' ';
    out += std::to_string(s.modality) + "." + std::to_string(s.channel);
  }
  return out;
}

std::vector<Slot> parse_layout(const std::string& text) {
  std::vector<Slot> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    const auto dot = tok.find('.');
    if (dot == std::string::npos) throw FormatError("bad layout slot '" + tok + "'");
    try {
      out.push_back({static_cast<std::size_t>(std::stoul(tok.substr(0, dot))), std::stoi(tok.substr(dot + 1))});
    } catch (const std::logic_error&) {
      throw FormatError("bad layout slot '" + tok + "'");
    }
  }
  return out;
}

}  // namespace

std::string plan_to_text(const AugmentationPlan& plan) {
  std::ostringstream os;
  os << "plan.sources = " << format_modalities(plan.sources) << '\n';
  os << "plan.targets = " << format_modalities(plan.targets) << '\n';
  os << "plan.channels = " << plan.channels << '\n';
  os << "plan.source_layout = " << format_layout(plan.source_layout) << '\n';
  os << "plan.target_layout = " << format_layout(plan.target_layout) << '\n';
  os << "plan.dedup = " << dedup_name(plan.dedup) << '\n';
  return os.str();
}

AugmentationPlan plan_from_text(const std::string& text) {
  AugmentationPlan plan;
  std::istringstream is(text);
  std::string line;
  int seen = 0;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    try {
      if (key == "plan.sources") {
        plan.sources = parse_modalities(value);
      } else if (key == "plan.targets") {
        plan.targets = parse_modalities(value);
      } else if (key == "plan.channels") {
        plan.channels = std::stol(value);
      } else if (key == "plan.source_layout") {
        plan.source_layout = parse_layout(value);
      } else if (key == "plan.target_layout") {
        plan.target_layout = parse_layout(value);
      } else if (key == "plan.dedup") {
        plan.dedup = parse_dedup(value);
      } else {
        continue;
      }
    } catch (const std::invalid_argument& e) {
      throw FormatError("bad plan entry '" + line + "': " + e.what());
    }
    ++seen;
  }
  if (seen != 6) throw FormatError("augmentation plan is incomplete");
  try {
    validate_plan(plan);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid augmentation plan: ") + e.what());
  }
  return plan;
}

}  // namespace ivan

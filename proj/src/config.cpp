#include "ivan/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

namespace ivan {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("config key " + key + ": '" + text + "' is not a valid number");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key " + key + ": '" + text + "' is not a boolean (true|false)");
}

template <typename T>
std::string format_number(T value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string join_presets(const std::vector<ModalityPreset>& mods) {
  std::string out;
  for (const auto& m : mods) out += (out.empty() ? "" : ",") + m.name;
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Key number(const std::string& name, Access access) {
  return {name, [name, access](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(name, v); },
          [access](const RunConfig& c) { return format_number(access(c)); }};
}

template <typename Access>
Key flag(const std::string& name, Access access) {
  return {name, [name, access](RunConfig& c, const std::string& v) { access(c) = parse_bool(name, v); },
          [access](const RunConfig& c) { return std::string(access(c) ? "true" : "false"); }};
}

template <typename Access>
Key text(const std::string& name, Access access) {
  return {name, [access](RunConfig& c, const std::string& v) { access(c) = v; },
          [access](const RunConfig& c) { return access(c); }};
}

#define FIELD(expr) [](auto& c) -> auto& { return expr; }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      number<std::uint64_t>("seed", FIELD(c.train.seed)),
      text("out", FIELD(c.out)),
      text("checkpoint", FIELD(c.checkpoint)),
      text("data.manifest", FIELD(c.manifest)),
      text("data.train_split", FIELD(c.train_split)),
      text("data.test_split", FIELD(c.test_split)),
      number<std::uint64_t>("phantom.seed", FIELD(c.phantom.seed)),
      number<Index>("phantom.count", FIELD(c.phantom.count)),
      number<Index>("phantom.train", FIELD(c.phantom_train)),
      number<Index>("phantom.height", FIELD(c.phantom.height)),
      number<Index>("phantom.width", FIELD(c.phantom.width)),
      number<int>("phantom.min_ellipses", FIELD(c.phantom.min_ellipses)),
      number<int>("phantom.max_ellipses", FIELD(c.phantom.max_ellipses)),
      flag("phantom.lesions", FIELD(c.phantom.lesions)),
      flag("phantom.bone", FIELD(c.phantom.bone)),
      {"phantom.modalities",
       [](RunConfig& c, const std::string& v) {
         c.phantom.modalities.clear();
         for (const auto& m : parse_modalities(v)) c.phantom.modalities.push_back(phantom_preset(m.name));
       },
       [](const RunConfig& c) { return join_presets(c.phantom.modalities); }},
      text("task.sources", FIELD(c.sources)),
      text("task.targets", FIELD(c.targets)),
      number<Index>("task.min_channels", FIELD(c.min_channels)),
      {"task.dedup", [](RunConfig& c, const std::string& v) { c.dedup = parse_dedup(v); },
       [](const RunConfig& c) { return dedup_name(c.dedup); }},
      number<Index>("model.blocks", FIELD(c.model.blocks)),
      number<Index>("model.hidden", FIELD(c.model.hidden)),
      number<double>("model.slope", FIELD(c.model.slope)),
      number<double>("model.s_clamp", FIELD(c.model.s_clamp)),
      number<double>("train.lambda", FIELD(c.train.lambda)),
      {"train.loss_norm", [](RunConfig& c, const std::string& v) { c.train.loss_norm = parse_loss_norm(v); },
       [](const RunConfig& c) { return loss_norm_name(c.train.loss_norm); }},
      number<int>("train.epochs", FIELD(c.train.epochs)),
      number<double>("train.lr0", FIELD(c.train.lr0)),
      number<int>("train.halve_every", FIELD(c.train.halve_every)),
      number<int>("train.batch_size", FIELD(c.train.batch_size)),
      number<double>("train.adam_beta1", FIELD(c.train.adam_beta1)),
      number<double>("train.adam_beta2", FIELD(c.train.adam_beta2)),
      number<double>("train.adam_eps", FIELD(c.train.adam_eps)),
      number<double>("train.clip_norm", FIELD(c.train.clip_norm)),
      flag("train.rotate", FIELD(c.train.rotate)),
      number<int>("metrics.ssim_window", FIELD(c.metrics.ssim_window)),
      number<double>("metrics.ssim_sigma", FIELD(c.metrics.ssim_sigma)),
      number<double>("metrics.ssim_k1", FIELD(c.metrics.ssim_k1)),
      number<double>("metrics.ssim_k2", FIELD(c.metrics.ssim_k2)),
      flag("metrics.ssim_global", FIELD(c.metrics.ssim_global)),
      {"metrics.range",
       [](RunConfig& c, const std::string& v) {
         if (v == "reference_max") {
           c.metrics.range = MetricConfig::Range::ReferenceMax;
         } else if (v == "fixed") {
           c.metrics.range = MetricConfig::Range::Fixed;
         } else {
           throw ConfigError("config key metrics.range: expected reference_max|fixed, got '" + v + "'");
         }
       },
       [](const RunConfig& c) {
         return std::string(c.metrics.range == MetricConfig::Range::Fixed ? "fixed" : "reference_max");
       }},
      number<double>("metrics.fixed_range", FIELD(c.metrics.fixed_range)),
      number<int>("metrics.entropy_levels", FIELD(c.metrics.entropy_levels)),
      number<int>("metrics.piella_window", FIELD(c.metrics.piella_window)),
      number<int>("metrics.piella_step", FIELD(c.metrics.piella_step)),
      number<int>("io.maxval", FIELD(c.image_maxval)),
      number<Index>("check.height", FIELD(c.check_height)),
      number<Index>("check.width", FIELD(c.check_width)),
      number<Index>("check.batch", FIELD(c.check_batch)),
      number<int>("verbosity", FIELD(c.verbosity)),
  };
  return table;
}

#undef FIELD

const Key& find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace

RunConfig::RunConfig() {
  phantom.seed = 7;
  phantom.count = 250;
}

void RunConfig::validate() const {
  train.validate();
  metrics.validate();
  phantom.validate();
  if (phantom_train < 0 || phantom_train > phantom.count) throw ConfigError("phantom.train must lie in [0, phantom.count]");
  if (model.blocks < 1) throw ConfigError("model.blocks must be >= 1");
  if (model.hidden < 1) throw ConfigError("model.hidden must be >= 1");
  if (!(model.s_clamp > 0.0)) throw ConfigError("model.s_clamp must be positive");
  if (min_channels < 0) throw ConfigError("task.min_channels must be >= 0");
  if (image_maxval < 1 || image_maxval > 65535) throw ConfigError("io.maxval must lie in [1, 65535]");
  if (check_height < 1 || check_width < 1 || check_batch < 1) throw ConfigError("check sizes must be positive");
  if (out.empty()) throw ConfigError("out must not be empty");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_key(key).get(cfg); }

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string resolved_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace ivan

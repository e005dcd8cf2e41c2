#include "ivan/dataio.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace ivan {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Phantoms.

double ModalityPreset::apply(double a, bool lesion, bool bone) const {
  if (show_bone && bone) return bone_value;
  if (show_lesions && lesion) return lesion_value;
  switch (curve) {
    case Curve::Identity:
      return a;
    case Curve::Flip:
      return 1.0 - a;
    case Curve::Gamma:
      return std::pow(a, param);
    case Curve::Scale:
      return param * a;
    case Curve::ScaledFlip:
      return param * (1.0 - a);
  }
  return a;
}

ModalityPreset phantom_preset(const std::string& name) {
  using C = ModalityPreset::Curve;
  // MR-like contrasts show cortical bone dark; lesions are bright on T2 and PD
  // and invisible on T1.
  if (name == "T1") return {"T1", C::Identity, 1.0, false, 1.0, true, 0.0};
  if (name == "T2") return {"T2", C::Flip, 1.0, true, 1.0, true, 0.0};
  if (name == "PD") return {"PD", C::Gamma, 0.5, true, 1.0, true, 0.0};
  if (name == "CT") return {"CT", C::Scale, 0.25, false, 1.0, true, 1.0};
  if (name == "FUSED") return {"FUSED", C::ScaledFlip, 0.85, false, 1.0, true, 1.0};
  throw ConfigError("unknown phantom modality '" + name + "' (expected T1, T2, PD, CT or FUSED)");
}

std::vector<std::string> phantom_preset_names() { return {"T1", "T2", "PD", "CT", "FUSED"}; }

void PhantomSpec::validate() const {
  if (count < 1) throw ConfigError("phantom count must be positive");
  if (height < 8 || width < 8) throw ConfigError("phantom images must be at least 8x8");
  if (min_ellipses < 1 || max_ellipses < min_ellipses) throw ConfigError("bad phantom ellipse count range");
  std::set<std::string> names;
  for (const auto& m : modalities) {
    if (!names.insert(m.name).second) throw ConfigError("duplicate phantom modality " + m.name);
  }
}

namespace {

struct Ellipse {
  double cy, cx, ay, ax, angle;

  bool contains(double y, double x, double scale = 1.0) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / (ax * scale);
    const double v = (-dx * s + dy * c) / (ay * scale);
    return u * u + v * v <= 1.0;
  }
};

Ellipse random_ellipse(Rng& rng, double h, double w, double centre_lo, double centre_hi, double axis_lo, double axis_hi) {
  Ellipse e;
  e.cy = h * rng.uniform(centre_lo, centre_hi);
  e.cx = w * rng.uniform(centre_lo, centre_hi);
  e.ay = h * rng.uniform(axis_lo, axis_hi);
  e.ax = w * rng.uniform(axis_lo, axis_hi);
  e.angle = rng.uniform(0.0, std::numbers::pi);
  return e;
}

}  // namespace

Dataset generate_phantoms(const PhantomSpec& spec) {
  spec.validate();
  std::vector<ModalityPreset> mods = spec.modalities;
  if (mods.empty()) {
    for (const auto& n : phantom_preset_names()) mods.push_back(phantom_preset(n));
  }
  for (auto& m : mods) {
    m.show_lesions = m.show_lesions && spec.lesions;
    m.show_bone = m.show_bone && spec.bone;
  }
  const Index h = spec.height, w = spec.width;
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  Rng rng(spec.seed);
  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.count));
  Eigen::ArrayXXd anatomy(h, w);
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> lesion(h, w), bone(h, w);

  for (Index i = 0; i < spec.count; ++i) {
    anatomy.setZero();
    lesion.setConstant(false);
    bone.setConstant(false);
    const int n = spec.min_ellipses + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_ellipses - spec.min_ellipses + 1)));
    const Ellipse head = random_ellipse(rng, hd, wd, 0.45, 0.55, 0.32, 0.45);
    std::vector<std::pair<Ellipse, double>> shapes{{head, rng.uniform(0.1, 0.7)}};
    for (int e = 1; e < n; ++e) shapes.emplace_back(random_ellipse(rng, hd, wd, 0.3, 0.7, 0.08, 0.25), rng.uniform(0.1, 0.7));
    const int lesions = 1 + static_cast<int>(rng.below(2));
    std::vector<Ellipse> spots;
    for (int e = 0; e < lesions; ++e) spots.push_back(random_ellipse(rng, hd, wd, 0.38, 0.62, 0.06, 0.12));

    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        const bool in_head = head.contains(py, px);
        for (const auto& [ellipse, value] : shapes) {
          if (ellipse.contains(py, px) && in_head) anatomy(y, x) = value;
        }
        bone(y, x) = in_head && !head.contains(py, px, 0.85);
        for (const auto& s : spots) lesion(y, x) = lesion(y, x) || (in_head && !bone(y, x) && s.contains(py, px));
      }
    }

    Record rec;
    rec.id = "phantom_" + std::to_string(i);
    for (const auto& m : mods) {
      PlaneTensor<float> img(1, 1, h, w);
      auto plane = img.plane(0, 0);
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          plane(y, x) = static_cast<float>(2.0 * m.apply(anatomy(y, x), lesion(y, x), bone(y, x)) - 1.0);
        }
      }
      rec.images.emplace(m.name, std::move(img));
    }
    data.push_back(std::move(rec));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Files.

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path);
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const fs::path target(path);
  if (target.has_parent_path() && !fs::exists(target.parent_path())) {
    throw IoError("directory does not exist: " + target.parent_path().string());
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// PGM / PPM.

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

  long next_int() {
    skip_space();
    const std::size_t start = pos_;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    if (start == pos_) throw FormatError(path_ + ": malformed image header");
    long v = 0;
    const auto res = std::from_chars(b_.data() + start, b_.data() + pos_, v);
    if (res.ec != std::errc()) throw FormatError(path_ + ": header value out of range");
    return v;
  }

  std::size_t data_start() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      throw FormatError(path_ + ": malformed image header");
    }
    return pos_ + 1;
  }

  void skip(std::size_t n) { pos_ += n; }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

RawImage load_image(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError(path + ": not a PGM/PPM file");
  int channels = 0;
  if (bytes[1] == '5') {
    channels = 1;
  } else if (bytes[1] == '6') {
    channels = 3;
  } else {
    throw FormatError(path + ": unsupported format P" + std::string(1, bytes[1]) + " (binary P5/P6 only)");
  }
  HeaderReader hdr(bytes, path);
  hdr.skip(2);
  const long w = hdr.next_int(), h = hdr.next_int(), maxval = hdr.next_int();
  if (w < 1 || h < 1) throw FormatError(path + ": bad image dimensions");
  if (maxval < 1 || maxval > 65535) throw FormatError(path + ": maxval out of range");
  if (channels == 3 && maxval > 255) throw FormatError(path + ": 16-bit PPM is not supported");
  const std::size_t start = hdr.data_start();
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(channels) * bps;
  if (bytes.size() - start < need) throw FormatError(path + ": truncated pixel data");

  RawImage img{PlaneTensor<float>(1, channels, h, w), static_cast<int>(maxval)};
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        unsigned v = *p++;
        if (bps == 2) v = (v << 8) | *p++;
        if (v > static_cast<unsigned>(maxval)) throw FormatError(path + ": sample exceeds maxval");
        img.pixels.plane(0, c)(y, x) = static_cast<float>(v);
      }
    }
  }
  return img;
}

void save_image(const std::string& path, const PlaneTensor<float>& pixels, int maxval) {
  if (pixels.batch() != 1) throw ShapeError("save_image: expected a single image");
  const Index c = pixels.channels();
  if (c != 1 && c != 3) throw ShapeError("save_image: 1 or 3 channels required");
  if (maxval < 1 || maxval > 65535 || (c == 3 && maxval > 255)) throw ShapeError("save_image: unsupported maxval");
  std::string out = (c == 1 ? "P5\n" : "P6\n") + std::to_string(pixels.width()) + " " + std::to_string(pixels.height()) +
                    "\n" + std::to_string(maxval) + "\n";
  const bool wide = maxval > 255;
  for (Index y = 0; y < pixels.height(); ++y) {
    for (Index x = 0; x < pixels.width(); ++x) {
      for (Index ch = 0; ch < c; ++ch) {
        const float f = pixels.plane(0, ch)(y, x);
        if (!std::isfinite(f)) throw NumericError("save_image: non-finite sample");
        const long v = std::lround(f);
        if (v < 0 || v > maxval) throw ShapeError("save_image: sample out of [0, maxval]");
        if (wide) out.push_back(static_cast<char>((v >> 8) & 0xff));
        out.push_back(static_cast<char>(v & 0xff));
      }
    }
  }
  write_file_atomic(path, out);
}

PlaneTensor<float> load_normalized(const std::string& path) {
  RawImage img = load_image(path);
  return normalize(img.pixels, 0.0, static_cast<double>(img.maxval));
}

void save_normalized(const std::string& path, const PlaneTensor<float>& x, int maxval) {
  PlaneTensor<float> raw = denormalize(x, 0.0, static_cast<double>(maxval));
  typename PlaneTensor<float>::Array v = raw.values().round().cwiseMax(0.0f).cwiseMin(static_cast<float>(maxval));
  save_image(path, PlaneTensor<float>(raw.shape(), std::move(v)), maxval);
}

// ---------------------------------------------------------------------------
// Manifests.

void DatasetManifest::validate() const {
  std::set<std::string> names;
  for (const auto& m : modalities) {
    if (!names.insert(m.modality.name).second) throw FormatError("manifest: duplicate modality " + m.modality.name);
    if (!(m.hi > m.lo)) throw FormatError("manifest: degenerate range for " + m.modality.name);
  }
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (!ids.insert(r.id).second) throw FormatError("manifest: duplicate record id " + r.id);
    if (r.split != "train" && r.split != "test") throw FormatError("manifest: record " + r.id + " has split '" + r.split + "'");
    for (const auto& m : modalities) {
      if (!r.files.count(m.modality.name)) throw FormatError("manifest: record " + r.id + " lacks " + m.modality.name);
    }
    for (const auto& [name, file] : r.files) {
      if (!names.count(name)) throw FormatError("manifest: record " + r.id + " names undeclared modality " + name);
    }
  }
}

const ManifestModality& DatasetManifest::find(const std::string& name) const {
  for (const auto& m : modalities) {
    if (m.modality.name == name) return m;
  }
  throw ShapeError("manifest has no modality " + name);
}

DatasetManifest read_manifest(const std::string& path) {
  std::istringstream in(read_file(path));
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind) || kind[0] == '#') continue;
    const std::string where = path + ":" + std::to_string(lineno);
    if (kind == "modality") {
      ManifestModality mm;
      if (!(ls >> mm.modality.name >> mm.modality.channels >> mm.lo >> mm.hi)) throw FormatError(where + ": bad modality line");
      if (mm.modality.channels != 1 && mm.modality.channels != 3) throw FormatError(where + ": channels must be 1 or 3");
      m.modalities.push_back(mm);
    } else if (kind == "record") {
      ManifestRecord r;
      if (!(ls >> r.id >> r.split)) throw FormatError(where + ": bad record line");
      std::string pair;
      while (ls >> pair) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == pair.size()) throw FormatError(where + ": expected NAME=PATH");
        if (!r.files.emplace(pair.substr(0, eq), pair.substr(eq + 1)).second) {
          throw FormatError(where + ": modality listed twice");
        }
      }
      m.records.push_back(std::move(r));
    } else {
      throw FormatError(where + ": unknown entry '" + kind + "'");
    }
  }
  m.validate();
  return m;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  manifest.validate();
  std::ostringstream os;
  os.precision(17);
  for (const auto& mm : manifest.modalities) {
    os << "modality " << mm.modality.name << ' ' << mm.modality.channels << ' ' << mm.lo << ' ' << mm.hi << '\n';
  }
  for (const auto& r : manifest.records) {
    os << "record " << r.id << ' ' << r.split;
    for (const auto& [name, file] : r.files) os << ' ' << name << '=' << file;
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

Dataset load_dataset(const DatasetManifest& manifest, const std::string& split) {
  Dataset data;
  for (const auto& r : manifest.records) {
    if (!split.empty() && r.split != split) continue;
    Record rec;
    rec.id = r.id;
    for (const auto& mm : manifest.modalities) {
      fs::path file(r.files.at(mm.modality.name));
      if (file.is_relative() && !manifest.base_dir.empty()) file = fs::path(manifest.base_dir) / file;
      RawImage img = load_image(file.string());
      if (img.pixels.channels() != mm.modality.channels) {
        throw FormatError(file.string() + ": expected " + std::to_string(mm.modality.channels) + " channels");
      }
      rec.images.emplace(mm.modality.name, normalize(img.pixels, mm.lo, mm.hi));
    }
    const auto& first = rec.images.begin()->second;
    for (const auto& [name, img] : rec.images) {
      if (img.height() != first.height() || img.width() != first.width()) {
        throw FormatError("record " + r.id + ": modalities are not the same size");
      }
    }
    data.push_back(std::move(rec));
  }
  return data;
}

DatasetManifest write_phantom_dataset(const std::string& dir, const Dataset& data, Index train_count) {
  if (data.empty()) throw ShapeError("write_phantom_dataset: no records");
  fs::create_directories(dir);
  DatasetManifest m;
  m.base_dir = dir;
  constexpr int kMax = 65535;
  for (const auto& [name, img] : data.front().images) {
    m.modalities.push_back({{name, static_cast<int>(img.channels())}, 0.0, static_cast<double>(kMax)});
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    ManifestRecord r;
    r.id = data[i].id;
    r.split = static_cast<Index>(i) < train_count ? "train" : "test";
    for (const auto& [name, img] : data[i].images) {
      const std::string file = r.id + "_" + name + ".pgm";
      save_normalized((fs::path(dir) / file).string(), img, kMax);
      r.files.emplace(name, file);
    }
    m.records.push_back(std::move(r));
  }
  write_manifest((fs::path(dir) / "manifest.txt").string(), m);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

constexpr const char* kMagic = "IVAN-CHECKPOINT";
constexpr const char* kManifestEnd = "end_manifest\n";

template <typename T>
std::string fmt(T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("checkpoint: bad value for " + key + ": '" + s + "'");
  }
  return v;
}

void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint32_t crc_of(const std::string& bytes, std::size_t offset, std::size_t count) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset), static_cast<uInt>(count));
  return static_cast<std::uint32_t>(crc);
}

FlowModel<float> skeleton(Index channels, Index blocks, Index hidden, float slope, float s_clamp) {
  if (channels < 2 || channels % 2 != 0 || blocks < 1 || hidden < 1) throw FormatError("checkpoint: invalid model topology");
  FlowModel<float> m;
  m.channels = channels;
  m.hidden = hidden;
  m.slope = slope;
  m.s_clamp = s_clamp;
  for (Index k = 0; k < blocks; ++k) {
    InvertibleBlock<float> b;
    b.mixing = RowMatrix<float>::Zero(channels, channels);
    b.coupling = CouplingLayer<float>(channels, channels / 2, hidden, slope, s_clamp);
    m.blocks.push_back(std::move(b));
  }
  return m;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const auto& model = ckpt.model;
  const auto& cfg = ckpt.config;
  std::ostringstream man;
  man << kMagic << '\n';
  man << "format_version = " << kCheckpointVersion << '\n';
  man << "model.channels = " << model.channels << '\n';
  man << "model.blocks = " << model.depth() << '\n';
  man << "model.hidden = " << model.hidden << '\n';
  man << "model.slope = " << fmt(model.slope) << '\n';
  man << "model.s_clamp = " << fmt(model.s_clamp) << '\n';
  man << plan_to_text(ckpt.plan);
  man << "train.lambda = " << fmt(cfg.lambda) << '\n';
  man << "train.loss_norm = " << loss_norm_name(cfg.loss_norm) << '\n';
  man << "train.epochs = " << cfg.epochs << '\n';
  man << "train.lr0 = " << fmt(cfg.lr0) << '\n';
  man << "train.halve_every = " << cfg.halve_every << '\n';
  man << "train.batch_size = " << cfg.batch_size << '\n';
  man << "train.seed = " << cfg.seed << '\n';
  man << "train.adam_beta1 = " << fmt(cfg.adam_beta1) << '\n';
  man << "train.adam_beta2 = " << fmt(cfg.adam_beta2) << '\n';
  man << "train.adam_eps = " << fmt(cfg.adam_eps) << '\n';
  man << "train.clip_norm = " << fmt(cfg.clip_norm) << '\n';
  man << "train.rotate = " << (cfg.rotate ? 1 : 0) << '\n';
  man << "epoch = " << ckpt.epoch << '\n';

  std::string blobs;
  std::ostringstream table;
  std::size_t count = 0;
  visit_parameters(model, [&](const std::string& name, const auto& p) {
    const std::size_t offset = blobs.size();
    for (Index i = 0; i < p.size(); ++i) put_le32(blobs, std::bit_cast<std::uint32_t>(p.data()[i]));
    const std::size_t bytes = blobs.size() - offset;
    table << "blob " << name << ' ' << offset << ' ' << bytes << ' ' << p.rows() << ' ' << p.cols() << ' '
          << crc_of(blobs, offset, bytes) << '\n';
    ++count;
  });
  man << "blob.count = " << count << '\n' << table.str() << kManifestEnd;
  return man.str() + blobs;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::string end_marker = std::string("\n") + kManifestEnd;
  const auto end = bytes.find(end_marker);
  if (bytes.rfind(std::string(kMagic) + "\n", 0) != 0) throw FormatError("checkpoint: bad magic");
  if (end == std::string::npos) throw FormatError("checkpoint: manifest terminator missing (truncated?)");
  const std::size_t data_start = end + end_marker.size();

  std::map<std::string, std::string> kv;
  struct BlobEntry {
    std::string name;
    std::size_t offset, bytes;
    Index rows, cols;
    std::uint32_t crc;
  };
  std::vector<BlobEntry> table;
  std::istringstream in(bytes.substr(0, end + 1));
  std::string line;
  std::getline(in, line);
  std::string plan_text;
  while (std::getline(in, line)) {
    if (line.rfind("blob ", 0) == 0) {
      std::istringstream ls(line.substr(5));
      BlobEntry b;
      if (!(ls >> b.name >> b.offset >> b.bytes >> b.rows >> b.cols >> b.crc)) throw FormatError("checkpoint: bad blob entry");
      table.push_back(b);
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError("checkpoint: bad manifest line '" + line + "'");
    const std::string key = line.substr(0, eq);
    if (key.rfind("plan.", 0) == 0) {
      plan_text += line + "\n";
    } else if (!kv.emplace(key, line.substr(eq + 3)).second) {
      throw FormatError("checkpoint: duplicate key " + key);
    }
  }
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("checkpoint: missing " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };

  const int version = parse_number<int>("format_version", take("format_version"));
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  const Index channels = parse_number<Index>("model.channels", take("model.channels"));
  const Index blocks = parse_number<Index>("model.blocks", take("model.blocks"));
  const Index hidden = parse_number<Index>("model.hidden", take("model.hidden"));
  const float slope = parse_number<float>("model.slope", take("model.slope"));
  const float s_clamp = parse_number<float>("model.s_clamp", take("model.s_clamp"));
  try {
    ckpt.model = skeleton(channels, blocks, hidden, slope, s_clamp);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint: invalid model topology: ") + e.what());
  }
  ckpt.plan = plan_from_text(plan_text);
  if (ckpt.plan.channels != channels) throw FormatError("checkpoint: plan and model channel counts differ");

  auto& cfg = ckpt.config;
  cfg.lambda = parse_number<double>("train.lambda", take("train.lambda"));
  try {
    cfg.loss_norm = parse_loss_norm(take("train.loss_norm"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  cfg.epochs = parse_number<int>("train.epochs", take("train.epochs"));
  cfg.lr0 = parse_number<double>("train.lr0", take("train.lr0"));
  cfg.halve_every = parse_number<int>("train.halve_every", take("train.halve_every"));
  cfg.batch_size = parse_number<int>("train.batch_size", take("train.batch_size"));
  cfg.seed = parse_number<std::uint64_t>("train.seed", take("train.seed"));
  cfg.adam_beta1 = parse_number<double>("train.adam_beta1", take("train.adam_beta1"));
  cfg.adam_beta2 = parse_number<double>("train.adam_beta2", take("train.adam_beta2"));
  cfg.adam_eps = parse_number<double>("train.adam_eps", take("train.adam_eps"));
  cfg.clip_norm = parse_number<double>("train.clip_norm", take("train.clip_norm"));
  cfg.rotate = parse_number<int>("train.rotate", take("train.rotate")) != 0;
  ckpt.epoch = parse_number<int>("epoch", take("epoch"));
  const std::size_t count = parse_number<std::size_t>("blob.count", take("blob.count"));
  if (!kv.empty()) throw FormatError("checkpoint: unknown key " + kv.begin()->first);
  if (count != table.size()) throw FormatError("checkpoint: blob count does not match the table");

  const std::size_t payload = bytes.size() - data_start;
  std::size_t index = 0, expected_offset = 0;
  visit_parameters(ckpt.model, [&](const std::string& name, auto& p) {
    if (index >= table.size()) throw FormatError("checkpoint: missing blob for " + name);
    const BlobEntry& b = table[index++];
    if (b.name != name) throw FormatError("checkpoint: expected blob " + name + ", found " + b.name);
    if (b.rows != p.rows() || b.cols != p.cols()) throw FormatError("checkpoint: blob " + name + " has the wrong shape");
    if (b.offset != expected_offset || b.bytes != static_cast<std::size_t>(p.size()) * 4) {
      throw FormatError("checkpoint: corrupt blob table at " + name);
    }
    if (b.offset + b.bytes > payload) throw FormatError("checkpoint: blob " + name + " is truncated");
    if (crc_of(bytes, data_start + b.offset, b.bytes) != b.crc) throw FormatError("checkpoint: checksum mismatch in " + name);
    const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + data_start + b.offset);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = std::bit_cast<float>(get_le32(src + 4 * i));
    expected_offset += b.bytes;
  });
  if (index != table.size()) throw FormatError("checkpoint: unexpected extra blobs");
  if (expected_offset != payload) throw FormatError("checkpoint: trailing bytes after the last blob");
  visit_parameters(ckpt.model, [](const std::string& name, const auto& p) {
    if (!p.allFinite()) throw FormatError("checkpoint: non-finite values in " + name);
  });
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file_atomic(path, serialize_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace ivan

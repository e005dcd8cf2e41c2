#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ivan/error.hpp"

namespace ivan {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Channel-major activation storage: one row per channel, one column per
// (batch, y, x) position.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct Shape {
  Index batch = 0;
  Index channels = 0;
  Index height = 0;
  Index width = 0;

  Index size() const { return batch * channels * height * width; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << batch << ',' << channels << ',' << height << ',' << width << ')';
    return os.str();
  }
};

/// Rank-4 real array in N-C-H-W row-major order. This is the public image
/// and activation carrier; the flow internals convert to Features.
template <typename Scalar>
class PlaneTensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  PlaneTensor() = default;

  PlaneTensor(Index n, Index c, Index h, Index w) : shape_{n, c, h, w}, data_(Array::Zero(shape_.size())) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  }

  explicit PlaneTensor(const Shape& s) : PlaneTensor(s.batch, s.channels, s.height, s.width) {}

  PlaneTensor(const Shape& s, Array values) : shape_(s), data_(std::move(values)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " + s.str());
    }
  }

  static PlaneTensor constant(const Shape& s, Scalar value) {
    return PlaneTensor(s, Array::Constant(s.size(), value));
  }

  const Shape& shape() const { return shape_; }
  Index batch() const { return shape_.batch; }
  Index channels() const { return shape_.channels; }
  Index height() const { return shape_.height; }
  Index width() const { return shape_.width; }
  Index size() const { return data_.size(); }

  Scalar& operator()(Index n, Index c, Index y, Index x) { return data_[offset(n, c, y, x)]; }
  Scalar operator()(Index n, Index c, Index y, Index x) const { return data_[offset(n, c, y, x)]; }

  Array& values() { return data_; }
  const Array& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  /// One (height x width) plane, as a row-major map.
  Eigen::Map<RowMatrix<Scalar>> plane(Index n, Index c) {
    return Eigen::Map<RowMatrix<Scalar>>(data_.data() + offset(n, c, 0, 0), shape_.height, shape_.width);
  }
  Eigen::Map<const RowMatrix<Scalar>> plane(Index n, Index c) const {
    return Eigen::Map<const RowMatrix<Scalar>>(data_.data() + offset(n, c, 0, 0), shape_.height, shape_.width);
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  PlaneTensor<Other> cast() const {
    return PlaneTensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Index offset(Index n, Index c, Index y, Index x) const {
    return ((n * shape_.channels + c) * shape_.height + y) * shape_.width + x;
  }

  Shape shape_;
  Array data_;
};

using Tensorf = PlaneTensor<float>;
using Tensord = PlaneTensor<double>;

template <typename Scalar>
void ensure_finite(const PlaneTensor<Scalar>& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

/// Channels [begin, begin + count) of every batch element.
template <typename Scalar>
PlaneTensor<Scalar> slice_channels(const PlaneTensor<Scalar>& t, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > t.channels()) throw ShapeError("channel slice out of range");
  PlaneTensor<Scalar> out(t.batch(), count, t.height(), t.width());
  const Index plane = t.height() * t.width();
  for (Index n = 0; n < t.batch(); ++n) {
    const Scalar* src = t.data() + (n * t.channels() + begin) * plane;
    std::copy(src, src + count * plane, out.data() + n * count * plane);
  }
  return out;
}

template <typename Scalar>
PlaneTensor<Scalar> concat_channels(const PlaneTensor<Scalar>& a, const PlaneTensor<Scalar>& b) {
  if (a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat_channels: mismatched shapes " + a.shape().str() + " and " + b.shape().str());
  }
  PlaneTensor<Scalar> out(a.batch(), a.channels() + b.channels(), a.height(), a.width());
  const Index plane = a.height() * a.width();
  for (Index n = 0; n < a.batch(); ++n) {
    Scalar* dst = out.data() + n * out.channels() * plane;
    dst = std::copy(a.data() + n * a.channels() * plane, a.data() + (n + 1) * a.channels() * plane, dst);
    std::copy(b.data() + n * b.channels() * plane, b.data() + (n + 1) * b.channels() * plane, dst);
  }
  return out;
}

/// Concatenates along the batch axis.
template <typename Scalar>
PlaneTensor<Scalar> concat_batch(const std::vector<PlaneTensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no tensors");
  Shape s = parts.front().shape();
  s.batch = 0;
  for (const auto& p : parts) {
    if (p.channels() != s.channels || p.height() != s.height || p.width() != s.width) {
      throw ShapeError("concat_batch: mismatched shapes");
    }
    s.batch += p.batch();
  }
  PlaneTensor<Scalar> out(s);
  Scalar* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return out;
}

// ---------------------------------------------------------------------------
// Channel-major working representation.

struct Grid {
  Index batch = 0;
  Index height = 0;
  Index width = 0;

  Index positions() const { return batch * height * width; }
  bool operator==(const Grid&) const = default;
};

template <typename Scalar>
struct Features {
  RowMatrix<Scalar> values;  // channels x positions
  Grid grid;

  Index channels() const { return values.rows(); }
};

template <typename Scalar>
Features<Scalar> to_features(const PlaneTensor<Scalar>& t) {
  Features<Scalar> f;
  f.grid = {t.batch(), t.height(), t.width()};
  f.values.resize(t.channels(), f.grid.positions());
  const Index plane = t.height() * t.width();
  for (Index n = 0; n < t.batch(); ++n) {
    for (Index c = 0; c < t.channels(); ++c) {
      const Scalar* src = t.data() + (n * t.channels() + c) * plane;
      std::copy(src, src + plane, f.values.row(c).data() + n * plane);
    }
  }
  return f;
}

template <typename Scalar>
PlaneTensor<Scalar> to_tensor(const Features<Scalar>& f) {
  PlaneTensor<Scalar> t(f.grid.batch, f.channels(), f.grid.height, f.grid.width);
  const Index plane = f.grid.height * f.grid.width;
  for (Index n = 0; n < f.grid.batch; ++n) {
    for (Index c = 0; c < f.channels(); ++c) {
      const Scalar* src = f.values.row(c).data() + n * plane;
      std::copy(src, src + plane, t.data() + (n * f.channels() + c) * plane);
    }
  }
  return t;
}

}  // namespace ivan

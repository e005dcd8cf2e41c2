#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <string>

#include "ivan/error.hpp"
#include "ivan/tensor.hpp"

namespace ivan {

/// Smallest |det| accepted for a row-equilibrated mixing matrix.
inline constexpr double kDetEpsilon = 1e-8;

/// 3x3 "same" convolution, stride 1, zero padding 1.
///
/// `weight` is [out_ch, in_ch * 9] row-major, which is exactly the flattened
/// [out_ch, in_ch, 3, 3] kernel array; column index = ci * 9 + ky * 3 + kx.
template <typename Scalar>
struct ConvLayer {
  RowMatrix<Scalar> weight;
  Vector<Scalar> bias;

  ConvLayer() = default;
  ConvLayer(Index in_ch, Index out_ch) : weight(RowMatrix<Scalar>::Zero(out_ch, in_ch * 9)), bias(Vector<Scalar>::Zero(out_ch)) {}

  Index in_channels() const { return weight.cols() / 9; }
  Index out_channels() const { return weight.rows(); }

  template <typename Other>
  ConvLayer<Other> cast() const {
    ConvLayer<Other> c;
    c.weight = weight.template cast<Other>();
    c.bias = bias.template cast<Other>();
    return c;
  }
};

namespace detail {

/// Unfolds 3x3 neighbourhoods: col has in_ch*9 rows, one per (channel, tap).
template <typename Scalar>
void im2col(const RowMatrix<Scalar>& in, const Grid& g, RowMatrix<Scalar>& col) {
  const Index h = g.height, w = g.width, hw = h * w;
  col.resize(in.rows() * 9, g.positions());
  for (Index ci = 0; ci < in.rows(); ++ci) {
    const Scalar* src = in.row(ci).data();
    for (Index tap = 0; tap < 9; ++tap) {
      const Index dy = tap / 3 - 1, dx = tap % 3 - 1;
      Scalar* dst = col.row(ci * 9 + tap).data();
      const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(w, w - dx);
      for (Index b = 0; b < g.batch; ++b) {
        for (Index y = 0; y < h; ++y) {
          Scalar* d = dst + b * hw + y * w;
          const Index ys = y + dy;
          if (ys < 0 || ys >= h) {
            std::fill(d, d + w, Scalar(0));
            continue;
          }
          const Scalar* s = src + b * hw + ys * w;
          if (x0 > 0) d[0] = Scalar(0);
          if (x1 < w) d[w - 1] = Scalar(0);
          std::memcpy(d + x0, s + x0 + dx, sizeof(Scalar) * static_cast<size_t>(x1 - x0));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the input grid.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, const Grid& g, Index in_ch, RowMatrix<Scalar>& out) {
  const Index h = g.height, w = g.width, hw = h * w;
  out.setZero(in_ch, g.positions());
  for (Index ci = 0; ci < in_ch; ++ci) {
    Scalar* dst = out.row(ci).data();
    for (Index tap = 0; tap < 9; ++tap) {
      const Index dy = tap / 3 - 1, dx = tap % 3 - 1;
      const Scalar* src = col.row(ci * 9 + tap).data();
      const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(w, w - dx);
      for (Index b = 0; b < g.batch; ++b) {
        for (Index y = 0; y < h; ++y) {
          const Index ys = y + dy;
          if (ys < 0 || ys >= h) continue;
          const Scalar* s = src + b * hw + y * w;
          Scalar* d = dst + b * hw + ys * w;
          for (Index x = x0; x < x1; ++x) d[x + dx] += s[x];
        }
      }
    }
  }
}

}  // namespace detail

/// Channel-major convolution used by the flow internals.
template <typename Scalar>
RowMatrix<Scalar> conv_forward(const ConvLayer<Scalar>& layer, const RowMatrix<Scalar>& in, const Grid& g,
                               RowMatrix<Scalar>& scratch) {
  if (in.rows() != layer.in_channels()) {
    throw ShapeError("conv: input has " + std::to_string(in.rows()) + " channels, kernel expects " +
                     std::to_string(layer.in_channels()));
  }
  detail::im2col(in, g, scratch);
  RowMatrix<Scalar> out(layer.out_channels(), g.positions());
  out.noalias() = layer.weight * scratch;
  out.colwise() += layer.bias;
  return out;
}

/// Accumulates weight/bias gradients into `grad` and returns d(loss)/d(in).
template <typename Scalar>
RowMatrix<Scalar> conv_backward(const ConvLayer<Scalar>& layer, const RowMatrix<Scalar>& in, const Grid& g,
                                const RowMatrix<Scalar>& grad_out, ConvLayer<Scalar>& grad, RowMatrix<Scalar>& scratch) {
  detail::im2col(in, g, scratch);
  grad.weight.noalias() += grad_out * scratch.transpose();
  grad.bias.noalias() += grad_out.rowwise().sum();
  scratch.noalias() = layer.weight.transpose() * grad_out;
  RowMatrix<Scalar> grad_in;
  detail::col2im(scratch, g, layer.in_channels(), grad_in);
  return grad_in;
}

/// 3x3 same-size convolution over an N-C-H-W tensor.
template <typename Scalar>
PlaneTensor<Scalar> conv2d_same(const PlaneTensor<Scalar>& input, const ConvLayer<Scalar>& layer) {
  if (input.channels() != layer.in_channels()) {
    throw ShapeError("conv2d_same: input has " + std::to_string(input.channels()) + " channels, kernel expects " +
                     std::to_string(layer.in_channels()));
  }
  if (layer.bias.size() != layer.out_channels()) throw ShapeError("conv2d_same: bias length mismatch");
  if (!layer.weight.allFinite() || !layer.bias.allFinite()) throw NumericError("conv2d_same: non-finite weights");
  const Features<Scalar> f = to_features(input);
  RowMatrix<Scalar> scratch;
  Features<Scalar> out{conv_forward(layer, f.values, f.grid, scratch), f.grid};
  return to_tensor(out);
}

template <typename Derived>
auto leaky_relu(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar slope) {
  return x.cwiseMax(slope * x);
}

template <typename Scalar>
PlaneTensor<Scalar> leaky_relu(const PlaneTensor<Scalar>& x, Scalar slope) {
  if (!(slope >= Scalar(0) && slope < Scalar(1))) throw ShapeError("leaky_relu: slope must lie in [0, 1)");
  return PlaneTensor<Scalar>(x.shape(), leaky_relu(x.values(), slope));
}

/// Determinant of the row-equilibrated matrix; the invertibility certificate.
template <typename Derived>
double equilibrated_determinant(const Eigen::MatrixBase<Derived>& w) {
  Matrix<double> m = w.template cast<double>();
  for (Index i = 0; i < m.rows(); ++i) {
    const double scale = m.row(i).cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || !std::isfinite(scale)) return 0.0;
    m.row(i) /= scale;
  }
  return m.partialPivLu().determinant();
}

/// Inverse of a square mixing matrix; `layer` names the owner in errors.
template <typename Derived>
Matrix<typename Derived::Scalar> mat_inverse(const Eigen::MatrixBase<Derived>& w, const std::string& layer = "matrix") {
  if (w.rows() != w.cols() || w.rows() == 0) throw ShapeError(layer + ": mixing matrix must be square and non-empty");
  if (!w.allFinite()) throw NumericError(layer + ": non-finite mixing matrix");
  const double det = equilibrated_determinant(w);
  if (!(std::abs(det) > kDetEpsilon)) {
    throw NumericError(layer + ": singular or near-singular mixing matrix (|det| = " + std::to_string(std::abs(det)) + ")");
  }
  using Scalar = typename Derived::Scalar;
  const Matrix<double> inv = w.template cast<double>().partialPivLu().inverse();
  return inv.template cast<Scalar>();
}

}  // namespace ivan

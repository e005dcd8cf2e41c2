#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ivan/error.hpp"
#include "ivan/numerics.hpp"
#include "ivan/rng.hpp"
#include "ivan/tensor.hpp"

namespace ivan {

inline constexpr int kSubnetDepth = 5;

/// Leaky ReLU sign patterns, recorded in evaluation order. In Replay mode the
/// recorded patterns replace the live ones, which makes the network smooth in
/// its parameters around the recording point (used by the gradient checker).
struct ActivationPatterns {
  enum class Mode { Off, Record, Replay };
  Mode mode = Mode::Off;
  std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> masks;
  std::size_t cursor = 0;
  std::size_t flips = 0;  // live signs differing from the replayed pattern

  void start(Mode m) {
    mode = m;
    cursor = 0;
    flips = 0;
    if (m == Mode::Record) masks.clear();
  }
};

/// Reusable im2col buffer; one per evaluating thread.
template <typename Scalar>
struct Workspace {
  RowMatrix<Scalar> scratch;
  ActivationPatterns* patterns = nullptr;
};

// ---------------------------------------------------------------------------
// Subnet: five 3x3 convolutions, Leaky ReLU after the first four.

template <typename Scalar>
struct Subnet {
  std::array<ConvLayer<Scalar>, kSubnetDepth> layers;
  Scalar slope = Scalar(0.2);

  Subnet() = default;
  Subnet(Index in_ch, Index hidden, Index out_ch, Scalar leaky_slope) : slope(leaky_slope) {
    if (in_ch < 1 || hidden < 1 || out_ch < 1) throw ShapeError("subnet channel counts must be positive");
    layers[0] = ConvLayer<Scalar>(in_ch, hidden);
    for (int j = 1; j < kSubnetDepth - 1; ++j) layers[j] = ConvLayer<Scalar>(hidden, hidden);
    layers[kSubnetDepth - 1] = ConvLayer<Scalar>(hidden, out_ch);
  }

  Index in_channels() const { return layers.front().in_channels(); }
  Index out_channels() const { return layers.back().out_channels(); }
  Index hidden_channels() const { return layers.front().out_channels(); }

  template <typename Other>
  Subnet<Other> cast() const {
    Subnet<Other> s;
    for (int j = 0; j < kSubnetDepth; ++j) s.layers[j] = layers[j].template cast<Other>();
    s.slope = static_cast<Other>(slope);
    return s;
  }
};

/// Layer inputs recorded during a forward evaluation (inputs[0] is the subnet
/// input, inputs[j] the activation feeding layer j).
template <typename Scalar>
struct SubnetTape {
  std::array<RowMatrix<Scalar>, kSubnetDepth> inputs;
};

namespace detail {
template <typename Scalar>
void apply_patterned(RowMatrix<Scalar>& pre, Scalar slope, ActivationPatterns& p) {
  auto live = (pre.array() > Scalar(0)).eval();
  if (p.mode == ActivationPatterns::Mode::Record) {
    p.masks.push_back(live);
  } else {
    if (p.cursor >= p.masks.size() || p.masks[p.cursor].rows() != live.rows() || p.masks[p.cursor].cols() != live.cols()) {
      throw ShapeError("activation replay does not match the recorded evaluation");
    }
    const auto& mask = p.masks[p.cursor];
    p.flips += static_cast<std::size_t>((mask != live).count());
    live = mask;
  }
  ++p.cursor;
  pre.array() *= live.template cast<Scalar>() * (Scalar(1) - slope) + slope;
}
}  // namespace detail

template <typename Scalar>
RowMatrix<Scalar> subnet_forward(const Subnet<Scalar>& net, const RowMatrix<Scalar>& x, const Grid& g,
                                 SubnetTape<Scalar>* tape, Workspace<Scalar>& ws) {
  RowMatrix<Scalar> h = x;
  for (int j = 0; j < kSubnetDepth; ++j) {
    RowMatrix<Scalar> out = conv_forward(net.layers[j], h, g, ws.scratch);
    if (j + 1 < kSubnetDepth) {
      if (ws.patterns && ws.patterns->mode != ActivationPatterns::Mode::Off) {
        detail::apply_patterned(out, net.slope, *ws.patterns);
      } else {
        out.array() = leaky_relu(out.array(), net.slope);
      }
    }
    if (tape) tape->inputs[j] = std::move(h);
    h = std::move(out);
  }
  return h;
}

/// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
template <typename Scalar>
RowMatrix<Scalar> subnet_backward(const Subnet<Scalar>& net, const SubnetTape<Scalar>& tape, const Grid& g,
                                  RowMatrix<Scalar> grad_out, Subnet<Scalar>& grad, Workspace<Scalar>& ws) {
  for (int j = kSubnetDepth - 1; j >= 0; --j) {
    RowMatrix<Scalar> grad_in = conv_backward(net.layers[j], tape.inputs[j], g, grad_out, grad.layers[j], ws.scratch);
    if (j > 0) {
      // inputs[j] is the post-activation of layer j-1; its sign equals the
      // pre-activation sign for any slope in [0, 1).
      grad_in.array() *= (tape.inputs[j].array() > Scalar(0)).template cast<Scalar>() * (Scalar(1) - net.slope) + net.slope;
    }
    grad_out = std::move(grad_in);
  }
  return grad_out;
}

// ---------------------------------------------------------------------------
// Enhanced affine coupling.

/// Smooth bound on the log-scale: s_clamp * (2/pi) * atan(raw).
template <typename Derived>
auto clamp_scale(const Eigen::ArrayBase<Derived>& raw, typename Derived::Scalar s_clamp) {
  using Scalar = typename Derived::Scalar;
  const Scalar k = s_clamp * Scalar(2) / std::numbers::pi_v<Scalar>;
  return k * raw.atan();
}

template <typename Derived>
auto clamp_scale_derivative(const Eigen::ArrayBase<Derived>& raw, typename Derived::Scalar s_clamp) {
  using Scalar = typename Derived::Scalar;
  const Scalar k = s_clamp * Scalar(2) / std::numbers::pi_v<Scalar>;
  return k / (Scalar(1) + raw.square());
}

/// n1 = m1 + r(m2); n2 = m2 * exp(clamp(s(n1))) + t(n1), split at channel d.
template <typename Scalar>
struct CouplingLayer {
  Index channels = 0;
  Index split = 0;
  Subnet<Scalar> r;  // (D-d) -> d
  Subnet<Scalar> s;  // d -> (D-d)
  Subnet<Scalar> t;  // d -> (D-d)
  Scalar s_clamp = Scalar(2);

  CouplingLayer() = default;
  CouplingLayer(Index total, Index first, Index hidden, Scalar slope, Scalar clamp)
      : channels(total),
        split(first),
        r(total - first, hidden, first, slope),
        s(first, hidden, total - first, slope),
        t(first, hidden, total - first, slope),
        s_clamp(clamp) {
    if (!(first > 0 && first < total)) throw ShapeError("coupling split must satisfy 0 < d < D");
    if (!(clamp > Scalar(0))) throw ShapeError("coupling s_clamp must be positive");
  }

  template <typename Other>
  CouplingLayer<Other> cast() const {
    CouplingLayer<Other> c;
    c.channels = channels;
    c.split = split;
    c.r = r.template cast<Other>();
    c.s = s.template cast<Other>();
    c.t = t.template cast<Other>();
    c.s_clamp = static_cast<Other>(s_clamp);
    return c;
  }
};

template <typename Scalar>
struct CouplingTape {
  SubnetTape<Scalar> r, s, t;
  RowMatrix<Scalar> second;  // m2: the untouched input half (forward) or recovered half (inverse)
  RowMatrix<Scalar> s_raw;
  RowMatrix<Scalar> scale;  // exp(+clamp(s)) forward, exp(-clamp(s)) inverse
};

namespace detail {
template <typename Scalar>
void check_finite(const RowMatrix<Scalar>& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite intermediate in " + where);
}
}  // namespace detail

template <typename Scalar>
Features<Scalar> coupling_forward(const CouplingLayer<Scalar>& layer, const Features<Scalar>& m,
                                  CouplingTape<Scalar>* tape, Workspace<Scalar>& ws,
                                  const std::string& where = "coupling") {
  if (m.channels() != layer.channels) throw ShapeError(where + ": expected " + std::to_string(layer.channels) + " channels");
  const Index d = layer.split, rest = layer.channels - d;
  const Grid& g = m.grid;
  RowMatrix<Scalar> second = m.values.bottomRows(rest);

  RowMatrix<Scalar> n1 = m.values.topRows(d);
  n1 += subnet_forward(layer.r, second, g, tape ? &tape->r : nullptr, ws);
  RowMatrix<Scalar> s_raw = subnet_forward(layer.s, n1, g, tape ? &tape->s : nullptr, ws);
  RowMatrix<Scalar> shift = subnet_forward(layer.t, n1, g, tape ? &tape->t : nullptr, ws);
  RowMatrix<Scalar> scale = clamp_scale(s_raw.array(), layer.s_clamp).exp().matrix();

  Features<Scalar> n;
  n.grid = g;
  n.values.resize(layer.channels, g.positions());
  n.values.topRows(d) = n1;
  n.values.bottomRows(rest) = (second.array() * scale.array() + shift.array()).matrix();
  detail::check_finite(n.values, where);
  if (tape) {
    tape->second = std::move(second);
    tape->s_raw = std::move(s_raw);
    tape->scale = std::move(scale);
  }
  return n;
}

template <typename Scalar>
Features<Scalar> coupling_inverse(const CouplingLayer<Scalar>& layer, const Features<Scalar>& n,
                                  CouplingTape<Scalar>* tape, Workspace<Scalar>& ws,
                                  const std::string& where = "coupling") {
  if (n.channels() != layer.channels) throw ShapeError(where + ": expected " + std::to_string(layer.channels) + " channels");
  const Index d = layer.split, rest = layer.channels - d;
  const Grid& g = n.grid;
  const RowMatrix<Scalar> n1 = n.values.topRows(d);

  RowMatrix<Scalar> s_raw = subnet_forward(layer.s, n1, g, tape ? &tape->s : nullptr, ws);
  RowMatrix<Scalar> shift = subnet_forward(layer.t, n1, g, tape ? &tape->t : nullptr, ws);
  RowMatrix<Scalar> scale = (-clamp_scale(s_raw.array(), layer.s_clamp)).exp().matrix();
  RowMatrix<Scalar> second = ((n.values.bottomRows(rest).array() - shift.array()) * scale.array()).matrix();

  Features<Scalar> m;
  m.grid = g;
  m.values.resize(layer.channels, g.positions());
  m.values.topRows(d) = n1 - subnet_forward(layer.r, second, g, tape ? &tape->r : nullptr, ws);
  m.values.bottomRows(rest) = second;
  detail::check_finite(m.values, where);
  if (tape) {
    tape->second = std::move(second);
    tape->s_raw = std::move(s_raw);
    tape->scale = std::move(scale);
  }
  return m;
}

/// Backward through coupling_forward: returns d(loss)/dm given d(loss)/dn.
template <typename Scalar>
RowMatrix<Scalar> coupling_forward_backward(const CouplingLayer<Scalar>& layer, const CouplingTape<Scalar>& tape,
                                            const Grid& g, const RowMatrix<Scalar>& grad_n, CouplingLayer<Scalar>& grad,
                                            Workspace<Scalar>& ws) {
  const Index d = layer.split, rest = layer.channels - d;
  const RowMatrix<Scalar> g2 = grad_n.bottomRows(rest);

  RowMatrix<Scalar> grad_s_raw =
      (g2.array() * tape.second.array() * tape.scale.array() * clamp_scale_derivative(tape.s_raw.array(), layer.s_clamp))
          .matrix();
  RowMatrix<Scalar> grad_n1 = grad_n.topRows(d);
  grad_n1 += subnet_backward(layer.s, tape.s, g, std::move(grad_s_raw), grad.s, ws);
  grad_n1 += subnet_backward(layer.t, tape.t, g, g2, grad.t, ws);

  RowMatrix<Scalar> grad_m(layer.channels, g.positions());
  grad_m.bottomRows(rest) = (g2.array() * tape.scale.array()).matrix();
  grad_m.bottomRows(rest) += subnet_backward(layer.r, tape.r, g, grad_n1, grad.r, ws);
  grad_m.topRows(d) = grad_n1;
  return grad_m;
}

/// Backward through coupling_inverse: returns d(loss)/dn given d(loss)/dm.
template <typename Scalar>
RowMatrix<Scalar> coupling_inverse_backward(const CouplingLayer<Scalar>& layer, const CouplingTape<Scalar>& tape,
                                            const Grid& g, const RowMatrix<Scalar>& grad_m, CouplingLayer<Scalar>& grad,
                                            Workspace<Scalar>& ws) {
  const Index d = layer.split, rest = layer.channels - d;
  const RowMatrix<Scalar> h1 = grad_m.topRows(d);

  // m1 = n1 - r(m2)
  RowMatrix<Scalar> grad_second = grad_m.bottomRows(rest);
  grad_second += subnet_backward(layer.r, tape.r, g, RowMatrix<Scalar>(-h1), grad.r, ws);

  // m2 = (n2 - t(n1)) * exp(-clamp(s(n1)))
  RowMatrix<Scalar> grad_n2 = (grad_second.array() * tape.scale.array()).matrix();
  RowMatrix<Scalar> grad_s_raw =
      (-grad_second.array() * tape.second.array() * clamp_scale_derivative(tape.s_raw.array(), layer.s_clamp)).matrix();

  RowMatrix<Scalar> grad_n(layer.channels, g.positions());
  grad_n.topRows(d) = h1;
  grad_n.topRows(d) += subnet_backward(layer.t, tape.t, g, RowMatrix<Scalar>(-grad_n2), grad.t, ws);
  grad_n.topRows(d) += subnet_backward(layer.s, tape.s, g, std::move(grad_s_raw), grad.s, ws);
  grad_n.bottomRows(rest) = grad_n2;
  return grad_n;
}

// ---------------------------------------------------------------------------
// Blocks and the model stack.

/// 1x1 channel mixing followed by an enhanced coupling.
template <typename Scalar>
struct InvertibleBlock {
  RowMatrix<Scalar> mixing;
  CouplingLayer<Scalar> coupling;

  template <typename Other>
  InvertibleBlock<Other> cast() const {
    return {mixing.template cast<Other>(), coupling.template cast<Other>()};
  }
};

template <typename Scalar>
struct FlowModel {
  Index channels = 0;
  Index hidden = 0;
  Scalar slope = Scalar(0.2);
  Scalar s_clamp = Scalar(2);
  std::vector<InvertibleBlock<Scalar>> blocks;

  Index depth() const { return static_cast<Index>(blocks.size()); }

  template <typename Other>
  FlowModel<Other> cast() const {
    FlowModel<Other> m;
    m.channels = channels;
    m.hidden = hidden;
    m.slope = static_cast<Other>(slope);
    m.s_clamp = static_cast<Other>(s_clamp);
    for (const auto& b : blocks) m.blocks.push_back(b.template cast<Other>());
    return m;
  }
};

/// Zero-filled model with identical topology; the gradient accumulator shape.
template <typename Scalar>
FlowModel<Scalar> zeros_like(const FlowModel<Scalar>& model) {
  FlowModel<Scalar> z;
  z.channels = model.channels;
  z.hidden = model.hidden;
  z.slope = model.slope;
  z.s_clamp = model.s_clamp;
  for (const auto& b : model.blocks) {
    InvertibleBlock<Scalar> zb;
    zb.mixing = RowMatrix<Scalar>::Zero(b.mixing.rows(), b.mixing.cols());
    zb.coupling = CouplingLayer<Scalar>(b.coupling.channels, b.coupling.split, b.coupling.r.hidden_channels(),
                                        b.coupling.r.slope, b.coupling.s_clamp);
    z.blocks.push_back(std::move(zb));
  }
  return z;
}

/// Calls fn(name, eigen_object) for every learnable array in a fixed order.
/// Works for const and non-const models.
template <typename Model, typename Fn>
void visit_parameters(Model& model, Fn&& fn) {
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& block = model.blocks[i];
    const std::string prefix = "block" + std::to_string(i) + ".";
    fn(prefix + "mixing", block.mixing);
    auto visit_subnet = [&](auto& net, const std::string& tag) {
      for (int j = 0; j < kSubnetDepth; ++j) {
        const std::string base = prefix + tag + ".conv" + std::to_string(j);
        fn(base + ".weight", net.layers[j].weight);
        fn(base + ".bias", net.layers[j].bias);
      }
    };
    visit_subnet(block.coupling.r, "r");
    visit_subnet(block.coupling.s, "s");
    visit_subnet(block.coupling.t, "t");
  }
}

template <typename Scalar>
std::vector<std::span<Scalar>> parameter_spans(FlowModel<Scalar>& model) {
  std::vector<std::span<Scalar>> out;
  visit_parameters(model, [&](const std::string&, auto& p) { out.emplace_back(p.data(), static_cast<std::size_t>(p.size())); });
  return out;
}

template <typename Scalar>
std::vector<std::span<const Scalar>> parameter_spans(const FlowModel<Scalar>& model) {
  std::vector<std::span<const Scalar>> out;
  visit_parameters(model, [&](const std::string&, const auto& p) {
    out.emplace_back(p.data(), static_cast<std::size_t>(p.size()));
  });
  return out;
}

template <typename Scalar>
std::vector<std::string> parameter_names(const FlowModel<Scalar>& model) {
  std::vector<std::string> out;
  visit_parameters(model, [&](const std::string& name, const auto&) { out.push_back(name); });
  return out;
}

template <typename Scalar>
Index parameter_count(const FlowModel<Scalar>& model) {
  Index n = 0;
  visit_parameters(model, [&](const std::string&, const auto& p) { n += p.size(); });
  return n;
}

template <typename Scalar>
struct ForwardTape {
  std::vector<RowMatrix<Scalar>> mixing_inputs;
  std::vector<CouplingTape<Scalar>> couplings;
};

template <typename Scalar>
struct InverseTape {
  std::vector<RowMatrix<Scalar>> mixing_inputs;  // inputs of each inverse mixing, indexed by block
  std::vector<Matrix<Scalar>> inverses;
  std::vector<CouplingTape<Scalar>> couplings;
};

/// Per-pixel channel mixing of channel-major values.
template <typename Derived, typename Scalar>
RowMatrix<Scalar> apply_mixing(const Eigen::MatrixBase<Derived>& w, const RowMatrix<Scalar>& values) {
  const RowMatrix<Scalar> wm = w.template cast<Scalar>();
  RowMatrix<Scalar> out(values.rows(), values.cols());
  out.noalias() = wm * values;
  return out;
}

inline std::string block_name(std::size_t i) { return "block " + std::to_string(i); }

template <typename Scalar>
void check_model(const FlowModel<Scalar>& model, Index channels) {
  if (model.blocks.empty()) throw ShapeError("flow model has no blocks");
  if (channels != model.channels) {
    throw ShapeError("input has " + std::to_string(channels) + " channels, model expects " + std::to_string(model.channels));
  }
}

template <typename Scalar>
Features<Scalar> model_forward(const FlowModel<Scalar>& model, Features<Scalar> x, ForwardTape<Scalar>* tape,
                               Workspace<Scalar>& ws) {
  check_model(model, x.channels());
  if (tape) {
    tape->mixing_inputs.resize(model.blocks.size());
    tape->couplings.resize(model.blocks.size());
  }
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& block = model.blocks[i];
    Features<Scalar> mixed{apply_mixing(block.mixing, x.values), x.grid};
    if (tape) tape->mixing_inputs[i] = std::move(x.values);
    x = coupling_forward(block.coupling, mixed, tape ? &tape->couplings[i] : nullptr, ws, block_name(i) + " coupling");
  }
  return x;
}

template <typename Scalar>
Features<Scalar> model_inverse(const FlowModel<Scalar>& model, Features<Scalar> y, InverseTape<Scalar>* tape,
                               Workspace<Scalar>& ws) {
  check_model(model, y.channels());
  if (tape) {
    tape->mixing_inputs.resize(model.blocks.size());
    tape->inverses.resize(model.blocks.size());
    tape->couplings.resize(model.blocks.size());
  }
  for (std::size_t k = model.blocks.size(); k-- > 0;) {
    const auto& block = model.blocks[k];
    Features<Scalar> u = coupling_inverse(block.coupling, y, tape ? &tape->couplings[k] : nullptr, ws,
                                          block_name(k) + " coupling");
    Matrix<Scalar> inv = mat_inverse(block.mixing, block_name(k) + " mixing");
    y.values = apply_mixing(inv, u.values);
    if (tape) {
      tape->mixing_inputs[k] = std::move(u.values);
      tape->inverses[k] = std::move(inv);
    }
  }
  return y;
}

/// Gradient through model_forward; accumulates into `grad`, returns d/dX.
template <typename Scalar>
RowMatrix<Scalar> model_forward_backward(const FlowModel<Scalar>& model, const ForwardTape<Scalar>& tape, const Grid& g,
                                         RowMatrix<Scalar> grad_y, FlowModel<Scalar>& grad, Workspace<Scalar>& ws) {
  for (std::size_t k = model.blocks.size(); k-- > 0;) {
    const auto& block = model.blocks[k];
    RowMatrix<Scalar> grad_mixed =
        coupling_forward_backward(block.coupling, tape.couplings[k], g, grad_y, grad.blocks[k].coupling, ws);
    grad.blocks[k].mixing.noalias() += grad_mixed * tape.mixing_inputs[k].transpose();
    grad_y.noalias() = block.mixing.transpose() * grad_mixed;
  }
  return grad_y;
}

/// Gradient through model_inverse; accumulates into `grad`, returns d/dY.
/// The mixing gradient uses d(W^-1) = -W^-1 dW W^-1.
template <typename Scalar>
RowMatrix<Scalar> model_inverse_backward(const FlowModel<Scalar>& model, const InverseTape<Scalar>& tape, const Grid& g,
                                         RowMatrix<Scalar> grad_x, FlowModel<Scalar>& grad, Workspace<Scalar>& ws) {
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    const Matrix<Scalar>& inv = tape.inverses[k];
    const Matrix<Scalar> grad_inv = grad_x * tape.mixing_inputs[k].transpose();
    grad.blocks[k].mixing.noalias() -= inv.transpose() * grad_inv * inv.transpose();
    RowMatrix<Scalar> grad_u = inv.transpose() * grad_x;
    grad_x = coupling_inverse_backward(model.blocks[k].coupling, tape.couplings[k], g, grad_u, grad.blocks[k].coupling, ws);
  }
  return grad_x;
}

// ---------------------------------------------------------------------------
// Tensor-level operations.

template <typename Scalar>
PlaneTensor<Scalar> subnet_apply(const Subnet<Scalar>& net, const PlaneTensor<Scalar>& x) {
  if (x.channels() != net.in_channels()) {
    throw ShapeError("subnet_apply: input has " + std::to_string(x.channels()) + " channels, subnet expects " +
                     std::to_string(net.in_channels()));
  }
  Workspace<Scalar> ws;
  const Features<Scalar> f = to_features(x);
  Features<Scalar> out{subnet_forward(net, f.values, f.grid, static_cast<SubnetTape<Scalar>*>(nullptr), ws), f.grid};
  detail::check_finite(out.values, "subnet");
  return to_tensor(out);
}

template <typename Scalar>
PlaneTensor<Scalar> coupling_forward(const CouplingLayer<Scalar>& layer, const PlaneTensor<Scalar>& m) {
  Workspace<Scalar> ws;
  return to_tensor(coupling_forward(layer, to_features(m), static_cast<CouplingTape<Scalar>*>(nullptr), ws));
}

template <typename Scalar>
PlaneTensor<Scalar> coupling_inverse(const CouplingLayer<Scalar>& layer, const PlaneTensor<Scalar>& n) {
  Workspace<Scalar> ws;
  return to_tensor(coupling_inverse(layer, to_features(n), static_cast<CouplingTape<Scalar>*>(nullptr), ws));
}

template <typename Derived, typename Scalar>
PlaneTensor<Scalar> mixing_forward(const Eigen::MatrixBase<Derived>& w, const PlaneTensor<Scalar>& x) {
  if (w.rows() != x.channels() || w.cols() != x.channels()) throw ShapeError("mixing_forward: order/channel mismatch");
  mat_inverse(w, "mixing");  // invertibility certificate
  Features<Scalar> f = to_features(x);
  f.values = apply_mixing(w, f.values);
  return to_tensor(f);
}

template <typename Derived, typename Scalar>
PlaneTensor<Scalar> mixing_inverse(const Eigen::MatrixBase<Derived>& w, const PlaneTensor<Scalar>& y) {
  if (w.rows() != y.channels() || w.cols() != y.channels()) throw ShapeError("mixing_inverse: order/channel mismatch");
  const Matrix<Scalar> inv = mat_inverse(w.template cast<Scalar>().eval(), "mixing");
  Features<Scalar> f = to_features(y);
  f.values = apply_mixing(inv, f.values);
  return to_tensor(f);
}

template <typename Scalar>
PlaneTensor<Scalar> model_forward(const FlowModel<Scalar>& model, const PlaneTensor<Scalar>& x) {
  Workspace<Scalar> ws;
  return to_tensor(model_forward(model, to_features(x), static_cast<ForwardTape<Scalar>*>(nullptr), ws));
}

template <typename Scalar>
PlaneTensor<Scalar> model_inverse(const FlowModel<Scalar>& model, const PlaneTensor<Scalar>& y) {
  Workspace<Scalar> ws;
  return to_tensor(model_inverse(model, to_features(y), static_cast<InverseTape<Scalar>*>(nullptr), ws));
}

// ---------------------------------------------------------------------------
// Initialization.

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
template <typename Scalar>
RowMatrix<Scalar> random_orthogonal(Index order, Rng& rng) {
  Matrix<double> a(order, order);
  for (Index i = 0; i < order; ++i)
    for (Index j = 0; j < order; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix<double>> qr(a);
  Matrix<double> q = qr.householderQ();
  const Matrix<double> r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (Index j = 0; j < order; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q.template cast<Scalar>();
}

template <typename Scalar>
void init_conv(ConvLayer<Scalar>& layer, Scalar slope, Rng& rng) {
  // He initialisation for Leaky ReLU.
  const double fan_in = static_cast<double>(layer.weight.cols());
  const double std = std::sqrt(2.0 / ((1.0 + double(slope) * double(slope)) * fan_in));
  for (Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = static_cast<Scalar>(std * rng.normal());
  layer.bias.setZero();
}

struct ModelTopology {
  Index channels = 2;
  Index blocks = 4;
  Index hidden = 32;
  double slope = 0.2;
  double s_clamp = 2.0;
};

/// Fresh model: orthogonal mixings, He-initialised hidden layers and
/// zero final layers, so every coupling starts as the identity map.
template <typename Scalar = float>
FlowModel<Scalar> init_model(const ModelTopology& topo, Rng& rng) {
  if (topo.channels < 2 || topo.channels % 2 != 0) throw ShapeError("channel count must be even and >= 2");
  if (topo.blocks < 1) throw ShapeError("model needs at least one block");
  if (topo.hidden < 1) throw ShapeError("hidden width must be positive");
  if (!(topo.slope >= 0.0 && topo.slope < 1.0)) throw ShapeError("leaky slope must lie in [0, 1)");
  FlowModel<Scalar> model;
  model.channels = topo.channels;
  model.hidden = topo.hidden;
  model.slope = static_cast<Scalar>(topo.slope);
  model.s_clamp = static_cast<Scalar>(topo.s_clamp);
  const Index d = topo.channels / 2;
  for (Index k = 0; k < topo.blocks; ++k) {
    InvertibleBlock<Scalar> block;
    block.mixing = random_orthogonal<Scalar>(topo.channels, rng);
    block.coupling = CouplingLayer<Scalar>(topo.channels, d, topo.hidden, model.slope, model.s_clamp);
    for (Subnet<Scalar>* net : {&block.coupling.r, &block.coupling.s, &block.coupling.t}) {
      for (int j = 0; j + 1 < kSubnetDepth; ++j) init_conv(net->layers[j], model.slope, rng);
    }
    model.blocks.push_back(std::move(block));
  }
  return model;
}

template <typename Scalar = float>
FlowModel<Scalar> init_model(Index channels, Index blocks, Index hidden, Rng& rng) {
  return init_model<Scalar>(ModelTopology{channels, blocks, hidden}, rng);
}

/// Gives every final subnet layer random weights so couplings are far from
/// the identity; used by invertibility and gradient checks.
template <typename Scalar>
void randomize_final_layers(FlowModel<Scalar>& model, Rng& rng, double scale = 1.0) {
  for (auto& block : model.blocks) {
    for (Subnet<Scalar>* net : {&block.coupling.r, &block.coupling.s, &block.coupling.t}) {
      auto& last = net->layers[kSubnetDepth - 1];
      const double std = scale / std::sqrt(static_cast<double>(last.weight.cols()));
      for (Index i = 0; i < last.weight.size(); ++i) last.weight.data()[i] = static_cast<Scalar>(std * rng.normal());
      for (Index i = 0; i < last.bias.size(); ++i) last.bias[i] = static_cast<Scalar>(0.1 * scale * rng.normal());
    }
  }
}

}  // namespace ivan

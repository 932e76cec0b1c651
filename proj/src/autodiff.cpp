#include "mtm/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace mtm::ad {

Tape& Var::tape() const {
  if (!valid()) throw TapeError("use of an invalid Var");
  return *tape_;
}

const Tensor4& Var::value() const { return tape().node(id_).value; }

bool Var::requires_grad() const { return tape().node(id_).requires_grad; }

const Var& GradientMap::at(const Var& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) {
    throw TapeError("no gradient recorded for node " + std::to_string(leaf.id()));
  }
  return it->second;
}

const TapeNode& Tape::node(std::size_t id) const {
  if (id >= nodes_.size()) {
    throw TapeError("unknown tape node id " + std::to_string(id));
  }
  return nodes_[id];
}

Var Tape::leaf(Tensor4 value, bool requires_grad) {
  TapeNode n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, const std::vector<Var>& inputs, Tensor4 value,
                 BackwardFn backward) {
  TapeNode n;
  n.op = std::move(op);
  bool any_grad = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this || in.id() >= nodes_.size()) {
      throw TapeError(n.op + ": input is not a node of this tape");
    }
    n.inputs.push_back(in.id());
    any_grad = any_grad || nodes_[in.id()].requires_grad;
  }
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && any_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(const Var& loss, std::span<const Var> leaves,
                           bool create_graph) {
  if (!loss.valid() || &loss.tape() != this) {
    throw TapeError("backward: loss is not a node of this tape");
  }
  if (loss.shape() != Shape4{1, 1, 1, 1}) {
    throw ContractError("backward: loss must be scalar, got " +
                        loss.shape().str());
  }
  const std::size_t end = loss.id() + 1;
  std::vector<bool> target(end, false);
  for (const Var& l : leaves) {
    if (&l.tape() != this) throw TapeError("backward: leaf from another tape");
    if (l.id() < end) target[l.id()] = true;
  }
  // reach[i]: a gradient path exists from node i down to a requested leaf.
  std::vector<bool> reach(end, false);
  for (std::size_t i = 0; i < end; ++i) {
    if (target[i]) {
      reach[i] = true;
      continue;
    }
    const TapeNode& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    for (std::size_t in : n.inputs) {
      if (reach[in]) {
        reach[i] = true;
        break;
      }
    }
  }

  const bool saved = grad_enabled_;
  grad_enabled_ = create_graph;
  std::vector<Var> grads(end);
  grads[loss.id()] = constant(Tensor4::scalar(1.0));
  try {
    for (std::size_t i = end; i-- > 0;) {
      if (!reach[i] || !grads[i].valid()) continue;
      // Copy what we need: invoking backward may append to the tape.
      const BackwardFn fn = nodes_[i].backward;
      if (!fn) continue;
      const std::vector<std::size_t> inputs = nodes_[i].inputs;
      std::vector<bool> needs(inputs.size());
      for (std::size_t j = 0; j < inputs.size(); ++j) needs[j] = reach[inputs[j]];
      std::vector<Var> in_grads = fn(Var(this, i), grads[i], needs);
      if (in_grads.size() != inputs.size()) {
        throw TapeError(nodes_[i].op + ": backward returned " +
                        std::to_string(in_grads.size()) + " gradients for " +
                        std::to_string(inputs.size()) + " inputs");
      }
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        if (!needs[j]) continue;
        const Var& g = in_grads[j];
        if (!g.valid() || g.shape() != nodes_[inputs[j]].value.shape()) {
          throw TapeError(nodes_[i].op + ": gradient for input " +
                          std::to_string(j) + " has the wrong shape");
        }
        Var& slot = grads[inputs[j]];
        slot = slot.valid() ? add(slot, g) : g;
      }
    }
  } catch (...) {
    grad_enabled_ = saved;
    throw;
  }
  grad_enabled_ = saved;

  GradientMap out;
  for (const Var& l : leaves) {
    if (l.id() < end && grads[l.id()].valid()) {
      out.set(l.id(), grads[l.id()]);
    } else {
      out.set(l.id(), constant(Tensor4(l.shape())));
    }
  }
  return out;
}

Var first_order_result(const std::string& op, const std::vector<Var>& inputs,
                       Tensor4 value) {
  Tape& t = inputs.at(0).tape();
  return t.record(op + "_grad", inputs, std::move(value),
                  [op](const Var&, const Var&,
                       const std::vector<bool>&) -> std::vector<Var> {
                    throw TapeError("second-order gradient through " + op +
                                    " is not supported");
                  });
}

namespace {

Tape& same_tape(const Var& a, const Var& b, const char* op) {
  Tape& t = a.tape();
  if (&b.tape() != &t) throw TapeError(std::string(op) + ": operands on different tapes");
  return t;
}

template <class F>
Tensor4 map_values(const Tensor4& x, F f) {
  Tensor4 y(x.shape());
  const auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return y;
}

template <class F>
Tensor4 zip_values(const Tensor4& a, const Tensor4& b, F f) {
  Tensor4 y(a.shape());
  const auto x = a.data();
  const auto z = b.data();
  auto out = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], z[i]);
  return y;
}

double softplus_value(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

double sigmoid_value(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  return t.record("add", {a, b},
                  zip_values(a.value(), b.value(), [](double x, double y) { return x + y; }),
                  [](const Var&, const Var& g, const std::vector<bool>&) {
                    return std::vector<Var>{g, g};
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  return t.record("sub", {a, b},
                  zip_values(a.value(), b.value(), [](double x, double y) { return x - y; }),
                  [](const Var&, const Var& g, const std::vector<bool>& needs) {
                    return std::vector<Var>{g, needs[1] ? scale(g, -1.0) : Var()};
                  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  return t.record("mul", {a, b},
                  zip_values(a.value(), b.value(), [](double x, double y) { return x * y; }),
                  [a, b](const Var&, const Var& g, const std::vector<bool>& needs) {
                    return std::vector<Var>{needs[0] ? mul(g, b) : Var(),
                                            needs[1] ? mul(g, a) : Var()};
                  });
}

Var scale(const Var& a, double factor) {
  return a.tape().record(
      "scale", {a}, map_values(a.value(), [factor](double x) { return x * factor; }),
      [factor](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{scale(g, factor)};
      });
}

Var add_scalar(const Var& a, double value) {
  return a.tape().record(
      "add_scalar", {a}, map_values(a.value(), [value](double x) { return x + value; }),
      [](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{g};
      });
}

Var mul_const(const Var& a, const Tensor4& mask) {
  require_same_shape(a.value(), mask, "mul_const");
  return a.tape().record(
      "mul_const", {a},
      zip_values(a.value(), mask, [](double x, double m) { return x * m; }),
      [mask](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(g, mask)};
      });
}

Var leaky_relu(const Var& x, double slope) {
  const Tensor4& v = x.value();
  Tensor4 mask(v.shape());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = v[i] >= 0.0 ? 1.0 : slope;
    margin = std::min(margin, std::abs(v[i]));
  }
  x.tape().note_kink_distance(margin);
  return x.tape().record(
      "leaky_relu", {x}, mtm::leaky_relu(v, slope),
      [mask = std::move(mask)](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(g, mask)};
      });
}

Var tanh(const Var& x) {
  return x.tape().record(
      "tanh", {x}, map_values(x.value(), [](double t) { return std::tanh(t); }),
      [](const Var& y, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, add_scalar(scale(square(y), -1.0), 1.0))};
      });
}

Var sigmoid(const Var& x) {
  return x.tape().record(
      "sigmoid", {x}, map_values(x.value(), sigmoid_value),
      [](const Var& y, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, mul(y, add_scalar(scale(y, -1.0), 1.0)))};
      });
}

Var softplus(const Var& x) {
  return x.tape().record(
      "softplus", {x}, map_values(x.value(), softplus_value),
      [x](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, sigmoid(x))};
      });
}

Var sin(const Var& x) {
  return x.tape().record(
      "sin", {x}, map_values(x.value(), [](double t) { return std::sin(t); }),
      [x](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, cos(x))};
      });
}

Var cos(const Var& x) {
  return x.tape().record(
      "cos", {x}, map_values(x.value(), [](double t) { return std::cos(t); }),
      [x](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, scale(sin(x), -1.0))};
      });
}

Var square(const Var& x) { return mul(x, x); }

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const Shape4 shape = x.shape();
  return x.tape().record("sum", {x}, Tensor4::scalar(acc),
                         [shape](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{broadcast_scalar(g, shape)};
                         });
}

Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var broadcast_scalar(const Var& s, Shape4 shape) {
  return s.tape().record("broadcast_scalar", {s}, Tensor4(shape, s.value().item()),
                         [](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{sum(g)};
                         });
}

Var reshape(const Var& x, Shape4 shape) {
  const Shape4 orig = x.shape();
  return x.tape().record("reshape", {x}, x.value().reshaped(shape),
                         [orig](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{reshape(g, orig)};
                         });
}

Var bias_add(const Var& x, const Var& bias) {
  Tape& t = same_tape(x, bias, "bias_add");
  const Shape4 s = x.shape();
  if (bias.shape() != Shape4{1, s.c, 1, 1}) {
    throw ShapeError("bias_add: bias " + bias.shape().str() + " for input " + s.str());
  }
  Tensor4 y = x.value();
  const Tensor4& b = bias.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      double* p = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += b[c];
    }
  return t.record("bias_add", {x, bias}, std::move(y),
                  [](const Var&, const Var& g, const std::vector<bool>& needs) {
                    return std::vector<Var>{g, needs[1] ? channel_sum(g) : Var()};
                  });
}

Var channel_sum(const Var& x) {
  const Shape4 s = x.shape();
  const Tensor4& v = x.value();
  Tensor4 y(Shape4{1, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double* p = v.plane(n, c);
      double acc = y[c];
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      y[c] = acc;
    }
  return x.tape().record("channel_sum", {x}, std::move(y),
                         [s](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{broadcast_channels(g, s)};
                         });
}

Var broadcast_channels(const Var& b, Shape4 shape) {
  if (b.shape() != Shape4{1, shape.c, 1, 1}) {
    throw ShapeError("broadcast_channels: " + b.shape().str() + " -> " + shape.str());
  }
  Tensor4 y(shape);
  const Tensor4& v = b.value();
  for (int n = 0; n < shape.n; ++n)
    for (int c = 0; c < shape.c; ++c) std::fill_n(y.plane(n, c), shape.plane(), v[c]);
  return b.tape().record("broadcast_channels", {b}, std::move(y),
                         [](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{channel_sum(g)};
                         });
}

Var concat_channels(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "concat_channels");
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + sa.str() + " with " + sb.str());
  }
  Tensor4 y(Shape4{sa.n, sa.c + sb.c, sa.h, sa.w});
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().plane(n, 0), sa.c * sa.plane(), y.plane(n, 0));
    std::copy_n(b.value().plane(n, 0), sb.c * sb.plane(), y.plane(n, sa.c));
  }
  const int ca = sa.c;
  const int cb = sb.c;
  return t.record("concat_channels", {a, b}, std::move(y),
                  [ca, cb](const Var&, const Var& g, const std::vector<bool>& needs) {
                    return std::vector<Var>{needs[0] ? slice_channels(g, 0, ca) : Var(),
                                            needs[1] ? slice_channels(g, ca, cb) : Var()};
                  });
}

Var slice_channels(const Var& x, int start, int count) {
  const Shape4 s = x.shape();
  if (start < 0 || count < 1 || start + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", +" +
                     std::to_string(count) + ") of " + s.str());
  }
  Tensor4 y(Shape4{s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    std::copy_n(x.value().plane(n, start), count * s.plane(), y.plane(n, 0));
  const int total = s.c;
  return x.tape().record("slice_channels", {x}, std::move(y),
                         [start, total](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{pad_channels(g, start, total)};
                         });
}

Var pad_channels(const Var& x, int start, int total) {
  const Shape4 s = x.shape();
  if (start < 0 || start + s.c > total) {
    throw ShapeError("pad_channels: " + s.str() + " at " + std::to_string(start) +
                     " into " + std::to_string(total));
  }
  Tensor4 y(Shape4{s.n, total, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    std::copy_n(x.value().plane(n, 0), s.c * s.plane(), y.plane(n, start));
  const int count = s.c;
  return x.tape().record("pad_channels", {x}, std::move(y),
                         [start, count](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{slice_channels(g, start, count)};
                         });
}

Var gather_batch(const Var& x, const std::vector<int>& index) {
  const Shape4 s = x.shape();
  if (index.empty()) throw ShapeError("gather_batch: empty index");
  for (int i : index) {
    if (i < 0 || i >= s.n) {
      throw ShapeError("gather_batch: index " + std::to_string(i) + " outside " + s.str());
    }
  }
  const int count = static_cast<int>(index.size());
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  Tensor4 y(Shape4{count, s.c, s.h, s.w});
  for (int j = 0; j < count; ++j) std::copy_n(x.value().plane(index[j], 0), per, y.plane(j, 0));
  const int total = s.n;
  return x.tape().record("gather_batch", {x}, std::move(y),
                         [index, total](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{scatter_batch(g, index, total)};
                         });
}

Var scatter_batch(const Var& x, const std::vector<int>& index, int total) {
  const Shape4 s = x.shape();
  if (static_cast<int>(index.size()) != s.n) {
    throw ShapeError("scatter_batch: " + std::to_string(index.size()) + " indices for " +
                     s.str());
  }
  for (int i : index) {
    if (i < 0 || i >= total) throw ShapeError("scatter_batch: index out of range");
  }
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  Tensor4 y(Shape4{total, s.c, s.h, s.w});
  for (int j = 0; j < s.n; ++j) {
    const double* src = x.value().plane(j, 0);
    double* dst = y.plane(index[j], 0);
    for (std::size_t k = 0; k < per; ++k) dst[k] += src[k];
  }
  return x.tape().record("scatter_batch", {x}, std::move(y),
                         [index](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{gather_batch(g, index)};
                         });
}

Var upsample_nearest2x(const Var& x) {
  return x.tape().record("upsample_nearest2x", {x}, mtm::upsample_nearest2x(x.value()),
                         [](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{scale(mean_pool2x2(g), 4.0)};
                         });
}

Var mean_pool2x2(const Var& x) {
  return x.tape().record("mean_pool2x2", {x}, mtm::mean_pool2x2(x.value()),
                         [](const Var&, const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{scale(upsample_nearest2x(g), 0.25)};
                         });
}

double evaluate(const ScalarFn& f, const std::vector<Tensor4>& point) {
  Tape tape;
  std::vector<Var> inputs;
  inputs.reserve(point.size());
  for (const Tensor4& p : point) inputs.push_back(tape.constant(p));
  const double v = f(tape, inputs).value().item();
  if (!std::isfinite(v)) throw NumericError("evaluate: function value is not finite");
  return v;
}

FiniteDiffReport finite_diff_report(const ScalarFn& f,
                                    const std::vector<Tensor4>& point, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  Tape tape;
  std::vector<Var> inputs;
  for (const Tensor4& p : point) inputs.push_back(tape.leaf(p, true));
  const Var loss = f(tape, inputs);
  if (!std::isfinite(loss.value().item())) {
    throw NumericError("finite_diff_check: function value is not finite");
  }
  FiniteDiffReport report;
  report.kink_margin = tape.min_kink_distance();
  const GradientMap grads = tape.backward(loss, inputs);

  std::vector<Tensor4> probe = point;
  for (std::size_t j = 0; j < point.size(); ++j) {
    const Tensor4& analytic = grads.value(inputs[j]);
    double worst = 0.0;
    for (std::size_t i = 0; i < point[j].size(); ++i) {
      const double x0 = point[j][i];
      probe[j][i] = x0 + eps;
      const double fp = evaluate(f, probe);
      probe[j][i] = x0 - eps;
      const double fm = evaluate(f, probe);
      probe[j][i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
    report.per_input.push_back(worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace mtm::ad

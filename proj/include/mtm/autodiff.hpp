#pragma once

// Define-by-run reverse-mode differentiation.
//
// Every operation appends a TapeNode holding its forward value and a backward
// rule. Backward rules are written in terms of taped operations, so running
// backward with create_graph = true yields gradients that are themselves
// differentiable (this is what the R1 penalty needs).

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtm/tensor.hpp"

namespace mtm::ad {

/// The tape was used inconsistently: a foreign or unknown node id, or a
/// backward rule that returned a gradient of the wrong shape.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();

  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ != kInvalid; }
  std::size_t id() const { return id_; }
  Tape& tape() const;
  const Tensor4& value() const;
  const Shape4& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = kInvalid;
};

/// Backward rule: given the node's output and the upstream gradient, return one
/// gradient per input. Entries whose `needs` flag is false may be left invalid.
using BackwardFn = std::function<std::vector<Var>(
    const Var& output, const Var& grad, const std::vector<bool>& needs)>;

struct TapeNode {
  std::string op;
  std::vector<std::size_t> inputs;
  Tensor4 value;
  bool requires_grad = false;
  BackwardFn backward;
};

/// Gradients keyed by leaf node id.
class GradientMap {
 public:
  void set(std::size_t leaf, Var grad) { grads_[leaf] = grad; }
  const Var& at(const Var& leaf) const;
  const Tensor4& value(const Var& leaf) const { return at(leaf).value(); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::map<std::size_t, Var> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor4 value, bool requires_grad = true);
  Var constant(Tensor4 value) { return leaf(std::move(value), false); }

  /// Append a node. Inputs must already live on this tape. The backward rule is
  /// dropped when no input requires a gradient or gradient recording is off.
  Var record(std::string op, const std::vector<Var>& inputs, Tensor4 value,
             BackwardFn backward);

  /// Reverse sweep from a scalar loss. With create_graph the backward
  /// arithmetic is itself taped and the returned gradients are differentiable.
  GradientMap backward(const Var& loss, std::span<const Var> leaves,
                       bool create_graph = false);

  const TapeNode& node(std::size_t id) const;
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  /// Smallest distance of any input of a non-smooth op (leaky_relu argument,
  /// bilinear sample coordinate) to its kink set, seen since the last reset.
  void note_kink_distance(double d) {
    if (d < min_kink_distance_) min_kink_distance_ = d;
  }
  double min_kink_distance() const { return min_kink_distance_; }
  void reset_kink_distance() {
    min_kink_distance_ = std::numeric_limits<double>::infinity();
  }

 private:
  friend class Var;
  std::deque<TapeNode> nodes_;
  bool grad_enabled_ = true;
  double min_kink_distance_ = std::numeric_limits<double>::infinity();
};

/// Node for a gradient that cannot itself be differentiated again. Reaching it
/// in a later backward sweep raises TapeError naming `op`.
Var first_order_result(const std::string& op, const std::vector<Var>& inputs,
                       Tensor4 value);

// ---- elementwise and structural operations ----

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);
/// Multiply by a constant tensor (no gradient flows to `mask`).
Var mul_const(const Var& a, const Tensor4& mask);
Var leaky_relu(const Var& x, double slope = 0.2);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
/// ln(1 + e^x), branching at 0 for stability.
Var softplus(const Var& x);
Var sin(const Var& x);
Var cos(const Var& x);
Var square(const Var& x);

/// Sum of all elements, accumulated in storage order, as a 1x1x1x1 tensor.
Var sum(const Var& x);
Var mean(const Var& x);
Var broadcast_scalar(const Var& s, Shape4 shape);
Var reshape(const Var& x, Shape4 shape);

/// x + b where b has shape (1, c, 1, 1).
Var bias_add(const Var& x, const Var& bias);
/// Sum over batch and spatial positions, giving (1, c, 1, 1).
Var channel_sum(const Var& x);
Var broadcast_channels(const Var& b, Shape4 shape);

Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int start, int count);
/// Place x at channel offset `start` inside a zero tensor with `total` channels.
Var pad_channels(const Var& x, int start, int total);

/// Samples index[0], index[1], ... of x stacked along the batch axis.
Var gather_batch(const Var& x, const std::vector<int>& index);
/// Adjoint of gather_batch: sample j is added into slot index[j] of `total`.
Var scatter_batch(const Var& x, const std::vector<int>& index, int total);

Var upsample_nearest2x(const Var& x);
Var mean_pool2x2(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---- verification ----

/// Scalar function of several tensor inputs, built on the given tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::vector<double> per_input;  ///< max error for each input tensor
  double kink_margin = 0.0;       ///< min kink distance at the base point
};

/// Central differences (f(x+e) - f(x-e)) / 2e for every coordinate of every
/// input, compared with the taped gradient as |a - n| / max(1, |n|).
FiniteDiffReport finite_diff_report(const ScalarFn& f,
                                    const std::vector<Tensor4>& point,
                                    double eps = 1e-5);

inline double finite_diff_check(const ScalarFn& f,
                                const std::vector<Tensor4>& point,
                                double eps = 1e-5) {
  return finite_diff_report(f, point, eps).max_rel_error;
}

/// Evaluate f at `point` without recording gradients.
double evaluate(const ScalarFn& f, const std::vector<Tensor4>& point);

}  // namespace mtm::ad

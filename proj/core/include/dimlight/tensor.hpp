// SPDX-License-Identifier: Apache-2.0
//
// Dense rank-4 tensors with reverse-mode differentiation.
//
// Values are stored as doubles. Outside of a ShadowPrecision scope every op
// rounds its results to IEEE float32, so the production path has float32
// semantics while gradient checks can run the same graph in 64 bits.

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dimlight {

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when operand extents are incompatible.
class DimensionError : public NumericsError {
 public:
  using NumericsError::NumericsError;
};

/// Raised when an op produces NaN or Inf. The message names the op (and, when
/// rethrown by a module, the stage).
class NonFiniteError : public NumericsError {
 public:
  using NumericsError::NumericsError;
};

/// (N, C, H, W) extents.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] int operator[](int axis) const;
  [[nodiscard]] std::string str() const;
  bool operator==(const Shape&) const = default;
};

namespace detail {
struct Node;
}

class Tensor;
class ParameterSet;

/// Accumulation targets handed to a backward closure: one entry per input,
/// nullptr when that input does not need a gradient.
using GradSinks = std::vector<std::vector<double>*>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSinks& grad_in)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  /// Scalar tensor of shape (1,1,1,1).
  static Tensor scalar(double value);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t numel() const { return shape().numel(); }
  [[nodiscard]] std::span<const double> values() const&;
  /// Deleted so a span never outlives a temporary tensor.
  std::span<const double> values() const&& = delete;
  [[nodiscard]] double at(int n, int c, int h, int w) const;
  [[nodiscard]] double item() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] std::string_view op_name() const;

  /// Same values, cut from the tape.
  [[nodiscard]] Tensor detach() const;

  /// Overwrites the values of a leaf tensor in place. Used by optimizers and
  /// finite-difference probes; any graph built from the old values is stale.
  void assign(std::span<const double> values);

  [[nodiscard]] const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend Tensor make_leaf(Shape, std::vector<double>, bool);
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn,
                            std::string_view);
  friend class ParameterSet;
  friend std::map<std::string, Tensor> backward(const Tensor&, const ParameterSet&);
};

/// Creates a leaf. `requires_grad` leaves receive gradients from backward().
Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad);

/// Records an op result. `values` are rounded and checked for finiteness here;
/// `fn` is only kept when gradients are enabled and some input needs one.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn fn, std::string_view op);

/// Ordered set of named trainable leaves.
class ParameterSet {
 public:
  /// Registers a new trainable leaf. Names must be unique.
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  /// Registers an existing tensor's values under `name` as a new leaf.
  Tensor add(const std::string& name, const Tensor& init);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t scalar_count() const;
  [[nodiscard]] const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  [[nodiscard]] const Tensor& get(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

using Gradients = std::map<std::string, Tensor>;

/// Reverse pass from a scalar, on-tape loss. Every parameter in `params` gets
/// an entry; unreachable ones are zero.
Gradients backward(const Tensor& loss, const ParameterSet& params);

/// Disables graph recording in its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Runs ops in full 64-bit precision in its scope (gradient-check mode).
class ShadowPrecision {
 public:
  ShadowPrecision();
  ~ShadowPrecision();
  ShadowPrecision(const ShadowPrecision&) = delete;
  ShadowPrecision& operator=(const ShadowPrecision&) = delete;

 private:
  bool previous_;
};

/// Records the branch taken by every piecewise op (relu, clamp, abs, index
/// selections) in its scope, then replays it: in replay mode those ops take
/// the recorded branch whatever their input. Finite differences of a replayed
/// function are smooth across kinks and match the analytic gradient of the
/// recorded pass. Ops must be called in the same order on every replay.
class BranchFreeze {
 public:
  BranchFreeze();
  ~BranchFreeze();
  BranchFreeze(const BranchFreeze&) = delete;
  BranchFreeze& operator=(const BranchFreeze&) = delete;

  /// Stops recording; subsequent passes replay from the first recorded op.
  void replay();
  /// Restarts the replay cursor for a new pass.
  void rewind();
  /// Number of recorded decisions not consumed by the last replayed pass.
  [[nodiscard]] std::size_t unconsumed() const;
};

namespace branch {
/// Decisions for one op call of `n` elements. In record mode `decide(i)` fills
/// the pattern and it is stored; in replay mode the recorded pattern is
/// returned. Outside a BranchFreeze scope this is just `decide`.
std::vector<int> pattern(std::size_t n, const std::function<int(std::size_t)>& decide);
}  // namespace branch

[[nodiscard]] bool grad_enabled();
[[nodiscard]] bool shadow_precision();

/// Rounds to float32 unless shadow precision is active.
[[nodiscard]] double round_value(double v);

}  // namespace dimlight

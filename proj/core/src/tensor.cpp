// SPDX-License-Identifier: Apache-2.0

#include "dimlight/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dimlight {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  std::string op;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_shadow = false;

struct FreezeState {
  bool active = false;
  bool replaying = false;
  std::vector<std::vector<int>> patterns;
  std::size_t cursor = 0;
};
thread_local FreezeState g_freeze;

void check_finite(std::span<const double> values, std::string_view op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("non-finite value produced by op '" + std::string(op) + "'");
    }
  }
}

}  // namespace

int Shape::operator[](int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
    default: throw DimensionError("axis out of range: " + std::to_string(axis));
  }
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[' << n << ',' << c << ',' << h << ',' << w << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }
bool shadow_precision() { return g_shadow; }

double round_value(double v) {
  return g_shadow ? v : static_cast<double>(static_cast<float>(v));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

ShadowPrecision::ShadowPrecision() : previous_(g_shadow) { g_shadow = true; }
ShadowPrecision::~ShadowPrecision() { g_shadow = previous_; }

BranchFreeze::BranchFreeze() {
  if (g_freeze.active) throw std::logic_error("BranchFreeze scopes do not nest");
  g_freeze = FreezeState{};
  g_freeze.active = true;
}
BranchFreeze::~BranchFreeze() { g_freeze = FreezeState{}; }

void BranchFreeze::replay() {
  g_freeze.replaying = true;
  g_freeze.cursor = 0;
}
void BranchFreeze::rewind() { g_freeze.cursor = 0; }
std::size_t BranchFreeze::unconsumed() const { return g_freeze.patterns.size() - g_freeze.cursor; }

namespace branch {
std::vector<int> pattern(std::size_t n, const std::function<int(std::size_t)>& decide) {
  if (g_freeze.active && g_freeze.replaying) {
    if (g_freeze.cursor >= g_freeze.patterns.size() || g_freeze.patterns[g_freeze.cursor].size() != n) {
      throw std::logic_error("BranchFreeze replay diverged from the recorded pass");
    }
    return g_freeze.patterns[g_freeze.cursor++];
  }
  std::vector<int> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = decide(i);
  if (g_freeze.active) g_freeze.patterns.push_back(p);
  return p;
}
}  // namespace branch

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw DimensionError("negative extent in " + shape.str());
  }
  if (values.size() != shape.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape.str());
  }
  for (double& v : values) v = round_value(v);
  check_finite(values, "leaf");
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn fn, std::string_view op) {
  if (values.size() != shape.numel()) {
    throw DimensionError("op '" + std::string(op) + "' produced " +
                         std::to_string(values.size()) + " values for shape " + shape.str());
  }
  for (double& v : values) v = round_value(v);
  check_finite(values, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->op = std::string(op);
  if (g_grad_enabled && fn) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(fn);
      node->inputs.reserve(inputs.size());
      for (const Tensor& t : inputs) node->inputs.push_back(t.node_);
    }
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return make_leaf(shape, std::vector<double>(shape.numel()), false); }

Tensor Tensor::full(Shape shape, double value) {
  return make_leaf(shape, std::vector<double>(shape.numel(), value), false);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return make_leaf(shape, std::move(values), false);
}

Tensor Tensor::scalar(double value) { return make_leaf({1, 1, 1, 1}, {value}, false); }

const Shape& Tensor::shape() const {
  if (!node_) throw NumericsError("use of undefined tensor");
  return node_->shape;
}

std::span<const double> Tensor::values() const& {
  if (!node_) throw NumericsError("use of undefined tensor");
  return node_->value;
}

double Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = shape();
  if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w) {
    throw DimensionError("index out of range for " + s.str());
  }
  return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar " + shape().str());
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::string_view Tensor::op_name() const { return node_ ? std::string_view(node_->op) : ""; }

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->value = node_->value;
  node->op = "detach";
  return Tensor(std::move(node));
}

void Tensor::assign(std::span<const double> values) {
  if (!node_) throw NumericsError("assign to undefined tensor");
  if (!node_->inputs.empty()) throw NumericsError("assign is only valid on leaf tensors");
  if (values.size() != node_->value.size()) {
    throw DimensionError("assign of " + std::to_string(values.size()) + " values to " +
                         node_->shape.str());
  }
  for (std::size_t i = 0; i < values.size(); ++i) node_->value[i] = round_value(values[i]);
  check_finite(node_->value, "assign");
}

Tensor ParameterSet::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (index_.contains(name)) throw NumericsError("duplicate parameter name: " + name);
  Tensor t = make_leaf(shape, std::move(values), true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParameterSet::add(const std::string& name, const Tensor& init) {
  return add(name, init.shape(), std::vector<double>(init.values().begin(), init.values().end()));
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : entries_) total += t.numel();
  return total;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw NumericsError("unknown parameter: " + name);
  return entries_[it->second].second;
}

bool ParameterSet::contains(const std::string& name) const { return index_.contains(name); }

Gradients backward(const Tensor& loss, const ParameterSet& params) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw NumericsError("backward() on a loss that is not on the tape");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !visited.contains(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward) continue;
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    GradSinks sinks;
    sinks.reserve(node->inputs.size());
    for (auto& in : node->inputs) {
      if (in && in->requires_grad) {
        if (in->grad.empty()) in->grad.assign(in->value.size(), 0.0);
        sinks.push_back(&in->grad);
      } else {
        sinks.push_back(nullptr);
      }
    }
    node->backward(node->grad, sinks);
    std::vector<double>().swap(node->grad);
  }

  Gradients out;
  for (const auto& [name, t] : params.entries()) {
    detail::Node* node = t.node_.get();
    if (node->grad.empty()) {
      out.emplace(name, Tensor::zeros(node->shape));
    } else {
      auto g = std::make_shared<detail::Node>();
      g->shape = node->shape;
      g->value = std::move(node->grad);
      g->op = "grad";
      out.emplace(name, Tensor(std::move(g)));
    }
    node->grad.clear();
  }
  // Leaves outside `params` may still hold gradients; drop them.
  for (detail::Node* node : order) node->grad.clear();
  return out;
}

}  // namespace dimlight

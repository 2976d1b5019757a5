#include "geomattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "geomattn/error.hpp"

namespace geomattn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local BranchTrace* g_trace = nullptr;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return impl;
}

}  // namespace

Tensor::Tensor(Shape shape) : impl_(make_impl(shape, std::vector<double>(geomattn::numel(shape), 0.0))) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(make_impl(std::move(shape), std::move(values))) {}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(geomattn::numel(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return geomattn::numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (impl_->producer) throw GraphError("cannot mutate a tensor produced by a recorded operation");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  shape();
  if (impl_->producer) throw GraphError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->producer; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad_data() const {
  shape();
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad() const {
  const Shape& s = shape();
  if (impl_->grad.empty()) return Tensor::zeros(s);
  return Tensor(s, impl_->grad);
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (impl_) std::vector<double>().swap(impl_->grad);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Graph Graph::of(const Tensor& root) {
  Graph g;
  if (!root.defined() || !root.impl()->producer) return g;
  // Iterative post-order DFS: inputs precede the nodes that consume them.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  detail::Node* start = root.impl()->producer.get();
  stack.emplace_back(start, 0);
  visited.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& in = node->inputs[next++];
      detail::Node* p = in->producer.get();
      if (p && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      g.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

std::vector<std::string> Graph::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto* n : nodes_) names.emplace_back(n->op);
  return names;
}

void Tensor::backward() const {
  if (numel() != 1) throw GraphError("backward root must be a scalar, got " + to_string(shape()));
  if (!impl_->requires_grad) return;
  if (!impl_->producer) {
    if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;
    return;
  }
  Graph graph = Graph::of(*this);
  for (const auto* n : graph.nodes()) {
    if (n->consumed) throw GraphError("backward called twice on the same graph; re-run forward");
  }
  impl_->grad.assign(1, 1.0);
  const auto& order = graph.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    detail::TensorImpl* out = node->output;
    if (!out->grad.empty()) node->backward(out->grad);
    node->backward = nullptr;
    node->consumed = true;
    if (out != impl_.get()) {
      out->grad.clear();
      out->grad.shrink_to_fit();
    }
  }
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

BranchTrace::BranchTrace() : hash_(1469598103934665603ULL), previous_(g_trace) { g_trace = this; }
BranchTrace::~BranchTrace() { g_trace = previous_; }

void BranchTrace::fold(std::uint64_t decision) {
  hash_ ^= decision + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
  hash_ *= 1099511628211ULL;
}

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const Tensor* t : inputs) node->inputs.push_back(t->impl());
  node->output = out.impl().get();
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->producer = std::move(node);
  return out;
}

std::span<double> grad_sink(const std::shared_ptr<TensorImpl>& t) {
  if (!t->requires_grad) return {};
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

void trace_branch(std::uint64_t decision) {
  if (g_trace) g_trace->fold(decision);
}

bool tracing_branches() { return g_trace != nullptr; }

}  // namespace detail

}  // namespace geomattn

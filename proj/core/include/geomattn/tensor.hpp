#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace geomattn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty until a gradient is first accumulated.
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> producer;
};

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  TensorImpl* output = nullptr;
  BackwardFn backward;
  bool consumed = false;
};

}  // namespace detail

/// Dense row-major float64 array that optionally records the primitive applications producing it.
///
/// A Tensor is a cheap handle: copies share storage. Leaves created by the user may be mutated
/// through `mutable_data()`; results of recorded operations may not.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;

  bool has_grad() const;
  /// Raw gradient buffer; empty when nothing has been accumulated.
  std::span<const double> grad_data() const;
  std::span<double> mutable_grad();
  /// Gradient as a fresh tensor (zeros when nothing has been accumulated).
  Tensor grad() const;
  void zero_grad();
  /// Drops the gradient buffer so has_grad() is false until the next backward.
  void clear_grad();

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  /// Reverse-mode accumulation from this scalar into every reachable requires_grad leaf.
  void backward() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Topologically ordered record of the primitive applications reachable from a root.
class Graph {
 public:
  static Graph of(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Creates the result tensor of a primitive and records a node when any input requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward);

/// Gradient buffer of `t`, allocated on first use; empty span when `t` does not require grad.
std::span<double> grad_sink(const std::shared_ptr<TensorImpl>& t);

/// Folds a non-smooth branch decision into the active kink trace, if one is installed.
void trace_branch(std::uint64_t decision);
bool tracing_branches();

}  // namespace detail

/// Records every branch decision taken by non-smooth primitives (relu, max, hinge) while alive.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t signature() const { return hash_; }
  void fold(std::uint64_t decision);

 private:
  std::uint64_t hash_;
  BranchTrace* previous_;
};

}  // namespace geomattn

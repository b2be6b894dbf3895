#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pabovw {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense 64-bit float tensor with reverse-mode differentiation. A Tensor is a
// cheap handle onto a shared node; ops link nodes into a DAG and backward()
// walks it in reverse topological order, accumulating gradients additively
// into every node that requires them.
//
// Thread safety follows the usual contract: concurrent read-only forwards on
// shared tensors are fine, a backward pass must be externally serialized per
// model because it mutates the grad buffers of the parameters it owns.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad, accumulates into parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
  };

  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  double& at(std::size_t i) { return node_->data[i]; }
  double at(std::size_t i) const { return node_->data[i]; }

  // Value of a one-element tensor.
  double value() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  // Gradient buffer; empty until a backward pass (or zero_grad) touches it.
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Allocates (if needed) and zeroes the gradient buffer.
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
  void drop_grad() { node_->grad.clear(); }

  // Runs reverse-mode differentiation from this scalar.
  void backward() const;

  // Same values, detached from the graph; gradients stop here.
  Tensor detach() const;

  // Deep copy of values only (no graph, no grad).
  Tensor clone_values() const;

  bool all_finite() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

// Scoped switch that disables graph construction; forwards executed inside
// produce detached tensors. Not nested across threads (thread_local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  static bool active();

 private:
  bool prev_;
};

namespace detail {
// Creates a result node wired to its parents; skips graph linkage when no
// parent needs gradients or a NoGradGuard is active.
Tensor make_op_result(Shape shape, std::vector<double> data,
                      std::vector<std::shared_ptr<Tensor::Node>> parents,
                      std::function<void(Tensor::Node&)> backward);
}  // namespace detail

}  // namespace pabovw

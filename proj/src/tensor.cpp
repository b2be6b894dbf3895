#include "pabovw/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace pabovw {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extent must be positive");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data.assign(shape_numel(node_->shape), fill);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->data = std::move(data);
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::logic_error("value() on non-scalar tensor " + shape_str(shape()));
  }
  return node_->data[0];
}

Tensor Tensor::wrap(std::shared_ptr<Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = node_->shape;
  t.node_->data = node_->data;
  t.node_->requires_grad = false;
  return t;
}

Tensor Tensor::clone_values() const { return detach(); }

bool Tensor::all_finite() const {
  for (double v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::backward() const {
  if (size() != 1) {
    throw std::logic_error("backward() requires a scalar loss, got " +
                           shape_str(shape()));
  }
  // Iterative post-order DFS; graphs can be long chains at training depth.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

namespace {
thread_local bool g_no_grad = false;
}

NoGradGuard::NoGradGuard() : prev_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = prev_; }
bool NoGradGuard::active() { return g_no_grad; }

namespace detail {

Tensor make_op_result(Shape shape, std::vector<double> data,
                      std::vector<std::shared_ptr<Tensor::Node>> parents,
                      std::function<void(Tensor::Node&)> backward) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  bool track = false;
  if (!NoGradGuard::active()) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents = std::move(parents);
    node.backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

}  // namespace pabovw

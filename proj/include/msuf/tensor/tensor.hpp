#pragma once
// Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tensor is a shared handle to a graph node. Ops run eagerly and, when any
// input requires a gradient, record a backward closure on the result node.
// backward(loss) topologically sorts the recorded graph and accumulates
// gradients into every node that requires them. Subgraphs built only from
// constants keep no closures and no parent links.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "msuf/core/errors.hpp"
#include "msuf/core/matrix.hpp"

namespace msuf::tensor {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return rows * cols; }
  bool is_leaf() const { return !backward_fn; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(const Matrix& m) { return make(m.rows, m.cols, m.data, false, {}); }
  static Tensor constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return make(rows, cols, std::move(values), false, {});
  }
  static Tensor parameter(const Matrix& m, std::string name) { return make(m.rows, m.cols, m.data, true, std::move(name)); }
  static Tensor scalar(double v) { return constant(1, 1, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }

  std::span<const double> data() const { return node_->value; }
  // Direct write access for optimizers and checkpoint loading; callers own
  // the consequences for any graph already built from this tensor.
  std::span<double> mutable_data() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor is " + shape_str(rows(), cols()));
    return node_->value[0];
  }
  Matrix value() const { return Matrix(rows(), cols(), node_->value); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  Matrix grad_matrix() const {
    if (!has_grad()) return Matrix(rows(), cols());
    return Matrix(rows(), cols(), node_->grad);
  }
  void zero_grad() { node_->grad.assign(node_->size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  const std::string& name() const { return node_->name; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  static Tensor make(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad,
                     std::string name) {
    if (values.size() != rows * cols) throw ShapeError("tensor: value count does not match " + shape_str(rows, cols));
    if (!all_finite(values)) throw NumericError("tensor: non-finite input value");
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

// Build an op result. The closure and parent links are kept only when some
// parent requires a gradient.
inline Tensor make_result(const char* op, std::size_t rows, std::size_t cols, std::vector<double> value,
                          std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> backward_fn) {
  if (!all_finite(value)) throw NumericError(std::string(op) + ": produced a non-finite value");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

// Accumulate gradients of a scalar loss into every reachable node that
// requires them. Leaf gradients accumulate across calls until zero_grad.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_str(loss.rows(), loss.cols()) : std::string("undefined")));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf() || n->grad.size() != n->size()) n->grad.assign(n->size(), 0.0);
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // Interior grads are scratch space; release them.
  for (Node* n : order) {
    if (!n->is_leaf()) std::vector<double>().swap(n->grad);
  }
}

}  // namespace msuf::tensor

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "lcbm/tensor.hpp"

// Minimal reverse-mode automatic differentiation over lcbm::Tensor.
//
// Every op records its parents and a closure mapping the output gradient to
// parent gradients, whether or not anything requires a gradient, so that
// grad() can differentiate with respect to intermediate values such as the
// backbone feature map. backward() accumulates into parameter leaves.
namespace lcbm::ag {

struct Node {
  Tensor value;
  Tensor grad;  // accumulated by backward() on parameter leaves
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Returns one gradient per parent; an empty Tensor means "no contribution".
  std::function<std::vector<Tensor>(const Tensor&)> backward_fn;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad();
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using IndexMatrix = std::vector<std::vector<std::size_t>>;

// Elementwise / shape ops
Var add(const Var& a, const Var& b);  // same shape
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sum(const Var& a);  // -> scalar (shape {1})
Var relu(const Var& a);
Var tanh(const Var& a);
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var transpose(const Var& a);  // rank-2

// Linear algebra
Var matmul(const Var& a, const Var& b);  // (n x m) * (m x p)
// w: (out x in), x: (in) -> (out). With transpose_w, w is (in x out).
Var matvec(const Var& w, const Var& x, bool transpose_w = false);
Var mean_rows(const Var& a);  // (n x d) -> (d)

// Convolution over a CHW tensor. w: (O x C x kh x kw), b: (O).
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride,
           std::size_t pad);
// CHW (D x H x W) -> row-major cells (HW x D).
Var chw_to_rows(const Var& x);

// Row-wise cosine similarity: a (n x d), b (k x d) -> (n x k). Throws
// PreconditionError on a zero-norm row.
Var cosine_matrix(const Var& a, const Var& b);
Var softmax_rows(const Var& a);
// out[i][j] = m[i][idx[i][j]]
Var gather_columns(const Var& m, const IndexMatrix& idx);
// out[i] = sum_j w[i][j] * p[idx[i][j]]; w (n x k1), p (K x d) -> (n x d)
Var weighted_rows(const Var& w, const Var& p, const IndexMatrix& idx);

// Losses (scalar outputs)
Var cross_entropy(const Var& logits, std::size_t label);
// sum_k KL(softmax(v[k,:]) || softmax(target[:,k])), target is constant.
Var softmax_kl(const Var& v, const Tensor& target, double log_clamp);

// Gradients of `output` (seeded with `seed`, or ones when null) with respect
// to each of `inputs`. Parameter .grad fields are untouched. Throws
// PreconditionError if some input is not an ancestor of output.
std::vector<Tensor> grad(const Var& output, const std::vector<Var>& inputs,
                         const Tensor* seed = nullptr);

// Accumulates d(loss)/d(leaf) into every reachable parameter leaf.
void backward(const Var& loss);

}  // namespace lcbm::ag

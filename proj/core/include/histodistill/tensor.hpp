#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace histodistill::ad {

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every primitive's backward rule is itself expressed through these same
// primitives, so gradients can be recorded on the tape and differentiated
// again. grad(..., {.create_graph = true}) returns gradients that are live
// graph nodes; calling grad() on an expression built from them yields
// second-order derivatives. This is what lets the distillation engine
// differentiate a gradient-matching loss with respect to synthetic pixels.

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<Tensor> parents;
  // Maps the upstream cotangent to one cotangent per parent. An undefined
  // Tensor in the result means no gradient flows to that parent.
  std::function<std::vector<Tensor>(const Tensor&)> vjp;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<double>& data() const { return node_->value; }

  // Mutable access to the underlying buffer. Only valid for leaves that have
  // not yet been consumed by an op; used by optimizers to update parameters.
  std::vector<double>& raw() { return node_->value; }

  double item() const;

  // Value copy with no graph attached.
  Tensor detach() const;

  Node* node_ptr() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;

  friend Tensor make_leaf(Shape, std::vector<double>, bool);
  friend Tensor record(Shape, std::vector<double>, std::vector<Tensor>,
                       std::function<std::vector<Tensor>(const Tensor&)>);
};

// Thread-local tape switch. While disabled, ops produce plain leaves and the
// graph is not extended; grad() uses this to run first-order backward passes
// without paying for the second-order tape.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

using IndexArray = std::shared_ptr<const std::vector<int64_t>>;

// --- elementwise ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor max_scalar(const Tensor& a, double s);
Tensor clamp(const Tensor& a, double lo, double hi);

// --- structure ---
Tensor reshape(const Tensor& a, Shape s);
Tensor broadcast_to(const Tensor& a, const Shape& target);
Tensor sum_axes(const Tensor& a, std::vector<int> axes, bool keepdim = false);
Tensor sum_all(const Tensor& a);  // shape {1}
Tensor gather(const Tensor& a, const IndexArray& idx, Shape out_shape);
Tensor scatter_add(const Tensor& src, const IndexArray& idx, Shape out_shape);

// --- linear algebra (2-D) ---
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// --- composites ---
Tensor mean_all(const Tensor& a);
Tensor mean_axes(const Tensor& a, std::vector<int> axes, bool keepdim = false);
// Broadcasting add/mul: b is expanded to a's shape (numpy trailing rules).
Tensor badd(const Tensor& a, const Tensor& b);
Tensor bmul(const Tensor& a, const Tensor& b);
// Mean cross-entropy of row-wise logits (B x C) against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Softmax over the given axis of a 2-D tensor.
Tensor softmax2d(const Tensor& x, int axis);

struct GradOptions {
  bool create_graph = false;
};

// d(output)/d(wrt) for a scalar output. Unreached inputs get zero gradients.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         GradOptions opts = {});

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace histodistill::ad

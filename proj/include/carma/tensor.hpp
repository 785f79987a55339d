#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// Every op that receives at least one gradient-tracking input records a node
// holding its parents and a closure that pushes the output gradient back into
// them. backward() sorts the graph reachable from a scalar loss into a Tape
// and replays the closures in reverse topological order. Graphs are rebuilt
// every step; a graph may be differentiated only once.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace carma {

#ifdef CARMA_SCALAR_FLOAT
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents
  bool requires_grad = false;
  bool consumed = false;  // set on the loss node once backward() has run

  std::vector<Scalar>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, Scalar value);
  static Tensor from(Shape shape, std::vector<Scalar> values);
  static Tensor scalar(Scalar value);
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<Scalar> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  // Convenience for the rank-2 tensors that dominate the model.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Scalar> data() const;
  // Mutable access is only meaningful on leaves (parameters, constants).
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const Scalar> grad() const;
  void zero_grad();

  // Same values, no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread while alive (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Topologically ordered record of the graph behind one scalar loss.
class Tape {
 public:
  explicit Tape(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  // Runs the recorded closures once, in reverse order.
  void run();

 private:
  std::shared_ptr<detail::Node> loss_;
  std::vector<detail::Node*> nodes_;
};

// Seeds d(loss)/d(loss) = 1 and propagates. Throws ContractError on a
// non-scalar loss or a graph that was already differentiated; warns and
// does nothing when the loss does not depend on any parameter.
void backward(const Tensor& loss);

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise sum of same-shape tensors in one node.
Tensor add_n(std::span<const Tensor> parts);
Tensor mul(const Tensor& a, const Tensor& b);
// Both operands must be scalars.
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar factor);
Tensor add_scalar(const Tensor& a, Scalar offset);
// a[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);

// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& x, std::size_t axis);
// log(sum(exp(x))) over all elements; -inf entries contribute nothing.
Tensor logsumexp(const Tensor& x);
// Sets entries above the diagonal of a square matrix to -inf.
Tensor causal_mask(const Tensor& scores);

// Normalizes along the last axis, then applies gain and bias of length
// shape.back(). Only the trailing axis is supported.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis,
                  Scalar eps = 1e-5);

// Row i divided by sqrt(|row i|^2 + eps).
Tensor row_normalize(const Tensor& x, Scalar eps);

// Mean negative log-likelihood of targets under softmax(logits) per row.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor gather_rows(const Tensor& table, std::span<const int> ids);
// Flat-index gather into a rank-1 result.
Tensor gather(const Tensor& x, std::span<const std::size_t> flat_indices);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// Scalar-valued cosine similarity of two rank-1 tensors with eps-guarded
// norms; differentiable.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, Scalar eps);

// Counts graph-recording and graph-free op invocations on this thread.
// Used to compare inference cost across model variants.
std::size_t op_counter();
void reset_op_counter();

}  // namespace carma

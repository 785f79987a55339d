#include "carma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "carma/errors.hpp"
#include "carma/log.hpp"

namespace carma {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<Scalar>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), Scalar{0});
  return grad;
}

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::size_t t_op_counter = 0;

using NodePtr = std::shared_ptr<detail::Node>;
using BackwardFn = std::function<void(detail::Node&)>;

constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();

// Builds the output node; the closure is attached only when some parent
// tracks gradients and recording is enabled.
Tensor make_result(Shape shape, std::vector<Scalar> value, std::vector<NodePtr> parents,
                   BackwardFn fn) {
  ++t_op_counter;
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (t_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const NodePtr& p) { return p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

bool tracks(const detail::Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

std::vector<Scalar>& parent_grad(detail::Node& self, std::size_t i) {
  return self.parents[i]->ensure_grad();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_scalar(const Tensor& t, const char* op) {
  if (t.size() != 1) {
    throw ShapeError(std::string(op) + ": expected a scalar, got " + shape_string(t.shape()));
  }
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), Scalar{0}); }

Tensor Tensor::filled(Shape shape, Scalar value) {
  std::size_t n = numel(shape);
  return from(std::move(shape), std::vector<Scalar>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Scalar value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<Scalar> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("tensor: use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return data().size(); }

std::size_t Tensor::rows() const {
  require_rank(*this, 2, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank(*this, 2, "cols");
  return node_->shape[1];
}

std::span<const Scalar> Tensor::data() const {
  if (!node_) throw ContractError("tensor: use of undefined tensor");
  return node_->value;
}

std::span<Scalar> Tensor::mutable_data() {
  if (!node_) throw ContractError("tensor: use of undefined tensor");
  return node_->value;
}

Scalar Tensor::item() const {
  require_scalar(*this, "item");
  return node_->value[0];
}

Scalar Tensor::at(std::size_t r, std::size_t c) const {
  require_rank(*this, 2, "at");
  if (r >= node_->shape[0] || c >= node_->shape[1]) {
    throw IndexError("at: (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                     shape_string(node_->shape));
  }
  return node_->value[r * node_->shape[1] + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Scalar> Tensor::grad() const {
  if (!node_) throw ContractError("tensor: use of undefined tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad.assign(node_->value.size(), Scalar{0});
}

Tensor Tensor::detach() const { return from(shape(), node_->value); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

std::size_t op_counter() { return t_op_counter; }
void reset_op_counter() { t_op_counter = 0; }

// ---- Tape / backward ------------------------------------------------------------

Tape::Tape(const Tensor& loss) : loss_(loss.node()) {
  // Iterative post-order DFS; yields parents before children.
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss_.get(), 0);
  seen.insert(loss_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      nodes_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::run() {
  for (detail::Node* n : nodes_) n->ensure_grad();
  loss_->grad.assign(loss_->value.size(), Scalar{1});
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    warn("backward: loss is not connected to any parameter; gradients stay zero");
    return;
  }
  if (loss.node()->consumed) {
    throw ContractError("backward: graph already differentiated; rebuild it for another pass");
  }
  Tape tape(loss);
  tape.run();
  loss.node()->consumed = true;
}

// ---- linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<Scalar> out(m * n, Scalar{0});
  const Scalar* A = a.data().data();
  const Scalar* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = A[i * k + p];
      const Scalar* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](detail::Node& self) {
    const Scalar* G = self.grad.data();
    const Scalar* A = self.parents[0]->value.data();
    const Scalar* B = self.parents[1]->value.data();
    if (tracks(self, 0)) {
      Scalar* dA = parent_grad(self, 0).data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const Scalar* brow = B + p * n;
          const Scalar* grow = G + i * n;
          Scalar acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          dA[i * k + p] += acc;
        }
      }
    }
    if (tracks(self, 1)) {
      Scalar* dB = parent_grad(self, 1).data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const Scalar av = A[i * k + p];
          Scalar* drow = dB + p * n;
          const Scalar* grow = G + i * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Scalar> out(m * n);
  auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return make_result({n, m}, std::move(out), {a.node()}, [m, n](detail::Node& self) {
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += self.grad[j * m + i];
  });
}

// ---- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!tracks(self, p)) continue;
      auto& d = parent_grad(self, p);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Tensor add_n(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("add_n: no inputs");
  std::vector<Scalar> out(parts[0].data().begin(), parts[0].data().end());
  std::vector<NodePtr> parents{parts[0].node()};
  for (std::size_t p = 1; p < parts.size(); ++p) {
    require_same_shape(parts[0], parts[p], "add_n");
    auto x = parts[p].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
    parents.push_back(parts[p].node());
  }
  return make_result(parts[0].shape(), std::move(out), std::move(parents),
                     [](detail::Node& self) {
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         if (!tracks(self, p)) continue;
                         auto& d = parent_grad(self, p);
                         for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    if (tracks(self, 0)) {
      auto& d = parent_grad(self, 0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
    if (tracks(self, 1)) {
      auto& d = parent_grad(self, 1);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (tracks(self, 0)) {
      auto& d = parent_grad(self, 0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * y[i];
    }
    if (tracks(self, 1)) {
      auto& d = parent_grad(self, 1);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * x[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_scalar(a, "div");
  require_scalar(b, "div");
  const Scalar num = a.item(), den = b.item();
  return make_result({}, {num / den}, {a.node(), b.node()}, [num, den](detail::Node& self) {
    const Scalar g = self.grad[0];
    if (tracks(self, 0)) parent_grad(self, 0)[0] += g / den;
    if (tracks(self, 1)) parent_grad(self, 1)[0] -= g * num / (den * den);
  });
}

Tensor scale(const Tensor& a, Scalar factor) {
  auto x = a.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), {a.node()}, [factor](detail::Node& self) {
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, Scalar offset) {
  auto x = a.data();
  std::vector<Scalar> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  return make_result(a.shape(), std::move(out), {a.node()}, [](detail::Node& self) {
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.size() != n) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                     shape_string(a.shape()));
  }
  auto x = a.data(), b = bias.data();
  std::vector<Scalar> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return make_result(a.shape(), std::move(out), {a.node(), bias.node()},
                     [m, n](detail::Node& self) {
                       if (tracks(self, 0)) {
                         auto& d = parent_grad(self, 0);
                         for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
                       }
                       if (tracks(self, 1)) {
                         auto& d = parent_grad(self, 1);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) d[j] += self.grad[i * n + j];
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  constexpr Scalar c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr Scalar k = 0.044715;
  auto in = x.data();
  std::vector<Scalar> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Scalar v = in[i];
    out[i] = Scalar(0.5) * v * (Scalar(1) + std::tanh(c * (v + k * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [](detail::Node& self) {
    const auto& in = self.parents[0]->value;
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Scalar v = in[i];
      const Scalar t = std::tanh(c * (v + k * v * v * v));
      const Scalar dt = (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3) * k * v * v);
      d[i] += self.grad[i] * (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * dt);
    }
  });
}

Tensor log(const Tensor& x) {
  auto in = x.data();
  std::vector<Scalar> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::log(in[i]);
  return make_result(x.shape(), std::move(out), {x.node()}, [](detail::Node& self) {
    const auto& in = self.parents[0]->value;
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] / in[i];
  });
}

// ---- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto in = x.data();
  Scalar s = 0;
  for (Scalar v : in) s += v;
  return make_result({}, {s}, {x.node()}, [](detail::Node& self) {
    auto& d = parent_grad(self, 0);
    for (auto& v : d) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto n = static_cast<Scalar>(x.size());
  return scale(sum(x), Scalar(1) / n);
}

Tensor sum_squares(const Tensor& x) {
  auto in = x.data();
  Scalar s = 0;
  for (Scalar v : in) s += v * v;
  return make_result({}, {s}, {x.node()}, [](detail::Node& self) {
    const auto& in = self.parents[0]->value;
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += Scalar(2) * in[i] * self.grad[0];
  });
}

// ---- softmax family ---------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (x.rank() == 0 || x.rank() > 2 || axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                     shape_string(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  const std::size_t stride = (x.rank() == 2 && axis == 0) ? s[1] : 1;
  const std::size_t lanes = x.size() / len;
  auto in = x.data();
  std::vector<Scalar> out(in.size());
  const bool columnwise = x.rank() == 2 && axis == 0;
  auto lane_base = [columnwise, len](std::size_t lane) {
    return columnwise ? lane : lane * len;
  };
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const std::size_t base = lane_base(lane);
    Scalar mx = kNegInf;
    for (std::size_t i = 0; i < len; ++i) {
      const Scalar v = in[base + i * stride];
      if (std::isnan(v)) throw NumericError("softmax: NaN input");
      mx = std::max(mx, v);
    }
    if (mx == kNegInf) throw NumericError("softmax: every entry of a lane is -inf");
    Scalar total = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const Scalar e = std::exp(in[base + i * stride] - mx);
      out[base + i * stride] = e;
      total += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= total;
  }
  return make_result(s, std::move(out), {x.node()},
                     [len, stride, lanes, lane_base](detail::Node& self) {
                       auto& d = parent_grad(self, 0);
                       const auto& y = self.value;
                       for (std::size_t lane = 0; lane < lanes; ++lane) {
                         const std::size_t base = lane_base(lane);
                         Scalar dot = 0;
                         for (std::size_t i = 0; i < len; ++i) {
                           const std::size_t at = base + i * stride;
                           dot += self.grad[at] * y[at];
                         }
                         for (std::size_t i = 0; i < len; ++i) {
                           const std::size_t at = base + i * stride;
                           d[at] += y[at] * (self.grad[at] - dot);
                         }
                       }
                     });
}

Tensor logsumexp(const Tensor& x) {
  auto in = x.data();
  if (in.empty()) throw ShapeError("logsumexp: empty input");
  Scalar mx = kNegInf;
  for (Scalar v : in) {
    if (std::isnan(v)) throw NumericError("logsumexp: NaN input");
    mx = std::max(mx, v);
  }
  if (mx == kNegInf) throw NumericError("logsumexp: every entry is -inf");
  Scalar total = 0;
  for (Scalar v : in) total += std::exp(v - mx);
  const Scalar lse = mx + std::log(total);
  return make_result({}, {lse}, {x.node()}, [lse](detail::Node& self) {
    const auto& in = self.parents[0]->value;
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[0] * std::exp(in[i] - lse);
  });
}

Tensor causal_mask(const Tensor& scores) {
  require_rank(scores, 2, "causal_mask");
  const std::size_t n = scores.rows();
  if (scores.cols() != n) {
    throw ShapeError("causal_mask: expected a square matrix, got " +
                     shape_string(scores.shape()));
  }
  std::vector<Scalar> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = kNegInf;
  return make_result(scores.shape(), std::move(out), {scores.node()}, [n](detail::Node& self) {
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) d[i * n + j] += self.grad[i * n + j];
  });
}

// ---- normalization ----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis,
                  Scalar eps) {
  if (x.rank() == 0 || axis != x.rank() - 1) {
    throw ShapeError("layer_norm: only the trailing axis is supported, got axis " +
                     std::to_string(axis) + " for " + shape_string(x.shape()));
  }
  const std::size_t n = x.shape().back();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                     shape_string(bias.shape()) + " not broadcastable over " +
                     shape_string(x.shape()));
  }
  const std::size_t lanes = x.size() / n;
  auto in = x.data(), g = gain.data(), b = bias.data();
  std::vector<Scalar> out(in.size());
  std::vector<Scalar> xhat(in.size());
  std::vector<Scalar> inv_std(lanes);
  for (std::size_t r = 0; r < lanes; ++r) {
    const Scalar* row = in.data() + r * n;
    Scalar mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<Scalar>(n);
    Scalar var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Scalar>(n);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar h = (row[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = g[j] * h + b[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [n, lanes, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.parents[1]->value;
        const Scalar* G = self.grad.data();
        if (tracks(self, 1)) {
          auto& dg = parent_grad(self, 1);
          for (std::size_t r = 0; r < lanes; ++r)
            for (std::size_t j = 0; j < n; ++j) dg[j] += G[r * n + j] * xhat[r * n + j];
        }
        if (tracks(self, 2)) {
          auto& db = parent_grad(self, 2);
          for (std::size_t r = 0; r < lanes; ++r)
            for (std::size_t j = 0; j < n; ++j) db[j] += G[r * n + j];
        }
        if (tracks(self, 0)) {
          auto& dx = parent_grad(self, 0);
          const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
          for (std::size_t r = 0; r < lanes; ++r) {
            Scalar sum_d = 0, sum_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const Scalar dh = G[r * n + j] * g[j];
              sum_d += dh;
              sum_dx += dh * xhat[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const Scalar dh = G[r * n + j] * g[j];
              dx[r * n + j] +=
                  inv_std[r] * (dh - inv_n * sum_d - xhat[r * n + j] * inv_n * sum_dx);
            }
          }
        }
      });
}

Tensor row_normalize(const Tensor& x, Scalar eps) {
  require_rank(x, 2, "row_normalize");
  const std::size_t m = x.rows(), n = x.cols();
  auto in = x.data();
  std::vector<Scalar> out(in.size());
  std::vector<Scalar> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    Scalar ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += in[i * n + j] * in[i * n + j];
    const Scalar s = std::sqrt(ss + eps);
    norms[i] = s;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = in[i * n + j] / s;
  }
  return make_result(x.shape(), std::move(out), {x.node()},
                     [m, n, norms = std::move(norms)](detail::Node& self) {
                       const auto& in = self.parents[0]->value;
                       auto& d = parent_grad(self, 0);
                       for (std::size_t i = 0; i < m; ++i) {
                         const Scalar s = norms[i];
                         Scalar xg = 0;
                         for (std::size_t j = 0; j < n; ++j)
                           xg += in[i * n + j] * self.grad[i * n + j];
                         const Scalar s3 = s * s * s;
                         for (std::size_t j = 0; j < n; ++j)
                           d[i * n + j] += self.grad[i * n + j] / s - in[i * n + j] * xg / s3;
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t batch = logits.rows(), vocab = logits.cols();
  if (targets.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(batch) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  auto in = logits.data();
  std::vector<Scalar> probs(in.size());
  Scalar loss = 0;
  for (std::size_t r = 0; r < batch; ++r) {
    const Scalar* row = in.data() + r * vocab;
    Scalar mx = kNegInf;
    for (std::size_t j = 0; j < vocab; ++j) {
      if (std::isnan(row[j])) throw NumericError("cross_entropy: NaN logit");
      mx = std::max(mx, row[j]);
    }
    Scalar total = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - mx);
      total += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= total;
    loss += (mx + std::log(total)) - row[targets[r]];
  }
  loss /= static_cast<Scalar>(batch);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result({}, {loss}, {logits.node()},
                     [batch, vocab, probs = std::move(probs), tgt = std::move(tgt)](
                         detail::Node& self) {
                       auto& d = parent_grad(self, 0);
                       const Scalar g = self.grad[0] / static_cast<Scalar>(batch);
                       for (std::size_t r = 0; r < batch; ++r) {
                         for (std::size_t j = 0; j < vocab; ++j)
                           d[r * vocab + j] += g * probs[r * vocab + j];
                         d[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
                       }
                     });
}

// ---- indexing ---------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "gather_rows");
  const std::size_t vocab = table.rows(), d = table.cols();
  auto in = table.data();
  std::vector<Scalar> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(in.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table.node()},
                     [d, idx = std::move(idx)](detail::Node& self) {
                       auto& g = parent_grad(self, 0);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         Scalar* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
                       }
                     });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> flat_indices) {
  auto in = x.data();
  std::vector<Scalar> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= in.size()) {
      throw IndexError("gather: index " + std::to_string(flat_indices[i]) + " outside " +
                       shape_string(x.shape()));
    }
    out[i] = in[flat_indices[i]];
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  return make_result({idx.size()}, std::move(out), {x.node()},
                     [idx](detail::Node& self) {
                       auto& d = parent_grad(self, 0);
                       for (std::size_t i = 0; i < idx.size(); ++i) d[idx[i]] += self.grad[i];
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  const std::size_t n = x.cols();
  if (begin > end || end > x.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + shape_string(x.shape()));
  }
  auto in = x.data();
  std::vector<Scalar> out(in.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          in.begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_result({end - begin, n}, std::move(out), {x.node()},
                     [begin, n](detail::Node& self) {
                       auto& d = parent_grad(self, 0);
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         d[begin * n + i] += self.grad[i];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin > end || end > n) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  auto in = x.data();
  std::vector<Scalar> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(in.data() + i * n + begin, w, out.data() + i * w);
  return make_result({m, w}, std::move(out), {x.node()}, [m, n, w, begin](detail::Node& self) {
    auto& d = parent_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) d[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    offsets.push_back(total);
    total += p.rows();
    parents.push_back(p.node());
  }
  std::vector<Scalar> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({total, n}, std::move(out), std::move(parents),
                     [offsets, n](detail::Node& self) {
                       for (std::size_t p = 0; p < offsets.size(); ++p) {
                         if (!tracks(self, p)) continue;
                         auto& d = parent_grad(self, p);
                         const std::size_t base = offsets[p] * n;
                         for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[base + i];
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets, widths;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
    parents.push_back(p.node());
  }
  std::vector<Scalar> out(m * total);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto in = parts[p].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(in.data() + i * widths[p], widths[p], out.data() + i * total + offsets[p]);
  }
  return make_result({m, total}, std::move(out), std::move(parents),
                     [m, total, offsets, widths](detail::Node& self) {
                       for (std::size_t p = 0; p < offsets.size(); ++p) {
                         if (!tracks(self, p)) continue;
                         auto& d = parent_grad(self, p);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < widths[p]; ++j)
                             d[i * widths[p] + j] += self.grad[i * total + offsets[p] + j];
                       }
                     });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, Scalar eps) {
  require_rank(a, 1, "cosine_similarity");
  require_rank(b, 1, "cosine_similarity");
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: dimension mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  auto x = a.data(), y = b.data();
  Scalar xy = 0, xx = 0, yy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  const Scalar sa = std::sqrt(xx + eps), sb = std::sqrt(yy + eps);
  const Scalar c = xy / (sa * sb);
  return make_result({}, {c}, {a.node(), b.node()}, [sa, sb, c](detail::Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    const Scalar g = self.grad[0];
    if (tracks(self, 0)) {
      auto& d = parent_grad(self, 0);
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] += g * (y[i] / (sa * sb) - c * x[i] / (sa * sa));
    }
    if (tracks(self, 1)) {
      auto& d = parent_grad(self, 1);
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] += g * (x[i] / (sa * sb) - c * y[i] / (sb * sb));
    }
  });
}

}  // namespace carma

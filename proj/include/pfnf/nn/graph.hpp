#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pfnf/nn/tensor.hpp"

namespace pfnf::nn {

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
  kInput,
  kConstant,
  kParameter,
  kMatMul,
  kBatchMatMul,
  kAdd,
  kMul,
  kScale,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kRelu,
  kGather,
  kConcat,
  kReshape,
  kPermute,
  kSum,
  kMean,
  kNll,
  kCrossEntropy,
  kAttention,
  kLinear,
};

const char* op_name(OpKind kind);

// A static computation graph over dense tensors with reverse-mode
// differentiation.
//
// Nodes are appended through the builder methods; each method infers the
// output shape and throws ShapeError naming the offending node when the
// inputs are incompatible. Construction order is a topological order.
// `forward` evaluates every node and caches its value, `backward` then
// accumulates gradients in reverse construction order.
//
// Parameters are referenced, not copied: the tensors passed to `parameter`
// must outlive the graph and must not be resized while it is in use.
template <typename T>
class Graph {
 public:
  struct Options {
    // Raise NonFiniteError as soon as any forward value or gradient is NaN/Inf.
    bool check_finite = true;
  };

  Graph() = default;
  explicit Graph(Options options) : options_(options) {}

  // ---- leaves ----
  NodeId input(std::string name, Shape shape, bool requires_grad = false);
  NodeId constant(std::string name, Tensor<T> value);
  NodeId parameter(std::string name, const Tensor<T>& value);

  // ---- primitives ----
  // a[..., K] x b[K, N] -> [..., N].
  NodeId matmul(NodeId a, NodeId b);
  // x[..., K] w[K, N] + b[N]; same result as add(matmul(x, w), b) in one pass.
  NodeId linear(NodeId x, NodeId w, NodeId b);
  // a[B, M, K] x b[B, K, N] -> [B, M, N]; with transpose_b, b is [B, N, K].
  NodeId bmm(NodeId a, NodeId b, bool transpose_b = false);
  // Elementwise; b's shape must equal a trailing suffix of a's shape.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, T factor);
  // softmax(a / temperature) over the last axis.
  NodeId softmax(NodeId a, T temperature = T{1});
  // Normalizes over the last axis, then gamma * xhat + beta.
  NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, T eps = T{1e-5});
  NodeId gelu(NodeId a);
  NodeId relu(NodeId a);
  NodeId gather(NodeId a, std::size_t axis, std::vector<std::size_t> indices);
  NodeId concat(const std::vector<NodeId>& parts, std::size_t axis);
  NodeId reshape(NodeId a, Shape shape);
  NodeId permute(NodeId a, std::vector<std::size_t> axes);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  // probs[N, K]; mean over rows of -log(probs[i, targets[i]] + eps).
  NodeId nll(NodeId probs, std::vector<std::size_t> targets, T eps);
  // logits[N, K]; mean over rows of -log softmax(logits)[i, targets[i]].
  NodeId cross_entropy(NodeId logits, std::vector<std::size_t> targets);

  // Multi-head scaled dot-product attention core. q[B, Sq, E] attends to
  // k, v[B, Sk, E]; E splits into `heads` contiguous slices. Returns the
  // concatenated head outputs [B, Sq, E] (no projections). Each query row is
  // computed independently of the others.
  NodeId attention(NodeId q, NodeId k, NodeId v, std::size_t heads);

  // ---- execution ----
  void bind(NodeId input, Tensor<T> value);
  void forward();
  void forward(std::vector<std::pair<NodeId, Tensor<T>>> bindings);
  // Seeds d(output) with `output_grad` and propagates to every node that
  // depends on a parameter or a requires_grad input.
  void backward(NodeId output, const Tensor<T>& output_grad);
  // Scalar output, seeded with 1.
  void backward(NodeId output);

  const Tensor<T>& value(NodeId id) const;
  // Zero-shaped tensor when the node received no gradient.
  const Tensor<T>& gradient(NodeId id) const;
  const Shape& shape(NodeId id) const { return nodes_.at(id.index).shape; }
  const std::string& name(NodeId id) const { return nodes_.at(id.index).name; }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& parameters() const { return parameters_; }
  bool has_forward() const { return forward_done_; }

 private:
  struct Node {
    OpKind kind{};
    std::string name;
    std::vector<NodeId> inputs;
    Shape shape;
    bool requires_grad = false;
    bool bound = false;
    T scalar{};
    bool flag = false;
    std::size_t axis = 0;
    std::vector<std::size_t> indices;
    const Tensor<T>* external = nullptr;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> aux;
  };

  NodeId push(Node node);
  Node& node(NodeId id) { return nodes_.at(id.index); }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const Tensor<T>& val(const Node& n) const { return n.external ? *n.external : n.value; }
  std::string label(const Node& n) const;
  [[noreturn]] void shape_fail(OpKind kind, const std::string& detail) const;
  void run_node(Node& n);
  void backprop_node(Node& n);
  Tensor<T>& grad_of(NodeId id);

  Options options_{};
  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
  bool forward_done_ = false;
  Tensor<T> empty_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace pfnf::nn

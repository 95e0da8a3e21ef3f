#include "pfnf/nn/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "rowwise_gemm.hpp"

namespace pfnf::nn {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kBatchMatMul: return "bmm";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kRelu: return "relu";
    case OpKind::kGather: return "gather";
    case OpKind::kConcat: return "concat";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPermute: return "permute";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kNll: return "nll";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kAttention: return "attention";
    case OpKind::kLinear: return "linear";
  }
  return "?";
}

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;
template <typename T>
using StridedM = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedCM = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ArrX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using MapA = Eigen::Map<ArrX<T>>;
template <typename T>
using MapCA = Eigen::Map<const ArrX<T>>;

// Row stride rounded up to a 64-byte multiple.
template <typename T>
std::size_t padded_width(std::size_t width) {
  constexpr std::size_t lanes = 64 / sizeof(T);
  return (width + lanes - 1) / lanes * lanes;
}

bool is_suffix(const Shape& whole, const Shape& part) {
  if (part.size() > whole.size()) return false;
  return std::equal(part.rbegin(), part.rend(), whole.rbegin());
}

Shape permuted_shape(const Shape& shape, const std::vector<std::size_t>& axes) {
  Shape out(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out[i] = shape[axes[i]];
  return out;
}

// out[permuted index] = in[index]; `axes[i]` is the input axis placed at output axis i.
template <typename T>
void permute_copy(const T* in, const Shape& in_shape, const std::vector<std::size_t>& axes, T* out) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  const Shape out_shape = permuted_shape(in_shape, axes);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[axes[i]];

  // Inner contiguous run when the last axis stays in place.
  std::size_t inner = 1;
  std::size_t outer_rank = rank;
  if (rank > 0 && axes[rank - 1] == rank - 1) {
    inner = in_shape[rank - 1];
    outer_rank = rank - 1;
  }
  std::size_t total = shape_size(out_shape) / std::max<std::size_t>(inner, 1);
  std::vector<std::size_t> counter(outer_rank, 0);
  std::size_t src = 0;
  T* dst = out;
  for (std::size_t it = 0; it < total; ++it) {
    if (inner == 1 && outer_rank == rank) {
      *dst++ = in[src];
    } else {
      std::memcpy(dst, in + src, inner * sizeof(T));
      dst += inner;
    }
    for (std::size_t ax = outer_rank; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += step[ax];
        break;
      }
      src -= step[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
}

std::vector<std::size_t> inverse_axes(const std::vector<std::size_t>& axes) {
  std::vector<std::size_t> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
  return inv;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;

}  // namespace

template <typename T>
std::string Graph<T>::label(const Node& n) const {
  return std::string(op_name(n.kind)) + " node '" + n.name + "'";
}

template <typename T>
void Graph<T>::shape_fail(OpKind kind, const std::string& detail) const {
  throw ShapeError(std::string(op_name(kind)) + " node #" + std::to_string(nodes_.size()) + ": " +
                   detail);
}

template <typename T>
NodeId Graph<T>::push(Node n) {
  if (n.name.empty()) n.name = std::string(op_name(n.kind)) + "#" + std::to_string(nodes_.size());
  for (NodeId in : n.inputs) {
    if (in.index >= nodes_.size()) throw StateError("node input refers to a later node");
    n.requires_grad = n.requires_grad || nodes_[in.index].requires_grad;
  }
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
NodeId Graph<T>::input(std::string name, Shape shape, bool requires_grad) {
  Node n;
  n.kind = OpKind::kInput;
  n.name = std::move(name);
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::constant(std::string name, Tensor<T> value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.name = std::move(name);
  n.shape = value.shape();
  n.value = std::move(value);
  n.bound = true;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::parameter(std::string name, const Tensor<T>& value) {
  Node n;
  n.kind = OpKind::kParameter;
  n.name = std::move(name);
  n.shape = value.shape();
  n.external = &value;
  n.requires_grad = true;
  n.bound = true;
  NodeId id = push(std::move(n));
  parameters_.push_back(id);
  return id;
}

template <typename T>
NodeId Graph<T>::matmul(NodeId a, NodeId b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) {
    shape_fail(OpKind::kMatMul, "cannot multiply " + shape_string(sa) + " by " + shape_string(sb));
  }
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.shape = sa;
  n.shape.back() = sb[1];
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::linear(NodeId x, NodeId w, NodeId b) {
  const Shape& sx = node(x).shape;
  const Shape& sw = node(w).shape;
  const Shape& sb = node(b).shape;
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0] || sb != Shape{sw[1]}) {
    shape_fail(OpKind::kLinear, "cannot apply " + shape_string(sw) + " + " + shape_string(sb) + " to " +
                                    shape_string(sx));
  }
  Node n;
  n.kind = OpKind::kLinear;
  n.inputs = {x, w, b};
  n.shape = sx;
  n.shape.back() = sw[1];
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::bmm(NodeId a, NodeId b, bool transpose_b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  const bool ok = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] &&
                  (transpose_b ? sa[2] == sb[2] : sa[2] == sb[1]);
  if (!ok) {
    shape_fail(OpKind::kBatchMatMul, "incompatible " + shape_string(sa) + " x " + shape_string(sb) +
                                         (transpose_b ? "^T" : ""));
  }
  Node n;
  n.kind = OpKind::kBatchMatMul;
  n.inputs = {a, b};
  n.flag = transpose_b;
  n.shape = {sa[0], sa[1], transpose_b ? sb[1] : sb[2]};
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) {
  if (!is_suffix(node(a).shape, node(b).shape)) {
    shape_fail(OpKind::kAdd, "cannot broadcast " + shape_string(node(b).shape) + " onto " +
                                 shape_string(node(a).shape));
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::mul(NodeId a, NodeId b) {
  if (!is_suffix(node(a).shape, node(b).shape)) {
    shape_fail(OpKind::kMul, "cannot broadcast " + shape_string(node(b).shape) + " onto " +
                                 shape_string(node(a).shape));
  }
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::scale(NodeId a, T factor) {
  Node n;
  n.kind = OpKind::kScale;
  n.inputs = {a};
  n.scalar = factor;
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::softmax(NodeId a, T temperature) {
  if (!(temperature > T{0})) shape_fail(OpKind::kSoftmax, "temperature must be positive");
  if (node(a).shape.empty()) shape_fail(OpKind::kSoftmax, "scalar input");
  Node n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {a};
  n.scalar = temperature;
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::layernorm(NodeId x, NodeId gamma, NodeId beta, T eps) {
  const Shape& sx = node(x).shape;
  if (sx.empty() || node(gamma).shape != Shape{sx.back()} || node(beta).shape != Shape{sx.back()}) {
    shape_fail(OpKind::kLayerNorm, "input " + shape_string(sx) + " with gamma " +
                                       shape_string(node(gamma).shape) + " and beta " +
                                       shape_string(node(beta).shape));
  }
  Node n;
  n.kind = OpKind::kLayerNorm;
  n.inputs = {x, gamma, beta};
  n.scalar = eps;
  n.shape = sx;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::gelu(NodeId a) {
  Node n;
  n.kind = OpKind::kGelu;
  n.inputs = {a};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::relu(NodeId a) {
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {a};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::gather(NodeId a, std::size_t axis, std::vector<std::size_t> indices) {
  const Shape& sa = node(a).shape;
  if (axis >= sa.size()) shape_fail(OpKind::kGather, "axis out of range for " + shape_string(sa));
  for (std::size_t i : indices) {
    if (i >= sa[axis]) {
      shape_fail(OpKind::kGather, "index " + std::to_string(i) + " out of range for axis of size " +
                                      std::to_string(sa[axis]));
    }
  }
  Node n;
  n.kind = OpKind::kGather;
  n.inputs = {a};
  n.axis = axis;
  n.shape = sa;
  n.shape[axis] = indices.size();
  n.indices = std::move(indices);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::concat(const std::vector<NodeId>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail(OpKind::kConcat, "no inputs");
  Shape out = node(parts[0]).shape;
  if (axis >= out.size()) shape_fail(OpKind::kConcat, "axis out of range");
  out[axis] = 0;
  for (NodeId p : parts) {
    Shape s = node(p).shape;
    if (s.size() != out.size()) shape_fail(OpKind::kConcat, "rank mismatch " + shape_string(s));
    out[axis] += s[axis];
    s[axis] = out[axis];
    if (s != out) shape_fail(OpKind::kConcat, "incompatible part " + shape_string(node(p).shape));
  }
  Node n;
  n.kind = OpKind::kConcat;
  n.inputs = parts;
  n.axis = axis;
  n.shape = out;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::reshape(NodeId a, Shape shape) {
  if (shape_size(shape) != shape_size(node(a).shape)) {
    shape_fail(OpKind::kReshape,
               "cannot reshape " + shape_string(node(a).shape) + " to " + shape_string(shape));
  }
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {a};
  n.shape = std::move(shape);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::permute(NodeId a, std::vector<std::size_t> axes) {
  const Shape& sa = node(a).shape;
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  bool ok = axes.size() == sa.size();
  for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == i;
  if (!ok) shape_fail(OpKind::kPermute, "axes are not a permutation of " + shape_string(sa));
  Node n;
  n.kind = OpKind::kPermute;
  n.inputs = {a};
  n.shape = permuted_shape(sa, axes);
  n.indices = std::move(axes);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::sum(NodeId a) {
  Node n;
  n.kind = OpKind::kSum;
  n.inputs = {a};
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::mean(NodeId a) {
  if (shape_size(node(a).shape) == 0) shape_fail(OpKind::kMean, "empty input");
  Node n;
  n.kind = OpKind::kMean;
  n.inputs = {a};
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::nll(NodeId probs, std::vector<std::size_t> targets, T eps) {
  const Shape& sp = node(probs).shape;
  if (sp.size() != 2 || sp[0] != targets.size() || sp[0] == 0) {
    shape_fail(OpKind::kNll, "probabilities " + shape_string(sp) + " with " +
                                 std::to_string(targets.size()) + " targets");
  }
  for (std::size_t t : targets) {
    if (t >= sp[1]) shape_fail(OpKind::kNll, "target " + std::to_string(t) + " out of range");
  }
  Node n;
  n.kind = OpKind::kNll;
  n.inputs = {probs};
  n.indices = std::move(targets);
  n.scalar = eps;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::cross_entropy(NodeId logits, std::vector<std::size_t> targets) {
  const Shape& sp = node(logits).shape;
  if (sp.size() != 2 || sp[0] != targets.size() || sp[0] == 0) {
    shape_fail(OpKind::kCrossEntropy, "logits " + shape_string(sp) + " with " +
                                          std::to_string(targets.size()) + " targets");
  }
  for (std::size_t t : targets) {
    if (t >= sp[1]) shape_fail(OpKind::kCrossEntropy, "target " + std::to_string(t) + " out of range");
  }
  Node n;
  n.kind = OpKind::kCrossEntropy;
  n.inputs = {logits};
  n.indices = std::move(targets);
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::attention(NodeId q, NodeId k, NodeId v, std::size_t heads) {
  const Shape& sq = node(q).shape;
  const Shape& sk = node(k).shape;
  const bool ok = sq.size() == 3 && sk.size() == 3 && node(v).shape == sk && sq[0] == sk[0] &&
                  sq[2] == sk[2] && heads > 0 && sq[2] % heads == 0 && sk[1] > 0;
  if (!ok) {
    shape_fail(OpKind::kAttention, "queries " + shape_string(sq) + ", keys " + shape_string(sk) + ", values " +
                                       shape_string(node(v).shape) + ", heads " + std::to_string(heads));
  }
  Node n;
  n.kind = OpKind::kAttention;
  n.inputs = {q, k, v};
  n.axis = heads;
  n.shape = sq;
  return push(std::move(n));
}

template <typename T>
void Graph<T>::bind(NodeId id, Tensor<T> value) {
  Node& n = node(id);
  if (n.kind != OpKind::kInput) throw StateError("bind: " + label(n) + " is not an input");
  if (value.shape() != n.shape) {
    throw ShapeError("bind: " + label(n) + " expects " + shape_string(n.shape) + ", got " +
                     shape_string(value.shape()));
  }
  n.value = std::move(value);
  n.bound = true;
  forward_done_ = false;
}

template <typename T>
void Graph<T>::forward(std::vector<std::pair<NodeId, Tensor<T>>> bindings) {
  for (auto& [id, value] : bindings) bind(id, std::move(value));
  forward();
}

template <typename T>
void Graph<T>::forward() {
  for (Node& n : nodes_) {
    n.grad = Tensor<T>();
    if (n.kind == OpKind::kInput) {
      if (!n.bound) throw StateError("forward: " + label(n) + " is not bound");
      if (options_.check_finite && !n.value.all_finite()) {
        throw NonFiniteError("forward: " + label(n) + " holds a non-finite value");
      }
      continue;
    }
    if (n.kind == OpKind::kConstant || n.kind == OpKind::kParameter) {
      if (options_.check_finite && !val(n).all_finite()) {
        throw NonFiniteError("forward: " + label(n) + " holds a non-finite value");
      }
      continue;
    }
    run_node(n);
    if (options_.check_finite && !n.value.all_finite()) {
      throw NonFiniteError("forward: " + label(n) + " produced a non-finite value");
    }
  }
  forward_done_ = true;
}

template <typename T>
void Graph<T>::run_node(Node& n) {
  n.value = Tensor<T>(n.shape);
  T* out = n.value.ptr();
  switch (n.kind) {
    case OpKind::kMatMul: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const Tensor<T>& b = val(node(n.inputs[1]));
      const std::size_t k = b.dim(0), cols = b.dim(1), rows = a.size() / k;
      detail::gemm_rows<T>(a.ptr(), k, rows, k, b.ptr(), cols, cols, nullptr, out, cols);
      break;
    }
    case OpKind::kLinear: {
      const Tensor<T>& x = val(node(n.inputs[0]));
      const Tensor<T>& w = val(node(n.inputs[1]));
      const Tensor<T>& b = val(node(n.inputs[2]));
      const std::size_t k = w.dim(0), cols = w.dim(1), rows = x.size() / k;
      detail::gemm_rows<T>(x.ptr(), k, rows, k, w.ptr(), cols, cols, b.ptr(), out, cols);
      break;
    }
    case OpKind::kBatchMatMul: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const Tensor<T>& b = val(node(n.inputs[1]));
      const std::size_t batch = a.dim(0);
      const auto m = static_cast<Eigen::Index>(a.dim(1));
      const auto k = static_cast<Eigen::Index>(a.dim(2));
      const auto cols = static_cast<Eigen::Index>(n.shape[2]);
      for (std::size_t i = 0; i < batch; ++i) {
        MapCM<T> am(a.ptr() + i * m * k, m, k);
        MapM<T> cm(out + i * m * cols, m, cols);
        if (n.flag) {
          cm.noalias() = am * MapCM<T>(b.ptr() + i * cols * k, cols, k).transpose();
        } else {
          cm.noalias() = am * MapCM<T>(b.ptr() + i * k * cols, k, cols);
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const Tensor<T>& b = val(node(n.inputs[1]));
      const std::size_t inner = b.size();
      const std::size_t outer = inner ? a.size() / inner : 0;
      MapCA<T> bv(b.ptr(), static_cast<Eigen::Index>(inner));
      for (std::size_t o = 0; o < outer; ++o) {
        MapCA<T> av(a.ptr() + o * inner, static_cast<Eigen::Index>(inner));
        MapA<T> ov(out + o * inner, static_cast<Eigen::Index>(inner));
        if (n.kind == OpKind::kAdd) {
          ov = av + bv;
        } else {
          ov = av * bv;
        }
      }
      break;
    }
    case OpKind::kScale: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      MapA<T>(out, static_cast<Eigen::Index>(a.size())) =
          MapCA<T>(a.ptr(), static_cast<Eigen::Index>(a.size())) * n.scalar;
      break;
    }
    case OpKind::kSoftmax: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const std::size_t width = n.shape.back();
      const std::size_t rows = width ? a.size() / width : 0;
      const T inv_t = T{1} / n.scalar;
      for (std::size_t r = 0; r < rows; ++r) {
        MapCA<T> x(a.ptr() + r * width, static_cast<Eigen::Index>(width));
        MapA<T> y(out + r * width, static_cast<Eigen::Index>(width));
        const T mx = x.maxCoeff();
        y = ((x - mx) * inv_t).exp();
        y /= y.sum();
      }
      break;
    }
    case OpKind::kLayerNorm: {
      const Tensor<T>& x = val(node(n.inputs[0]));
      const Tensor<T>& gamma = val(node(n.inputs[1]));
      const Tensor<T>& beta = val(node(n.inputs[2]));
      const std::size_t width = n.shape.back();
      const std::size_t rows = x.size() / width;
      // aux holds (xhat rows..., rstd per row) for the backward pass.
      n.aux = Tensor<T>(Shape{x.size() + rows});
      T* xhat = n.aux.ptr();
      T* rstd = xhat + x.size();
      const auto w = static_cast<Eigen::Index>(width);
      MapCA<T> g(gamma.ptr(), w);
      MapCA<T> bt(beta.ptr(), w);
      for (std::size_t r = 0; r < rows; ++r) {
        MapCA<T> xr(x.ptr() + r * width, w);
        MapA<T> hr(xhat + r * width, w);
        const T mu = xr.mean();
        hr = xr - mu;
        const T var = hr.square().mean();
        rstd[r] = T{1} / std::sqrt(var + n.scalar);
        hr *= rstd[r];
        MapA<T>(out + r * width, w) = hr * g + bt;
      }
      break;
    }
    case OpKind::kGelu: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const auto sz = static_cast<Eigen::Index>(a.size());
      MapCA<T> x(a.ptr(), sz);
      MapA<T>(out, sz) =
          T(0.5) * x * (T(1) + (T(kGeluC) * (x + T(kGeluK) * x.cube())).tanh());
      break;
    }
    case OpKind::kRelu: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const auto sz = static_cast<Eigen::Index>(a.size());
      MapA<T>(out, sz) = MapCA<T>(a.ptr(), sz).max(T{0});
      break;
    }
    case OpKind::kGather: {
      const Node& src = node(n.inputs[0]);
      const Tensor<T>& a = val(src);
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) outer *= src.shape[i];
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < src.shape.size(); ++i) inner *= src.shape[i];
      const std::size_t in_axis = src.shape[n.axis];
      const std::size_t out_axis = n.indices.size();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < out_axis; ++j) {
          std::memcpy(out + (o * out_axis + j) * inner, a.ptr() + (o * in_axis + n.indices[j]) * inner,
                      inner * sizeof(T));
        }
      }
      break;
    }
    case OpKind::kConcat: {
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) outer *= n.shape[i];
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < n.shape.size(); ++i) inner *= n.shape[i];
      const std::size_t out_axis = n.shape[n.axis];
      std::size_t offset = 0;
      for (NodeId p : n.inputs) {
        const Node& part = node(p);
        const Tensor<T>& pv = val(part);
        const std::size_t pa = part.shape[n.axis];
        for (std::size_t o = 0; o < outer; ++o) {
          std::memcpy(out + (o * out_axis + offset) * inner, pv.ptr() + o * pa * inner,
                      pa * inner * sizeof(T));
        }
        offset += pa;
      }
      break;
    }
    case OpKind::kReshape: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      std::memcpy(out, a.ptr(), a.size() * sizeof(T));
      break;
    }
    case OpKind::kPermute: {
      const Node& src = node(n.inputs[0]);
      permute_copy(val(src).ptr(), src.shape, n.indices, out);
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      T total = MapCA<T>(a.ptr(), static_cast<Eigen::Index>(a.size())).sum();
      if (n.kind == OpKind::kMean) total /= static_cast<T>(a.size());
      out[0] = total;
      break;
    }
    case OpKind::kNll: {
      const Tensor<T>& p = val(node(n.inputs[0]));
      const std::size_t k = p.dim(1);
      T total{0};
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        const T q = p[i * k + n.indices[i]] + n.scalar;
        if (!(q > T{0})) {
          throw NonFiniteError("forward: " + label(n) + " has zero probability at the true outcome of row " +
                               std::to_string(i));
        }
        total -= std::log(q);
      }
      out[0] = total / static_cast<T>(n.indices.size());
      break;
    }
    case OpKind::kCrossEntropy: {
      const Tensor<T>& z = val(node(n.inputs[0]));
      const std::size_t k = z.dim(1);
      const std::size_t rows = z.dim(0);
      n.aux = Tensor<T>(z.shape());
      T total{0};
      for (std::size_t i = 0; i < rows; ++i) {
        MapCA<T> zr(z.ptr() + i * k, static_cast<Eigen::Index>(k));
        MapA<T> pr(n.aux.ptr() + i * k, static_cast<Eigen::Index>(k));
        const T mx = zr.maxCoeff();
        pr = (zr - mx).exp();
        const T s = pr.sum();
        pr /= s;
        total -= (z[i * k + n.indices[i]] - mx) - std::log(s);
      }
      out[0] = total / static_cast<T>(rows);
      break;
    }
    case OpKind::kAttention: {
      const Tensor<T>& q = val(node(n.inputs[0]));
      const Tensor<T>& k = val(node(n.inputs[1]));
      const Tensor<T>& v = val(node(n.inputs[2]));
      const std::size_t batch = n.shape[0], sq = n.shape[1], e = n.shape[2];
      const std::size_t sk = k.dim(1), heads = n.axis, dh = e / heads;
      const T scale = T(1) / std::sqrt(static_cast<T>(dh));
      const auto isk = static_cast<Eigen::Index>(sk);
      const std::size_t ld = padded_width<T>(sk);
      // aux holds the attention weights [B, H, Sq, ld]; the padded stride
      // gives every row the same alignment, hence the same rounding.
      n.aux = Tensor<T>(Shape{batch, heads, sq, ld});
      std::vector<T> kt(dh * sk);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const T* kb = k.ptr() + b * sk * e + h * dh;
          for (std::size_t j = 0; j < sk; ++j) {
            for (std::size_t c = 0; c < dh; ++c) kt[c * sk + j] = kb[j * e + c];
          }
          T* pm = n.aux.ptr() + (b * heads + h) * sq * ld;
          detail::gemm_rows<T>(q.ptr() + b * sq * e + h * dh, e, sq, dh, kt.data(), sk, sk, nullptr, pm, ld);
          for (std::size_t i = 0; i < sq; ++i) {
            // Whole padded rows keep exp on the packet path; pads are masked.
            MapA<T> row(pm + i * ld, static_cast<Eigen::Index>(ld));
            const T mx = row.head(isk).maxCoeff();
            row = ((row - mx) * scale).exp();
            row.tail(static_cast<Eigen::Index>(ld - sk)).setZero();
            row /= row.sum();
          }
          detail::gemm_rows<T>(pm, ld, sq, sk, v.ptr() + b * sk * e + h * dh, e, dh, nullptr,
                               out + b * sq * e + h * dh, e);
        }
      }
      break;
    }
    default:
      throw StateError("forward: unexpected leaf in run_node");
  }
}

template <typename T>
Tensor<T>& Graph<T>::grad_of(NodeId id) {
  Node& n = node(id);
  if (n.grad.size() != shape_size(n.shape) || n.grad.shape() != n.shape) n.grad = Tensor<T>(n.shape);
  return n.grad;
}

template <typename T>
void Graph<T>::backward(NodeId output) {
  const Node& n = node(output);
  if (shape_size(n.shape) != 1) {
    throw ShapeError("backward: " + label(n) + " is not scalar; pass an output gradient");
  }
  backward(output, Tensor<T>(n.shape, T{1}));
}

template <typename T>
void Graph<T>::backward(NodeId output, const Tensor<T>& output_grad) {
  if (!forward_done_) throw StateError("backward called before forward");
  if (output.index >= nodes_.size()) throw StateError("backward: unknown output node");
  Node& out = node(output);
  if (output_grad.shape() != out.shape) {
    throw ShapeError("backward: gradient shape " + shape_string(output_grad.shape()) +
                     " does not match " + label(out) + " shape " + shape_string(out.shape));
  }
  for (Node& n : nodes_) n.grad = Tensor<T>();
  out.grad = output_grad;
  for (std::size_t i = output.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() && shape_size(n.shape) != 0) continue;
    if (!n.requires_grad) continue;
    if (options_.check_finite && !n.grad.all_finite()) {
      throw NonFiniteError("backward: gradient at " + label(n) + " is non-finite");
    }
    backprop_node(n);
  }
}

template <typename T>
void Graph<T>::backprop_node(Node& n) {
  const T* g = n.grad.ptr();
  auto wants = [&](std::size_t slot) { return node(n.inputs[slot]).requires_grad; };
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
    case OpKind::kParameter:
      return;
    case OpKind::kMatMul: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const Tensor<T>& b = val(node(n.inputs[1]));
      const auto k = static_cast<Eigen::Index>(b.dim(0));
      const auto cols = static_cast<Eigen::Index>(b.dim(1));
      const auto rows = static_cast<Eigen::Index>(a.size() / b.dim(0));
      MapCM<T> gm(g, rows, cols);
      if (wants(0)) {
        MapM<T>(grad_of(n.inputs[0]).ptr(), rows, k).noalias() +=
            gm * MapCM<T>(b.ptr(), k, cols).transpose();
      }
      if (wants(1)) {
        MapM<T>(grad_of(n.inputs[1]).ptr(), k, cols).noalias() +=
            MapCM<T>(a.ptr(), rows, k).transpose() * gm;
      }
      return;
    }
    case OpKind::kLinear: {
      const Tensor<T>& x = val(node(n.inputs[0]));
      const Tensor<T>& w = val(node(n.inputs[1]));
      const auto k = static_cast<Eigen::Index>(w.dim(0));
      const auto cols = static_cast<Eigen::Index>(w.dim(1));
      const auto rows = static_cast<Eigen::Index>(x.size() / w.dim(0));
      MapCM<T> gm(g, rows, cols);
      if (wants(0)) {
        MapM<T>(grad_of(n.inputs[0]).ptr(), rows, k).noalias() +=
            gm * MapCM<T>(w.ptr(), k, cols).transpose();
      }
      if (wants(1)) {
        MapM<T>(grad_of(n.inputs[1]).ptr(), k, cols).noalias() +=
            MapCM<T>(x.ptr(), rows, k).transpose() * gm;
      }
      if (wants(2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(grad_of(n.inputs[2]).ptr(), cols) +=
            gm.colwise().sum();
      }
      return;
    }
    case OpKind::kBatchMatMul: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const Tensor<T>& b = val(node(n.inputs[1]));
      const std::size_t batch = a.dim(0);
      const auto m = static_cast<Eigen::Index>(a.dim(1));
      const auto k = static_cast<Eigen::Index>(a.dim(2));
      const auto cols = static_cast<Eigen::Index>(n.shape[2]);
      T* ga = wants(0) ? grad_of(n.inputs[0]).ptr() : nullptr;
      T* gb = wants(1) ? grad_of(n.inputs[1]).ptr() : nullptr;
      for (std::size_t i = 0; i < batch; ++i) {
        MapCM<T> gm(g + i * m * cols, m, cols);
        MapCM<T> am(a.ptr() + i * m * k, m, k);
        if (n.flag) {
          MapCM<T> bm(b.ptr() + i * cols * k, cols, k);
          if (ga) MapM<T>(ga + i * m * k, m, k).noalias() += gm * bm;
          if (gb) MapM<T>(gb + i * cols * k, cols, k).noalias() += gm.transpose() * am;
        } else {
          MapCM<T> bm(b.ptr() + i * k * cols, k, cols);
          if (ga) MapM<T>(ga + i * m * k, m, k).noalias() += gm * bm.transpose();
          if (gb) MapM<T>(gb + i * k * cols, k, cols).noalias() += am.transpose() * gm;
        }
      }
      return;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const Tensor<T>& b = val(node(n.inputs[1]));
      const std::size_t inner = b.size();
      const std::size_t outer = inner ? a.size() / inner : 0;
      const auto w = static_cast<Eigen::Index>(inner);
      T* ga = wants(0) ? grad_of(n.inputs[0]).ptr() : nullptr;
      T* gb = wants(1) ? grad_of(n.inputs[1]).ptr() : nullptr;
      for (std::size_t o = 0; o < outer; ++o) {
        MapCA<T> gr(g + o * inner, w);
        if (n.kind == OpKind::kAdd) {
          if (ga) MapA<T>(ga + o * inner, w) += gr;
          if (gb) MapA<T>(gb, w) += gr;
        } else {
          if (ga) MapA<T>(ga + o * inner, w) += gr * MapCA<T>(b.ptr(), w);
          if (gb) MapA<T>(gb, w) += gr * MapCA<T>(a.ptr() + o * inner, w);
        }
      }
      return;
    }
    case OpKind::kScale: {
      const auto sz = static_cast<Eigen::Index>(n.grad.size());
      MapA<T>(grad_of(n.inputs[0]).ptr(), sz) += MapCA<T>(g, sz) * n.scalar;
      return;
    }
    case OpKind::kSoftmax: {
      const std::size_t width = n.shape.back();
      const std::size_t rows = width ? n.value.size() / width : 0;
      const auto w = static_cast<Eigen::Index>(width);
      T* ga = grad_of(n.inputs[0]).ptr();
      const T inv_t = T{1} / n.scalar;
      for (std::size_t r = 0; r < rows; ++r) {
        MapCA<T> y(n.value.ptr() + r * width, w);
        MapCA<T> gy(g + r * width, w);
        const T dot = (y * gy).sum();
        MapA<T>(ga + r * width, w) += y * (gy - dot) * inv_t;
      }
      return;
    }
    case OpKind::kLayerNorm: {
      const std::size_t width = n.shape.back();
      const std::size_t rows = n.value.size() / width;
      const auto w = static_cast<Eigen::Index>(width);
      const T* xhat = n.aux.ptr();
      const T* rstd = xhat + n.value.size();
      const Tensor<T>& gamma = val(node(n.inputs[1]));
      T* gx = wants(0) ? grad_of(n.inputs[0]).ptr() : nullptr;
      T* gg = wants(1) ? grad_of(n.inputs[1]).ptr() : nullptr;
      T* gbt = wants(2) ? grad_of(n.inputs[2]).ptr() : nullptr;
      ArrX<T> dxhat(w);
      for (std::size_t r = 0; r < rows; ++r) {
        MapCA<T> gy(g + r * width, w);
        MapCA<T> hr(xhat + r * width, w);
        if (gg) MapA<T>(gg, w) += gy * hr;
        if (gbt) MapA<T>(gbt, w) += gy;
        if (gx) {
          dxhat = gy * MapCA<T>(gamma.ptr(), w);
          const T m1 = dxhat.mean();
          const T m2 = (dxhat * hr).mean();
          MapA<T>(gx + r * width, w) += rstd[r] * (dxhat - m1 - hr * m2);
        }
      }
      return;
    }
    case OpKind::kGelu: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      const auto sz = static_cast<Eigen::Index>(a.size());
      MapCA<T> x(a.ptr(), sz);
      const ArrX<T> t = (T(kGeluC) * (x + T(kGeluK) * x.cube())).tanh();
      const ArrX<T> d = T(0.5) * (T(1) + t) +
                        T(0.5) * x * (T(1) - t.square()) * T(kGeluC) * (T(1) + T(3 * kGeluK) * x.square());
      MapA<T>(grad_of(n.inputs[0]).ptr(), sz) += MapCA<T>(g, sz) * d;
      return;
    }
    case OpKind::kRelu: {
      const Tensor<T>& a = val(node(n.inputs[0]));
      T* ga = grad_of(n.inputs[0]).ptr();
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > T{0}) ga[i] += g[i];
      }
      return;
    }
    case OpKind::kGather: {
      const Node& src = node(n.inputs[0]);
      T* ga = grad_of(n.inputs[0]).ptr();
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) outer *= src.shape[i];
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < src.shape.size(); ++i) inner *= src.shape[i];
      const std::size_t in_axis = src.shape[n.axis];
      const std::size_t out_axis = n.indices.size();
      const auto w = static_cast<Eigen::Index>(inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < out_axis; ++j) {
          MapA<T>(ga + (o * in_axis + n.indices[j]) * inner, w) +=
              MapCA<T>(g + (o * out_axis + j) * inner, w);
        }
      }
      return;
    }
    case OpKind::kConcat: {
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) outer *= n.shape[i];
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < n.shape.size(); ++i) inner *= n.shape[i];
      const std::size_t out_axis = n.shape[n.axis];
      std::size_t offset = 0;
      for (NodeId p : n.inputs) {
        const std::size_t pa = node(p).shape[n.axis];
        if (node(p).requires_grad) {
          T* gp = grad_of(p).ptr();
          const auto w = static_cast<Eigen::Index>(pa * inner);
          for (std::size_t o = 0; o < outer; ++o) {
            MapA<T>(gp + o * pa * inner, w) += MapCA<T>(g + (o * out_axis + offset) * inner, w);
          }
        }
        offset += pa;
      }
      return;
    }
    case OpKind::kReshape: {
      const auto sz = static_cast<Eigen::Index>(n.grad.size());
      MapA<T>(grad_of(n.inputs[0]).ptr(), sz) += MapCA<T>(g, sz);
      return;
    }
    case OpKind::kPermute: {
      Tensor<T> back(node(n.inputs[0]).shape);
      permute_copy(g, n.shape, inverse_axes(n.indices), back.ptr());
      const auto sz = static_cast<Eigen::Index>(back.size());
      MapA<T>(grad_of(n.inputs[0]).ptr(), sz) += MapCA<T>(back.ptr(), sz);
      return;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      Tensor<T>& ga = grad_of(n.inputs[0]);
      T v = g[0];
      if (n.kind == OpKind::kMean) v /= static_cast<T>(ga.size());
      MapA<T>(ga.ptr(), static_cast<Eigen::Index>(ga.size())) += v;
      return;
    }
    case OpKind::kNll: {
      const Tensor<T>& p = val(node(n.inputs[0]));
      T* gp = grad_of(n.inputs[0]).ptr();
      const std::size_t k = p.dim(1);
      const T scale = g[0] / static_cast<T>(n.indices.size());
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        const std::size_t at = i * k + n.indices[i];
        gp[at] -= scale / (p[at] + n.scalar);
      }
      return;
    }
    case OpKind::kCrossEntropy: {
      T* gz = grad_of(n.inputs[0]).ptr();
      const std::size_t k = n.aux.dim(1);
      const std::size_t rows = n.aux.dim(0);
      const T scale = g[0] / static_cast<T>(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < k; ++j) gz[i * k + j] += scale * n.aux[i * k + j];
        gz[i * k + n.indices[i]] -= scale;
      }
      return;
    }
    case OpKind::kAttention: {
      const Tensor<T>& q = val(node(n.inputs[0]));
      const Tensor<T>& k = val(node(n.inputs[1]));
      const Tensor<T>& v = val(node(n.inputs[2]));
      const std::size_t batch = n.shape[0], sq = n.shape[1], e = n.shape[2];
      const std::size_t sk = k.dim(1), heads = n.axis, dh = e / heads;
      const T scale = T(1) / std::sqrt(static_cast<T>(dh));
      const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(e));
      const auto isq = static_cast<Eigen::Index>(sq), isk = static_cast<Eigen::Index>(sk);
      const auto idh = static_cast<Eigen::Index>(dh);
      const std::size_t ld = padded_width<T>(sk);
      const Eigen::OuterStride<> p_stride(static_cast<Eigen::Index>(ld));
      T* gq = wants(0) ? grad_of(n.inputs[0]).ptr() : nullptr;
      T* gk = wants(1) ? grad_of(n.inputs[1]).ptr() : nullptr;
      T* gv = wants(2) ? grad_of(n.inputs[2]).ptr() : nullptr;
      MatRM<T> dp(isq, isk);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t q_off = b * sq * e + h * dh, kv_off = b * sk * e + h * dh;
          StridedCM<T> gm(g + q_off, isq, idh, stride);
          StridedCM<T> qm(q.ptr() + q_off, isq, idh, stride);
          StridedCM<T> km(k.ptr() + kv_off, isk, idh, stride);
          StridedCM<T> vm(v.ptr() + kv_off, isk, idh, stride);
          StridedCM<T> pm(n.aux.ptr() + (b * heads + h) * sq * ld, isq, isk, p_stride);
          if (gv) StridedM<T>(gv + kv_off, isk, idh, stride).noalias() += pm.transpose() * gm;
          dp.noalias() = gm * vm.transpose();
          for (Eigen::Index i = 0; i < isq; ++i) {
            const T row_dot = (dp.row(i).array() * pm.row(i).array()).sum();
            dp.row(i).array() = pm.row(i).array() * (dp.row(i).array() - row_dot) * scale;
          }
          if (gq) StridedM<T>(gq + q_off, isq, idh, stride).noalias() += dp * km;
          if (gk) StridedM<T>(gk + kv_off, isk, idh, stride).noalias() += dp.transpose() * qm;
        }
      }
      return;
    }
  }
}

template <typename T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  const Node& n = node(id);
  if (!forward_done_ && n.kind != OpKind::kParameter && n.kind != OpKind::kConstant) {
    throw StateError("value: forward has not been run");
  }
  return val(n);
}

template <typename T>
const Tensor<T>& Graph<T>::gradient(NodeId id) const {
  const Node& n = node(id);
  return n.grad.shape() == n.shape && n.grad.size() == shape_size(n.shape) ? n.grad : empty_;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace pfnf::nn

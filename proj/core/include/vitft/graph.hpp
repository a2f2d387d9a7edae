// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitft/tensor.hpp"

namespace vitft {

using NodeId = std::int32_t;

// Closed kernel set. Every kind has a forward and a backward rule in graph.cpp.
enum class OpKind : std::uint8_t {
  kInput,         // bound per forward() call, never differentiated
  kLeaf,          // bound once to a mutable tensor; gradients accumulate into it
  kMatMul,        // (..., K) x (K, N) -> (..., N)
  kBatchMatMul,   // (..., M, K) x (..., K, N) -> (..., M, N); optional transposed rhs
  kAdd,           // rhs shape must be a suffix of lhs shape
  kMul,           // same broadcasting rule as kAdd
  kScale,         // multiply by a constant
  kGelu,          // tanh approximation
  kLayerNorm,     // over the last axis, with affine weight and bias
  kSoftmax,       // over the last axis
  kSliceLast,     // narrow the last axis
  kSplitHeads,    // (B, N, H*Dh) -> (B, H, N, Dh)
  kMergeHeads,    // (B, H, N, Dh) -> (B, N, H*Dh)
  kMeanTokens,    // (B, N, D) -> (B, D)
  kPatchify,      // (B, C, H, W) -> (B, H/p * W/p, C*p*p)
  kGatherLast,    // (R, V) gathered with a fixed index list -> (R, tail...)
  kSampleScale,   // (B, ...) * (B) per-sample factor
  kSum,           // full reduction to a scalar
  kCrossEntropy,  // mean over rows of -<target, log softmax(logits)>
};

const char* op_name(OpKind kind);

struct OpAttrs {
  double scalar = 0.0;           // scale factor, layernorm epsilon
  std::int64_t count = 0;        // heads, patch size, slice offset
  std::int64_t extent = 0;       // slice size
  bool transpose_rhs = false;    // batch matmul
  std::vector<std::int64_t> index;
  Shape tail;
};

/// Error raised while executing a node; carries the node id.
class GraphError : public std::runtime_error {
 public:
  GraphError(NodeId node, const std::string& what)
      : std::runtime_error("node " + std::to_string(node) + ": " + what), node_(node) {}
  NodeId node() const { return node_; }

 private:
  NodeId node_;
};

template <typename T>
using Feeds = std::map<std::string, const Tensor<T>*, std::less<>>;

/// Define-then-run reverse-mode graph.
///
/// Nodes are appended in topological order, so replaying them front to back
/// is a valid forward schedule and back to front a valid backward one. Shapes
/// are resolved at forward() time, which lets the same graph run on batches of
/// different sizes. Kernels are single-threaded with a fixed reduction order:
/// repeated forward() calls on identical inputs are bit-identical.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  NodeId input(std::string name);
  NodeId leaf(std::string name, Tensor<T>& tensor);
  /// Read-only leaf; never receives gradients.
  NodeId constant(std::string name, const Tensor<T>& tensor);

  NodeId matmul(NodeId a, NodeId b);
  NodeId batch_matmul(NodeId a, NodeId b, bool transpose_rhs = false);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId gelu(NodeId a);
  NodeId layernorm(NodeId x, NodeId weight, NodeId bias, double eps = 1e-5);
  NodeId softmax(NodeId a);
  NodeId slice_last(NodeId a, std::int64_t offset, std::int64_t size);
  NodeId split_heads(NodeId a, std::int64_t heads);
  NodeId merge_heads(NodeId a);
  NodeId mean_tokens(NodeId a);
  NodeId patchify(NodeId images, std::int64_t patch);
  NodeId gather_last(NodeId table, std::vector<std::int64_t> index, Shape tail);
  NodeId sample_scale(NodeId x, NodeId factors);
  NodeId sum(NodeId a);
  NodeId cross_entropy(NodeId logits, NodeId targets);

  /// Low-level node constructor; arity is checked here, shapes at forward().
  NodeId append(OpKind kind, std::vector<NodeId> inputs, OpAttrs attrs = {});

  /// Evaluates every node. Throws GraphError on unbound inputs, shape
  /// mismatches or unknown op kinds.
  void forward(const Feeds<T>& feeds = {});

  /// Reverse sweep from a scalar node. Leaf tensors with requires_grad set
  /// receive the gradient added to whatever they already hold.
  void backward(NodeId loss);

  const Tensor<T>& value(NodeId id) const;
  /// Gradient of the last backward() w.r.t. an arbitrary node.
  std::span<const T> node_grad(NodeId id) const;

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  bool forward_done() const { return forward_done_; }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    std::string name;
    Tensor<T>* leaf = nullptr;
    const Tensor<T>* bound = nullptr;
    Tensor<T> value;
    AlignedVector<T> grad;
    AlignedVector<T> aux;  // saved forward state for backward
    bool needs_grad = false;
  };

  const Tensor<T>& val(const Node& n) const { return n.bound ? *n.bound : n.value; }
  void check_id(NodeId id) const;
  void run_forward(NodeId id);
  void run_backward(NodeId id);

  std::vector<Node> nodes_;
  bool forward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace vitft

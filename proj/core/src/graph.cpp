// SPDX-License-Identifier: Apache-2.0
#include "vitft/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

namespace vitft {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kBatchMatMul: return "batch_matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kGelu: return "gelu";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSliceLast: return "slice_last";
    case OpKind::kSplitHeads: return "split_heads";
    case OpKind::kMergeHeads: return "merge_heads";
    case OpKind::kMeanTokens: return "mean_tokens";
    case OpKind::kPatchify: return "patchify";
    case OpKind::kGatherLast: return "gather_last";
    case OpKind::kSampleScale: return "sample_scale";
    case OpKind::kSum: return "sum";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MutArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

int arity(OpKind kind) {
  switch (kind) {
    case OpKind::kInput:
    case OpKind::kLeaf: return 0;
    case OpKind::kScale:
    case OpKind::kGelu:
    case OpKind::kSoftmax:
    case OpKind::kSliceLast:
    case OpKind::kSplitHeads:
    case OpKind::kMergeHeads:
    case OpKind::kMeanTokens:
    case OpKind::kPatchify:
    case OpKind::kGatherLast:
    case OpKind::kSum: return 1;
    case OpKind::kMatMul:
    case OpKind::kBatchMatMul:
    case OpKind::kAdd:
    case OpKind::kMul:
    case OpKind::kSampleScale:
    case OpKind::kCrossEntropy: return 2;
    case OpKind::kLayerNorm: return 3;
  }
  return -1;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape with_last(Shape s, std::int64_t last) {
  s.back() = last;
  return s;
}

}  // namespace

template <typename T>
void Graph<T>::check_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw std::out_of_range("graph: invalid node id " + std::to_string(id));
  }
}

template <typename T>
NodeId Graph<T>::append(OpKind kind, std::vector<NodeId> inputs, OpAttrs attrs) {
  const int want = arity(kind);
  if (want < 0) {
    throw GraphError(static_cast<NodeId>(nodes_.size()),
                     "unknown op kind " + std::to_string(static_cast<int>(kind)));
  }
  if (static_cast<int>(inputs.size()) != want) {
    throw GraphError(static_cast<NodeId>(nodes_.size()),
                     std::string(op_name(kind)) + " expects " + std::to_string(want) +
                         " inputs, got " + std::to_string(inputs.size()));
  }
  for (NodeId in : inputs) check_id(in);
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return static_cast<NodeId>(nodes_.size() - 1);
}

template <typename T>
NodeId Graph<T>::input(std::string name) {
  NodeId id = append(OpKind::kInput, {});
  nodes_.back().name = std::move(name);
  return id;
}

template <typename T>
NodeId Graph<T>::leaf(std::string name, Tensor<T>& tensor) {
  NodeId id = append(OpKind::kLeaf, {});
  nodes_.back().name = std::move(name);
  nodes_.back().leaf = &tensor;
  nodes_.back().bound = &tensor;
  return id;
}

template <typename T>
NodeId Graph<T>::constant(std::string name, const Tensor<T>& tensor) {
  NodeId id = append(OpKind::kLeaf, {});
  nodes_.back().name = std::move(name);
  nodes_.back().bound = &tensor;
  return id;
}

template <typename T>
NodeId Graph<T>::matmul(NodeId a, NodeId b) { return append(OpKind::kMatMul, {a, b}); }

template <typename T>
NodeId Graph<T>::batch_matmul(NodeId a, NodeId b, bool transpose_rhs) {
  OpAttrs at;
  at.transpose_rhs = transpose_rhs;
  return append(OpKind::kBatchMatMul, {a, b}, at);
}

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) { return append(OpKind::kAdd, {a, b}); }

template <typename T>
NodeId Graph<T>::mul(NodeId a, NodeId b) { return append(OpKind::kMul, {a, b}); }

template <typename T>
NodeId Graph<T>::scale(NodeId a, double factor) {
  OpAttrs at;
  at.scalar = factor;
  return append(OpKind::kScale, {a}, at);
}

template <typename T>
NodeId Graph<T>::gelu(NodeId a) { return append(OpKind::kGelu, {a}); }

template <typename T>
NodeId Graph<T>::layernorm(NodeId x, NodeId weight, NodeId bias, double eps) {
  OpAttrs at;
  at.scalar = eps;
  return append(OpKind::kLayerNorm, {x, weight, bias}, at);
}

template <typename T>
NodeId Graph<T>::softmax(NodeId a) { return append(OpKind::kSoftmax, {a}); }

template <typename T>
NodeId Graph<T>::slice_last(NodeId a, std::int64_t offset, std::int64_t size) {
  OpAttrs at;
  at.count = offset;
  at.extent = size;
  return append(OpKind::kSliceLast, {a}, at);
}

template <typename T>
NodeId Graph<T>::split_heads(NodeId a, std::int64_t heads) {
  OpAttrs at;
  at.count = heads;
  return append(OpKind::kSplitHeads, {a}, at);
}

template <typename T>
NodeId Graph<T>::merge_heads(NodeId a) { return append(OpKind::kMergeHeads, {a}); }

template <typename T>
NodeId Graph<T>::mean_tokens(NodeId a) { return append(OpKind::kMeanTokens, {a}); }

template <typename T>
NodeId Graph<T>::patchify(NodeId images, std::int64_t patch) {
  OpAttrs at;
  at.count = patch;
  return append(OpKind::kPatchify, {images}, at);
}

template <typename T>
NodeId Graph<T>::gather_last(NodeId table, std::vector<std::int64_t> index, Shape tail) {
  if (numel_of(tail) != static_cast<std::int64_t>(index.size())) {
    throw ShapeError("gather_last: tail " + shape_str(tail) + " does not hold " +
                     std::to_string(index.size()) + " indices");
  }
  OpAttrs at;
  at.index = std::move(index);
  at.tail = std::move(tail);
  return append(OpKind::kGatherLast, {table}, at);
}

template <typename T>
NodeId Graph<T>::sample_scale(NodeId x, NodeId factors) {
  return append(OpKind::kSampleScale, {x, factors});
}

template <typename T>
NodeId Graph<T>::sum(NodeId a) { return append(OpKind::kSum, {a}); }

template <typename T>
NodeId Graph<T>::cross_entropy(NodeId logits, NodeId targets) {
  return append(OpKind::kCrossEntropy, {logits, targets});
}

template <typename T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  check_id(id);
  if (!forward_done_) throw std::logic_error("graph: value() before forward()");
  return val(nodes_[static_cast<std::size_t>(id)]);
}

template <typename T>
std::span<const T> Graph<T>::node_grad(NodeId id) const {
  check_id(id);
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad || n.grad.empty()) {
    throw std::logic_error("graph: node " + std::to_string(id) + " has no gradient");
  }
  return n.grad;
}

template <typename T>
void Graph<T>::forward(const Feeds<T>& feeds) {
  forward_done_ = false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    const auto id = static_cast<NodeId>(i);
    if (n.kind == OpKind::kInput) {
      auto it = feeds.find(n.name);
      if (it == feeds.end() || it->second == nullptr) {
        throw GraphError(id, "input '" + n.name + "' is not bound");
      }
      n.bound = it->second;
      n.needs_grad = false;
      continue;
    }
    if (n.kind == OpKind::kLeaf) {
      n.needs_grad = n.leaf != nullptr && n.leaf->requires_grad();
      continue;
    }
    n.needs_grad = false;
    for (NodeId in : n.inputs) n.needs_grad |= nodes_[static_cast<std::size_t>(in)].needs_grad;
    run_forward(id);
  }
  forward_done_ = true;
}

template <typename T>
void Graph<T>::run_forward(NodeId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  auto in = [&](int k) -> const Tensor<T>& {
    return val(nodes_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])]);
  };
  auto mismatch = [&](const std::string& what, const Shape& expected, const Shape& actual) {
    return GraphError(id, std::string(op_name(n.kind)) + ": " + what + " expected " +
                              shape_str(expected) + ", got " + shape_str(actual));
  };
  Tensor<T>& out = n.value;

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
        throw mismatch("rhs", Shape{a.rank() ? a.dim(-1) : 0, b.rank() == 2 ? b.dim(1) : -1},
                       b.shape());
      }
      const std::int64_t k = b.dim(0), cols = b.dim(1), rows = numel_of(a.shape()) / k;
      out.resize(with_last(a.shape(), cols));
      MutMap<T>(out.ptr(), rows, cols).noalias() =
          ConstMap<T>(a.ptr(), rows, k) * ConstMap<T>(b.ptr(), k, cols);
      break;
    }
    case OpKind::kBatchMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const bool tr = n.attrs.transpose_rhs;
      if (a.rank() < 2 || b.rank() != a.rank() ||
          !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
        throw mismatch("matching batch dims", a.shape(), b.shape());
      }
      const std::int64_t m = a.dim(-2), k = a.dim(-1);
      const std::int64_t bk = tr ? b.dim(-1) : b.dim(-2);
      const std::int64_t cols = tr ? b.dim(-2) : b.dim(-1);
      if (bk != k) {
        Shape want = b.shape();
        want[want.size() - (tr ? 1 : 2)] = k;
        throw mismatch("rhs", want, b.shape());
      }
      Shape os = a.shape();
      os.back() = cols;
      out.resize(os);
      const std::int64_t batch = numel_of(a.shape()) / (m * k);
      for (std::int64_t i = 0; i < batch; ++i) {
        ConstMap<T> am(a.ptr() + i * m * k, m, k);
        MutMap<T> om(out.ptr() + i * m * cols, m, cols);
        if (tr) {
          om.noalias() = am * ConstMap<T>(b.ptr() + i * cols * k, cols, k).transpose();
        } else {
          om.noalias() = am * ConstMap<T>(b.ptr() + i * k * cols, k, cols);
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (!is_suffix(b.shape(), a.shape())) throw mismatch("rhs suffix of lhs", a.shape(), b.shape());
      out.resize(a.shape());
      const std::size_t nb = b.size(), na = a.size();
      const T* pa = a.ptr();
      const T* pb = b.ptr();
      T* po = out.ptr();
      if (nb == 0) break;
      for (std::size_t base = 0; base < na; base += nb) {
        if (n.kind == OpKind::kAdd) {
          for (std::size_t j = 0; j < nb; ++j) po[base + j] = pa[base + j] + pb[j];
        } else {
          for (std::size_t j = 0; j < nb; ++j) po[base + j] = pa[base + j] * pb[j];
        }
      }
      break;
    }
    case OpKind::kScale: {
      const auto& a = in(0);
      out.resize(a.shape());
      const T s = static_cast<T>(n.attrs.scalar);
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
      break;
    }
    case OpKind::kGelu: {
      const auto& a = in(0);
      out.resize(a.shape());
      const auto x = ConstArr<T>(a.ptr(), static_cast<Eigen::Index>(a.size()));
      MutArr<T>(out.ptr(), static_cast<Eigen::Index>(a.size())) =
          T(0.5) * x * (T(1) + (T(kGeluC) * (x + T(kGeluA) * x.cube())).tanh());
      break;
    }
    case OpKind::kLayerNorm: {
      const auto& x = in(0);
      const auto& w = in(1);
      const auto& b = in(2);
      if (x.rank() < 1) throw mismatch("rank >= 1", Shape{-1}, x.shape());
      const std::int64_t d = x.dim(-1);
      if (w.shape() != Shape{d}) throw mismatch("weight", Shape{d}, w.shape());
      if (b.shape() != Shape{d}) throw mismatch("bias", Shape{d}, b.shape());
      out.resize(x.shape());
      const std::int64_t rows = d ? numel_of(x.shape()) / d : 0;
      // aux: normalized input (rows*d) followed by per-row reciprocal std (rows)
      auto& xhat = n.aux;
      xhat.resize(static_cast<std::size_t>(rows * d + rows));
      const double eps = n.attrs.scalar;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* px = x.ptr() + r * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += px[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          const double c = px[j] - mean;
          var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        T* ph = xhat.data() + r * d;
        T* po = out.ptr() + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
          ph[j] = static_cast<T>((px[j] - mean) * rstd);
          po[j] = ph[j] * w[static_cast<std::size_t>(j)] + b[static_cast<std::size_t>(j)];
        }
        xhat[static_cast<std::size_t>(rows * d + r)] = static_cast<T>(rstd);
      }
      break;
    }
    case OpKind::kSoftmax: {
      const auto& a = in(0);
      if (a.rank() < 1) throw mismatch("rank >= 1", Shape{-1}, a.shape());
      out.resize(a.shape());
      const std::int64_t d = a.dim(-1);
      const std::int64_t rows = d ? numel_of(a.shape()) / d : 0;
      if (d == 0) break;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* pa = a.ptr() + r * d;
        T* po = out.ptr() + r * d;
        T mx = pa[0];
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, pa[j]);
        for (std::int64_t j = 0; j < d; ++j) po[j] = pa[j] - mx;
      }
      {
        auto o = MutArr<T>(out.ptr(), static_cast<Eigen::Index>(out.size()));
        o = o.exp();
      }
      for (std::int64_t r = 0; r < rows; ++r) {
        T* po = out.ptr() + r * d;
        T total = 0;
        for (std::int64_t j = 0; j < d; ++j) total += po[j];
        const T inv = static_cast<T>(1) / total;
        for (std::int64_t j = 0; j < d; ++j) po[j] *= inv;
      }
      break;
    }
    case OpKind::kSliceLast: {
      const auto& a = in(0);
      const std::int64_t off = n.attrs.count, len = n.attrs.extent;
      if (a.rank() < 1 || off < 0 || len < 0 || off + len > a.dim(-1)) {
        throw mismatch("last axis >= offset+size", Shape{off + len}, a.shape());
      }
      const std::int64_t c = a.dim(-1), rows = c ? numel_of(a.shape()) / c : 0;
      out.resize(with_last(a.shape(), len));
      for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.ptr() + r * c + off, len, out.ptr() + r * len);
      }
      break;
    }
    case OpKind::kSplitHeads: {
      const auto& a = in(0);
      const std::int64_t h = n.attrs.count;
      if (a.rank() != 3 || h <= 0 || a.dim(2) % h != 0) {
        throw mismatch("(B, N, heads*Dh)", Shape{-1, -1, h}, a.shape());
      }
      const std::int64_t bsz = a.dim(0), tok = a.dim(1), dh = a.dim(2) / h;
      out.resize(Shape{bsz, h, tok, dh});
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t t = 0; t < tok; ++t)
          for (std::int64_t hi = 0; hi < h; ++hi)
            std::copy_n(a.ptr() + ((bi * tok + t) * h + hi) * dh, dh,
                        out.ptr() + ((bi * h + hi) * tok + t) * dh);
      break;
    }
    case OpKind::kMergeHeads: {
      const auto& a = in(0);
      if (a.rank() != 4) throw mismatch("(B, H, N, Dh)", Shape{-1, -1, -1, -1}, a.shape());
      const std::int64_t bsz = a.dim(0), h = a.dim(1), tok = a.dim(2), dh = a.dim(3);
      out.resize(Shape{bsz, tok, h * dh});
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t hi = 0; hi < h; ++hi)
          for (std::int64_t t = 0; t < tok; ++t)
            std::copy_n(a.ptr() + ((bi * h + hi) * tok + t) * dh, dh,
                        out.ptr() + ((bi * tok + t) * h + hi) * dh);
      break;
    }
    case OpKind::kMeanTokens: {
      const auto& a = in(0);
      if (a.rank() != 3 || a.dim(1) == 0) throw mismatch("(B, N>0, D)", Shape{-1, -1, -1}, a.shape());
      const std::int64_t bsz = a.dim(0), tok = a.dim(1), d = a.dim(2);
      out.resize(Shape{bsz, d});
      const T inv = static_cast<T>(1) / static_cast<T>(tok);
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        T* po = out.ptr() + bi * d;
        std::fill_n(po, d, T{0});
        for (std::int64_t t = 0; t < tok; ++t) {
          const T* pa = a.ptr() + (bi * tok + t) * d;
          for (std::int64_t j = 0; j < d; ++j) po[j] += pa[j];
        }
        for (std::int64_t j = 0; j < d; ++j) po[j] *= inv;
      }
      break;
    }
    case OpKind::kPatchify: {
      const auto& a = in(0);
      const std::int64_t p = n.attrs.count;
      if (a.rank() != 4 || p <= 0 || a.dim(2) % p != 0 || a.dim(3) % p != 0) {
        throw mismatch("(B, C, H, W) divisible by patch", Shape{-1, -1, p, p}, a.shape());
      }
      const std::int64_t bsz = a.dim(0), ch = a.dim(1), ht = a.dim(2), wd = a.dim(3);
      const std::int64_t gh = ht / p, gw = wd / p, pd = ch * p * p;
      out.resize(Shape{bsz, gh * gw, pd});
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t py = 0; py < gh; ++py)
          for (std::int64_t px = 0; px < gw; ++px) {
            T* po = out.ptr() + ((bi * gh + py) * gw + px) * pd;
            for (std::int64_t c = 0; c < ch; ++c)
              for (std::int64_t iy = 0; iy < p; ++iy)
                std::copy_n(a.ptr() + ((bi * ch + c) * ht + py * p + iy) * wd + px * p, p,
                            po + (c * p + iy) * p);
          }
      break;
    }
    case OpKind::kGatherLast: {
      const auto& a = in(0);
      if (a.rank() != 2) throw mismatch("(R, V)", Shape{-1, -1}, a.shape());
      const std::int64_t rows = a.dim(0), v = a.dim(1);
      const auto& idx = n.attrs.index;
      for (auto k : idx) {
        if (k < 0 || k >= v) throw GraphError(id, "gather_last: index " + std::to_string(k) +
                                                      " out of range for " + shape_str(a.shape()));
      }
      Shape os{rows};
      os.insert(os.end(), n.attrs.tail.begin(), n.attrs.tail.end());
      out.resize(os);
      const std::size_t m = idx.size();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j)
          out[static_cast<std::size_t>(r) * m + j] = a[static_cast<std::size_t>(r * v + idx[j])];
      break;
    }
    case OpKind::kSampleScale: {
      const auto& x = in(0);
      const auto& s = in(1);
      if (x.rank() < 1 || s.shape() != Shape{x.dim(0)}) {
        throw mismatch("factors", Shape{x.rank() ? x.dim(0) : -1}, s.shape());
      }
      out.resize(x.shape());
      const std::int64_t bsz = x.dim(0);
      const std::size_t per = bsz ? x.size() / static_cast<std::size_t>(bsz) : 0;
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        const T f = s[static_cast<std::size_t>(bi)];
        for (std::size_t j = 0; j < per; ++j) {
          out[static_cast<std::size_t>(bi) * per + j] = x[static_cast<std::size_t>(bi) * per + j] * f;
        }
      }
      break;
    }
    case OpKind::kSum: {
      const auto& a = in(0);
      out.resize(Shape{});
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
      out[0] = static_cast<T>(acc);
      break;
    }
    case OpKind::kCrossEntropy: {
      const auto& z = in(0);
      const auto& t = in(1);
      if (z.rank() != 2) throw mismatch("(B, K) logits", Shape{-1, -1}, z.shape());
      if (t.shape() != z.shape()) throw mismatch("targets", z.shape(), t.shape());
      const std::int64_t bsz = z.dim(0), k = z.dim(1);
      if (bsz == 0 || k == 0) throw mismatch("non-empty logits", Shape{-1, -1}, z.shape());
      auto& logp = n.aux;
      logp.resize(static_cast<std::size_t>(bsz * k));
      double total = 0.0;
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        const T* pz = z.ptr() + bi * k;
        double mx = pz[0];
        for (std::int64_t j = 0; j < k; ++j) {
          if (!std::isfinite(pz[j])) throw GraphError(id, "cross_entropy: non-finite logit");
          mx = std::max(mx, static_cast<double>(pz[j]));
        }
        double se = 0.0;
        for (std::int64_t j = 0; j < k; ++j) se += std::exp(pz[j] - mx);
        const double lse = mx + std::log(se);
        double row = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
          const double lp = pz[j] - lse;
          logp[static_cast<std::size_t>(bi * k + j)] = static_cast<T>(lp);
          row -= t[static_cast<std::size_t>(bi * k + j)] * lp;
        }
        total += row;
      }
      out.resize(Shape{});
      out[0] = static_cast<T>(total / static_cast<double>(bsz));
      break;
    }
    case OpKind::kInput:
    case OpKind::kLeaf:
      break;
    default:
      throw GraphError(id, "unknown op kind " + std::to_string(static_cast<int>(n.kind)));
  }
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
  check_id(loss);
  if (!forward_done_) throw std::logic_error("graph: backward() before forward()");
  Node& ln = nodes_[static_cast<std::size_t>(loss)];
  if (val(ln).size() != 1) {
    throw GraphError(loss, "backward: loss must be a scalar, got shape " +
                               shape_str(val(ln).shape()));
  }
  for (std::size_t i = 0; i <= static_cast<std::size_t>(loss); ++i) {
    Node& n = nodes_[i];
    if (n.needs_grad) {
      n.grad.assign(val(n).size(), T{0});
    } else {
      n.grad.clear();
    }
  }
  if (!ln.needs_grad) return;
  ln.grad[0] = T{1};
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) continue;
    if (n.kind == OpKind::kLeaf) {
      auto g = n.leaf->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      continue;
    }
    run_backward(id);
  }
}

template <typename T>
void Graph<T>::run_backward(NodeId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  auto node_at = [&](int k) -> Node& {
    return nodes_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])];
  };
  auto in = [&](int k) -> const Tensor<T>& { return val(node_at(k)); };
  auto wants = [&](int k) { return node_at(k).needs_grad; };
  auto gin = [&](int k) -> T* { return node_at(k).grad.data(); };
  const T* g = n.grad.data();
  const Tensor<T>& out = n.value;

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::int64_t k = b.dim(0), cols = b.dim(1), rows = numel_of(a.shape()) / k;
      ConstMap<T> gm(g, rows, cols);
      if (wants(0)) {
        MutMap<T>(gin(0), rows, k).noalias() += gm * ConstMap<T>(b.ptr(), k, cols).transpose();
      }
      if (wants(1)) {
        MutMap<T>(gin(1), k, cols).noalias() += ConstMap<T>(a.ptr(), rows, k).transpose() * gm;
      }
      break;
    }
    case OpKind::kBatchMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const bool tr = n.attrs.transpose_rhs;
      const std::int64_t m = a.dim(-2), k = a.dim(-1), cols = out.dim(-1);
      const std::int64_t batch = numel_of(a.shape()) / (m * k);
      for (std::int64_t i = 0; i < batch; ++i) {
        ConstMap<T> gm(g + i * m * cols, m, cols);
        ConstMap<T> am(a.ptr() + i * m * k, m, k);
        if (tr) {
          ConstMap<T> bm(b.ptr() + i * cols * k, cols, k);
          if (wants(0)) MutMap<T>(gin(0) + i * m * k, m, k).noalias() += gm * bm;
          if (wants(1)) MutMap<T>(gin(1) + i * cols * k, cols, k).noalias() += gm.transpose() * am;
        } else {
          ConstMap<T> bm(b.ptr() + i * k * cols, k, cols);
          if (wants(0)) MutMap<T>(gin(0) + i * m * k, m, k).noalias() += gm * bm.transpose();
          if (wants(1)) MutMap<T>(gin(1) + i * k * cols, k, cols).noalias() += am.transpose() * gm;
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::size_t na = a.size(), nb = b.size();
      const bool is_mul = n.kind == OpKind::kMul;
      if (nb == 0) break;
      if (wants(0)) {
        T* ga = gin(0);
        for (std::size_t base = 0; base < na; base += nb)
          for (std::size_t j = 0; j < nb; ++j)
            ga[base + j] += is_mul ? g[base + j] * b[j] : g[base + j];
      }
      if (wants(1)) {
        T* gb = gin(1);
        for (std::size_t base = 0; base < na; base += nb)
          for (std::size_t j = 0; j < nb; ++j)
            gb[j] += is_mul ? g[base + j] * a[base + j] : g[base + j];
      }
      break;
    }
    case OpKind::kScale: {
      if (!wants(0)) break;
      const T s = static_cast<T>(n.attrs.scalar);
      T* ga = gin(0);
      for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i] * s;
      break;
    }
    case OpKind::kGelu: {
      if (!wants(0)) break;
      const auto& a = in(0);
      const auto len = static_cast<Eigen::Index>(a.size());
      const auto x = ConstArr<T>(a.ptr(), len);
      const T c = T(kGeluC), ca = T(kGeluA);
      n.aux.resize(a.size());
      auto t = MutArr<T>(n.aux.data(), len);
      t = (c * (x + ca * x.cube())).tanh();
      MutArr<T>(gin(0), len) +=
          ConstArr<T>(g, len) *
          (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * c * (T(1) + T(3) * ca * x.square()));
      break;
    }
    case OpKind::kLayerNorm: {
      const auto& x = in(0);
      const auto& w = in(1);
      const std::int64_t d = x.dim(-1);
      const std::int64_t rows = d ? numel_of(x.shape()) / d : 0;
      const T* xhat = n.aux.data();
      const T* rstd = n.aux.data() + rows * d;
      if (wants(1) || wants(2)) {
        T* gw = wants(1) ? gin(1) : nullptr;
        T* gb = wants(2) ? gin(2) : nullptr;
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j) {
            const T gv = g[r * d + j];
            if (gw) gw[j] += gv * xhat[r * d + j];
            if (gb) gb[j] += gv;
          }
      }
      if (wants(0)) {
        T* gx = gin(0);
        for (std::int64_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double gh = static_cast<double>(g[r * d + j]) * w[static_cast<std::size_t>(j)];
            mean_g += gh;
            mean_gx += gh * xhat[r * d + j];
          }
          mean_g /= static_cast<double>(d);
          mean_gx /= static_cast<double>(d);
          const double rs = rstd[r];
          for (std::int64_t j = 0; j < d; ++j) {
            const double gh = static_cast<double>(g[r * d + j]) * w[static_cast<std::size_t>(j)];
            gx[r * d + j] += static_cast<T>(rs * (gh - mean_g - xhat[r * d + j] * mean_gx));
          }
        }
      }
      break;
    }
    case OpKind::kSoftmax: {
      if (!wants(0)) break;
      const std::int64_t d = out.dim(-1);
      const std::int64_t rows = d ? numel_of(out.shape()) / d : 0;
      T* ga = gin(0);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = out.ptr() + r * d;
        const T* gr = g + r * d;
        T dot = 0;
        for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * y[j];
        for (std::int64_t j = 0; j < d; ++j) ga[r * d + j] += y[j] * (gr[j] - dot);
      }
      break;
    }
    case OpKind::kSliceLast: {
      if (!wants(0)) break;
      const auto& a = in(0);
      const std::int64_t off = n.attrs.count, len = n.attrs.extent;
      const std::int64_t c = a.dim(-1), rows = c ? numel_of(a.shape()) / c : 0;
      T* ga = gin(0);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < len; ++j) ga[r * c + off + j] += g[r * len + j];
      break;
    }
    case OpKind::kSplitHeads: {
      if (!wants(0)) break;
      const std::int64_t bsz = out.dim(0), h = out.dim(1), tok = out.dim(2), dh = out.dim(3);
      T* ga = gin(0);
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t t = 0; t < tok; ++t)
          for (std::int64_t hi = 0; hi < h; ++hi) {
            T* dst = ga + ((bi * tok + t) * h + hi) * dh;
            const T* src = g + ((bi * h + hi) * tok + t) * dh;
            for (std::int64_t j = 0; j < dh; ++j) dst[j] += src[j];
          }
      break;
    }
    case OpKind::kMergeHeads: {
      if (!wants(0)) break;
      const auto& a = in(0);
      const std::int64_t bsz = a.dim(0), h = a.dim(1), tok = a.dim(2), dh = a.dim(3);
      T* ga = gin(0);
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t hi = 0; hi < h; ++hi)
          for (std::int64_t t = 0; t < tok; ++t) {
            T* dst = ga + ((bi * h + hi) * tok + t) * dh;
            const T* src = g + ((bi * tok + t) * h + hi) * dh;
            for (std::int64_t j = 0; j < dh; ++j) dst[j] += src[j];
          }
      break;
    }
    case OpKind::kMeanTokens: {
      if (!wants(0)) break;
      const auto& a = in(0);
      const std::int64_t bsz = a.dim(0), tok = a.dim(1), d = a.dim(2);
      const T inv = static_cast<T>(1) / static_cast<T>(tok);
      T* ga = gin(0);
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t t = 0; t < tok; ++t)
          for (std::int64_t j = 0; j < d; ++j) ga[(bi * tok + t) * d + j] += g[bi * d + j] * inv;
      break;
    }
    case OpKind::kPatchify: {
      if (!wants(0)) break;
      const auto& a = in(0);
      const std::int64_t p = n.attrs.count;
      const std::int64_t bsz = a.dim(0), ch = a.dim(1), ht = a.dim(2), wd = a.dim(3);
      const std::int64_t gh = ht / p, gw = wd / p, pd = ch * p * p;
      T* ga = gin(0);
      for (std::int64_t bi = 0; bi < bsz; ++bi)
        for (std::int64_t py = 0; py < gh; ++py)
          for (std::int64_t px = 0; px < gw; ++px) {
            const T* src = g + ((bi * gh + py) * gw + px) * pd;
            for (std::int64_t c = 0; c < ch; ++c)
              for (std::int64_t iy = 0; iy < p; ++iy) {
                T* dst = ga + ((bi * ch + c) * ht + py * p + iy) * wd + px * p;
                for (std::int64_t ix = 0; ix < p; ++ix) dst[ix] += src[(c * p + iy) * p + ix];
              }
          }
      break;
    }
    case OpKind::kGatherLast: {
      if (!wants(0)) break;
      const auto& a = in(0);
      const std::int64_t rows = a.dim(0), v = a.dim(1);
      const auto& idx = n.attrs.index;
      const std::size_t m = idx.size();
      T* ga = gin(0);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j)
          ga[r * v + idx[j]] += g[static_cast<std::size_t>(r) * m + j];
      break;
    }
    case OpKind::kSampleScale: {
      const auto& x = in(0);
      const auto& s = in(1);
      const std::int64_t bsz = x.dim(0);
      const std::size_t per = bsz ? x.size() / static_cast<std::size_t>(bsz) : 0;
      for (std::int64_t bi = 0; bi < bsz; ++bi) {
        const std::size_t base = static_cast<std::size_t>(bi) * per;
        if (wants(0)) {
          T* gx = gin(0);
          const T f = s[static_cast<std::size_t>(bi)];
          for (std::size_t j = 0; j < per; ++j) gx[base + j] += g[base + j] * f;
        }
        if (wants(1)) {
          T acc = 0;
          for (std::size_t j = 0; j < per; ++j) acc += g[base + j] * x[base + j];
          gin(1)[bi] += acc;
        }
      }
      break;
    }
    case OpKind::kSum: {
      if (!wants(0)) break;
      T* ga = gin(0);
      const std::size_t na = in(0).size();
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[0];
      break;
    }
    case OpKind::kCrossEntropy: {
      const auto& t = in(1);
      const std::int64_t bsz = t.dim(0), k = t.dim(1);
      const T scale = g[0] / static_cast<T>(bsz);
      const T* logp = n.aux.data();
      if (wants(0)) {
        T* gz = gin(0);
        for (std::int64_t bi = 0; bi < bsz; ++bi) {
          T mass = 0;
          for (std::int64_t j = 0; j < k; ++j) mass += t[static_cast<std::size_t>(bi * k + j)];
          for (std::int64_t j = 0; j < k; ++j) {
            const std::size_t i = static_cast<std::size_t>(bi * k + j);
            gz[i] += scale * (std::exp(logp[i]) * mass - t[i]);
          }
        }
      }
      if (wants(1)) {
        T* gt = gin(1);
        for (std::size_t i = 0; i < t.size(); ++i) gt[i] -= scale * logp[i];
      }
      break;
    }
    case OpKind::kInput:
    case OpKind::kLeaf:
      break;
    default:
      throw GraphError(id, "unknown op kind " + std::to_string(static_cast<int>(n.kind)));
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace vitft

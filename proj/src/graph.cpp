#include "modnet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace modnet {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Const: return "const";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::MatVec: return "matvec";
    case Op::MatTVec: return "mat_tvec";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Min: return "min";
    case Op::Max: return "max";
    case Op::AddRowBroadcast: return "add_row_broadcast";
    case Op::AddChannelBroadcast: return "add_channel_broadcast";
    case Op::MulChannelBroadcast: return "mul_channel_broadcast";
    case Op::MulMapBroadcast: return "mul_map_broadcast";
    case Op::Neg: return "neg";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::ScaleConst: return "scale";
    case Op::SumSpatial: return "sum_spatial";
    case Op::SumAll: return "sum_all";
    case Op::ReduceMax: return "reduce_max";
    case Op::ReduceMin: return "reduce_min";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Conv2d: return "conv2d";
    case Op::ConcatVec: return "concat_vec";
    case Op::ConcatChannels: return "concat_channels";
    case Op::Slice: return "slice";
    case Op::Reshape: return "reshape";
    case Op::StackRows: return "stack_rows";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(const std::string& where, const std::string& detail) {
  throw GraphError("shape mismatch at node '" + where + "': " + detail);
}

void expect_rank(const Node& n, const std::vector<int>& s, size_t rank, const char* what) {
  if (s.size() != rank)
    shape_error(op_name(n.op), std::string(what) + " expected rank " + std::to_string(rank) +
                                   ", got " + shape_str(s));
}

}  // namespace

NodeId Graph::push(Node n) {
  NodeId id = static_cast<NodeId>(nodes_.size());
  for (NodeId in : n.inputs) {
    if (in < 0 || in >= id) throw GraphError("graph node order violated at " + std::string(op_name(n.op)));
    n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
  }
  n.value.assign(static_cast<size_t>(n.numel()), 0.0);
  nodes_.push_back(std::move(n));
  return id;
}

NodeId Graph::input(const std::string& name, std::vector<int> shape, bool requires_grad) {
  Node n;
  n.op = Op::Input;
  n.shape = std::move(shape);
  n.name = name;
  n.needs_grad = requires_grad;
  NodeId id = push(std::move(n));
  inputs_by_name_[name] = id;
  return id;
}

NodeId Graph::constant(Tensor t) {
  Node n;
  n.op = Op::Const;
  n.shape = t.shape;
  NodeId id = push(std::move(n));
  nodes_[id].value = std::move(t.data);
  return id;
}

NodeId Graph::constant(std::vector<int> shape, std::vector<Scalar> data) {
  return constant(Tensor(std::move(shape), std::move(data)));
}

NodeId Graph::param(Tensor& t, const std::string& name, int param_id) {
  Node n;
  n.op = Op::Param;
  n.shape = t.shape;
  n.name = name;
  n.param = &t;
  n.param_id = param_id;
  n.needs_grad = t.requires_grad;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::MatMul;
  const auto& sa = nodes_[a].shape;
  const auto& sb = nodes_[b].shape;
  expect_rank(n, sa, 2, "lhs");
  expect_rank(n, sb, 2, "rhs");
  if (sa[1] != sb[0]) shape_error("matmul", shape_str(sa) + " x " + shape_str(sb));
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::matvec(NodeId w, NodeId x) {
  Node n;
  n.op = Op::MatVec;
  const auto& sw = nodes_[w].shape;
  const auto& sx = nodes_[x].shape;
  expect_rank(n, sw, 2, "matrix");
  expect_rank(n, sx, 1, "vector");
  if (sw[1] != sx[0]) shape_error("matvec", shape_str(sw) + " x " + shape_str(sx));
  n.inputs = {w, x};
  n.shape = {sw[0]};
  return push(std::move(n));
}

NodeId Graph::mat_tvec(NodeId w, NodeId x) {
  Node n;
  n.op = Op::MatTVec;
  const auto& sw = nodes_[w].shape;
  const auto& sx = nodes_[x].shape;
  expect_rank(n, sw, 2, "matrix");
  expect_rank(n, sx, 1, "vector");
  if (sw[0] != sx[0]) shape_error("mat_tvec", shape_str(sw) + "^T x " + shape_str(sx));
  n.inputs = {w, x};
  n.shape = {sw[1]};
  return push(std::move(n));
}

static void expect_same(const Graph& g, Op op, NodeId a, NodeId b) {
  if (g.shape(a) != g.shape(b))
    shape_error(op_name(op), shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
}

NodeId Graph::add(NodeId a, NodeId b) {
  expect_same(*this, Op::Add, a, b);
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  expect_same(*this, Op::Sub, a, b);
  Node n;
  n.op = Op::Sub;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  expect_same(*this, Op::Mul, a, b);
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::min(NodeId a, NodeId b) {
  expect_same(*this, Op::Min, a, b);
  Node n;
  n.op = Op::Min;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::max(NodeId a, NodeId b) {
  expect_same(*this, Op::Max, a, b);
  Node n;
  n.op = Op::Max;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::add_row_broadcast(NodeId m, NodeId v) {
  Node n;
  n.op = Op::AddRowBroadcast;
  const auto& sm = nodes_[m].shape;
  const auto& sv = nodes_[v].shape;
  expect_rank(n, sm, 2, "matrix");
  expect_rank(n, sv, 1, "row");
  if (sm[1] != sv[0]) shape_error("add_row_broadcast", shape_str(sm) + " + " + shape_str(sv));
  n.inputs = {m, v};
  n.shape = sm;
  return push(std::move(n));
}

NodeId Graph::add_channel_broadcast(NodeId x, NodeId b) {
  Node n;
  n.op = Op::AddChannelBroadcast;
  const auto& sx = nodes_[x].shape;
  const auto& sb = nodes_[b].shape;
  expect_rank(n, sx, 3, "map");
  expect_rank(n, sb, 1, "bias");
  if (sx[2] != sb[0]) shape_error("add_channel_broadcast", shape_str(sx) + " + " + shape_str(sb));
  n.inputs = {x, b};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::mul_channel_broadcast(NodeId x, NodeId v) {
  Node n;
  n.op = Op::MulChannelBroadcast;
  const auto& sx = nodes_[x].shape;
  const auto& sv = nodes_[v].shape;
  expect_rank(n, sx, 3, "map");
  expect_rank(n, sv, 1, "vector");
  if (sx[2] != sv[0]) shape_error("mul_channel_broadcast", shape_str(sx) + " * " + shape_str(sv));
  n.inputs = {x, v};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::mul_map_broadcast(NodeId x, NodeId a) {
  Node n;
  n.op = Op::MulMapBroadcast;
  const auto& sx = nodes_[x].shape;
  const auto& sa = nodes_[a].shape;
  expect_rank(n, sx, 3, "features");
  expect_rank(n, sa, 2, "map");
  if (sx[0] != sa[0] || sx[1] != sa[1])
    shape_error("mul_map_broadcast", shape_str(sx) + " * " + shape_str(sa));
  n.inputs = {x, a};
  n.shape = sx;
  return push(std::move(n));
}

#define MODNET_UNARY(fn, opname)                  \
  NodeId Graph::fn(NodeId x) {                    \
    Node n;                                       \
    n.op = opname;                                \
    n.inputs = {x};                               \
    n.shape = nodes_[x].shape;                    \
    return push(std::move(n));                    \
  }

MODNET_UNARY(neg, Op::Neg)
MODNET_UNARY(relu, Op::Relu)
MODNET_UNARY(tanh, Op::Tanh)
MODNET_UNARY(sigmoid, Op::Sigmoid)
MODNET_UNARY(exp, Op::Exp)
MODNET_UNARY(log, Op::Log)
MODNET_UNARY(softmax, Op::Softmax)
MODNET_UNARY(log_softmax, Op::LogSoftmax)
#undef MODNET_UNARY

NodeId Graph::scale(NodeId x, Scalar c) {
  Node n;
  n.op = Op::ScaleConst;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  n.s0 = c;
  return push(std::move(n));
}

NodeId Graph::sum_spatial(NodeId x) {
  Node n;
  n.op = Op::SumSpatial;
  expect_rank(n, nodes_[x].shape, 3, "map");
  n.inputs = {x};
  n.shape = {nodes_[x].shape[2]};
  return push(std::move(n));
}

NodeId Graph::sum_all(NodeId x) {
  Node n;
  n.op = Op::SumAll;
  n.inputs = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::reduce_max(NodeId x) {
  Node n;
  n.op = Op::ReduceMax;
  n.inputs = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::reduce_min(NodeId x) {
  Node n;
  n.op = Op::ReduceMin;
  n.inputs = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w, int stride) {
  Node n;
  n.op = Op::Conv2d;
  const auto& sx = nodes_[x].shape;
  const auto& sw = nodes_[w].shape;
  expect_rank(n, sx, 3, "image");
  expect_rank(n, sw, 4, "kernel");
  if (sx[2] != sw[2]) shape_error("conv2d", "channels " + shape_str(sx) + " vs " + shape_str(sw));
  if (stride < 1) shape_error("conv2d", "stride must be positive");
  int ho = (sx[0] - sw[0]) / stride + 1;
  int wo = (sx[1] - sw[1]) / stride + 1;
  if (sx[0] < sw[0] || sx[1] < sw[1])
    shape_error("conv2d", "kernel " + shape_str(sw) + " larger than input " + shape_str(sx));
  n.inputs = {x, w};
  n.shape = {ho, wo, sw[3]};
  n.i0 = stride;
  return push(std::move(n));
}

NodeId Graph::concat_vec(NodeId a, NodeId b) {
  Node n;
  n.op = Op::ConcatVec;
  expect_rank(n, nodes_[a].shape, 1, "lhs");
  expect_rank(n, nodes_[b].shape, 1, "rhs");
  n.inputs = {a, b};
  n.shape = {nodes_[a].shape[0] + nodes_[b].shape[0]};
  return push(std::move(n));
}

NodeId Graph::concat_channels(NodeId a, NodeId b) {
  Node n;
  n.op = Op::ConcatChannels;
  const auto& sa = nodes_[a].shape;
  const auto& sb = nodes_[b].shape;
  expect_rank(n, sa, 3, "lhs");
  expect_rank(n, sb, 3, "rhs");
  if (sa[0] != sb[0] || sa[1] != sb[1])
    shape_error("concat_channels", shape_str(sa) + " vs " + shape_str(sb));
  n.inputs = {a, b};
  n.shape = {sa[0], sa[1], sa[2] + sb[2]};
  return push(std::move(n));
}

NodeId Graph::slice(NodeId x, int offset, int len) {
  Node n;
  n.op = Op::Slice;
  long total = nodes_[x].numel();
  if (offset < 0 || len <= 0 || offset + len > total)
    shape_error("slice", "range [" + std::to_string(offset) + "," + std::to_string(offset + len) +
                             ") out of " + std::to_string(total));
  n.inputs = {x};
  n.shape = {len};
  n.i0 = offset;
  n.i1 = len;
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, std::vector<int> shape) {
  Node n;
  n.op = Op::Reshape;
  if (Tensor::numel_of(shape) != nodes_[x].numel())
    shape_error("reshape", shape_str(nodes_[x].shape) + " -> " + shape_str(shape));
  n.inputs = {x};
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::flatten(NodeId x) {
  return reshape(x, {static_cast<int>(nodes_[x].numel())});
}

NodeId Graph::stack_rows(const std::vector<NodeId>& rows) {
  Node n;
  n.op = Op::StackRows;
  if (rows.empty()) throw GraphError("stack_rows: empty input list");
  int width = nodes_[rows[0]].shape.empty() ? 0 : nodes_[rows[0]].shape[0];
  for (NodeId r : rows) {
    expect_rank(n, nodes_[r].shape, 1, "row");
    if (nodes_[r].shape[0] != width)
      shape_error("stack_rows", "row width " + shape_str(nodes_[r].shape));
  }
  n.inputs = rows;
  n.shape = {static_cast<int>(rows.size()), width};
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// forward kernels

namespace {

constexpr long kParallelCutoff = 1 << 16;  // flops below this run serial

void matmul_fwd(const Scalar* a, const Scalar* b, Scalar* out, int m, int k, int n) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for if (work > kParallelCutoff) schedule(static)
  for (int i = 0; i < m; ++i) {
    Scalar* orow = out + static_cast<long>(i) * n;
    for (int j = 0; j < n; ++j) orow[j] = 0.0;
    const Scalar* arow = a + static_cast<long>(i) * k;
    for (int p = 0; p < k; ++p) {
      const Scalar av = arow[p];
      const Scalar* brow = b + static_cast<long>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

void conv2d_fwd(const Scalar* x, const Scalar* w, Scalar* out, int h, int wd, int ci, int kh,
                int kw, int co, int stride, int ho, int wo) {
  const long work = static_cast<long>(ho) * wo * co * kh * kw * ci;
#pragma omp parallel for if (work > kParallelCutoff) schedule(static) collapse(2)
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      Scalar* opix = out + (static_cast<long>(oy) * wo + ox) * co;
      for (int c = 0; c < co; ++c) opix[c] = 0.0;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const Scalar* xpix = x + ((static_cast<long>(oy * stride + ky) * wd) + (ox * stride + kx)) * ci;
          const Scalar* wk = w + ((static_cast<long>(ky) * kw + kx) * ci) * co;
          for (int ic = 0; ic < ci; ++ic) {
            const Scalar xv = xpix[ic];
            const Scalar* wrow = wk + static_cast<long>(ic) * co;
            for (int c = 0; c < co; ++c) opix[c] += xv * wrow[c];
          }
        }
      }
    }
  }
}

}  // namespace

void Graph::forward_node(Node& n) {
  auto& v = n.value;
  switch (n.op) {
    case Op::Input: {
      // value must have been bound; all-zero is a legal binding, so track via name map in bind
      break;
    }
    case Op::Const:
    case Op::Param: {
      if (n.op == Op::Param) v.assign(n.param->data.begin(), n.param->data.end());
      break;
    }
    case Op::MatMul: {
      const Node& a = nodes_[n.inputs[0]];
      const Node& b = nodes_[n.inputs[1]];
      matmul_fwd(a.value.data(), b.value.data(), v.data(), a.shape[0], a.shape[1], b.shape[1]);
      break;
    }
    case Op::MatVec: {
      const Node& w = nodes_[n.inputs[0]];
      const Node& x = nodes_[n.inputs[1]];
      const int m = w.shape[0], k = w.shape[1];
      const long work = static_cast<long>(m) * k;
#pragma omp parallel for if (work > kParallelCutoff) schedule(static)
      for (int i = 0; i < m; ++i) {
        Scalar acc = 0;
        const Scalar* row = w.value.data() + static_cast<long>(i) * k;
        for (int j = 0; j < k; ++j) acc += row[j] * x.value[j];
        v[i] = acc;
      }
      break;
    }
    case Op::MatTVec: {
      const Node& w = nodes_[n.inputs[0]];
      const Node& x = nodes_[n.inputs[1]];
      const int m = w.shape[0], k = w.shape[1];
      std::fill(v.begin(), v.end(), 0.0);
      for (int i = 0; i < m; ++i) {
        const Scalar xv = x.value[i];
        const Scalar* row = w.value.data() + static_cast<long>(i) * k;
        for (int j = 0; j < k; ++j) v[j] += xv * row[j];
      }
      break;
    }
    case Op::Add: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
      break;
    }
    case Op::Sub: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
      break;
    }
    case Op::Mul: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
      break;
    }
    case Op::Min: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] <= b[i] ? a[i] : b[i];
      break;
    }
    case Op::Max: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] >= b[i] ? a[i] : b[i];
      break;
    }
    case Op::AddRowBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const auto& b = nodes_[n.inputs[1]].value;
      const int rows = a.shape[0], cols = a.shape[1];
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
          v[static_cast<size_t>(i) * cols + j] = a.value[static_cast<size_t>(i) * cols + j] + b[j];
      break;
    }
    case Op::AddChannelBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const auto& b = nodes_[n.inputs[1]].value;
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      for (long p = 0; p < px; ++p)
        for (int c = 0; c < d; ++c) v[p * d + c] = a.value[p * d + c] + b[c];
      break;
    }
    case Op::MulChannelBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const auto& b = nodes_[n.inputs[1]].value;
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      for (long p = 0; p < px; ++p)
        for (int c = 0; c < d; ++c) v[p * d + c] = a.value[p * d + c] * b[c];
      break;
    }
    case Op::MulMapBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const auto& m = nodes_[n.inputs[1]].value;
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      for (long p = 0; p < px; ++p)
        for (int c = 0; c < d; ++c) v[p * d + c] = a.value[p * d + c] * m[p];
      break;
    }
    case Op::Neg: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = -a[i];
      break;
    }
    case Op::Relu: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] > 0 ? a[i] : 0.0;
      break;
    }
    case Op::Tanh: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a[i]);
      break;
    }
    case Op::Sigmoid: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-a[i]));
      break;
    }
    case Op::Exp: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a[i]);
      break;
    }
    case Op::Log: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = std::log(a[i]);
      break;
    }
    case Op::ScaleConst: {
      const auto& a = nodes_[n.inputs[0]].value;
      for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] * n.s0;
      break;
    }
    case Op::SumSpatial: {
      const Node& a = nodes_[n.inputs[0]];
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      std::fill(v.begin(), v.end(), 0.0);
      for (long p = 0; p < px; ++p)
        for (int c = 0; c < d; ++c) v[c] += a.value[p * d + c];
      break;
    }
    case Op::SumAll: {
      const auto& a = nodes_[n.inputs[0]].value;
      Scalar acc = 0;
      for (Scalar x : a) acc += x;
      v[0] = acc;
      break;
    }
    case Op::ReduceMax: {
      const auto& a = nodes_[n.inputs[0]].value;
      Scalar best = a[0];
      for (Scalar x : a) best = x > best ? x : best;
      v[0] = best;
      break;
    }
    case Op::ReduceMin: {
      const auto& a = nodes_[n.inputs[0]].value;
      Scalar best = a[0];
      for (Scalar x : a) best = x < best ? x : best;
      v[0] = best;
      break;
    }
    case Op::Softmax:
    case Op::LogSoftmax: {
      const Node& a = nodes_[n.inputs[0]];
      const int cols = a.shape.back();
      const long rows = a.numel() / cols;
      for (long r = 0; r < rows; ++r) {
        const Scalar* in = a.value.data() + r * cols;
        Scalar* out = v.data() + r * cols;
        Scalar mx = in[0];
        for (int j = 1; j < cols; ++j) mx = in[j] > mx ? in[j] : mx;
        Scalar z = 0;
        for (int j = 0; j < cols; ++j) z += std::exp(in[j] - mx);
        if (n.op == Op::Softmax) {
          for (int j = 0; j < cols; ++j) out[j] = std::exp(in[j] - mx) / z;
        } else {
          const Scalar lse = mx + std::log(z);
          for (int j = 0; j < cols; ++j) out[j] = in[j] - lse;
        }
      }
      break;
    }
    case Op::Conv2d: {
      const Node& x = nodes_[n.inputs[0]];
      const Node& w = nodes_[n.inputs[1]];
      conv2d_fwd(x.value.data(), w.value.data(), v.data(), x.shape[0], x.shape[1], x.shape[2],
                 w.shape[0], w.shape[1], w.shape[3], n.i0, n.shape[0], n.shape[1]);
      break;
    }
    case Op::ConcatVec: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      std::copy(a.begin(), a.end(), v.begin());
      std::copy(b.begin(), b.end(), v.begin() + a.size());
      break;
    }
    case Op::ConcatChannels: {
      const Node& a = nodes_[n.inputs[0]];
      const Node& b = nodes_[n.inputs[1]];
      const int da = a.shape[2], db = b.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      for (long p = 0; p < px; ++p) {
        for (int c = 0; c < da; ++c) v[p * (da + db) + c] = a.value[p * da + c];
        for (int c = 0; c < db; ++c) v[p * (da + db) + da + c] = b.value[p * db + c];
      }
      break;
    }
    case Op::Slice: {
      const auto& a = nodes_[n.inputs[0]].value;
      std::copy(a.begin() + n.i0, a.begin() + n.i0 + n.i1, v.begin());
      break;
    }
    case Op::Reshape: {
      v = nodes_[n.inputs[0]].value;
      break;
    }
    case Op::StackRows: {
      const size_t width = n.shape[1];
      for (size_t r = 0; r < n.inputs.size(); ++r) {
        const auto& row = nodes_[n.inputs[r]].value;
        std::copy(row.begin(), row.end(), v.begin() + r * width);
      }
      break;
    }
  }
}

void Graph::forward() {
  for (size_t i = forward_pos_; i < nodes_.size(); ++i) forward_node(nodes_[i]);
  forward_pos_ = nodes_.size();
}

// ---------------------------------------------------------------------------
// backward kernels

std::vector<Scalar>& Graph::gbuf(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Graph::backward_node(Node& n) {
  const auto& g = n.grad;
  const auto& v = n.value;
  switch (n.op) {
    case Op::Input:
    case Op::Const:
    case Op::Param:
      break;
    case Op::MatMul: {
      const Node& a = nodes_[n.inputs[0]];
      const Node& b = nodes_[n.inputs[1]];
      const int m = a.shape[0], k = a.shape[1], c = b.shape[1];
      if (a.needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            Scalar acc = 0;
            for (int j = 0; j < c; ++j)
              acc += g[static_cast<long>(i) * c + j] * b.value[static_cast<long>(p) * c + j];
            ga[static_cast<long>(i) * k + p] += acc;
          }
      }
      if (b.needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            const Scalar av = a.value[static_cast<long>(i) * k + p];
            for (int j = 0; j < c; ++j)
              gb[static_cast<long>(p) * c + j] += av * g[static_cast<long>(i) * c + j];
          }
      }
      break;
    }
    case Op::MatVec: {
      const Node& w = nodes_[n.inputs[0]];
      const Node& x = nodes_[n.inputs[1]];
      const int m = w.shape[0], k = w.shape[1];
      if (w.needs_grad) {
        auto& gw = gbuf(n.inputs[0]);
        for (int i = 0; i < m; ++i) {
          const Scalar gi = g[i];
          Scalar* row = gw.data() + static_cast<long>(i) * k;
          for (int j = 0; j < k; ++j) row[j] += gi * x.value[j];
        }
      }
      if (x.needs_grad) {
        auto& gx = gbuf(n.inputs[1]);
        for (int i = 0; i < m; ++i) {
          const Scalar gi = g[i];
          const Scalar* row = w.value.data() + static_cast<long>(i) * k;
          for (int j = 0; j < k; ++j) gx[j] += gi * row[j];
        }
      }
      break;
    }
    case Op::MatTVec: {
      const Node& w = nodes_[n.inputs[0]];
      const Node& x = nodes_[n.inputs[1]];
      const int m = w.shape[0], k = w.shape[1];
      if (w.needs_grad) {
        auto& gw = gbuf(n.inputs[0]);
        for (int i = 0; i < m; ++i) {
          const Scalar xv = x.value[i];
          Scalar* row = gw.data() + static_cast<long>(i) * k;
          for (int j = 0; j < k; ++j) row[j] += xv * g[j];
        }
      }
      if (x.needs_grad) {
        auto& gx = gbuf(n.inputs[1]);
        for (int i = 0; i < m; ++i) {
          const Scalar* row = w.value.data() + static_cast<long>(i) * k;
          Scalar acc = 0;
          for (int j = 0; j < k; ++j) acc += row[j] * g[j];
          gx[i] += acc;
        }
      }
      break;
    }
    case Op::Add: {
      for (int s = 0; s < 2; ++s)
        if (nodes_[n.inputs[s]].needs_grad) {
          auto& gi = gbuf(n.inputs[s]);
          for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
      break;
    }
    case Op::Sub: {
      if (nodes_[n.inputs[0]].needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
      break;
    }
    case Op::Mul: {
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      if (nodes_[n.inputs[0]].needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case Op::Min:
    case Op::Max: {
      // ties route the full subgradient to the first argument
      const auto& a = nodes_[n.inputs[0]].value;
      const auto& b = nodes_[n.inputs[1]].value;
      const bool amax = n.op == Op::Max;
      if (nodes_[n.inputs[0]].needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) {
          const bool first = amax ? a[i] >= b[i] : a[i] <= b[i];
          if (first) ga[i] += g[i];
        }
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (size_t i = 0; i < g.size(); ++i) {
          const bool first = amax ? a[i] >= b[i] : a[i] <= b[i];
          if (!first) gb[i] += g[i];
        }
      }
      break;
    }
    case Op::AddRowBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const int rows = a.shape[0], cols = a.shape[1];
      if (a.needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) gb[j] += g[static_cast<size_t>(i) * cols + j];
      }
      break;
    }
    case Op::AddChannelBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      if (a.needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (long p = 0; p < px; ++p)
          for (int c = 0; c < d; ++c) gb[c] += g[p * d + c];
      }
      break;
    }
    case Op::MulChannelBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const auto& b = nodes_[n.inputs[1]].value;
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      if (a.needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (long p = 0; p < px; ++p)
          for (int c = 0; c < d; ++c) ga[p * d + c] += g[p * d + c] * b[c];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (long p = 0; p < px; ++p)
          for (int c = 0; c < d; ++c) gb[c] += g[p * d + c] * a.value[p * d + c];
      }
      break;
    }
    case Op::MulMapBroadcast: {
      const Node& a = nodes_[n.inputs[0]];
      const auto& m = nodes_[n.inputs[1]].value;
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      if (a.needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (long p = 0; p < px; ++p)
          for (int c = 0; c < d; ++c) ga[p * d + c] += g[p * d + c] * m[p];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gm = gbuf(n.inputs[1]);
        for (long p = 0; p < px; ++p) {
          Scalar acc = 0;
          for (int c = 0; c < d; ++c) acc += g[p * d + c] * a.value[p * d + c];
          gm[p] += acc;
        }
      }
      break;
    }
    case Op::Neg: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
      break;
    }
    case Op::Relu: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      const auto& a = nodes_[n.inputs[0]].value;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i)
        if (a[i] > 0) ga[i] += g[i];
      break;
    }
    case Op::Tanh: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - v[i] * v[i]);
      break;
    }
    case Op::Sigmoid: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * v[i] * (1.0 - v[i]);
      break;
    }
    case Op::Exp: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * v[i];
      break;
    }
    case Op::Log: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      const auto& a = nodes_[n.inputs[0]].value;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[i];
      break;
    }
    case Op::ScaleConst: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.s0;
      break;
    }
    case Op::SumSpatial: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      const Node& a = nodes_[n.inputs[0]];
      const int d = a.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      auto& ga = gbuf(n.inputs[0]);
      for (long p = 0; p < px; ++p)
        for (int c = 0; c < d; ++c) ga[p * d + c] += g[c];
      break;
    }
    case Op::SumAll: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (auto& x : ga) x += g[0];
      break;
    }
    case Op::ReduceMax:
    case Op::ReduceMin: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      const auto& a = nodes_[n.inputs[0]].value;
      size_t arg = 0;
      for (size_t i = 1; i < a.size(); ++i) {
        if (n.op == Op::ReduceMax ? a[i] > a[arg] : a[i] < a[arg]) arg = i;
      }
      gbuf(n.inputs[0])[arg] += g[0];
      break;
    }
    case Op::Softmax: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      const Node& a = nodes_[n.inputs[0]];
      const int cols = a.shape.back();
      const long rows = a.numel() / cols;
      auto& ga = gbuf(n.inputs[0]);
      for (long r = 0; r < rows; ++r) {
        const Scalar* p = v.data() + r * cols;
        const Scalar* gr = g.data() + r * cols;
        Scalar dot = 0;
        for (int j = 0; j < cols; ++j) dot += gr[j] * p[j];
        for (int j = 0; j < cols; ++j) ga[r * cols + j] += p[j] * (gr[j] - dot);
      }
      break;
    }
    case Op::LogSoftmax: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      const Node& a = nodes_[n.inputs[0]];
      const int cols = a.shape.back();
      const long rows = a.numel() / cols;
      auto& ga = gbuf(n.inputs[0]);
      for (long r = 0; r < rows; ++r) {
        const Scalar* lv = v.data() + r * cols;
        const Scalar* gr = g.data() + r * cols;
        Scalar gsum = 0;
        for (int j = 0; j < cols; ++j) gsum += gr[j];
        for (int j = 0; j < cols; ++j) ga[r * cols + j] += gr[j] - std::exp(lv[j]) * gsum;
      }
      break;
    }
    case Op::Conv2d: {
      const Node& x = nodes_[n.inputs[0]];
      const Node& w = nodes_[n.inputs[1]];
      const int h = x.shape[0], wd = x.shape[1], ci = x.shape[2];
      const int kh = w.shape[0], kw = w.shape[1], co = w.shape[3];
      const int stride = n.i0, ho = n.shape[0], wo = n.shape[1];
      (void)h;
      (void)wd;
      const bool need_x = x.needs_grad, need_w = w.needs_grad;
      if (!need_x && !need_w) break;
      if (need_x) gbuf(n.inputs[0]);
      if (need_w) gbuf(n.inputs[1]);
      auto& gx = nodes_[n.inputs[0]].grad;
      auto& gw = nodes_[n.inputs[1]].grad;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Scalar* gpix = g.data() + (static_cast<long>(oy) * wo + ox) * co;
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const long xoff = ((static_cast<long>(oy * stride + ky) * wd) + (ox * stride + kx)) * ci;
              const long woff = (static_cast<long>(ky) * kw + kx) * ci * co;
              for (int ic = 0; ic < ci; ++ic) {
                if (need_x) {
                  Scalar acc = 0;
                  for (int c = 0; c < co; ++c) acc += w.value[woff + static_cast<long>(ic) * co + c] * gpix[c];
                  gx[xoff + ic] += acc;
                }
                if (need_w) {
                  const Scalar xv = x.value[xoff + ic];
                  for (int c = 0; c < co; ++c) gw[woff + static_cast<long>(ic) * co + c] += xv * gpix[c];
                }
              }
            }
        }
      break;
    }
    case Op::ConcatVec: {
      const size_t na = nodes_[n.inputs[0]].value.size();
      if (nodes_[n.inputs[0]].needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (nodes_[n.inputs[1]].needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
      }
      break;
    }
    case Op::ConcatChannels: {
      const Node& a = nodes_[n.inputs[0]];
      const Node& b = nodes_[n.inputs[1]];
      const int da = a.shape[2], db = b.shape[2];
      const long px = static_cast<long>(a.shape[0]) * a.shape[1];
      if (a.needs_grad) {
        auto& ga = gbuf(n.inputs[0]);
        for (long p = 0; p < px; ++p)
          for (int c = 0; c < da; ++c) ga[p * da + c] += g[p * (da + db) + c];
      }
      if (b.needs_grad) {
        auto& gb = gbuf(n.inputs[1]);
        for (long p = 0; p < px; ++p)
          for (int c = 0; c < db; ++c) gb[p * db + c] += g[p * (da + db) + da + c];
      }
      break;
    }
    case Op::Slice: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (int i = 0; i < n.i1; ++i) ga[n.i0 + i] += g[i];
      break;
    }
    case Op::Reshape: {
      if (!nodes_[n.inputs[0]].needs_grad) break;
      auto& ga = gbuf(n.inputs[0]);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    case Op::StackRows: {
      const size_t width = n.shape[1];
      for (size_t r = 0; r < n.inputs.size(); ++r) {
        if (!nodes_[n.inputs[r]].needs_grad) continue;
        auto& gr = gbuf(n.inputs[r]);
        for (size_t j = 0; j < width; ++j) gr[j] += g[r * width + j];
      }
      break;
    }
  }
}

void Graph::backward(NodeId loss) {
  if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size()))
    throw GraphError("backward: unknown loss node");
  if (static_cast<size_t>(loss) >= forward_pos_)
    throw GraphError("backward: forward() has not evaluated the loss node");
  Node& ln = nodes_[loss];
  if (ln.numel() != 1)
    throw GraphError("backward: loss node '" + std::string(op_name(ln.op)) +
                     "' is not scalar, shape " + shape_str(ln.shape));
  for (NodeId i = 0; i <= loss; ++i)
    if (!nodes_[i].grad.empty()) std::fill(nodes_[i].grad.begin(), nodes_[i].grad.end(), 0.0);
  gbuf(loss)[0] = 1.0;
  for (NodeId i = loss; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    for (Scalar x : n.grad)
      if (!std::isfinite(x))
        throw GraphError("backward: non-finite gradient at node " + std::to_string(i) + " (" +
                         op_name(n.op) + (n.name.empty() ? "" : " '" + n.name + "'") + ")");
    backward_node(n);
  }
}

void Graph::mark_output(NodeId id, const std::string& name) { outputs_by_name_[name] = id; }

void Graph::bind_inputs(const std::map<std::string, Tensor>& bindings) {
  for (const auto& [name, id] : inputs_by_name_) {
    auto it = bindings.find(name);
    if (it == bindings.end()) throw GraphError("unbound input '" + name + "'");
    if (it->second.shape != nodes_[id].shape)
      shape_error(name, "bound " + shape_str(it->second.shape) + ", declared " +
                            shape_str(nodes_[id].shape));
    nodes_[id].value = it->second.data;
  }
  forward_pos_ = 0;  // full re-evaluation with the new bindings
}

std::map<std::string, Tensor> Graph::evaluate(const std::map<std::string, Tensor>& bindings) {
  bind_inputs(bindings);
  forward();
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_by_name_)
    out.emplace(name, Tensor(nodes_[id].shape, nodes_[id].value));
  return out;
}

std::map<std::string, Tensor> Graph::backprop(const std::string& loss_name,
                                              const std::map<std::string, Tensor>& bindings) {
  auto it = outputs_by_name_.find(loss_name);
  if (it == outputs_by_name_.end()) throw GraphError("backprop: unknown loss '" + loss_name + "'");
  bind_inputs(bindings);
  forward();
  backward(it->second);
  add_grads_to_params();
  std::map<std::string, Tensor> grads;
  for (const auto& n : nodes_) {
    if (n.name.empty() || n.grad.empty()) continue;
    if (n.op == Op::Input || n.op == Op::Param)
      grads.emplace(n.name, Tensor(n.shape, n.grad));
  }
  return grads;
}

void Graph::add_grads_to_params() {
  for (Node& n : nodes_) {
    if (n.op != Op::Param || n.grad.empty() || !n.param->requires_grad) continue;
    n.param->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
  }
}

void Graph::accumulate_param_grads(std::vector<std::vector<Scalar>>& slab) const {
  for (const Node& n : nodes_) {
    if (n.op != Op::Param || n.grad.empty() || n.param_id < 0) continue;
    auto& dst = slab[n.param_id];
    for (size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  }
}

LstmState lstm_cell(Graph& g, NodeId x, LstmState prev, NodeId w_ih, NodeId w_hh, NodeId bias) {
  const int hidden = g.shape(prev.h)[0];
  NodeId z = g.add(g.add(g.matvec(w_ih, x), g.matvec(w_hh, prev.h)), bias);
  NodeId gate_i = g.sigmoid(g.slice(z, 0, hidden));
  NodeId gate_f = g.sigmoid(g.slice(z, hidden, hidden));
  NodeId gate_g = g.tanh(g.slice(z, 2 * hidden, hidden));
  NodeId gate_o = g.sigmoid(g.slice(z, 3 * hidden, hidden));
  NodeId c = g.add(g.mul(gate_f, prev.c), g.mul(gate_i, gate_g));
  NodeId h = g.mul(gate_o, g.tanh(c));
  return {h, c};
}

}  // namespace modnet

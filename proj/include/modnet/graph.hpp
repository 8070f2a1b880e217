#pragma once

#include <map>
#include <string>
#include <vector>

#include "modnet/tensor.hpp"

namespace modnet {

/// Raised on malformed graph construction or evaluation (shape mismatches,
/// unbound inputs, non-scalar loss, non-finite gradients). The message names
/// the offending node and the expected/actual shapes where applicable.
struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using NodeId = int;

enum class Op {
  Input,
  Const,
  Param,
  MatMul,    // A[m,k] * B[k,n] -> [m,n]
  MatVec,    // W[m,n] * x[n]   -> [m]
  MatTVec,   // W[m,n]^T * x[m] -> [n]
  Add,
  Sub,
  Mul,
  Min,
  Max,
  AddRowBroadcast,      // A[m,n] + b[n] on every row
  AddChannelBroadcast,  // X[h,w,d] + b[d]
  MulChannelBroadcast,  // X[h,w,d] * v[d]
  MulMapBroadcast,      // X[h,w,d] * a[h,w]
  Neg,
  Relu,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  ScaleConst,  // x * c
  SumSpatial,  // X[h,w,d] -> [d]
  SumAll,      // -> [1]
  ReduceMax,   // -> [1], subgradient to first argmax
  ReduceMin,   // -> [1], subgradient to first argmin
  Softmax,     // over last axis
  LogSoftmax,  // over last axis
  Conv2d,      // x[h,w,ci], w[kh,kw,ci,co], stride -> [ho,wo,co]
  ConcatVec,
  ConcatChannels,
  Slice,    // flat [offset, offset+len) -> [len]
  Reshape,  // same numel
  StackRows,  // k vectors [n] -> [k,n]
};

const char* op_name(Op op);

struct Node {
  Op op;
  std::vector<NodeId> inputs;
  std::vector<int> shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool needs_grad = false;
  int i0 = 0;      // slice offset / conv stride
  int i1 = 0;      // slice length
  Scalar s0 = 0;   // ScaleConst factor
  std::string name;        // inputs, params, marked outputs
  Tensor* param = nullptr; // Param nodes only
  int param_id = -1;       // index into the owning ParamStore, when known

  long numel() const { return Tensor::numel_of(shape); }
};

/// A reverse-mode computation tape. Nodes are appended in topological order
/// (an op may only consume earlier nodes), values are computed by forward()
/// incrementally, and backward(loss) fills gradients for every node that can
/// reach a parameter or a requires_grad input.
///
/// Not thread-safe; build and run one Graph per thread. Values of finished
/// graphs may be read concurrently.
class Graph {
 public:
  NodeId input(const std::string& name, std::vector<int> shape, bool requires_grad = false);
  NodeId constant(Tensor t);
  NodeId constant(std::vector<int> shape, std::vector<Scalar> data);
  NodeId scalar_const(Scalar v) { return constant({1}, {v}); }
  /// Leaf referencing external parameter storage; backward accumulates into
  /// the tensor's grad (or a detached buffer via accumulate_param_grads).
  NodeId param(Tensor& t, const std::string& name, int param_id = -1);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matvec(NodeId w, NodeId x);
  NodeId mat_tvec(NodeId w, NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId min(NodeId a, NodeId b);
  NodeId max(NodeId a, NodeId b);
  NodeId add_row_broadcast(NodeId m, NodeId v);
  NodeId add_channel_broadcast(NodeId x, NodeId b);
  NodeId mul_channel_broadcast(NodeId x, NodeId v);
  NodeId mul_map_broadcast(NodeId x, NodeId a);
  NodeId neg(NodeId x);
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);
  NodeId scale(NodeId x, Scalar c);
  NodeId sum_spatial(NodeId x);
  NodeId sum_all(NodeId x);
  NodeId reduce_max(NodeId x);
  NodeId reduce_min(NodeId x);
  NodeId softmax(NodeId x);
  NodeId log_softmax(NodeId x);
  NodeId conv2d(NodeId x, NodeId w, int stride = 1);
  NodeId concat_vec(NodeId a, NodeId b);
  NodeId concat_channels(NodeId a, NodeId b);
  NodeId slice(NodeId x, int offset, int len);
  NodeId pick(NodeId x, int index) { return slice(x, index, 1); }
  NodeId reshape(NodeId x, std::vector<int> shape);
  NodeId flatten(NodeId x);
  NodeId stack_rows(const std::vector<NodeId>& rows);

  /// Computes values for all nodes appended since the previous forward().
  void forward();
  /// Reverse pass from a scalar loss node; values must already be computed.
  /// Throws GraphError on non-scalar loss or non-finite gradient.
  void backward(NodeId loss);

  const std::vector<Scalar>& value(NodeId id) const { return nodes_[id].value; }
  const std::vector<Scalar>& grad(NodeId id) const { return nodes_[id].grad; }
  const std::vector<int>& shape(NodeId id) const { return nodes_[id].shape; }
  Scalar value_scalar(NodeId id) const { return nodes_[id].value[0]; }
  size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[id]; }

  void mark_output(NodeId id, const std::string& name);

  /// Whole-graph entry points matching the tape contract: bind named inputs,
  /// run forward, and return every marked output (evaluate) or, after a
  /// backward pass from `loss_name`, the gradients of inputs/params by name.
  std::map<std::string, Tensor> evaluate(const std::map<std::string, Tensor>& bindings);
  std::map<std::string, Tensor> backprop(const std::string& loss_name,
                                         const std::map<std::string, Tensor>& bindings);

  /// tensor.grad += node grad, for every Param leaf.
  void add_grads_to_params();
  /// slab[param_id] += node grad; used by the batch trainer to keep per-thread
  /// accumulation buffers.
  void accumulate_param_grads(std::vector<std::vector<Scalar>>& slab) const;

 private:
  NodeId push(Node n);
  void forward_node(Node& n);
  void backward_node(Node& n);
  void bind_inputs(const std::map<std::string, Tensor>& bindings);
  std::vector<Scalar>& gbuf(NodeId id);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_by_name_;
  std::map<std::string, NodeId> outputs_by_name_;
  size_t forward_pos_ = 0;
};

/// One LSTM step built from tape primitives. Gate order in the packed
/// weights/bias is [input, forget, cell, output].
struct LstmState {
  NodeId h;
  NodeId c;
};
LstmState lstm_cell(Graph& g, NodeId x, LstmState prev, NodeId w_ih, NodeId w_hh, NodeId bias);

}  // namespace modnet

#pragma once

#include <string>
#include <vector>

#include "modnet/config.hpp"
#include "modnet/layout.hpp"
#include "modnet/modules.hpp"
#include "modnet/params.hpp"

namespace modnet {

/// A layout wired into concrete module invocations. Operand indices come from
/// the RPN stack simulation and reproduce rpn_to_tree exactly; text features
/// are precomputed per text-using token from its attention row.
struct AssembledNetwork {
  Layout layout;
  struct NodeBinding {
    LayoutToken token;
    int lhs = -1;  // operand entries (indices into the network), -1 if unused
    int rhs = -1;
    NodeId x_txt = -1;  // text feature node, -1 for no-text modules
    std::vector<Scalar> text_att;  // empty row for no-text tokens
  };
  std::vector<NodeBinding> nodes;
};

/// Per-token outputs of one execution: attention maps for attention-kind
/// tokens and answer scores at the root.
struct ExecutionTrace {
  std::vector<Tensor> outputs;
  std::vector<NodeId> output_nodes;
  std::vector<Scalar> final_logits;
  NodeId logits_node = -1;
};

/// Wires a validated layout. `alpha_nodes` carries one [T] attention node per
/// token (node -1 allowed for no-text tokens); `word_matrix` is the [T,E]
/// question embedding matrix.
AssembledNetwork assemble(Graph& g, ParamNodes& p, const ModelConfig& cfg, const Layout& layout,
                          const std::vector<NodeId>& alpha_nodes, NodeId word_matrix);

/// Same, from realized attention rows (evaluation path); rows become constants.
AssembledNetwork assemble_from_rows(Graph& g, ParamNodes& p, const ModelConfig& cfg,
                                    const Layout& layout,
                                    const std::vector<std::vector<Scalar>>& text_atts,
                                    NodeId word_matrix);

/// Runs the network on visual features. Throws GraphError naming the token
/// index if any module output is non-finite.
ExecutionTrace execute(Graph& g, ParamNodes& p, const ModelConfig& cfg,
                       const AssembledNetwork& net, NodeId x_vis);

/// Softmax of the final logits.
std::vector<Scalar> answer_distribution(const ExecutionTrace& trace);

/// Attention-dump format: per-question directory with one CSV grid per token
/// plus a JSON manifest (token names, text attention rows).
void dump_trace(const std::string& dir, const AssembledNetwork& net, const ExecutionTrace& trace,
                const std::vector<std::string>& question_words);

}  // namespace modnet

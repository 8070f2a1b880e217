#include "modnet/executor.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace modnet {

AssembledNetwork assemble(Graph& g, ParamNodes& p, const ModelConfig& cfg, const Layout& layout,
                          const std::vector<NodeId>& alpha_nodes, NodeId word_matrix) {
  if (alpha_nodes.size() != layout.tokens.size())
    throw GraphError("assemble: " + std::to_string(alpha_nodes.size()) +
                     " attention rows for " + std::to_string(layout.tokens.size()) + " tokens");
  (void)p;
  (void)cfg;
  AssembledNetwork net;
  net.layout = layout;
  std::vector<int> stack;
  for (size_t i = 0; i < layout.tokens.size(); ++i) {
    const LayoutToken tok = layout.tokens[i];
    const TokenInfo& info = token_info(tok);
    AssembledNetwork::NodeBinding b;
    b.token = tok;
    // pop order: the earlier-emitted child is the deeper stack element
    if (info.arity >= 1) b.lhs = stack[stack.size() - info.arity];
    if (info.arity == 2) b.rhs = stack[stack.size() - 1];
    stack.resize(stack.size() - info.arity);
    stack.push_back(static_cast<int>(i));
    if (info.uses_text) {
      if (alpha_nodes[i] < 0)
        throw GraphError("assemble: missing text attention for token " + std::to_string(i) + " (" +
                         info.name + ")");
      b.x_txt = modules::text_feature(g, word_matrix, alpha_nodes[i]);
      b.text_att = g.value(alpha_nodes[i]);  // may be empty until forward()
    }
    net.nodes.push_back(std::move(b));
  }
  return net;
}

AssembledNetwork assemble_from_rows(Graph& g, ParamNodes& p, const ModelConfig& cfg,
                                    const Layout& layout,
                                    const std::vector<std::vector<Scalar>>& text_atts,
                                    NodeId word_matrix) {
  std::vector<NodeId> alpha_nodes;
  for (size_t i = 0; i < layout.tokens.size(); ++i) {
    if (!token_info(layout.tokens[i]).uses_text) {
      alpha_nodes.push_back(-1);
      continue;
    }
    if (i >= text_atts.size() || text_atts[i].empty())
      throw GraphError("assemble: missing text attention row for token " + std::to_string(i));
    alpha_nodes.push_back(g.constant({static_cast<int>(text_atts[i].size())}, text_atts[i]));
  }
  AssembledNetwork net = assemble(g, p, cfg, layout, alpha_nodes, word_matrix);
  for (size_t i = 0; i < net.nodes.size(); ++i)
    if (net.nodes[i].x_txt >= 0) net.nodes[i].text_att = text_atts[i];
  return net;
}

ExecutionTrace execute(Graph& g, ParamNodes& p, const ModelConfig& cfg,
                       const AssembledNetwork& net, NodeId x_vis) {
  ExecutionTrace trace;
  for (const auto& b : net.nodes) {
    const NodeId a1 = b.lhs >= 0 ? trace.output_nodes[b.lhs] : -1;
    const NodeId a2 = b.rhs >= 0 ? trace.output_nodes[b.rhs] : -1;
    trace.output_nodes.push_back(modules::apply(g, p, cfg, b.token, a1, a2, x_vis, b.x_txt));
  }
  g.forward();
  for (size_t i = 0; i < trace.output_nodes.size(); ++i) {
    const NodeId id = trace.output_nodes[i];
    for (Scalar x : g.value(id))
      if (!std::isfinite(x))
        throw GraphError("execute: non-finite output at token " + std::to_string(i) + " (" +
                         token_name(net.nodes[i].token) + ")");
    trace.outputs.emplace_back(g.shape(id), g.value(id));
  }
  trace.logits_node = trace.output_nodes.back();
  trace.final_logits = g.value(trace.logits_node);
  return trace;
}

std::vector<Scalar> answer_distribution(const ExecutionTrace& trace) {
  const auto& logits = trace.final_logits;
  Scalar mx = logits[0];
  for (Scalar x : logits) mx = x > mx ? x : mx;
  Scalar z = 0;
  std::vector<Scalar> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) z += std::exp(logits[i] - mx);
  for (size_t i = 0; i < logits.size(); ++i) out[i] = std::exp(logits[i] - mx) / z;
  return out;
}

void dump_trace(const std::string& dir, const AssembledNetwork& net, const ExecutionTrace& trace,
                const std::vector<std::string>& question_words) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["question_words"] = question_words;
  nlohmann::json tokens = nlohmann::json::array();
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    const auto& b = net.nodes[i];
    nlohmann::json tj;
    tj["token"] = token_name(b.token);
    tj["text_attention"] = b.text_att;
    tokens.push_back(tj);
    const Tensor& out = trace.outputs[i];
    if (out.shape.size() != 2) continue;  // answer scores live in the manifest
    char name[64];
    std::snprintf(name, sizeof(name), "token%02zu_%s.csv", i, token_name(b.token));
    std::ofstream csv(dir + "/" + name, std::ios::trunc);
    for (int r = 0; r < out.shape[0]; ++r) {
      for (int c = 0; c < out.shape[1]; ++c) {
        if (c) csv << ",";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", out.at(r * out.shape[1] + c));
        csv << buf;
      }
      csv << "\n";
    }
  }
  manifest["tokens"] = tokens;
  manifest["final_logits"] = trace.final_logits;
  std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

}  // namespace modnet

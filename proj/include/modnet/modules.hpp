#pragma once

#include <cstdint>

#include "modnet/config.hpp"
#include "modnet/graph.hpp"
#include "modnet/layout.hpp"
#include "modnet/params.hpp"

namespace modnet {

/// Creates every learnable tensor of the model (visual CNN, per-module-type
/// bundles, layout policy) inside `store`, initialized per config. Module
/// instances of one type share a bundle across and within layouts; exist and
/// count (and eq_count/more/less) share structure only, never parameters.
void init_model_params(ParamStore& store, const ModelConfig& cfg, int word_vocab, int answer_vocab,
                       Rng& rng);

namespace modules {

/// Eq. of the weighted word sum: x_txt = sum_i att_i * w_i.
/// word_matrix is [T,E]; att is a length-T simplex vector.
NodeId text_feature(Graph& g, NodeId word_matrix, NodeId att);

/// Visual features for one image: two-layer CNN aligned to the scene grid,
/// then optional [0,1) coordinate channels. `image` holds uint8 RGB.
NodeId visual_features(Graph& g, ParamNodes& p, const ModelConfig& cfg,
                       const std::vector<uint8_t>& image);

// Table of attentional modules; attention maps are [H,W] nodes, answer scores
// are [answer_vocab] nodes.
NodeId find(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId x_vis, NodeId x_txt);
NodeId relocate(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId a, NodeId x_vis,
                NodeId x_txt);
NodeId attention_and(Graph& g, NodeId a1, NodeId a2);
NodeId attention_or(Graph& g, NodeId a1, NodeId a2);
NodeId filter(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId a, NodeId x_vis,
              NodeId x_txt);
NodeId vec_augment(Graph& g, NodeId a);  // [H*W+2]: flattened map, max, min
NodeId exist(Graph& g, ParamNodes& p, NodeId a);
NodeId count(Graph& g, ParamNodes& p, NodeId a);
NodeId describe(Graph& g, ParamNodes& p, NodeId a, NodeId x_vis, NodeId x_txt);
NodeId eq_count(Graph& g, ParamNodes& p, NodeId a1, NodeId a2);
NodeId more(Graph& g, ParamNodes& p, NodeId a1, NodeId a2);
NodeId less(Graph& g, ParamNodes& p, NodeId a1, NodeId a2);
NodeId compare(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId a1, NodeId a2, NodeId x_vis,
               NodeId x_txt);

/// Dispatch by token; unary modules pass the operand in a1.
NodeId apply(Graph& g, ParamNodes& p, const ModelConfig& cfg, LayoutToken token, NodeId a1,
             NodeId a2, NodeId x_vis, NodeId x_txt);

}  // namespace modules

}  // namespace modnet

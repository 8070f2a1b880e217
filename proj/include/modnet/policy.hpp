#pragma once

#include <array>
#include <vector>

#include "modnet/config.hpp"
#include "modnet/graph.hpp"
#include "modnet/layout.hpp"
#include "modnet/modules.hpp"
#include "modnet/params.hpp"
#include "modnet/rng.hpp"

namespace modnet {

/// A decoded layout plus everything the trainers need: total log-probability
/// (including the <eos> factor), per-step entropies of the (masked,
/// renormalized) step distributions, and per-token text attention rows.
struct PolicySample {
  std::vector<LayoutToken> tokens;
  Scalar log_prob = 0;
  std::vector<Scalar> step_entropies;
  std::vector<std::vector<Scalar>> text_atts;  // one row per module token
  bool ended_by_eos = false;

  // tape handles for gradient work; valid while the owning Graph lives
  NodeId log_prob_node = -1;
  NodeId entropy_sum_node = -1;
  std::vector<NodeId> alpha_nodes;  // per module token
};

struct BeamHypothesis {
  std::vector<LayoutToken> tokens;
  Scalar log_prob = 0;
  std::vector<std::vector<Scalar>> text_atts;
};

/// Sequence-to-sequence layout predictor over one question. All methods build
/// onto a caller-owned Graph; parameters come from the shared store.
class LayoutPolicy {
 public:
  LayoutPolicy(const ModelConfig& cfg, int word_vocab) : cfg_(cfg), word_vocab_(word_vocab) {}

  struct Encoded {
    std::vector<NodeId> states;  // per input position, top layer
    NodeId state_matrix = -1;    // [T, hidden]
    NodeId enc_proj = -1;        // [T, attn] -- W1 h_i precomputed
    NodeId word_matrix = -1;     // [T, embed] question word embeddings
    std::vector<LstmState> final_state;  // per layer, seeds the decoder
  };

  Encoded encode(Graph& g, ParamNodes& p, const std::vector<int>& word_ids) const;

  struct Step {
    NodeId log_probs = -1;  // [vocab+eos], masked + renormalized
    NodeId alpha = -1;      // [T]
    NodeId entropy = -1;    // [1]
    std::vector<LstmState> state;
    std::vector<Scalar> probs;  // realized distribution (after forward)
  };

  /// One decoder step; `allowed` masks logits before normalization. Throws if
  /// every token is masked.
  Step decode_step(Graph& g, ParamNodes& p, const Encoded& enc,
                   const std::vector<LstmState>& prev_state, int prev_token,
                   const std::array<bool, kDecoderVocab>& allowed) const;

  /// Ancestral sampling under the feasibility mask (or reject-and-resample
  /// when the config disables masking). Always returns a valid layout.
  PolicySample sample(Graph& g, ParamNodes& p, const Encoded& enc, int t_max, Rng& rng) const;

  /// Teacher-forced decode of `target` (+<eos>); the returned log_prob is the
  /// cloning KL term -log p(target|q) up to sign.
  PolicySample forced(Graph& g, ParamNodes& p, const Encoded& enc,
                      const std::vector<LayoutToken>& target) const;

  /// Deterministic argmax decoding; reference implementation for beam size 1.
  BeamHypothesis greedy(Graph& g, ParamNodes& p, const Encoded& enc, int t_max) const;

  /// Masked beam search over completed (<eos>-terminated) hypotheses.
  BeamHypothesis beam_search(Graph& g, ParamNodes& p, const Encoded& enc, int beam_size,
                             int t_max) const;

 private:
  std::array<bool, kDecoderVocab> step_mask(const std::vector<LayoutToken>& prefix,
                                            int t_max) const;

  ModelConfig cfg_;
  int word_vocab_;
};

}  // namespace modnet

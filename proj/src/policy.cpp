#include "modnet/policy.hpp"

#include <algorithm>
#include <cmath>

namespace modnet {

namespace {

constexpr Scalar kMaskPenalty = -1e9;

std::vector<LstmState> run_stack(Graph& g, ParamNodes& p, const char* prefix, NodeId x,
                                 const std::vector<LstmState>& prev, int layers) {
  std::vector<LstmState> next;
  NodeId in = x;
  for (int l = 0; l < layers; ++l) {
    const std::string name = std::string(prefix) + std::to_string(l);
    LstmState st = lstm_cell(g, in, prev[l], p(name + ".w_ih"), p(name + ".w_hh"), p(name + ".b"));
    next.push_back(st);
    in = st.h;
  }
  return next;
}

}  // namespace

LayoutPolicy::Encoded LayoutPolicy::encode(Graph& g, ParamNodes& p,
                                           const std::vector<int>& word_ids) const {
  if (word_ids.empty()) throw GraphError("encode: empty question");
  for (int id : word_ids)
    if (id < 0 || id >= word_vocab_)
      throw GraphError("encode: word id " + std::to_string(id) + " outside closed vocabulary of " +
                       std::to_string(word_vocab_));

  Encoded enc;
  NodeId emb = p("policy.word_emb");
  const int e = cfg_.embed_dim;
  std::vector<NodeId> word_rows;
  for (int id : word_ids) word_rows.push_back(g.slice(emb, id * e, e));
  enc.word_matrix = g.stack_rows(word_rows);

  std::vector<LstmState> state;
  NodeId zero = g.constant(Tensor::zeros({cfg_.lstm_hidden}));
  for (int l = 0; l < cfg_.lstm_layers; ++l) state.push_back({zero, zero});
  for (NodeId row : word_rows) {
    state = run_stack(g, p, "policy.enc", row, state, cfg_.lstm_layers);
    enc.states.push_back(state.back().h);
  }
  enc.final_state = state;
  enc.state_matrix = g.stack_rows(enc.states);
  enc.enc_proj = g.matmul(enc.state_matrix, p("policy.attn.enc_w"));
  return enc;
}

LayoutPolicy::Step LayoutPolicy::decode_step(Graph& g, ParamNodes& p, const Encoded& enc,
                                             const std::vector<LstmState>& prev_state,
                                             int prev_token,
                                             const std::array<bool, kDecoderVocab>& allowed) const {
  bool any = false;
  for (bool b : allowed) any = any || b;
  if (!any) throw GraphError("decode_step: all tokens masked");

  Step step;
  NodeId x = g.slice(p("policy.token_emb"), prev_token * cfg_.embed_dim, cfg_.embed_dim);
  step.state = run_stack(g, p, "policy.dec", x, prev_state, cfg_.lstm_layers);
  NodeId h_t = step.state.back().h;

  // u_ti = v' tanh(W1 h_i + W2 h_t); alpha = softmax(u); context = sum alpha h_i
  NodeId q = g.mat_tvec(p("policy.attn.dec_w"), h_t);
  NodeId scores = g.matvec(g.tanh(g.add_row_broadcast(enc.enc_proj, q)), p("policy.attn.v"));
  step.alpha = g.softmax(scores);
  NodeId context = g.mat_tvec(enc.state_matrix, step.alpha);

  NodeId logits = g.add(g.add(g.matvec(p("policy.out3.w"), h_t), p("policy.out3.b")),
                        g.add(g.matvec(p("policy.out4.w"), context), p("policy.out4.b")));
  std::vector<Scalar> mask_vec(kDecoderVocab, 0.0);
  for (int i = 0; i < kDecoderVocab; ++i)
    if (!allowed[i]) mask_vec[i] = kMaskPenalty;
  NodeId masked = g.add(logits, g.constant({kDecoderVocab}, std::move(mask_vec)));
  step.log_probs = g.log_softmax(masked);
  step.entropy = g.neg(g.sum_all(g.mul(g.exp(step.log_probs), step.log_probs)));

  g.forward();
  step.probs.resize(kDecoderVocab);
  const auto& lp = g.value(step.log_probs);
  for (int i = 0; i < kDecoderVocab; ++i) step.probs[i] = allowed[i] ? std::exp(lp[i]) : 0.0;
  return step;
}

std::array<bool, kDecoderVocab> LayoutPolicy::step_mask(const std::vector<LayoutToken>& prefix,
                                                        int t_max) const {
  if (cfg_.mask_invalid) return feasibility_mask(prefix, t_max);
  std::array<bool, kDecoderVocab> all{};
  all.fill(true);
  return all;
}

PolicySample LayoutPolicy::sample(Graph& g, ParamNodes& p, const Encoded& enc, int t_max,
                                  Rng& rng) const {
  if (t_max < 2) throw GraphError("sample: t_max must be at least 2");
  const int max_attempts = cfg_.mask_invalid ? 1 : 20;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    PolicySample out;
    std::vector<LstmState> state = enc.final_state;
    int prev = kStartId;
    std::vector<NodeId> logp_terms, entropy_terms;
    bool valid = true;
    while (true) {
      std::array<bool, kDecoderVocab> allowed{};
      if (cfg_.mask_invalid) {
        allowed = feasibility_mask(out.tokens, t_max);
      } else {
        allowed.fill(true);
        if (static_cast<int>(out.tokens.size()) >= t_max) {
          // length cap: close the sequence, validity checked below
          allowed.fill(false);
          allowed[kEosId] = true;
        }
      }
      Step step = decode_step(g, p, enc, state, prev, allowed);
      const int chosen = rng.categorical(step.probs);
      logp_terms.push_back(g.pick(step.log_probs, chosen));
      entropy_terms.push_back(step.entropy);
      out.step_entropies.push_back(g.value_scalar(step.entropy));
      state = step.state;
      prev = chosen;
      if (chosen == kEosId) {
        out.ended_by_eos = true;
        break;
      }
      out.tokens.push_back(static_cast<LayoutToken>(chosen));
      out.text_atts.push_back(g.value(step.alpha));
      out.alpha_nodes.push_back(step.alpha);
    }
    if (!cfg_.mask_invalid) {
      try {
        validate_rpn(out.tokens);
      } catch (const LayoutError&) {
        valid = false;
      }
    }
    if (valid) {
      NodeId lp = logp_terms[0];
      NodeId ent = entropy_terms[0];
      for (size_t i = 1; i < logp_terms.size(); ++i) lp = g.add(lp, logp_terms[i]);
      for (size_t i = 1; i < entropy_terms.size(); ++i) ent = g.add(ent, entropy_terms[i]);
      out.log_prob_node = lp;
      out.entropy_sum_node = ent;
      g.forward();
      out.log_prob = g.value_scalar(lp);
      return out;
    }
  }
  // rejection exhausted; fall back to one masked rollout so training proceeds
  LayoutPolicy masked_policy(*this);
  masked_policy.cfg_.mask_invalid = true;
  return masked_policy.sample(g, p, enc, t_max, rng);
}

PolicySample LayoutPolicy::forced(Graph& g, ParamNodes& p, const Encoded& enc,
                                  const std::vector<LayoutToken>& target) const {
  PolicySample out;
  std::vector<LstmState> state = enc.final_state;
  int prev = kStartId;
  std::vector<NodeId> logp_terms, entropy_terms;
  for (size_t t = 0; t <= target.size(); ++t) {
    const int chosen = t < target.size() ? static_cast<int>(target[t]) : kEosId;
    std::array<bool, kDecoderVocab> allowed = step_mask(out.tokens, cfg_.t_max);
    if (!allowed[chosen])
      throw GraphError("forced: target token " + std::to_string(chosen) + " at step " +
                       std::to_string(t) + " is infeasible");
    Step step = decode_step(g, p, enc, state, prev, allowed);
    logp_terms.push_back(g.pick(step.log_probs, chosen));
    entropy_terms.push_back(step.entropy);
    out.step_entropies.push_back(g.value_scalar(step.entropy));
    state = step.state;
    prev = chosen;
    if (chosen != kEosId) {
      out.tokens.push_back(static_cast<LayoutToken>(chosen));
      out.text_atts.push_back(g.value(step.alpha));
      out.alpha_nodes.push_back(step.alpha);
    }
  }
  out.ended_by_eos = true;
  NodeId lp = logp_terms[0];
  NodeId ent = entropy_terms[0];
  for (size_t i = 1; i < logp_terms.size(); ++i) lp = g.add(lp, logp_terms[i]);
  for (size_t i = 1; i < entropy_terms.size(); ++i) ent = g.add(ent, entropy_terms[i]);
  out.log_prob_node = lp;
  out.entropy_sum_node = ent;
  g.forward();
  out.log_prob = g.value_scalar(lp);
  return out;
}

BeamHypothesis LayoutPolicy::greedy(Graph& g, ParamNodes& p, const Encoded& enc, int t_max) const {
  BeamHypothesis out;
  std::vector<LstmState> state = enc.final_state;
  int prev = kStartId;
  while (true) {
    Step step = decode_step(g, p, enc, state, prev, feasibility_mask(out.tokens, t_max));
    int best = 0;
    for (int i = 1; i < kDecoderVocab; ++i)
      if (step.probs[i] > step.probs[best]) best = i;
    out.log_prob += g.value(step.log_probs)[best];
    state = step.state;
    prev = best;
    if (best == kEosId) break;
    out.tokens.push_back(static_cast<LayoutToken>(best));
    out.text_atts.push_back(g.value(step.alpha));
  }
  return out;
}

BeamHypothesis LayoutPolicy::beam_search(Graph& g, ParamNodes& p, const Encoded& enc,
                                         int beam_size, int t_max) const {
  if (beam_size < 1) throw GraphError("beam_search: beam size must be at least 1");
  struct Open {
    std::vector<LayoutToken> tokens;
    Scalar log_prob = 0;
    std::vector<std::vector<Scalar>> text_atts;
    std::vector<LstmState> state;
    int prev = kStartId;
  };
  std::vector<Open> beam(1);
  beam[0].state = enc.final_state;
  std::vector<BeamHypothesis> completed;

  for (int t = 0; t <= t_max && !beam.empty(); ++t) {
    struct Cand {
      Scalar score;
      size_t parent;
      int token;
    };
    std::vector<Cand> cands;
    std::vector<Step> steps(beam.size());
    for (size_t b = 0; b < beam.size(); ++b) {
      steps[b] = decode_step(g, p, enc, beam[b].state, beam[b].prev,
                             feasibility_mask(beam[b].tokens, t_max));
      const auto& lp = g.value(steps[b].log_probs);
      for (int tok = 0; tok < kDecoderVocab; ++tok) {
        if (steps[b].probs[tok] <= 0.0) continue;
        cands.push_back({beam[b].log_prob + lp[tok], b, tok});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    // top-k selection: a finished (<eos>) hypothesis consumes its beam slot,
    // which makes beam size 1 coincide with greedy decoding
    std::vector<Open> next;
    int taken = 0;
    for (const Cand& c : cands) {
      if (taken >= beam_size) break;
      ++taken;
      if (c.token == kEosId) {
        BeamHypothesis done;
        done.tokens = beam[c.parent].tokens;
        done.text_atts = beam[c.parent].text_atts;
        done.log_prob = c.score;
        completed.push_back(std::move(done));
        continue;
      }
      Open o;
      o.tokens = beam[c.parent].tokens;
      o.tokens.push_back(static_cast<LayoutToken>(c.token));
      o.text_atts = beam[c.parent].text_atts;
      o.text_atts.push_back(g.value(steps[c.parent].alpha));
      o.log_prob = c.score;
      o.state = steps[c.parent].state;
      o.prev = c.token;
      next.push_back(std::move(o));
    }
    beam = std::move(next);
  }
  if (completed.empty()) throw GraphError("beam_search: no completed hypothesis");
  size_t best = 0;
  for (size_t i = 1; i < completed.size(); ++i)
    if (completed[i].log_prob > completed[best].log_prob) best = i;
  return completed[best];
}

}  // namespace modnet

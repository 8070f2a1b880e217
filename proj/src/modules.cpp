#include "modnet/modules.hpp"

namespace modnet {

namespace {

void add_linear(ParamStore& s, const std::string& prefix, int out_dim, int in_dim, Rng& rng) {
  init_xavier_uniform(s.add(prefix + ".w", {out_dim, in_dim}), in_dim, out_dim, rng);
  s.add(prefix + ".b", {out_dim});  // biases start at zero
}

void add_conv(ParamStore& s, const std::string& prefix, int kh, int kw, int cin, int cout,
              Rng& rng) {
  init_xavier_uniform(s.add(prefix + ".w", {kh, kw, cin, cout}), static_cast<long>(kh) * kw * cin,
                      static_cast<long>(kh) * kw * cout, rng);
  s.add(prefix + ".b", {cout});
}

void add_lstm(ParamStore& s, const std::string& prefix, int input, int hidden, Rng& rng) {
  init_xavier_uniform(s.add(prefix + ".w_ih", {4 * hidden, input}), input, 4 * hidden, rng);
  init_xavier_uniform(s.add(prefix + ".w_hh", {4 * hidden, hidden}), hidden, 4 * hidden, rng);
  Tensor& b = s.add(prefix + ".b", {4 * hidden});
  for (int i = hidden; i < 2 * hidden; ++i) b.data[i] = 1.0;  // forget gate bias
}

void add_module_bundle(ParamStore& s, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  // find-style bundle: conv1 (1x1, D->hidden), conv2 (1x1, hidden->1), W x_txt
  add_conv(s, name + ".conv1", 1, 1, cfg.vis_channels(), cfg.module_hidden, rng);
  add_conv(s, name + ".conv2", 1, 1, cfg.module_hidden, 1, rng);
  add_linear(s, name + ".wtxt", cfg.module_hidden, cfg.embed_dim, rng);
}

}  // namespace

void init_model_params(ParamStore& s, const ModelConfig& cfg, int word_vocab, int answer_vocab,
                       Rng& rng) {
  const int d = cfg.vis_channels();
  const int ch = cfg.module_hidden;
  const int vec = cfg.vec_dim();

  // image CNN (trained jointly, grid-aligned)
  add_conv(s, "cnn.conv1", cfg.image_h / cfg.grid_h, cfg.image_w / cfg.grid_w, 3, cfg.cnn_channels,
           rng);
  add_conv(s, "cnn.conv2", 1, 1, cfg.cnn_channels, cfg.feat_channels, rng);

  // attentional modules
  add_module_bundle(s, "find", cfg, rng);
  if (cfg.filter_own_params) add_module_bundle(s, "filter", cfg, rng);
  add_module_bundle(s, "relocate", cfg, rng);
  add_linear(s, "relocate.wsum", ch, d, rng);
  add_linear(s, "exist", answer_vocab, vec, rng);
  add_linear(s, "count", answer_vocab, vec, rng);
  add_linear(s, "describe.wout", answer_vocab, ch, rng);
  add_linear(s, "describe.wsum", ch, d, rng);
  add_linear(s, "describe.wtxt", ch, cfg.embed_dim, rng);
  for (const char* name : {"eq_count", "more", "less"}) {
    add_linear(s, std::string(name) + ".w1", answer_vocab, vec, rng);
    add_linear(s, std::string(name) + ".w2", answer_vocab, vec, rng);
  }
  add_linear(s, "compare.wout", answer_vocab, ch, rng);
  add_linear(s, "compare.wsum1", ch, d, rng);
  add_linear(s, "compare.wsum2", ch, d, rng);
  add_linear(s, "compare.wtxt", ch, cfg.embed_dim, rng);

  // layout policy
  init_xavier_uniform(s.add("policy.word_emb", {word_vocab, cfg.embed_dim}), word_vocab,
                      cfg.embed_dim, rng);
  init_xavier_uniform(s.add("policy.token_emb", {kStartId + 1, cfg.embed_dim}), kStartId + 1,
                      cfg.embed_dim, rng);
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    const int in = l == 0 ? cfg.embed_dim : cfg.lstm_hidden;
    add_lstm(s, "policy.enc" + std::to_string(l), in, cfg.lstm_hidden, rng);
    add_lstm(s, "policy.dec" + std::to_string(l), in, cfg.lstm_hidden, rng);
  }
  init_xavier_uniform(s.add("policy.attn.enc_w", {cfg.lstm_hidden, cfg.attn_dim}), cfg.lstm_hidden,
                      cfg.attn_dim, rng);
  init_xavier_uniform(s.add("policy.attn.dec_w", {cfg.lstm_hidden, cfg.attn_dim}), cfg.lstm_hidden,
                      cfg.attn_dim, rng);
  init_xavier_uniform(s.add("policy.attn.v", {cfg.attn_dim}), cfg.attn_dim, 1, rng);
  add_linear(s, "policy.out3", kDecoderVocab, cfg.lstm_hidden, rng);
  add_linear(s, "policy.out4", kDecoderVocab, cfg.lstm_hidden, rng);
}

namespace modules {

namespace {

NodeId linear(Graph& g, ParamNodes& p, const std::string& prefix, NodeId x) {
  return g.add(g.matvec(p(prefix + ".w"), x), p(prefix + ".b"));
}

NodeId conv1x1(Graph& g, ParamNodes& p, const std::string& prefix, NodeId x) {
  return g.add_channel_broadcast(g.conv2d(x, p(prefix + ".w"), 1), p(prefix + ".b"));
}

/// sum over spatial positions of a (x) x_vis, an attention-weighted pooled
/// feature vector of width D.
NodeId attended_sum(Graph& g, NodeId a, NodeId x_vis) {
  return g.sum_spatial(g.mul_map_broadcast(x_vis, a));
}

NodeId to_map(Graph& g, const ModelConfig& cfg, NodeId hw1) {
  return g.reshape(hw1, {cfg.grid_h, cfg.grid_w});
}

NodeId find_impl(Graph& g, ParamNodes& p, const ModelConfig& cfg, const std::string& bundle,
                 NodeId x_vis, NodeId x_txt) {
  NodeId mapped = g.mul_channel_broadcast(conv1x1(g, p, bundle + ".conv1", x_vis),
                                          linear(g, p, bundle + ".wtxt", x_txt));
  return to_map(g, cfg, conv1x1(g, p, bundle + ".conv2", mapped));
}

}  // namespace

NodeId text_feature(Graph& g, NodeId word_matrix, NodeId att) {
  if (g.shape(word_matrix)[0] != g.shape(att)[0])
    throw GraphError("text_feature: " + std::to_string(g.shape(att)[0]) + " weights for " +
                     std::to_string(g.shape(word_matrix)[0]) + " words");
  return g.mat_tvec(word_matrix, att);
}

NodeId visual_features(Graph& g, ParamNodes& p, const ModelConfig& cfg,
                       const std::vector<uint8_t>& image) {
  std::vector<Scalar> pixels(image.size());
  for (size_t i = 0; i < image.size(); ++i) pixels[i] = image[i] / 255.0;
  NodeId img = g.constant({cfg.image_h, cfg.image_w, 3}, std::move(pixels));
  NodeId h1 = g.relu(g.add_channel_broadcast(
      g.conv2d(img, p("cnn.conv1.w"), cfg.image_h / cfg.grid_h), p("cnn.conv1.b")));
  NodeId h2 = g.relu(conv1x1(g, p, "cnn.conv2", h1));
  if (!cfg.coord_channels) return h2;
  std::vector<Scalar> coords;
  coords.reserve(static_cast<size_t>(cfg.grid_h) * cfg.grid_w * 2);
  for (int i = 0; i < cfg.grid_h; ++i)
    for (int j = 0; j < cfg.grid_w; ++j) {
      coords.push_back(static_cast<Scalar>(j) / cfg.grid_w);  // x
      coords.push_back(static_cast<Scalar>(i) / cfg.grid_h);  // y
    }
  NodeId coord = g.constant({cfg.grid_h, cfg.grid_w, 2}, std::move(coords));
  return g.concat_channels(h2, coord);
}

NodeId find(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId x_vis, NodeId x_txt) {
  return find_impl(g, p, cfg, "find", x_vis, x_txt);
}

NodeId relocate(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId a, NodeId x_vis,
                NodeId x_txt) {
  NodeId pooled = linear(g, p, "relocate.wsum", attended_sum(g, a, x_vis));
  NodeId mapped = g.mul_channel_broadcast(
      g.mul_channel_broadcast(conv1x1(g, p, "relocate.conv1", x_vis), pooled),
      linear(g, p, "relocate.wtxt", x_txt));
  return to_map(g, cfg, conv1x1(g, p, "relocate.conv2", mapped));
}

NodeId attention_and(Graph& g, NodeId a1, NodeId a2) { return g.min(a1, a2); }
NodeId attention_or(Graph& g, NodeId a1, NodeId a2) { return g.max(a1, a2); }

NodeId filter(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId a, NodeId x_vis,
              NodeId x_txt) {
  const std::string bundle = cfg.filter_own_params ? "filter" : "find";
  return attention_and(g, a, find_impl(g, p, cfg, bundle, x_vis, x_txt));
}

NodeId vec_augment(Graph& g, NodeId a) {
  return g.concat_vec(g.concat_vec(g.flatten(a), g.reduce_max(a)), g.reduce_min(a));
}

NodeId exist(Graph& g, ParamNodes& p, NodeId a) { return linear(g, p, "exist", vec_augment(g, a)); }
NodeId count(Graph& g, ParamNodes& p, NodeId a) { return linear(g, p, "count", vec_augment(g, a)); }

NodeId describe(Graph& g, ParamNodes& p, NodeId a, NodeId x_vis, NodeId x_txt) {
  NodeId h = g.mul(linear(g, p, "describe.wsum", attended_sum(g, a, x_vis)),
                   linear(g, p, "describe.wtxt", x_txt));
  return linear(g, p, "describe.wout", h);
}

namespace {

NodeId pair_reduce(Graph& g, ParamNodes& p, const std::string& bundle, NodeId a1, NodeId a2) {
  return g.add(linear(g, p, bundle + ".w1", vec_augment(g, a1)),
               linear(g, p, bundle + ".w2", vec_augment(g, a2)));
}

}  // namespace

NodeId eq_count(Graph& g, ParamNodes& p, NodeId a1, NodeId a2) {
  return pair_reduce(g, p, "eq_count", a1, a2);
}
NodeId more(Graph& g, ParamNodes& p, NodeId a1, NodeId a2) {
  return pair_reduce(g, p, "more", a1, a2);
}
NodeId less(Graph& g, ParamNodes& p, NodeId a1, NodeId a2) {
  return pair_reduce(g, p, "less", a1, a2);
}

NodeId compare(Graph& g, ParamNodes& p, const ModelConfig& cfg, NodeId a1, NodeId a2, NodeId x_vis,
               NodeId x_txt) {
  (void)cfg;
  NodeId h = g.mul(g.mul(linear(g, p, "compare.wsum1", attended_sum(g, a1, x_vis)),
                         linear(g, p, "compare.wsum2", attended_sum(g, a2, x_vis))),
                   linear(g, p, "compare.wtxt", x_txt));
  return linear(g, p, "compare.wout", h);
}

NodeId apply(Graph& g, ParamNodes& p, const ModelConfig& cfg, LayoutToken token, NodeId a1,
             NodeId a2, NodeId x_vis, NodeId x_txt) {
  switch (token) {
    case LayoutToken::Find: return find(g, p, cfg, x_vis, x_txt);
    case LayoutToken::Relocate: return relocate(g, p, cfg, a1, x_vis, x_txt);
    case LayoutToken::And: return attention_and(g, a1, a2);
    case LayoutToken::Or: return attention_or(g, a1, a2);
    case LayoutToken::Filter: return filter(g, p, cfg, a1, x_vis, x_txt);
    case LayoutToken::Exist: return exist(g, p, a1);
    case LayoutToken::Count: return count(g, p, a1);
    case LayoutToken::Describe: return describe(g, p, a1, x_vis, x_txt);
    case LayoutToken::EqCount: return eq_count(g, p, a1, a2);
    case LayoutToken::More: return more(g, p, a1, a2);
    case LayoutToken::Less: return less(g, p, a1, a2);
    case LayoutToken::Compare: return compare(g, p, cfg, a1, a2, x_vis, x_txt);
  }
  throw GraphError("apply: unknown module token");
}

}  // namespace modules

}  // namespace modnet

#pragma once

#include <json.hpp>

namespace modnet {

/// Model architecture knobs; serialized into checkpoints so evaluation can
/// rebuild the exact network.
struct ModelConfig {
  int grid_h = 3;
  int grid_w = 3;
  int image_h = 30;
  int image_w = 30;
  int cnn_channels = 64;    // first conv layer width
  int feat_channels = 64;   // visual feature channels before coordinates
  bool coord_channels = true;
  int module_hidden = 64;   // conv1 output width and mapped-text width, shared
  int embed_dim = 64;
  int lstm_hidden = 64;
  int lstm_layers = 1;
  int attn_dim = 64;
  int t_max = 9;
  bool filter_own_params = false;  // give filter its own bundle instead of find's
  bool mask_invalid = true;        // false: sample unmasked, reject-and-resample

  int vis_channels() const { return feat_channels + (coord_channels ? 2 : 0); }
  int vec_dim() const { return grid_h * grid_w + 2; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

inline nlohmann::json ModelConfig::to_json() const {
  return {{"grid_h", grid_h},
          {"grid_w", grid_w},
          {"image_h", image_h},
          {"image_w", image_w},
          {"cnn_channels", cnn_channels},
          {"feat_channels", feat_channels},
          {"coord_channels", coord_channels},
          {"module_hidden", module_hidden},
          {"embed_dim", embed_dim},
          {"lstm_hidden", lstm_hidden},
          {"lstm_layers", lstm_layers},
          {"attn_dim", attn_dim},
          {"t_max", t_max},
          {"filter_own_params", filter_own_params},
          {"mask_invalid", mask_invalid}};
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.grid_h = j.value("grid_h", c.grid_h);
  c.grid_w = j.value("grid_w", c.grid_w);
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.cnn_channels = j.value("cnn_channels", c.cnn_channels);
  c.feat_channels = j.value("feat_channels", c.feat_channels);
  c.coord_channels = j.value("coord_channels", c.coord_channels);
  c.module_hidden = j.value("module_hidden", c.module_hidden);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
  c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.t_max = j.value("t_max", c.t_max);
  c.filter_own_params = j.value("filter_own_params", c.filter_own_params);
  c.mask_invalid = j.value("mask_invalid", c.mask_invalid);
  return c;
}

}  // namespace modnet

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "modnet/layout.hpp"
#include "modnet/rng.hpp"

namespace modnet {

constexpr int kGridSize = 3;
constexpr int kCellPixels = 10;
constexpr int kImageSize = kGridSize * kCellPixels;  // 30x30 RGB frames

enum class Shape : int { Circle = 0, Square = 1, Triangle = 2 };
enum class Color : int { Red = 0, Green = 1, Blue = 2 };
constexpr int kAnyShape = 3;  // the word "shape" as a wildcard

struct SceneObject {
  int row;
  int col;
  Shape shape;
  Color color;
};

/// Symbolic ground truth: a 3x3 grid with 2..5 colored shapes, unique cells.
struct Scene {
  std::vector<SceneObject> objects;

  const SceneObject* at(int row, int col) const {
    for (const auto& o : objects)
      if (o.row == row && o.col == col) return &o;
    return nullptr;
  }
};

enum class Relation : int { Above = 0, Below, LeftOf, RightOf };

/// Fixed word and answer vocabularies; the synthetic grammar is closed.
struct Vocab {
  std::vector<std::string> words;
  std::vector<std::string> answers;  // yes, no, 0..4

  static Vocab builtin();
  int word_id(const std::string& w) const;
  int answer_id(const std::string& a) const;
  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
};

struct QAItem {
  int64_t id = 0;
  std::vector<int> question_tokens;
  std::string question_text;
  int answer_id = 0;
  std::vector<LayoutToken> expert_layout;
  int template_id = 0;  // 1..4
  Scene scene;
  std::vector<uint8_t> image;  // kImageSize^2 * 3, row-major RGB
};

// --- scene generation & rendering ------------------------------------------

Scene gen_scene(Rng& rng);
std::vector<uint8_t> render_scene(const Scene& scene);

/// Nearest-template readback of one rendered cell; returns (shape, color) or
/// nullopt for an empty cell. Exists as the rendering oracle.
std::optional<std::pair<Shape, Color>> classify_cell(const std::vector<uint8_t>& image, int row,
                                                     int col);

// --- questions ---------------------------------------------------------------

/// Symbolic evaluation of each template family on a scene.
bool scene_has(const Scene& s, Color c, int shape_pred);
bool scene_has_pair(const Scene& s, Color c1, int s1, Relation rel, Color c2, int s2);
int scene_count_color(const Scene& s, Color c);

/// Instantiates template `template_id` (1..4) on the scene. Resamples slots a
/// bounded number of times; nullopt signals Skip (no valid instantiation).
/// `want_answer_id` (-1 for any) asks for a specific gold answer, used for
/// split balancing.
std::optional<QAItem> gen_question(const Scene& scene, int template_id, Rng& rng,
                                   int want_answer_id = -1);

/// Deterministic expert layout for a generated question, with per-token text
/// attention targets (word indices each module should read; diagnostics only).
struct ExpertDecision {
  std::vector<LayoutToken> tokens;
  std::vector<std::vector<int>> text_targets;  // per token, empty for no-text modules
};
ExpertDecision expert_policy(const std::vector<int>& question_tokens);

// --- datasets ----------------------------------------------------------------

struct SplitSpec {
  std::string name;
  int64_t id_base;
  int count;
};

struct Dataset {
  Vocab vocab;
  std::vector<QAItem> items;
};

/// Writes train/val/test splits under `out_dir`: per split images.bin +
/// items.jsonl, plus shared vocab.json and manifest.json. Bit-exact for a
/// given (seed, version).
void gen_dataset(const std::string& out_dir, int n_train, int n_val, int n_test, uint64_t seed);

Dataset load_split(const std::string& data_dir, const std::string& split);

nlohmann::json scene_to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);

}  // namespace modnet

#include "modnet/world.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace modnet {

namespace {

constexpr uint8_t kBackground[3] = {12, 12, 12};
constexpr uint8_t kPalette[3][3] = {
    {230, 25, 25},   // red
    {25, 200, 25},   // green
    {35, 35, 230},   // blue
};

const char* kShapeWords[3] = {"circle", "square", "triangle"};
const char* kColorWords[3] = {"red", "green", "blue"};
const char* kRelWordsA[4] = {"above", "below", "left", "right"};

bool shape_pixel(Shape shape, int y, int x) {
  switch (shape) {
    case Shape::Square:
      return y >= 1 && y <= 8 && x >= 1 && x <= 8;
    case Shape::Circle: {
      const double dy = y - 4.5, dx = x - 4.5;
      return dy * dy + dx * dx <= 16.0;
    }
    case Shape::Triangle: {
      if (y < 1 || y > 8) return false;
      const double half = (y - 1) * 0.5;
      return std::abs(x - 4.5) < half + 1.0;
    }
  }
  return false;
}

int64_t generator_version() { return 1; }

}  // namespace

// --- vocab --------------------------------------------------------------------

Vocab Vocab::builtin() {
  Vocab v;
  v.words = {"is",      "there",  "a",        "how",   "many",  "the",
             "above",   "below",  "left-of",  "right-of", "red",   "green",
             "blue",    "circle", "square",   "triangle", "shape", "shapes"};
  v.answers = {"yes", "no", "0", "1", "2", "3", "4"};
  return v;
}

int Vocab::word_id(const std::string& w) const {
  for (size_t i = 0; i < words.size(); ++i)
    if (words[i] == w) return static_cast<int>(i);
  throw std::out_of_range("unknown word '" + w + "'");
}

int Vocab::answer_id(const std::string& a) const {
  for (size_t i = 0; i < answers.size(); ++i)
    if (answers[i] == a) return static_cast<int>(i);
  throw std::out_of_range("unknown answer '" + a + "'");
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json words_j, answers_j;
  for (size_t i = 0; i < words.size(); ++i) words_j[words[i]] = i;
  for (size_t i = 0; i < answers.size(); ++i) answers_j[answers[i]] = i;
  return {{"words", words_j},
          {"answers", answers_j},
          {"image", {{"h", kImageSize}, {"w", kImageSize}, {"c", 3}}},
          {"grid", {{"h", kGridSize}, {"w", kGridSize}}}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  v.words.resize(j.at("words").size());
  for (auto it = j.at("words").begin(); it != j.at("words").end(); ++it)
    v.words[it.value().get<int>()] = it.key();
  v.answers.resize(j.at("answers").size());
  for (auto it = j.at("answers").begin(); it != j.at("answers").end(); ++it)
    v.answers[it.value().get<int>()] = it.key();
  return v;
}

// --- scenes -------------------------------------------------------------------

Scene gen_scene(Rng& rng) {
  Scene s;
  const int count = 2 + static_cast<int>(rng.below(4));  // uniform 2..5
  std::vector<int> cells(kGridSize * kGridSize);
  for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  rng.shuffle(cells);
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    o.row = cells[i] / kGridSize;
    o.col = cells[i] % kGridSize;
    o.shape = static_cast<Shape>(rng.below(3));
    o.color = static_cast<Color>(rng.below(3));
    s.objects.push_back(o);
  }
  return s;
}

std::vector<uint8_t> render_scene(const Scene& scene) {
  std::vector<uint8_t> img(kImageSize * kImageSize * 3);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x)
      for (int c = 0; c < 3; ++c) img[(y * kImageSize + x) * 3 + c] = kBackground[c];
  for (const auto& o : scene.objects) {
    const uint8_t* rgb = kPalette[static_cast<int>(o.color)];
    for (int y = 0; y < kCellPixels; ++y)
      for (int x = 0; x < kCellPixels; ++x) {
        if (!shape_pixel(o.shape, y, x)) continue;
        const int py = o.row * kCellPixels + y;
        const int px = o.col * kCellPixels + x;
        for (int c = 0; c < 3; ++c) img[(py * kImageSize + px) * 3 + c] = rgb[c];
      }
  }
  return img;
}

std::optional<std::pair<Shape, Color>> classify_cell(const std::vector<uint8_t>& image, int row,
                                                     int col) {
  // nearest template over the renderer's own primitives, including "empty"
  long best_err = -1;
  int best = -1;  // shape*3+color, or 9 for empty
  for (int cand = 0; cand <= 9; ++cand) {
    long err = 0;
    for (int y = 0; y < kCellPixels; ++y)
      for (int x = 0; x < kCellPixels; ++x) {
        const uint8_t* want = kBackground;
        if (cand < 9 && shape_pixel(static_cast<Shape>(cand / 3), y, x))
          want = kPalette[cand % 3];
        const int py = row * kCellPixels + y;
        const int px = col * kCellPixels + x;
        for (int c = 0; c < 3; ++c) {
          const long d = static_cast<long>(image[(py * kImageSize + px) * 3 + c]) - want[c];
          err += d * d;
        }
      }
    if (best_err < 0 || err < best_err) {
      best_err = err;
      best = cand;
    }
  }
  if (best == 9) return std::nullopt;
  return std::make_pair(static_cast<Shape>(best / 3), static_cast<Color>(best % 3));
}

// --- symbolic oracle ------------------------------------------------------------

namespace {

bool obj_matches(const SceneObject& o, Color c, int shape_pred) {
  if (o.color != c) return false;
  return shape_pred == kAnyShape || static_cast<int>(o.shape) == shape_pred;
}

bool rel_holds(const SceneObject& a, const SceneObject& b, Relation rel) {
  switch (rel) {
    case Relation::Above: return a.row < b.row;
    case Relation::Below: return a.row > b.row;
    case Relation::LeftOf: return a.col < b.col;
    case Relation::RightOf: return a.col > b.col;
  }
  return false;
}

}  // namespace

bool scene_has(const Scene& s, Color c, int shape_pred) {
  for (const auto& o : s.objects)
    if (obj_matches(o, c, shape_pred)) return true;
  return false;
}

bool scene_has_pair(const Scene& s, Color c1, int s1, Relation rel, Color c2, int s2) {
  for (const auto& a : s.objects)
    for (const auto& b : s.objects) {
      if (&a == &b) continue;
      if (obj_matches(a, c1, s1) && obj_matches(b, c2, s2) && rel_holds(a, b, rel)) return true;
    }
  return false;
}

int scene_count_color(const Scene& s, Color c) {
  int n = 0;
  for (const auto& o : s.objects)
    if (o.color == c) ++n;
  return n;
}

// --- question construction ------------------------------------------------------

namespace {

std::string shape_word(int shape_pred) {
  return shape_pred == kAnyShape ? "shape" : kShapeWords[shape_pred];
}

const char* rel_word(Relation rel) {
  switch (rel) {
    case Relation::Above: return "above";
    case Relation::Below: return "below";
    case Relation::LeftOf: return "left-of";
    case Relation::RightOf: return "right-of";
  }
  return "";
}

QAItem finish_item(const Scene& scene, int template_id, std::vector<std::string> words,
                   const std::string& answer_word) {
  const Vocab vocab = Vocab::builtin();
  QAItem item;
  item.template_id = template_id;
  item.scene = scene;
  for (size_t i = 0; i < words.size(); ++i) {
    item.question_tokens.push_back(vocab.word_id(words[i]));
    if (i) item.question_text += " ";
    item.question_text += words[i];
  }
  item.answer_id = vocab.answer_id(answer_word);
  item.expert_layout = expert_policy(item.question_tokens).tokens;
  return item;
}

// Count matches for a (color, shape predicate) pair; T4 needs uniqueness.
int match_count(const Scene& s, Color c, int shape_pred) {
  int n = 0;
  for (const auto& o : s.objects)
    if (obj_matches(o, c, shape_pred)) ++n;
  return n;
}

std::optional<QAItem> try_t1(const Scene& scene, Rng& rng, int want) {
  const Color c = static_cast<Color>(rng.below(3));
  const int sp = static_cast<int>(rng.below(4));
  const bool yes = scene_has(scene, c, sp);
  if (want == 0 && !yes) return std::nullopt;
  if (want == 1 && yes) return std::nullopt;
  return finish_item(scene, 1, {"is", "there", "a", kColorWords[static_cast<int>(c)], shape_word(sp)},
                     yes ? "yes" : "no");
}

std::optional<QAItem> try_t2(const Scene& scene, Rng& rng, int want) {
  const Color c1 = static_cast<Color>(rng.below(3));
  const Color c2 = static_cast<Color>(rng.below(3));
  const int s1 = static_cast<int>(rng.below(4));
  const int s2 = static_cast<int>(rng.below(4));
  const Relation rel = static_cast<Relation>(rng.below(4));
  const bool yes = scene_has_pair(scene, c1, s1, rel, c2, s2);
  if (want == 0 && !yes) return std::nullopt;
  if (want == 1 && yes) return std::nullopt;
  std::vector<std::string> words = {"is",          "there",
                                    "a",           kColorWords[static_cast<int>(c1)],
                                    shape_word(s1), rel_word(rel),
                                    "a",           kColorWords[static_cast<int>(c2)],
                                    shape_word(s2)};
  return finish_item(scene, 2, std::move(words), yes ? "yes" : "no");
}

std::optional<QAItem> try_t3(const Scene& scene, Rng& rng, int want_count) {
  const Color c = static_cast<Color>(rng.below(3));
  const int n = scene_count_color(scene, c);
  if (n > 4) return std::nullopt;  // outside the answer vocabulary
  if (want_count >= 0 && n != want_count) return std::nullopt;
  return finish_item(scene, 3, {"how", "many", kColorWords[static_cast<int>(c)], "shapes"},
                     std::to_string(n));
}

std::optional<QAItem> try_t4(const Scene& scene, Rng& rng, int want) {
  if (scene.objects.size() < 2) return std::nullopt;
  // pick two distinct objects with unique predicates
  const size_t ia = rng.below(scene.objects.size());
  size_t ib = rng.below(scene.objects.size());
  if (ib == ia) ib = (ib + 1) % scene.objects.size();
  const SceneObject& a = scene.objects[ia];
  const SceneObject& b = scene.objects[ib];
  auto pick_pred = [&](const SceneObject& o) -> std::optional<int> {
    std::vector<int> options;
    if (match_count(scene, o.color, kAnyShape) == 1) options.push_back(kAnyShape);
    if (match_count(scene, o.color, static_cast<int>(o.shape)) == 1)
      options.push_back(static_cast<int>(o.shape));
    if (options.empty()) return std::nullopt;
    return options[rng.below(options.size())];
  };
  const auto pa = pick_pred(a);
  const auto pb = pick_pred(b);
  if (!pa || !pb) return std::nullopt;
  // choose a relation whose truth value matches the requested answer
  std::vector<Relation> fits;
  for (int r = 0; r < 4; ++r) {
    const Relation rel = static_cast<Relation>(r);
    const bool yes = rel_holds(a, b, rel);
    if (want < 0 || (want == 0 && yes) || (want == 1 && !yes)) fits.push_back(rel);
  }
  if (fits.empty()) return std::nullopt;
  const Relation rel = fits[rng.below(fits.size())];
  const bool yes = rel_holds(a, b, rel);
  std::vector<std::string> words = {"is",           "the",
                                    kColorWords[static_cast<int>(a.color)],
                                    shape_word(*pa), rel_word(rel),
                                    "the",          kColorWords[static_cast<int>(b.color)],
                                    shape_word(*pb)};
  return finish_item(scene, 4, std::move(words), yes ? "yes" : "no");
}

}  // namespace

std::optional<QAItem> gen_question(const Scene& scene, int template_id, Rng& rng,
                                   int want_answer_id) {
  // translate a requested answer id into the per-template "want" encoding
  int want = -1;
  if (want_answer_id >= 0) {
    if (template_id == 3) {
      want = want_answer_id - 2;  // numeric answers start at id 2
      if (want < 0) return std::nullopt;
    } else {
      want = want_answer_id;  // 0 = yes, 1 = no
    }
  }
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::optional<QAItem> item;
    switch (template_id) {
      case 1: item = try_t1(scene, rng, want); break;
      case 2: item = try_t2(scene, rng, want); break;
      case 3: item = try_t3(scene, rng, want); break;
      case 4: item = try_t4(scene, rng, want); break;
      default: throw std::invalid_argument("unknown template id " + std::to_string(template_id));
    }
    if (item) return item;
  }
  return std::nullopt;  // Skip: caller draws a fresh scene
}

// --- expert policy ----------------------------------------------------------------

ExpertDecision expert_policy(const std::vector<int>& question_tokens) {
  const Vocab vocab = Vocab::builtin();
  auto word = [&](size_t i) -> const std::string& {
    if (i >= question_tokens.size()) throw std::out_of_range("expert_policy: question too short");
    return vocab.words[question_tokens[i]];
  };
  auto is_rel = [&](size_t i) {
    const std::string& w = word(i);
    return w == "above" || w == "below" || w == "left-of" || w == "right-of";
  };

  ExpertDecision out;
  const size_t n = question_tokens.size();
  if (n == 4 && word(0) == "how" && word(1) == "many") {
    // how many {c} shapes -> count(find)
    out.tokens = {LayoutToken::Find, LayoutToken::Count};
    out.text_targets = {{2}, {}};
    return out;
  }
  if (n == 5 && word(0) == "is" && word(1) == "there") {
    // is there a {c} {s} -> exist(find)
    out.tokens = {LayoutToken::Find, LayoutToken::Exist};
    out.text_targets = {{3, 4}, {}};
    return out;
  }
  if (n == 9 && word(0) == "is" && word(1) == "there" && is_rel(5)) {
    // is there a {c1} {s1} {rel} a {c2} {s2} -> exist(and(find1, relocate(find2)))
    out.tokens = {LayoutToken::Find, LayoutToken::Find, LayoutToken::Relocate, LayoutToken::And,
                  LayoutToken::Exist};
    out.text_targets = {{3, 4}, {7, 8}, {5}, {}, {}};
    return out;
  }
  if (n == 8 && word(0) == "is" && word(1) == "the" && is_rel(4)) {
    // is the {c1} {s1} {rel} the {c2} {s2} -> exist(filter(relocate(find2)))
    out.tokens = {LayoutToken::Find, LayoutToken::Relocate, LayoutToken::Filter,
                  LayoutToken::Exist};
    out.text_targets = {{6, 7}, {4}, {2, 3}, {}};
    return out;
  }
  throw std::invalid_argument("expert_policy: unrecognized question template");
}

// --- dataset I/O ----------------------------------------------------------------

nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"row", o.row},
                    {"col", o.col},
                    {"shape", kShapeWords[static_cast<int>(o.shape)]},
                    {"color", kColorWords[static_cast<int>(o.color)]}});
  return {{"objects", objs}};
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  for (const auto& oj : j.at("objects")) {
    SceneObject o;
    o.row = oj.at("row");
    o.col = oj.at("col");
    const std::string sh = oj.at("shape");
    const std::string co = oj.at("color");
    for (int i = 0; i < 3; ++i) {
      if (sh == kShapeWords[i]) o.shape = static_cast<Shape>(i);
      if (co == kColorWords[i]) o.color = static_cast<Color>(i);
    }
    s.objects.push_back(o);
  }
  return s;
}

namespace {

QAItem gen_item(uint64_t root_seed, int64_t item_id) {
  // the answer target alternates deterministically per id slot for balance
  for (uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(root_seed, static_cast<uint64_t>(item_id), attempt));
    const int template_id = 1 + static_cast<int>(rng.below(4));
    int want = -1;
    if (template_id == 3) {
      want = 2 + static_cast<int>(rng.below(4));  // target counts 0..3
      if (attempt >= 8) want = -1;                // rare targets: accept any count
    } else {
      want = static_cast<int>(rng.below(2));  // yes/no 50-50
    }
    Scene scene = gen_scene(rng);
    auto item = gen_question(scene, template_id, rng, want);
    if (!item) continue;
    item->id = item_id;
    item->image = render_scene(item->scene);
    return *item;
  }
}

void write_split(const std::string& dir, const SplitSpec& spec, uint64_t seed) {
  fs::create_directories(dir);
  std::vector<QAItem> items(spec.count);
#pragma omp parallel for schedule(dynamic, 16)
  for (int i = 0; i < spec.count; ++i) items[i] = gen_item(seed, spec.id_base + i);

  std::ofstream img(dir + "/images.bin", std::ios::binary | std::ios::trunc);
  std::ofstream jsonl(dir + "/items.jsonl", std::ios::trunc);
  if (!img || !jsonl) throw std::runtime_error("cannot write split files under " + dir);
  for (const auto& item : items) {
    img.write(reinterpret_cast<const char*>(item.image.data()),
              static_cast<std::streamsize>(item.image.size()));
    nlohmann::json j = {{"id", item.id},
                        {"question_tokens", item.question_tokens},
                        {"question_text", item.question_text},
                        {"answer_id", item.answer_id},
                        {"expert_layout_text", tokens_to_text(item.expert_layout)},
                        {"template_id", item.template_id},
                        {"scene", scene_to_json(item.scene)}};
    jsonl << j.dump() << "\n";
  }
  if (!img || !jsonl) throw std::runtime_error("write failed under " + dir);
}

}  // namespace

void gen_dataset(const std::string& out_dir, int n_train, int n_val, int n_test, uint64_t seed) {
  if (n_train <= 0 || n_val <= 0 || n_test <= 0)
    throw std::invalid_argument("gen_dataset: split sizes must be positive");
  fs::create_directories(out_dir);
  const std::vector<SplitSpec> splits = {{"train", 0, n_train},
                                         {"val", int64_t{1} << 32, n_val},
                                         {"test", int64_t{2} << 32, n_test}};
  for (const auto& s : splits) write_split(out_dir + "/" + s.name, s, seed);

  std::ofstream vocab(out_dir + "/vocab.json", std::ios::trunc);
  vocab << Vocab::builtin().to_json().dump(2) << "\n";

  nlohmann::json manifest = {{"generator_version", generator_version()},
                             {"seed", seed},
                             {"splits",
                              {{"train", {{"count", n_train}, {"id_base", 0}}},
                               {"val", {{"count", n_val}, {"id_base", int64_t{1} << 32}}},
                               {"test", {{"count", n_test}, {"id_base", int64_t{2} << 32}}}}}};
  std::ofstream mf(out_dir + "/manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!vocab || !mf) throw std::runtime_error("cannot write dataset metadata under " + out_dir);
}

Dataset load_split(const std::string& data_dir, const std::string& split) {
  Dataset ds;
  std::ifstream vf(data_dir + "/vocab.json");
  if (!vf) throw std::runtime_error("missing vocab.json in " + data_dir);
  nlohmann::json vj;
  vf >> vj;
  ds.vocab = Vocab::from_json(vj);

  const std::string dir = data_dir + "/" + split;
  std::ifstream jsonl(dir + "/items.jsonl");
  if (!jsonl) throw std::runtime_error("missing items.jsonl in " + dir);
  std::ifstream img(dir + "/images.bin", std::ios::binary);
  if (!img) throw std::runtime_error("missing images.bin in " + dir);

  const size_t frame = static_cast<size_t>(kImageSize) * kImageSize * 3;
  std::string line;
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    QAItem item;
    item.id = j.at("id");
    item.question_tokens = j.at("question_tokens").get<std::vector<int>>();
    item.question_text = j.at("question_text");
    item.answer_id = j.at("answer_id");
    item.expert_layout = parse_layout_text(j.at("expert_layout_text"));
    item.template_id = j.at("template_id");
    item.scene = scene_from_json(j.at("scene"));
    item.image.resize(frame);
    img.read(reinterpret_cast<char*>(item.image.data()), static_cast<std::streamsize>(frame));
    if (!img) throw std::runtime_error("images.bin shorter than items.jsonl in " + dir);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

}  // namespace modnet

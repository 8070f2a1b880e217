#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modnet/adam.hpp"
#include "modnet/checkpoint.hpp"
#include "modnet/executor.hpp"
#include "modnet/policy.hpp"
#include "modnet/world.hpp"

namespace modnet {

struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Model bundle: architecture, vocabulary, and the parameter store.
struct Model {
  ModelConfig cfg;
  Vocab vocab;
  ParamStore params;

  static Model fresh(const ModelConfig& cfg, const Vocab& vocab, uint64_t seed);
  static Model load(const std::string& ckpt_path);
  void save(const std::string& path, uint64_t seed) const;
};

/// Cross-entropy over answer scores: -log softmax(logits)[answer_id].
NodeId qa_loss(Graph& g, NodeId logits, int answer_id);

/// The per-sample policy-gradient surrogate: (L - b) * log p + L - alpha * H.
/// Backward through it yields the score-function term (the (L - b) factor is
/// a constant) plus the pathwise term through the task loss node.
NodeId reinforce_surrogate(Graph& g, const PolicySample& sample, NodeId task_loss,
                           Scalar task_loss_value, Scalar baseline, Scalar entropy_coeff);

struct RLConfig {
  Scalar entropy_coeff = 0.005;
  Scalar baseline_decay = 0.99;
  int samples_per_question = 1;
  Scalar learning_rate = 1e-4;
  Scalar grad_clip_norm = 10.0;
  int batch_size = 64;
  int t_max = 9;
};

struct BaselineState {
  Scalar b = 0.0;
  bool initialized = false;
};

enum class Stage { Clone, RL, Scratch };
const char* stage_name(Stage s);

struct TrainOptions {
  Stage stage = Stage::Clone;
  uint64_t seed = 1;
  int epochs = 40;
  int patience = 8;             // epochs without val improvement
  Scalar target_val_accuracy = 0;  // stop early once reached (0 = off)
  double max_minutes = 0;          // wall-clock cap (0 = off)
  int val_beam = 1;
  RLConfig rl;
  std::string out_dir;       // when set: ckpt_best.bin / ckpt_last.bin
  std::string metrics_path;  // line-delimited JSON records
  bool quiet = false;
};

struct BatchStats {
  Scalar loss = 0;
  Scalar kl = 0;
  Scalar qa = 0;
  Scalar entropy = 0;
  bool skipped = false;
};

struct TrainResult {
  double best_val_accuracy = 0;
  double final_val_accuracy = 0;
  long steps = 0;
  bool reached_target = false;
};

struct PredictionRow {
  int64_t question_id;
  std::string layout_text;
  int predicted_answer;
  int gold_answer;
  int template_id;
  bool expert_match;
};

struct EvalOptions {
  int beam = 3;
  std::string dump_dir;  // when set: predictions.tsv + attention CSV dirs
};

struct EvalResult {
  double accuracy = 0;
  double expert_match_rate = 0;
  std::map<int, std::pair<long, long>> per_template;  // id -> (correct, total)
  std::vector<PredictionRow> rows;
};

/// Beam decoding + execution over a split; deterministic for a fixed model.
EvalResult evaluate_model(Model& model, const Dataset& data, const EvalOptions& opts);

/// The printable evaluation report (also what cmd_eval emits byte-for-byte).
std::string eval_report_text(const EvalResult& r, const Dataset& data, int beam);

class Trainer {
 public:
  Trainer(Model& model, const TrainOptions& opts);

  /// Behavioral cloning update: -log p(expert layout | q) plus the QA loss of
  /// the expert-assembled network, teacher-forced text attentions.
  BatchStats cloning_step(const std::vector<const QAItem*>& batch, uint64_t batch_tag);

  /// Monte-Carlo policy-gradient update with EMA baseline. The first batch
  /// initializes the baseline from its mean loss and applies no update.
  BatchStats reinforce_step(const std::vector<const QAItem*>& batch, uint64_t batch_tag);

  TrainResult train(const Dataset& train_data, const Dataset& val_data);

  const BaselineState& baseline() const { return baseline_; }
  long nan_batches() const { return nan_batches_; }

 private:
  BatchStats run_batch(const std::vector<const QAItem*>& batch, uint64_t batch_tag, bool clone);
  void apply_grads(Scalar denom);

  Model& model_;
  TrainOptions opts_;
  LayoutPolicy policy_;
  AdamState adam_;
  BaselineState baseline_;
  std::vector<std::vector<std::vector<Scalar>>> slabs_;  // per thread
  long nan_batches_ = 0;
  long consecutive_nan_ = 0;
};

}  // namespace modnet

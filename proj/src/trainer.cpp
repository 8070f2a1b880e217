#include "modnet/trainer.hpp"

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace modnet {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Clone: return "clone";
    case Stage::RL: return "rl";
    case Stage::Scratch: return "scratch";
  }
  return "?";
}

Model Model::fresh(const ModelConfig& cfg, const Vocab& vocab, uint64_t seed) {
  Model m;
  m.cfg = cfg;
  m.vocab = vocab;
  Rng rng(mix_seed(seed, 0x1717));
  init_model_params(m.params, cfg, static_cast<int>(vocab.words.size()),
                    static_cast<int>(vocab.answers.size()), rng);
  return m;
}

void Model::save(const std::string& path, uint64_t seed) const {
  nlohmann::json hp;
  hp["model"] = cfg.to_json();
  hp["vocab"] = vocab.to_json();
  save_checkpoint(path, params, hp, seed);
}

Model Model::load(const std::string& ckpt_path) {
  Model m;
  nlohmann::json header = load_checkpoint(ckpt_path, m.params);
  m.cfg = ModelConfig::from_json(header.at("hyperparams").at("model"));
  m.vocab = Vocab::from_json(header.at("hyperparams").at("vocab"));
  return m;
}

NodeId qa_loss(Graph& g, NodeId logits, int answer_id) {
  const int n = g.shape(logits)[0];
  if (answer_id < 0 || answer_id >= n)
    throw GraphError("qa_loss: answer id " + std::to_string(answer_id) +
                     " outside vocabulary of " + std::to_string(n));
  return g.neg(g.pick(g.log_softmax(logits), answer_id));
}

NodeId reinforce_surrogate(Graph& g, const PolicySample& sample, NodeId task_loss,
                           Scalar task_loss_value, Scalar baseline, Scalar entropy_coeff) {
  NodeId surr = g.add(g.scale(sample.log_prob_node, task_loss_value - baseline), task_loss);
  if (entropy_coeff != 0.0) surr = g.sub(surr, g.scale(sample.entropy_sum_node, entropy_coeff));
  return surr;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(Model& model, const TrainOptions& opts)
    : model_(model),
      opts_(opts),
      policy_(model.cfg, static_cast<int>(model.vocab.words.size())),
      adam_(AdamState::for_store(model.params, opts.rl.learning_rate)) {
  const int threads = omp_get_max_threads();
  slabs_.resize(threads);
  for (auto& s : slabs_) s = model_.params.make_grad_slab();
}

BatchStats Trainer::run_batch(const std::vector<const QAItem*>& batch, uint64_t batch_tag,
                              bool clone) {
  const int b = static_cast<int>(batch.size());
  for (auto& slab : slabs_)
    for (auto& g : slab) std::fill(g.begin(), g.end(), 0.0);

  std::vector<Scalar> kls(b, 0), qas(b, 0), ents(b, 0), losses(b, 0);
  std::vector<char> bad(b, 0);
  std::string first_error;
  const Scalar base = baseline_.initialized ? baseline_.b : 0.0;
  const bool warmup = !clone && !baseline_.initialized;
  const int m_samples = std::max(1, opts_.rl.samples_per_question);

#pragma omp parallel for schedule(static)
  for (int i = 0; i < b; ++i) {
    const QAItem& item = *batch[i];
    try {
      Graph g;
      ParamNodes p(g, model_.params);
      auto enc = policy_.encode(g, p, item.question_tokens);
      NodeId x_vis = modules::visual_features(g, p, model_.cfg, item.image);
      NodeId total = -1;
      if (clone) {
        PolicySample forced = policy_.forced(g, p, enc, item.expert_layout);
        Layout layout = validate_rpn(item.expert_layout);
        auto net = assemble(g, p, model_.cfg, layout, forced.alpha_nodes, enc.word_matrix);
        auto trace = execute(g, p, model_.cfg, net, x_vis);
        NodeId kl = g.neg(forced.log_prob_node);
        NodeId qa = qa_loss(g, trace.logits_node, item.answer_id);
        total = g.add(kl, qa);
        g.forward();
        kls[i] = g.value_scalar(kl);
        qas[i] = g.value_scalar(qa);
        Scalar esum = 0;
        for (Scalar e : forced.step_entropies) esum += e;
        ents[i] = esum / static_cast<Scalar>(forced.step_entropies.size());
        losses[i] = g.value_scalar(total);
      } else {
        Rng rng(mix_seed(opts_.seed, batch_tag, static_cast<uint64_t>(item.id)));
        Scalar loss_sum = 0, ent_sum = 0;
        for (int m = 0; m < m_samples; ++m) {
          PolicySample s = policy_.sample(g, p, enc, opts_.rl.t_max, rng);
          Layout layout = validate_rpn(s.tokens);
          auto net = assemble(g, p, model_.cfg, layout, s.alpha_nodes, enc.word_matrix);
          auto trace = execute(g, p, model_.cfg, net, x_vis);
          NodeId task = qa_loss(g, trace.logits_node, item.answer_id);
          g.forward();
          const Scalar lval = g.value_scalar(task);
          loss_sum += lval;
          Scalar esum = 0;
          for (Scalar e : s.step_entropies) esum += e;
          ent_sum += esum / static_cast<Scalar>(s.step_entropies.size());
          NodeId surr =
              g.scale(reinforce_surrogate(g, s, task, lval, base, opts_.rl.entropy_coeff),
                      1.0 / m_samples);
          total = total < 0 ? surr : g.add(total, surr);
        }
        losses[i] = loss_sum / m_samples;
        qas[i] = losses[i];
        ents[i] = ent_sum / m_samples;
      }
      g.forward();
      if (!std::isfinite(losses[i])) {
        bad[i] = 1;
      } else if (!warmup) {
        g.backward(total);
        g.accumulate_param_grads(slabs_[omp_get_thread_num()]);
      }
    } catch (const GraphError& e) {
#pragma omp critical
      {
        if (first_error.empty()) first_error = e.what();
      }
      bad[i] = 1;
    }
  }

  BatchStats stats;
  int bad_count = 0;
  for (int i = 0; i < b; ++i) {
    bad_count += bad[i];
    stats.loss += losses[i];
    stats.kl += kls[i];
    stats.qa += qas[i];
    stats.entropy += ents[i];
  }
  if (bad_count > 0) {
    ++nan_batches_;
    ++consecutive_nan_;
    if (consecutive_nan_ >= 25)
      throw TrainAbort("training aborted: " + std::to_string(consecutive_nan_) +
                       " consecutive batches with non-finite losses" +
                       (first_error.empty() ? "" : " (" + first_error + ")"));
    stats.skipped = true;
    return stats;
  }
  consecutive_nan_ = 0;
  stats.loss /= b;
  stats.kl /= b;
  stats.qa /= b;
  stats.entropy /= b;

  if (!clone) {
    if (warmup) {
      baseline_.b = stats.loss;
      baseline_.initialized = true;
      stats.skipped = true;  // no parameter update on the warm-up batch
      return stats;
    }
    baseline_.b = opts_.rl.baseline_decay * baseline_.b +
                  (1.0 - opts_.rl.baseline_decay) * stats.loss;
  }
  apply_grads(static_cast<Scalar>(b));
  return stats;
}

void Trainer::apply_grads(Scalar denom) {
  // merge per-thread slabs in thread order, then mean over the batch
  auto& total = slabs_[0];
  for (size_t t = 1; t < slabs_.size(); ++t)
    for (size_t p = 0; p < total.size(); ++p) {
      const auto& src = slabs_[t][p];
      auto& dst = total[p];
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  for (auto& g : total)
    for (Scalar& x : g) x /= denom;
  clip_global_norm(total, opts_.rl.grad_clip_norm);
  adam_step(model_.params, total, adam_);
}

BatchStats Trainer::cloning_step(const std::vector<const QAItem*>& batch, uint64_t batch_tag) {
  return run_batch(batch, batch_tag, /*clone=*/true);
}

BatchStats Trainer::reinforce_step(const std::vector<const QAItem*>& batch, uint64_t batch_tag) {
  return run_batch(batch, batch_tag, /*clone=*/false);
}

TrainResult Trainer::train(const Dataset& train_data, const Dataset& val_data) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const bool clone = opts_.stage == Stage::Clone;

  std::ofstream metrics;
  if (!opts_.metrics_path.empty()) {
    metrics.open(opts_.metrics_path, std::ios::trunc);
    if (!metrics) throw TrainAbort("cannot write metrics file: " + opts_.metrics_path);
  }
  auto emit = [&](long step, const BatchStats& s, std::optional<double> val_acc) {
    if (!metrics.is_open()) return;
    nlohmann::json j;
    j["step"] = step;
    j["stage"] = stage_name(opts_.stage);
    j["loss"] = s.loss;
    j["kl"] = clone ? nlohmann::json(s.kl) : nlohmann::json();
    j["qa_loss"] = s.qa;
    j["entropy"] = s.entropy;
    j["baseline"] = clone ? nlohmann::json() : nlohmann::json(baseline_.b);
    j["val_accuracy"] = val_acc ? nlohmann::json(*val_acc) : nlohmann::json();
    metrics << j.dump() << "\n";
  };

  std::vector<int> order(train_data.items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  TrainResult result;
  double best = -1;
  int epochs_since_best = 0;
  long step = 0;
  bool stop = false;

  for (int epoch = 0; epoch < opts_.epochs && !stop; ++epoch) {
    Rng shuffle_rng(mix_seed(opts_.seed, 0xE0, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    const int bsz = opts_.rl.batch_size;
    BatchStats last{};
    for (size_t start = 0; start < order.size(); start += bsz) {
      std::vector<const QAItem*> batch;
      for (size_t k = start; k < std::min(order.size(), start + bsz); ++k)
        batch.push_back(&train_data.items[order[k]]);
      const uint64_t tag = (static_cast<uint64_t>(epoch) << 24) | (start / bsz);
      last = clone ? cloning_step(batch, tag) : reinforce_step(batch, tag);
      ++step;
      emit(step, last, std::nullopt);
      if (opts_.max_minutes > 0) {
        const double mins = std::chrono::duration<double>(clock::now() - t0).count() / 60.0;
        if (mins > opts_.max_minutes) {
          stop = true;
          break;
        }
      }
    }
    EvalOptions ev;
    ev.beam = opts_.val_beam;
    EvalResult val = evaluate_model(model_, val_data, ev);
    result.final_val_accuracy = val.accuracy;
    emit(step, last, val.accuracy);
    if (!opts_.quiet)
      std::cerr << "[" << stage_name(opts_.stage) << "] epoch " << epoch << " step " << step
                << " loss " << last.loss << " val " << val.accuracy << "\n";
    if (val.accuracy > best) {
      best = val.accuracy;
      epochs_since_best = 0;
      if (!opts_.out_dir.empty())
        model_.save(opts_.out_dir + "/ckpt_best.bin", opts_.seed);
    } else {
      ++epochs_since_best;
    }
    if (opts_.target_val_accuracy > 0 && val.accuracy >= opts_.target_val_accuracy) {
      result.reached_target = true;
      stop = true;
    }
    if (opts_.patience > 0 && epochs_since_best >= opts_.patience) stop = true;
  }
  result.best_val_accuracy = best < 0 ? 0 : best;
  result.steps = step;
  if (!opts_.out_dir.empty()) {
    model_.save(opts_.out_dir + "/ckpt_last.bin", opts_.seed);
    if (best < 0) model_.save(opts_.out_dir + "/ckpt_best.bin", opts_.seed);
  }
  return result;
}

// ---------------------------------------------------------------------------

EvalResult evaluate_model(Model& model, const Dataset& data, const EvalOptions& opts) {
  if (model.vocab.words != data.vocab.words || model.vocab.answers != data.vocab.answers)
    throw std::invalid_argument("evaluate: checkpoint and dataset vocabularies differ");
  LayoutPolicy policy(model.cfg, static_cast<int>(model.vocab.words.size()));
  const int n = static_cast<int>(data.items.size());
  EvalResult result;
  result.rows.resize(n);
  std::string first_error;

#pragma omp parallel for schedule(dynamic, 8)
  for (int i = 0; i < n; ++i) {
    const QAItem& item = data.items[i];
    try {
      Graph g;
      ParamNodes p(g, model.params);
      auto enc = policy.encode(g, p, item.question_tokens);
      BeamHypothesis hyp = policy.beam_search(g, p, enc, opts.beam, model.cfg.t_max);
      Layout layout = validate_rpn(hyp.tokens);
      auto net = assemble_from_rows(g, p, model.cfg, layout, hyp.text_atts, enc.word_matrix);
      NodeId x_vis = modules::visual_features(g, p, model.cfg, item.image);
      auto trace = execute(g, p, model.cfg, net, x_vis);
      auto dist = answer_distribution(trace);
      int best = 0;
      for (size_t a = 1; a < dist.size(); ++a)
        if (dist[a] > dist[best]) best = static_cast<int>(a);
      PredictionRow row;
      row.question_id = item.id;
      row.layout_text = tokens_to_text(hyp.tokens);
      row.predicted_answer = best;
      row.gold_answer = item.answer_id;
      row.template_id = item.template_id;
      row.expert_match = hyp.tokens == item.expert_layout;
      result.rows[i] = row;
      if (!opts.dump_dir.empty()) {
        std::vector<std::string> words;
        for (int w : item.question_tokens) words.push_back(data.vocab.words[w]);
        dump_trace(opts.dump_dir + "/attn/q" + std::to_string(item.id), net, trace, words);
      }
    } catch (const std::exception& e) {
#pragma omp critical
      {
        if (first_error.empty()) first_error = e.what();
      }
    }
  }
  if (!first_error.empty())
    throw std::runtime_error("evaluate failed: " + first_error);

  long correct = 0, matches = 0;
  for (const auto& row : result.rows) {
    auto& [tc, tt] = result.per_template[row.template_id];
    ++tt;
    if (row.predicted_answer == row.gold_answer) {
      ++correct;
      ++tc;
    }
    if (row.expert_match) ++matches;
  }
  result.accuracy = n ? static_cast<double>(correct) / n : 0.0;
  result.expert_match_rate = n ? static_cast<double>(matches) / n : 0.0;

  if (!opts.dump_dir.empty()) {
    std::filesystem::create_directories(opts.dump_dir);
    std::ofstream tsv(opts.dump_dir + "/predictions.tsv", std::ios::trunc);
    tsv << "question_id\tpredicted_layout\tpredicted_answer\tgold_answer\n";
    for (const auto& row : result.rows)
      tsv << row.question_id << "\t" << row.layout_text << "\t"
          << data.vocab.answers[row.predicted_answer] << "\t"
          << data.vocab.answers[row.gold_answer] << "\n";
  }
  return result;
}

std::string eval_report_text(const EvalResult& r, const Dataset& data, int beam) {
  char buf[128];
  std::string out;
  std::snprintf(buf, sizeof(buf), "items: %zu\nbeam: %d\n", data.items.size(), beam);
  out += buf;
  std::snprintf(buf, sizeof(buf), "accuracy: %.4f\n", r.accuracy);
  out += buf;
  std::snprintf(buf, sizeof(buf), "expert_layout_match: %.4f\n", r.expert_match_rate);
  out += buf;
  for (const auto& [tid, ct] : r.per_template) {
    std::snprintf(buf, sizeof(buf), "template_%d: %.4f (%ld/%ld)\n", tid,
                  ct.second ? static_cast<double>(ct.first) / ct.second : 0.0, ct.first,
                  ct.second);
    out += buf;
  }
  return out;
}

}  // namespace modnet

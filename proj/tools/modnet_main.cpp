#include <omp.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "modnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace modnet;

namespace {

// exit codes: 2 i/o, 3 config validation, 4 vocab mismatch, 5 unknown word,
// 6 training abort (non-finite losses)
constexpr int kExitIo = 2;
constexpr int kExitConfig = 3;
constexpr int kExitVocab = 4;
constexpr int kExitWord = 5;
constexpr int kExitNan = 6;

struct CommonModelFlags {
  ModelConfig model;
  void attach(CLI::App* cmd) {
    cmd->add_option("--embed-dim", model.embed_dim, "word/token embedding width");
    cmd->add_option("--lstm-hidden", model.lstm_hidden, "encoder/decoder hidden width");
    cmd->add_option("--lstm-layers", model.lstm_layers, "LSTM layers (1 or 2)")
        ->check(CLI::Range(1, 2));
    cmd->add_option("--attn-dim", model.attn_dim, "attention projection width");
    cmd->add_option("--module-hidden", model.module_hidden,
                    "module conv1 output / mapped text width");
    cmd->add_option("--cnn-channels", model.cnn_channels, "image CNN first layer width");
    cmd->add_option("--feat-channels", model.feat_channels, "visual feature channels");
    cmd->add_option("--t-max", model.t_max, "maximum layout length");
    cmd->add_flag("!--no-coords", model.coord_channels, "disable coordinate channels");
    cmd->add_flag("--filter-own-params", model.filter_own_params,
                  "give filter its own bundle instead of reusing find's");
    cmd->add_flag("!--no-mask", model.mask_invalid,
                  "sample without the feasibility mask (reject and resample)");
  }
};

void write_resolved_config(const std::string& dir, const nlohmann::json& j) {
  fs::create_directories(dir);
  std::ofstream out(dir + "/resolved-config.json", std::ios::trunc);
  out << j.dump(2) << "\n";
}

std::vector<int> tokenize_question(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    bool found = false;
    for (size_t i = 0; i < vocab.words.size(); ++i)
      if (vocab.words[i] == word) {
        ids.push_back(static_cast<int>(i));
        found = true;
        break;
      }
    if (!found) throw std::out_of_range(word);
    word.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c)) || c == '?' || c == ',') {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional VQA with learned module layouts"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file; flags override");

  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: all cores)");

  // --- gen -------------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_out;
  uint64_t gen_seed = 7;
  std::vector<int> sizes = {12000, 1600, 2000};
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--sizes", sizes, "train,val,test item counts")->delimiter(',')->expected(3);

  // --- train -----------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train a model");
  std::string train_stage = "clone", train_data, train_out, train_init;
  uint64_t train_seed = 1;
  TrainOptions topts;
  bool allow_fresh = false;
  double lr = -1;
  CommonModelFlags train_model;
  train->add_option("--stage", train_stage, "clone | rl | scratch")
      ->check(CLI::IsMember({"clone", "rl", "scratch"}));
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--init", train_init, "initial checkpoint (required for rl)");
  train->add_option("--seed", train_seed, "training seed");
  train->add_option("--epochs", topts.epochs, "maximum epochs");
  train->add_option("--patience", topts.patience, "early-stop patience (epochs)");
  train->add_option("--batch-size", topts.rl.batch_size, "batch size");
  train->add_option("--lr", lr, "learning rate (default per stage)");
  train->add_option("--entropy", topts.rl.entropy_coeff, "entropy regularization weight");
  train->add_option("--baseline-decay", topts.rl.baseline_decay, "EMA baseline decay");
  train->add_option("--samples", topts.rl.samples_per_question, "layout samples per question");
  train->add_option("--grad-clip", topts.rl.grad_clip_norm, "global gradient norm clip");
  train->add_option("--target-val", topts.target_val_accuracy, "stop once val accuracy reached");
  train->add_option("--max-minutes", topts.max_minutes, "wall clock budget");
  train->add_option("--val-beam", topts.val_beam, "beam width for validation decoding");
  train->add_flag("--allow-fresh", allow_fresh, "let the rl stage start from fresh parameters");
  train->add_flag("--quiet", topts.quiet, "suppress progress lines");
  train_model.attach(train);

  // --- eval ------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_data, eval_split = "test", eval_ckpt, eval_dump;
  int eval_beam = 3;
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", eval_split, "split name");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--beam", eval_beam, "beam width");
  eval->add_option("--dump", eval_dump, "write predictions.tsv and attention dumps here");

  // --- show-layout -------------------------------------------------------------
  auto* show = app.add_subcommand("show-layout", "predict a layout for one question");
  std::string show_question, show_ckpt;
  int show_beam = 3;
  show->add_option("--question", show_question, "question text")->required();
  show->add_option("--ckpt", show_ckpt, "checkpoint file")->required();
  show->add_option("--beam", show_beam, "beam width");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (*gen) {
      try {
        gen_dataset(gen_out, sizes[0], sizes[1], sizes[2], gen_seed);
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        std::cerr << "generation failed: " << e.what() << "\n";
        return kExitIo;
      }
      std::ifstream mf(gen_out + "/manifest.json");
      std::cout << mf.rdbuf();
      return 0;
    }

    if (*train) {
      topts.stage = train_stage == "clone"   ? Stage::Clone
                    : train_stage == "rl"    ? Stage::RL
                                             : Stage::Scratch;
      topts.seed = train_seed;
      if (topts.stage == Stage::RL && train_init.empty() && !allow_fresh) {
        std::cerr << "the rl stage requires --init (or --allow-fresh to override)\n";
        return kExitConfig;
      }
      if (topts.rl.batch_size <= 0 || topts.epochs < 0 || topts.rl.samples_per_question < 1 ||
          topts.rl.baseline_decay <= 0 || topts.rl.baseline_decay >= 1 ||
          topts.rl.entropy_coeff < 0) {
        std::cerr << "invalid training configuration\n";
        return kExitConfig;
      }
      topts.rl.learning_rate = lr > 0          ? lr
                               : topts.stage == Stage::Clone ? 1e-3
                               : topts.stage == Stage::RL    ? 1e-4
                                                             : 5e-4;
      Dataset train_split, val_split;
      try {
        train_split = load_split(train_data, "train");
        val_split = load_split(train_data, "val");
      } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
      }
      Model model = train_init.empty()
                        ? Model::fresh(train_model.model, train_split.vocab, train_seed)
                        : Model::load(train_init);
      topts.rl.t_max = model.cfg.t_max;
      topts.out_dir = train_out;
      fs::create_directories(train_out);
      topts.metrics_path = train_out + "/metrics.jsonl";

      nlohmann::json resolved;
      resolved["command"] = "train";
      resolved["stage"] = train_stage;
      resolved["seed"] = train_seed;
      resolved["data"] = train_data;
      resolved["init"] = train_init;
      resolved["lr"] = topts.rl.learning_rate;
      resolved["epochs"] = topts.epochs;
      resolved["patience"] = topts.patience;
      resolved["batch_size"] = topts.rl.batch_size;
      resolved["entropy_coeff"] = topts.rl.entropy_coeff;
      resolved["baseline_decay"] = topts.rl.baseline_decay;
      resolved["samples_per_question"] = topts.rl.samples_per_question;
      resolved["grad_clip_norm"] = topts.rl.grad_clip_norm;
      resolved["target_val_accuracy"] = topts.target_val_accuracy;
      resolved["max_minutes"] = topts.max_minutes;
      resolved["val_beam"] = topts.val_beam;
      resolved["threads"] = threads;
      resolved["model"] = model.cfg.to_json();
      write_resolved_config(train_out, resolved);

      Trainer trainer(model, topts);
      TrainResult result = trainer.train(train_split, val_split);
      std::cout << "best_val_accuracy: " << result.best_val_accuracy << "\n"
                << "final_val_accuracy: " << result.final_val_accuracy << "\n"
                << "steps: " << result.steps << "\n"
                << "nan_batches: " << trainer.nan_batches() << "\n";
      return 0;
    }

    if (*eval) {
      Dataset data;
      try {
        data = load_split(eval_data, eval_split);
      } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
      }
      Model model = Model::load(eval_ckpt);
      if (model.vocab.words != data.vocab.words || model.vocab.answers != data.vocab.answers) {
        std::cerr << "checkpoint vocabulary does not match the dataset\n";
        return kExitVocab;
      }
      EvalOptions opts;
      opts.beam = eval_beam;
      opts.dump_dir = eval_dump;
      EvalResult r = evaluate_model(model, data, opts);
      std::cout << eval_report_text(r, data, eval_beam);
      return 0;
    }

    if (*show) {
      Model model = Model::load(show_ckpt);
      std::vector<int> ids;
      try {
        ids = tokenize_question(show_question, model.vocab);
      } catch (const std::out_of_range& e) {
        std::cerr << "unknown word: " << e.what() << "\n";
        return kExitWord;
      }
      Graph g;
      ParamNodes p(g, model.params);
      LayoutPolicy policy(model.cfg, static_cast<int>(model.vocab.words.size()));
      auto enc = policy.encode(g, p, ids);
      BeamHypothesis hyp = policy.beam_search(g, p, enc, show_beam, model.cfg.t_max);
      std::cout << tokens_to_text(hyp.tokens) << "\n\n";
      std::printf("%-10s", "token");
      for (int id : ids) std::printf(" %8s", model.vocab.words[id].c_str());
      std::printf("\n");
      for (size_t t = 0; t < hyp.tokens.size(); ++t) {
        std::printf("%-10s", token_name(hyp.tokens[t]));
        for (Scalar a : hyp.text_atts[t]) std::printf(" %8.3f", a);
        std::printf("\n");
      }
      return 0;
    }
  } catch (const TrainAbort& e) {
    std::cerr << e.what() << "\n";
    return kExitNan;
  } catch (const CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

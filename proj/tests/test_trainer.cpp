#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "module_gradcheck.hpp"
#include "modnet/trainer.hpp"
#include "ref_kernels.hpp"
#include "test_util.hpp"

using namespace modnet;
using namespace modnet::testutil;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.feat_channels = 4;
  cfg.cnn_channels = 4;
  cfg.module_hidden = 5;
  cfg.embed_dim = 6;
  cfg.lstm_hidden = 7;
  cfg.attn_dim = 4;
  return cfg;
}

std::vector<QAItem> make_items(int n, uint64_t seed) {
  std::vector<QAItem> items;
  for (int i = 0; items.size() < static_cast<size_t>(n); ++i) {
    Rng rng(mix_seed(seed, i));
    Scene scene = gen_scene(rng);
    auto item = gen_question(scene, 1 + static_cast<int>(rng.below(4)), rng);
    if (!item) continue;
    item->id = i;
    item->image = render_scene(item->scene);
    items.push_back(*item);
  }
  return items;
}

Dataset make_dataset(int n, uint64_t seed) {
  Dataset ds;
  ds.vocab = Vocab::builtin();
  ds.items = make_items(n, seed);
  return ds;
}

}  // namespace

TEST_CASE("qa_loss: direct values and the log-sum-exp oracle") {
  Graph g;
  NodeId zero = g.constant(Tensor::zeros({4}));
  NodeId loss = qa_loss(g, zero, 1);
  g.forward();
  CHECK(g.value_scalar(loss) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  NodeId dominant = g.constant({3}, {50.0, 0.0, -2.0});
  NodeId loss2 = qa_loss(g, dominant, 0);
  g.forward();
  CHECK(g.value_scalar(loss2) < 1e-9);

  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    auto logits = random_vec(7, rng, -5, 5);
    const int answer = static_cast<int>(rng.below(7));
    Graph g2;
    NodeId l = qa_loss(g2, g2.constant(Tensor::from(logits)), answer);
    g2.forward();
    const double want = ref::logsumexp(logits) - logits[answer];
    CHECK(g2.value_scalar(l) == doctest::Approx(want).epsilon(1e-10));
  }

  CHECK_THROWS_AS(qa_loss(g, zero, 7), GraphError);
  CHECK_THROWS_AS(qa_loss(g, zero, -1), GraphError);
}

TEST_CASE("cloning: reported KL equals the forced-decode log probability") {
  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 5);
  auto items = make_items(4, 11);

  LayoutPolicy policy(model.cfg, static_cast<int>(model.vocab.words.size()));
  double want_kl = 0;
  for (const auto& item : items) {
    Graph g;
    ParamNodes p(g, model.params);
    auto enc = policy.encode(g, p, item.question_tokens);
    PolicySample f = policy.forced(g, p, enc, item.expert_layout);
    want_kl += -f.log_prob;
  }
  want_kl /= items.size();

  TrainOptions opts;
  opts.stage = Stage::Clone;
  opts.rl.learning_rate = 1e-3;
  Trainer trainer(model, opts);
  std::vector<const QAItem*> batch;
  for (const auto& i : items) batch.push_back(&i);
  BatchStats stats = trainer.cloning_step(batch, 0);
  CHECK_FALSE(stats.skipped);
  CHECK(stats.kl == doctest::Approx(want_kl).epsilon(1e-9));
  CHECK(stats.loss == doctest::Approx(stats.kl + stats.qa).epsilon(1e-9));
}

TEST_CASE("cloning: overfits a ten-item batch") {
  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 7);
  auto items = make_items(10, 21);
  TrainOptions opts;
  opts.stage = Stage::Clone;
  opts.rl.learning_rate = 3e-3;
  Trainer trainer(model, opts);
  std::vector<const QAItem*> batch;
  for (const auto& i : items) batch.push_back(&i);

  const double first = trainer.cloning_step(batch, 0).loss;
  double last = first;
  for (int step = 1; step < 200; ++step) last = trainer.cloning_step(batch, step).loss;
  CHECK(last < 0.25 * first);
  CHECK(last < 0.5);  // close to memorization on ten items
}

TEST_CASE("cloning: gradient of -log p(expert|q) against finite differences") {
  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 9);
  auto items = make_items(1, 31);
  const QAItem item = items[0];
  LayoutPolicy policy(model.cfg, static_cast<int>(model.vocab.words.size()));

  std::vector<PieceSpec> pieces = {{"policy.out3.w", {}},
                                   {"policy.attn.v", {}},
                                   {"policy.enc0.w_ih", {}}};
  auto build = [&](Graph& g, ParamNodes& p, const std::map<std::string, NodeId>&) {
    auto enc = policy.encode(g, p, item.question_tokens);
    PolicySample f = policy.forced(g, p, enc, item.expert_layout);
    return g.neg(f.log_prob_node);
  };
  Rng seeds(77);
  for (int r = 0; r < 5; ++r) {
    auto gc = module_grad_check(model.params, pieces, build, seeds.next());
    INFO("max rel err ", gc.max_rel_err);
    CHECK(gc.ok);
  }
}

TEST_CASE("reinforce surrogate: two-arm bandit matches the analytic gradient") {
  // single-step policy over two arms with fixed losses; REINFORCE mean
  // gradient must approach p_j (L_j - E[L])
  const std::vector<Scalar> theta = {0.3, -0.2};
  const std::vector<Scalar> losses = {0.0, 1.0};
  auto probs = ref::softmax(theta);
  const double expected_loss = probs[0] * losses[0] + probs[1] * losses[1];
  const std::vector<double> analytic = {probs[0] * (losses[0] - expected_loss),
                                        probs[1] * (losses[1] - expected_loss)};

  auto estimate = [&](double baseline, uint64_t seed, int n) {
    ParamStore store;
    Tensor& th = store.add("theta", {2});
    th.data = theta;
    std::vector<double> acc(2, 0.0);
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
      Graph g;
      NodeId tnode = g.param(th, "theta", 0);
      NodeId logp_all = g.log_softmax(tnode);
      g.forward();
      std::vector<Scalar> p = {std::exp(g.value(logp_all)[0]), std::exp(g.value(logp_all)[1])};
      const int arm = rng.categorical(p);
      PolicySample sample;
      sample.log_prob_node = g.pick(logp_all, arm);
      sample.entropy_sum_node = g.scalar_const(0.0);
      NodeId task = g.scalar_const(losses[arm]);  // no pathwise dependence
      NodeId surr = reinforce_surrogate(g, sample, task, losses[arm], baseline, 0.0);
      g.forward();
      store.zero_grads();
      g.backward(surr);
      g.add_grads_to_params();
      acc[0] += th.grad[0];
      acc[1] += th.grad[1];
    }
    return std::vector<double>{acc[0] / n, acc[1] / n};
  };

  const int n = 20000;
  auto est = estimate(0.0, 2024, n);
  const double scale = std::abs(analytic[0]) + std::abs(analytic[1]);
  CHECK(std::abs(est[0] - analytic[0]) / scale < 0.05);
  CHECK(std::abs(est[1] - analytic[1]) / scale < 0.05);

  // baseline shift leaves the mean gradient unchanged (same sample stream)
  auto shifted = estimate(0.7, 2024, n);
  CHECK(std::abs(shifted[0] - est[0]) / scale < 0.05);
  CHECK(std::abs(shifted[1] - est[1]) / scale < 0.05);
}

TEST_CASE("reinforce surrogate: zero entropy weight equals the plain estimator") {
  ParamStore store;
  Tensor& th = store.add("theta", {3});
  th.data = {0.5, -0.1, 0.2};

  auto grad_with = [&](bool with_entropy_term) {
    Graph g;
    NodeId tnode = g.param(th, "theta", 0);
    NodeId logp_all = g.log_softmax(tnode);
    PolicySample sample;
    sample.log_prob_node = g.pick(logp_all, 1);
    sample.entropy_sum_node = g.neg(g.sum_all(g.mul(g.exp(logp_all), logp_all)));
    NodeId task = g.scalar_const(0.8);
    NodeId surr = with_entropy_term
                      ? reinforce_surrogate(g, sample, task, 0.8, 0.3, 0.0)
                      : g.add(g.scale(sample.log_prob_node, 0.8 - 0.3), task);
    g.forward();
    store.zero_grads();
    g.backward(surr);
    g.add_grads_to_params();
    return th.grad;
  };
  CHECK(grad_with(true) == grad_with(false));
}

TEST_CASE("reinforce: entropy pressure drives a one-step policy toward uniform") {
  // three feasible completions at horizon 2; constant task loss leaves only
  // the entropy bonus, so step probabilities should approach 1/3
  ModelConfig cfg = tiny_cfg();
  cfg.t_max = 2;
  Model model = Model::fresh(cfg, Vocab::builtin(), 31);
  LayoutPolicy policy(cfg, static_cast<int>(model.vocab.words.size()));
  AdamState adam = AdamState::for_store(model.params, 5e-3);
  const std::vector<int> q = {0, 11, 16};
  Rng rng(8);
  for (int step = 0; step < 400; ++step) {
    auto slab = model.params.make_grad_slab();
    Graph g;
    ParamNodes p(g, model.params);
    auto enc = policy.encode(g, p, q);
    PolicySample s = policy.sample(g, p, enc, cfg.t_max, rng);
    NodeId task = g.scalar_const(1.0);
    NodeId surr = reinforce_surrogate(g, s, task, 1.0, 1.0, /*entropy_coeff=*/1.0);
    g.forward();
    g.backward(surr);
    g.accumulate_param_grads(slab);
    adam_step(model.params, slab, adam);
  }
  for (const auto& layout : enumerate_valid_layouts(2)) {
    Graph g;
    ParamNodes p(g, model.params);
    auto enc = policy.encode(g, p, q);
    PolicySample f = policy.forced(g, p, enc, layout);
    CHECK(std::exp(f.log_prob) == doctest::Approx(1.0 / 3).epsilon(0.15));
  }
}

TEST_CASE("reinforce_step: warm-up batch initializes the baseline without updating") {
  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 41);
  auto items = make_items(6, 51);
  TrainOptions opts;
  opts.stage = Stage::Scratch;
  opts.rl.learning_rate = 1e-3;
  Trainer trainer(model, opts);
  std::vector<const QAItem*> batch;
  for (const auto& i : items) batch.push_back(&i);

  const auto params_before = model.params.get("policy.out3.w").data;
  BatchStats warm = trainer.reinforce_step(batch, 0);
  CHECK(warm.skipped);
  CHECK(trainer.baseline().initialized);
  CHECK(trainer.baseline().b == doctest::Approx(warm.loss));
  CHECK(model.params.get("policy.out3.w").data == params_before);

  BatchStats real = trainer.reinforce_step(batch, 1);
  CHECK_FALSE(real.skipped);
  CHECK(model.params.get("policy.out3.w").data != params_before);
}

TEST_CASE("non-finite parameters mark the batch as skipped and eventually abort") {
  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 43);
  model.params.get("find.conv1.w").data[0] = std::nan("");
  auto items = make_items(2, 61);
  TrainOptions opts;
  opts.stage = Stage::Clone;
  Trainer trainer(model, opts);
  std::vector<const QAItem*> batch;
  for (const auto& i : items) batch.push_back(&i);
  BatchStats stats = trainer.cloning_step(batch, 0);
  CHECK(stats.skipped);
  CHECK(trainer.nan_batches() == 1);
  CHECK_THROWS_AS(
      [&] {
        for (int i = 0; i < 30; ++i) trainer.cloning_step(batch, i + 1);
      }(),
      TrainAbort);
}

TEST_CASE("train: clone smoke run writes metrics, checkpoints, monotone steps") {
  const std::string dir = "/tmp/modnet_train_smoke";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 3);
  Dataset train = make_dataset(48, 71);
  Dataset val = make_dataset(24, 72);
  TrainOptions opts;
  opts.stage = Stage::Clone;
  opts.epochs = 2;
  opts.patience = 0;
  opts.rl.batch_size = 16;
  opts.rl.learning_rate = 1e-3;
  opts.out_dir = dir;
  opts.metrics_path = dir + "/metrics.jsonl";
  opts.quiet = true;
  Trainer trainer(model, opts);
  TrainResult result = trainer.train(train, val);
  CHECK(result.steps == 6);
  CHECK(std::filesystem::exists(dir + "/ckpt_best.bin"));
  CHECK(std::filesystem::exists(dir + "/ckpt_last.bin"));

  std::ifstream metrics(dir + "/metrics.jsonl");
  long prev_step = 0;
  int lines = 0, val_lines = 0;
  std::string line;
  while (std::getline(metrics, line)) {
    auto j = nlohmann::json::parse(line);
    ++lines;
    CHECK(j.at("stage") == "clone");
    const long step = j.at("step");
    CHECK(step >= prev_step);
    prev_step = step;
    if (!j.at("val_accuracy").is_null()) ++val_lines;
    CHECK(j.contains("loss"));
    CHECK(j.contains("kl"));
    CHECK(j.contains("qa_loss"));
    CHECK(j.contains("entropy"));
    CHECK(j.contains("baseline"));
  }
  CHECK(lines == 8);  // 6 batch records + 2 validation records
  CHECK(val_lines == 2);

  // the saved checkpoint reloads into an identical model
  Model loaded = Model::load(dir + "/ckpt_last.bin");
  CHECK(loaded.vocab.words == model.vocab.words);
  CHECK(loaded.cfg.embed_dim == model.cfg.embed_dim);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate: chance level on balanced yes/no items, determinism, recount") {
  Model model = Model::fresh(tiny_cfg(), Vocab::builtin(), 13);
  Dataset data;
  data.vocab = Vocab::builtin();
  // balanced yes/no subset
  int yes = 0, no = 0;
  for (const auto& item : make_items(1500, 81)) {
    if (item.template_id == 3) continue;
    if (item.answer_id == 0 && yes < 100) {
      data.items.push_back(item);
      ++yes;
    } else if (item.answer_id == 1 && no < 100) {
      data.items.push_back(item);
      ++no;
    }
  }
  REQUIRE(yes == 100);
  REQUIRE(no == 100);

  EvalOptions opts;
  opts.beam = 2;
  EvalResult r1 = evaluate_model(model, data, opts);
  // an untrained model carries no information about the gold label: overall
  // accuracy stays at or below chance, and on the items where it does answer
  // yes/no it is right about half the time (3 sigma bands)
  CHECK(r1.accuracy < 0.5 + 0.11);
  long yn_total = 0, yn_correct = 0;
  for (uint64_t seed : {13u, 14u, 15u, 16u, 17u}) {
    Model m = Model::fresh(tiny_cfg(), Vocab::builtin(), seed);
    EvalResult r = evaluate_model(m, data, opts);
    for (const auto& row : r.rows) {
      if (row.predicted_answer > 1) continue;
      ++yn_total;
      if (row.predicted_answer == row.gold_answer) ++yn_correct;
    }
  }
  if (yn_total > 30) {
    const double p = static_cast<double>(yn_correct) / yn_total;
    const double band = 3 * 0.5 / std::sqrt(static_cast<double>(yn_total));
    CHECK(p > 0.5 - band);
    CHECK(p < 0.5 + band);
  }

  EvalResult r2 = evaluate_model(model, data, opts);
  CHECK(r1.accuracy == r2.accuracy);
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (size_t i = 0; i < r1.rows.size(); ++i) {
    CHECK(r1.rows[i].layout_text == r2.rows[i].layout_text);
    CHECK(r1.rows[i].predicted_answer == r2.rows[i].predicted_answer);
  }

  // recount from the prediction rows reproduces the reported accuracy
  long correct = 0;
  for (const auto& row : r1.rows)
    if (row.predicted_answer == row.gold_answer) ++correct;
  CHECK(r1.accuracy == doctest::Approx(static_cast<double>(correct) / r1.rows.size()));

  // per-template accuracies aggregate to the overall number
  long tc = 0, tt = 0;
  for (const auto& [tid, ct] : r1.per_template) {
    tc += ct.first;
    tt += ct.second;
  }
  CHECK(tt == static_cast<long>(r1.rows.size()));
  CHECK(r1.accuracy == doctest::Approx(static_cast<double>(tc) / tt));

  // vocabulary mismatch is rejected
  Dataset bad = data;
  bad.vocab.words.push_back("extra");
  CHECK_THROWS_AS(evaluate_model(model, bad, opts), std::invalid_argument);
}

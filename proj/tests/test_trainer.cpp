#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "preflab/datagen.hpp"
#include "preflab/errors.hpp"
#include "preflab/evaluate.hpp"
#include "preflab/objectives.hpp"
#include "preflab/trainer.hpp"
#include "test_helpers.hpp"

using namespace preflab;
using namespace preflab::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One small end-to-end fixture shared by the training tests: biased
// pretraining, multimodal alignment, and a weakened/injected preference set.
struct MiniPipeline {
  WorldSpec world;
  PolicyParams pretrained;
  PolicyParams aligned;
  std::vector<AnnotatedExample> align_set;
  std::vector<PreferenceTuple> dataset;
  NoiseSchedule schedule;
};

const MiniPipeline& mini() {
  static const MiniPipeline pipe = [] {
    MiniPipeline m;
    WorldConfig wc;
    wc.n_objects = 4;
    wc.n_attributes = 3;
    wc.embed_dim = 8;
    m.world = generate_world(wc, 2024);

    PolicyConfig pc;
    pc.hidden_dim = 12;
    PolicyParams params = init_params(m.world, pc, 1);

    Rng corpus_rng(11);
    const auto corpus = sample_pretrain_corpus(m.world, 3000, corpus_rng);
    TrainConfig pre;
    pre.learning_rate = 1e-2;
    pre.epochs = 3;
    pre.batch_size = 64;
    pre.seed = 21;
    m.pretrained =
        pretrain_text(std::move(params), corpus, pre, m.world.vocab.end_token, m.world.embed_dim, m.world.query)
            .params;

    Rng align_rng(12);
    m.align_set = sample_annotated_examples(m.world, 600, align_rng);
    TrainConfig al;
    al.learning_rate = 1e-2;
    al.epochs = 4;
    al.batch_size = 32;
    al.seed = 22;
    m.aligned = align_multimodal(m.pretrained, m.align_set, al, m.world.vocab.end_token).params;

    m.schedule = make_noise_schedule(8, 0.05, 0.7);
    Rng pos_rng(13);
    const auto positives = sample_annotated_examples(m.world, 400, pos_rng);
    NegativeConfig neg;
    neg.schedule = m.schedule;
    neg.noise_step = 4;
    neg.rules = InjectionRuleSet::for_world(m.world);
    neg.seed = 14;
    const DatasetBuildResult built = build_preference_dataset(positives, neg, m.aligned, m.world);
    m.dataset = built.tuples;
    return m;
  }();
  return pipe;
}

Scene simple_scene(const WorldSpec& w, std::size_t obj, std::size_t att) {
  Scene s;
  s.objects = {{w.object_tokens[obj], w.attribute_tokens[att]}};
  s.count = 1;
  return s;
}

TrainConfig quick_dpo() {
  TrainConfig c;
  c.learning_rate = 5e-3;
  c.epochs = 3;
  c.batch_size = 32;
  c.eta = 0.1;
  c.seed = 31;
  c.log_every = 1;
  return c;
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("zero epochs and zero learning rate leave parameters untouched") {
  const MiniPipeline& m = mini();
  TrainConfig cfg;
  cfg.epochs = 0;
  const std::vector<TokenSeq> corpus = {canonical_caption(m.world, simple_scene(m.world, 0, 0))};
  const TrainResult frozen = pretrain_text(m.pretrained, corpus, cfg, m.world.vocab.end_token, m.world.embed_dim);
  CHECK(params_equal(frozen.params, m.pretrained));
  CHECK(frozen.trace.points.size() == 1);  // the initial probe point is still logged

  TrainConfig lr0 = quick_dpo();
  lr0.learning_rate = 0.0;
  lr0.epochs = 1;
  const TrainResult still = train_dpo(m.aligned, m.dataset, lr0, m.world.vocab.end_token);
  CHECK(params_equal(still.params, m.aligned));
  CHECK(still.trace.points.size() >= 2);
}

TEST_CASE("pretraining a single repeated caption memorizes it") {
  const MiniPipeline& m = mini();
  const TokenSeq caption = canonical_caption(m.world, simple_scene(m.world, 1, 1));
  const std::vector<TokenSeq> corpus(64, caption);

  PolicyConfig pc;
  pc.hidden_dim = 12;
  PolicyParams params = init_params(m.world, pc, 5);
  TrainConfig cfg;
  cfg.learning_rate = 2e-2;
  cfg.epochs = 300;
  cfg.batch_size = 32;
  cfg.seed = 7;
  cfg.log_every = 100;
  const TrainResult r = pretrain_text(std::move(params), corpus, cfg, m.world.vocab.end_token, m.world.embed_dim);
  ImageEmbedding zero;
  zero.values.assign(static_cast<std::size_t>(m.world.embed_dim), 0.0);
  const double nll = -log_prob(r.params, zero, {}, caption, m.world.vocab.end_token);
  CHECK(nll / static_cast<double>(caption.size()) < 0.1);
  CHECK(r.trace.points.back().mean_logp_pos > r.trace.points.front().mean_logp_pos);
}

TEST_CASE("biased pretraining ranks the favored object first without an image") {
  const MiniPipeline& m = mini();
  const Token favored = m.world.object_tokens[static_cast<std::size_t>(m.world.favored_object)];
  ImageEmbedding zero;
  zero.values.assign(static_cast<std::size_t>(m.world.embed_dim), 0.0);
  // next-object distribution at the object slot of the caption template
  const TokenSeq prefix = {m.world.vocab.lookup("there"), m.world.vocab.lookup("are"),
                           m.world.count_tokens[0], m.world.attribute_tokens[0]};
  const auto l = logits(m.pretrained, zero, m.world.query, prefix);
  for (Token obj : m.world.object_tokens) {
    if (obj == favored) continue;
    CHECK(l[static_cast<std::size_t>(favored)] > l[static_cast<std::size_t>(obj)]);
  }
}

TEST_CASE("alignment grounds captions on held-out scenes") {
  const MiniPipeline& m = mini();

  const TrainResult noop = align_multimodal(m.pretrained, {}, TrainConfig{}, m.world.vocab.end_token);
  CHECK(params_equal(noop.params, m.pretrained));

  Rng rng(99);
  const auto pairs = greedy_eval_pairs(m.aligned, m.world, 200, 8, rng);
  std::size_t correct = 0;
  for (const auto& [scene, response] : pairs) {
    const auto mentions = extract_object_mentions(m.world, response);
    if (mentions.size() == 1 && mentions[0] == scene.objects[0].first) ++correct;
  }
  CHECK(correct > 100);  // majority grounded

  // the smoothed trace is nondecreasing in log-probability
  TrainConfig al;
  al.learning_rate = 1e-2;
  al.epochs = 4;
  al.batch_size = 32;
  al.seed = 22;
  al.log_every = 1;
  const TrainResult r = align_multimodal(m.pretrained, m.align_set, al, m.world.vocab.end_token);
  const auto& pts = r.trace.points;
  REQUIRE(pts.size() > 20);
  const std::size_t window = 10;
  double prev = -1e300;
  for (std::size_t start = 0; start + window <= pts.size(); start += window) {
    double mean = 0.0;
    for (std::size_t i = start; i < start + window; ++i) mean += pts[i].mean_logp_pos;
    mean /= static_cast<double>(window);
    CHECK(mean >= prev - 1e-9);
    prev = mean;
  }
}

TEST_CASE("weakened prompting erodes grounding as noise grows") {
  const MiniPipeline& m = mini();
  DecodeConfig cfg;
  cfg.max_len = 8;
  const int n = 200;
  std::size_t overlap_clean = 0, overlap_noised = 0;
  Rng rng(123);
  for (int i = 0; i < n; ++i) {
    Rng item = rng.child(static_cast<std::uint64_t>(i));
    const Scene scene = sample_scene(m.world, item);
    const ImageEmbedding image = encode_image(m.world, scene, item);
    const BootstrapResult clean = bootstrap_negative(m.aligned, image, m.world.query, m.schedule, 0, cfg,
                                                     m.world.vocab.end_token, item.child(1000));
    const BootstrapResult noised = bootstrap_negative(m.aligned, image, m.world.query, m.schedule, m.schedule.T,
                                                      cfg, m.world.vocab.end_token, item.child(2000));
    const auto hit = [&](const TokenSeq& r) {
      for (Token t : extract_object_mentions(m.world, r)) {
        if (t == scene.objects[0].first) return true;
      }
      return false;
    };
    if (hit(clean.tokens)) ++overlap_clean;
    if (hit(noised.tokens)) ++overlap_noised;
  }
  CHECK(overlap_noised < overlap_clean);
}

TEST_CASE("dpo training pushes negatives down and beats the ln 2 start") {
  const MiniPipeline& m = mini();
  const TrainResult r = train_dpo(m.aligned, m.dataset, quick_dpo(), m.world.vocab.end_token);

  const auto& pts = r.trace.points;
  REQUIRE(pts.size() >= 10);
  CHECK(pts.back().mean_logp_neg < pts.front().mean_logp_neg);

  const BatchLoss final_loss = dpo_loss(r.params, m.aligned, m.dataset, quick_dpo().eta, m.world.vocab.end_token);
  CHECK(final_loss.mean < std::log(2.0));

  const BatchLoss start_loss = dpo_loss(m.aligned, m.aligned, m.dataset, quick_dpo().eta, m.world.vocab.end_token);
  CHECK(std::abs(start_loss.mean - std::log(2.0)) <= 1e-12);
}

TEST_CASE("dpo trace margins grow under 10-step smoothing") {
  const MiniPipeline& m = mini();
  const TrainResult r = train_dpo(m.aligned, m.dataset, quick_dpo(), m.world.vocab.end_token);
  const auto& pts = r.trace.points;
  REQUIRE(pts.size() > 20);
  // reference log-probs are constant across steps, so the probe margin is
  // eta * ((pos_t - neg_t) - (pos_0 - neg_0))
  const double base = pts.front().mean_logp_pos - pts.front().mean_logp_neg;
  const std::size_t window = 10;
  double prev = -1e300;
  for (std::size_t start = 0; start + window <= pts.size(); start += window) {
    double mean = 0.0;
    for (std::size_t i = start; i < start + window; ++i) {
      mean += quick_dpo().eta * ((pts[i].mean_logp_pos - pts[i].mean_logp_neg) - base);
    }
    mean /= static_cast<double>(window);
    CHECK(mean >= prev - 1e-9);
    prev = mean;
  }
}

TEST_CASE("training runs replay bit-identically under one seed") {
  const MiniPipeline& m = mini();
  const TrainResult a = train_dpo(m.aligned, m.dataset, quick_dpo(), m.world.vocab.end_token);
  const TrainResult b = train_dpo(m.aligned, m.dataset, quick_dpo(), m.world.vocab.end_token);
  CHECK(params_equal(a.params, b.params));
  REQUIRE(a.trace.points.size() == b.trace.points.size());
  for (std::size_t i = 0; i < a.trace.points.size(); ++i) {
    CHECK(a.trace.points[i].mean_logp_pos == b.trace.points[i].mean_logp_pos);
    CHECK(a.trace.points[i].mean_logp_neg == b.trace.points[i].mean_logp_neg);
  }
}

TEST_CASE("sft raises the ground-truth log-probability") {
  const MiniPipeline& m = mini();
  std::vector<AnnotatedExample> positives;
  for (const PreferenceTuple& t : m.dataset) {
    AnnotatedExample ex;
    ex.image = t.image;
    ex.query = t.query;
    ex.response = t.winner();
    positives.push_back(std::move(ex));
  }
  TrainConfig cfg = quick_dpo();
  cfg.seed = 77;
  const TrainResult a = train_sft(m.aligned, positives, cfg, m.world.vocab.end_token);
  CHECK(a.trace.points.back().mean_logp_pos > a.trace.points.front().mean_logp_pos);
  CHECK(std::isnan(a.trace.points.front().mean_logp_neg));

  const TrainResult b = train_sft(m.aligned, positives, cfg, m.world.vocab.end_token);
  CHECK(params_equal(a.params, b.params));
}

TEST_CASE("runaway learning rates trip the divergence guard") {
  const MiniPipeline& m = mini();
  std::vector<AnnotatedExample> positives;
  for (std::size_t i = 0; i < 64 && i < m.dataset.size(); ++i) {
    AnnotatedExample ex;
    ex.image = m.dataset[i].image;
    ex.query = m.dataset[i].query;
    ex.response = m.dataset[i].winner();
    positives.push_back(std::move(ex));
  }
  TrainConfig cfg;
  cfg.optimizer = TrainConfig::Optimizer::sgd;
  cfg.learning_rate = 1e4;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.log_every = 1;
  CHECK_THROWS_WITH_AS(train_sft(m.aligned, positives, cfg, m.world.vocab.end_token),
                       doctest::Contains("smaller learning rate"), DivergenceError);
}

TEST_CASE("ablation subsets nest and the report round-trips") {
  const std::vector<std::size_t> quarter = ablation_subset(100, 0.25, 9);
  const std::vector<std::size_t> half = ablation_subset(100, 0.5, 9);
  CHECK(quarter.size() == 25);
  CHECK(half.size() == 50);
  const std::set<std::size_t> half_set(half.begin(), half.end());
  for (std::size_t i : quarter) CHECK(half_set.count(i) == 1);

  const MiniPipeline& m = mini();
  AblationSetup setup;
  setup.world = &m.world;
  setup.aligned = m.aligned;
  setup.dataset = m.dataset;
  setup.heldout = std::vector<PreferenceTuple>(m.dataset.begin(), m.dataset.begin() + 50);
  TrainConfig fast = quick_dpo();
  fast.epochs = 1;
  fast.log_every = 100;
  setup.dpo_config = fast;
  setup.sft_config = fast;
  setup.eval_scenes = 60;
  setup.eval_max_len = 8;
  setup.eval_seed = 5;

  const AblationReport report = run_ablation(setup, std::vector<double>{1.0}, 1);
  REQUIRE(report.cells.size() == 2);  // dpo and sft, one size, no self-gen arm
  CHECK(report.cells[0].method == "dpo");
  CHECK(report.cells[1].method == "sft");
  CHECK(report.cells[0].n_seeds == 1);
  CHECK(report.cells[0].obj_rate_std == 0.0);

  const auto pa = std::filesystem::temp_directory_path() / "preflab_ablation_a.json";
  const auto pb = std::filesystem::temp_directory_path() / "preflab_ablation_b.json";
  save_ablation_json(report, pa);
  const AblationReport loaded = load_ablation_json(pa);
  save_ablation_json(loaded, pb);
  CHECK(slurp(pa) == slurp(pb));
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST_CASE("trace csv round-trips through the loader") {
  LogProbTrace trace;
  trace.points = {{0, -3.25, -4.5}, {10, -3.0, -6.2515}, {20, -2.875, -8.0}};
  const auto path = std::filesystem::temp_directory_path() / "preflab_trace.csv";
  save_trace_csv(trace, path);
  const LogProbTrace loaded = load_trace_csv(path);
  REQUIRE(loaded.points.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded.points[i].step == trace.points[i].step);
    CHECK(loaded.points[i].mean_logp_pos == trace.points[i].mean_logp_pos);
    CHECK(loaded.points[i].mean_logp_neg == trace.points[i].mean_logp_neg);
  }
  std::filesystem::remove(path);
}

TEST_SUITE_END();

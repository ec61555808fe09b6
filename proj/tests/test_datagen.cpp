#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "preflab/datagen.hpp"
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

}  // namespace

TEST_SUITE_BEGIN("datagen");

TEST_CASE("noise schedule basics") {
  const NoiseSchedule s = make_noise_schedule(1, 0.5, 0.5);
  CHECK(s.beta == std::vector<double>{0.5});
  CHECK(s.alpha_bar == std::vector<double>{1.0, 0.5});

  const NoiseSchedule long_s = make_noise_schedule(64, 0.01, 0.6);
  for (int t = 1; t <= long_s.T; ++t) {
    CHECK(long_s.alpha_bar[static_cast<std::size_t>(t)] < long_s.alpha_bar[static_cast<std::size_t>(t - 1)]);
    CHECK(long_s.alpha_bar[static_cast<std::size_t>(t)] > 0.0);
    // the signal and noise variances always rebuild one
    const double ab = long_s.alpha_bar[static_cast<std::size_t>(t)];
    CHECK(ab + (1.0 - ab) == 1.0);
  }

  CHECK_THROWS_AS(make_noise_schedule(0, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_noise_schedule(5, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_noise_schedule(5, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_noise_schedule(5, 0.3, 1.0), std::invalid_argument);
}

TEST_CASE("long schedule drives alpha_bar below 1e-4") {
  const NoiseSchedule s = make_noise_schedule(1000, 1e-4, 0.02);
  // independent route: cumulative product in extended precision
  long double acc = 1.0L;
  for (int i = 0; i < 1000; ++i) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / 999.0L;
    acc *= 1.0L - beta;
  }
  CHECK(s.alpha_bar.back() == doctest::Approx(static_cast<double>(acc)).epsilon(1e-10));
  CHECK(s.alpha_bar.back() < 1e-4);
}

TEST_CASE("weaken_image at t=0 is the identity") {
  const NoiseSchedule s = make_noise_schedule(10, 0.05, 0.5);
  ImageEmbedding img;
  img.values = {1.0, -2.0, 0.25};
  Rng rng(4);
  const ImageEmbedding out = weaken_image(img, s, 0, rng);
  CHECK(out.values == img.values);
  CHECK_THROWS_AS(weaken_image(img, s, -1, rng), std::invalid_argument);
  CHECK_THROWS_AS(weaken_image(img, s, 11, rng), std::invalid_argument);
}

TEST_CASE("weaken_image per-coordinate moments at a middle step") {
  const NoiseSchedule s = make_noise_schedule(10, 0.05, 0.5);
  const int t = 5;
  ImageEmbedding img;
  img.values = {0.8, -1.4, 2.2};
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const int n = 10000;
  std::vector<double> mean(3, 0.0);
  Rng rng(9);
  for (int i = 0; i < n; ++i) {
    const ImageEmbedding w = weaken_image(img, s, t, rng);
    for (std::size_t d = 0; d < 3; ++d) mean[d] += w.values[d];
  }
  const double bound = 3.0 * std::sqrt((1.0 - ab) / n);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(std::abs(mean[d] / n - std::sqrt(ab) * img.values[d]) < bound);
  }
}

TEST_CASE("weaken_image at the final step of a long schedule is near standard normal") {
  const NoiseSchedule s = make_noise_schedule(1000, 1e-4, 0.02);
  REQUIRE(s.alpha_bar.back() < 1e-4);
  ImageEmbedding img;
  img.values = {3.0, -5.0};
  const int n = 100000;
  double sum0 = 0.0, sumsq0 = 0.0;
  Rng rng(13);
  for (int i = 0; i < n; ++i) {
    const ImageEmbedding w = weaken_image(img, s, 1000, rng);
    sum0 += w.values[0];
    sumsq0 += w.values[0] * w.values[0];
  }
  const double mean = sum0 / n;
  const double var = sumsq0 / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("bootstrap_negative is replayable and t=0 reproduces plain sampling") {
  const TinyWorld t = tiny_world(6, 4, 1.0, 3);
  const PolicyParams p = init_params(6, 4, PolicyConfig{5}, 17);
  const NoiseSchedule s = make_noise_schedule(8, 0.05, 0.6);
  DecodeConfig cfg;
  cfg.max_len = 6;

  const Rng rng(77);
  const BootstrapResult a = bootstrap_negative(p, t.image, t.query, s, 3, cfg, t.end_token, rng);
  const BootstrapResult b = bootstrap_negative(p, t.image, t.query, s, 3, cfg, t.end_token, rng);
  CHECK(a.tokens == b.tokens);
  CHECK(a.t == 3);
  CHECK(a.seed == 77);

  // t=0: identity weakening, so the result equals sampling on the clean image
  // with the documented decode stream rng.child(1).
  const BootstrapResult self_gen = bootstrap_negative(p, t.image, t.query, s, 0, cfg, t.end_token, rng);
  Rng decode_rng = rng.child(1);
  const DecodeResult plain = sample_response(p, t.image, t.query, cfg, t.end_token, decode_rng);
  CHECK(self_gen.tokens == plain.tokens);
}

TEST_CASE("rule injection changes exactly one detail per category") {
  WorldConfig wc;
  wc.count_max = 2;
  const WorldSpec w = generate_world(wc, 5);
  Scene s;
  s.count = 2;
  s.objects = {{w.object_tokens[1], w.attribute_tokens[0]}, {w.object_tokens[2], w.attribute_tokens[3]}};
  const TokenSeq caption = canonical_caption(w, s);

  const auto diff_positions = [&](const TokenSeq& a, const TokenSeq& b) {
    REQUIRE(a.size() == b.size());
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) pos.push_back(i);
    }
    return pos;
  };

  SUBCASE("object existence") {
    InjectionRuleSet rules = InjectionRuleSet::for_world(w);
    rules.object_attribute = false;
    rules.object_count = false;
    Rng rng(1);
    const TokenSeq out = inject_errors_rules(w, caption, rules, rng);
    const auto pos = diff_positions(caption, out);
    REQUIRE(pos.size() == 1);
    CHECK(w.is_object(out[pos[0]]));
    CHECK(parse_caption(w, out).has_value());
  }
  SUBCASE("object attribute") {
    InjectionRuleSet rules = InjectionRuleSet::for_world(w);
    rules.object_existence = false;
    rules.object_count = false;
    Rng rng(2);
    const TokenSeq out = inject_errors_rules(w, caption, rules, rng);
    const auto pos = diff_positions(caption, out);
    REQUIRE(pos.size() == 1);
    bool is_attr = false;
    for (Token a : w.attribute_tokens) is_attr = is_attr || a == out[pos[0]];
    CHECK(is_attr);
    CHECK(parse_caption(w, out).has_value());
  }
  SUBCASE("object count") {
    InjectionRuleSet rules = InjectionRuleSet::for_world(w);
    rules.object_existence = false;
    rules.object_attribute = false;
    Rng rng(3);
    const TokenSeq out = inject_errors_rules(w, caption, rules, rng);
    const auto pos = diff_positions(caption, out);
    REQUIRE(pos.size() == 1);
    CHECK(pos[0] == 2);  // the count word slot
    CHECK(parse_caption(w, out).has_value());
  }
  SUBCASE("no enabled rule is an error") {
    InjectionRuleSet rules = InjectionRuleSet::for_world(w);
    rules.object_existence = rules.object_attribute = rules.object_count = false;
    Rng rng(4);
    CHECK_THROWS_AS(inject_errors_rules(w, caption, rules, rng), std::invalid_argument);
  }
  SUBCASE("unparseable response is an error") {
    InjectionRuleSet rules = InjectionRuleSet::for_world(w);
    Rng rng(5);
    const TokenSeq garbage = {w.object_tokens[0], w.object_tokens[0], w.vocab.end_token};
    CHECK_THROWS_AS(inject_errors_rules(w, garbage, rules, rng), std::invalid_argument);
  }
}

TEST_CASE("injected outputs always differ and stay parseable") {
  const WorldSpec w = generate_world(WorldConfig{}, 6);
  const InjectionRuleSet rules = InjectionRuleSet::for_world(w);
  Rng scene_rng(7);
  for (int i = 0; i < 200; ++i) {
    const Scene s = sample_scene(w, scene_rng);
    const TokenSeq caption = canonical_caption(w, s);
    Rng rng(static_cast<std::uint64_t>(i));
    const TokenSeq out = inject_errors_rules(w, caption, rules, rng);
    CHECK(out != caption);
    CHECK(parse_caption(w, out).has_value());
  }
}

TEST_CASE("injection prompt carries the instruction, examples and tail") {
  const std::string prompt = render_injection_prompt("How many people are there?", "there are 3 people.");
  CHECK(prompt.find("Note that the modified responses should still be common in reality.") != std::string::npos);
  CHECK(prompt.rfind("Modified Response:") == prompt.size() - std::string("Modified Response:").size());
  CHECK(prompt.find("Question: How many people are there?\nResponse: there are 3 people.\nModified Response:") !=
        std::string::npos);

  // six few-shot examples, each with its own lowercase label
  std::size_t labels = 0;
  for (std::size_t at = prompt.find("Modified response:"); at != std::string::npos;
       at = prompt.find("Modified response:", at + 1)) {
    ++labels;
  }
  CHECK(labels == 6);
  CHECK(prompt.find("the color of the apple is yellow") != std::string::npos);
  CHECK(prompt.find("it is a cat on the left of the boy") != std::string::npos);
  CHECK(prompt.find("there are only 1 person in the image") != std::string::npos);
  CHECK(prompt.find("wristwatch with a rectangular face") != std::string::npos);

  CHECK(render_injection_prompt("q", "r") == render_injection_prompt("q", "r"));
  CHECK_THROWS_AS(render_injection_prompt("q", ""), std::invalid_argument);
}

TEST_CASE("build_preference_dataset honors the mix and its invariants") {
  const WorldSpec w = generate_world(WorldConfig{}, 9);
  const PolicyParams p = init_params(w, PolicyConfig{8}, 33);
  Rng rng(15);
  const auto positives = sample_annotated_examples(w, 100, rng);

  NegativeConfig cfg;
  cfg.schedule = make_noise_schedule(8, 0.05, 0.6);
  cfg.noise_step = 4;
  cfg.rules = InjectionRuleSet::for_world(w);
  cfg.seed = 3;

  SUBCASE("degenerate mix yields a single provenance") {
    cfg.mix = {{Provenance::image_weakened, 1.0}};
    const DatasetBuildResult r = build_preference_dataset(positives, cfg, p, w);
    CHECK(r.tuples.size() + r.skipped.size() == 100);
    for (const PreferenceTuple& t : r.tuples) {
      CHECK(t.provenance == Provenance::image_weakened);
      CHECK(t.p == 1);
      CHECK(t.r1 != t.r2);
      CHECK(t.r1.back() == w.vocab.end_token);
      CHECK(t.r2.back() == w.vocab.end_token);
      CHECK(t.noise_step == 4);
    }
  }

  SUBCASE("an even mix splits exactly after deterministic rounding") {
    cfg.mix = {{Provenance::image_weakened, 0.5}, {Provenance::error_injected_rules, 0.5}};
    const DatasetBuildResult r = build_preference_dataset(positives, cfg, p, w);
    REQUIRE(r.skipped.empty());
    std::map<Provenance, int> counts;
    for (const PreferenceTuple& t : r.tuples) counts[t.provenance]++;
    CHECK(counts[Provenance::image_weakened] == 50);
    CHECK(counts[Provenance::error_injected_rules] == 50);
  }

  SUBCASE("identical config and seeds serialize byte-identically") {
    cfg.mix = {{Provenance::image_weakened, 0.5}, {Provenance::error_injected_rules, 0.5}};
    const DatasetBuildResult a = build_preference_dataset(positives, cfg, p, w);
    const DatasetBuildResult b = build_preference_dataset(positives, cfg, p, w);
    const auto pa = std::filesystem::temp_directory_path() / "preflab_ds_a.jsonl";
    const auto pb = std::filesystem::temp_directory_path() / "preflab_ds_b.jsonl";
    save_dataset_jsonl(w, a.tuples, pa);
    save_dataset_jsonl(w, b.tuples, pb);
    CHECK(slurp(pa) == slurp(pb));

    const auto loaded = load_dataset_jsonl(w, pa);
    const auto pc = std::filesystem::temp_directory_path() / "preflab_ds_c.jsonl";
    save_dataset_jsonl(w, loaded, pc);
    CHECK(slurp(pa) == slurp(pc));
    std::filesystem::remove(pa);
    std::filesystem::remove(pb);
    std::filesystem::remove(pc);
  }

  SUBCASE("items that cannot build a negative are skipped and reported") {
    // rules-only mix on a positive that does not parse under the template
    std::vector<AnnotatedExample> bad = {positives[0]};
    bad[0].response = {w.object_tokens[0], w.vocab.end_token};
    cfg.mix = {{Provenance::error_injected_rules, 1.0}};
    const DatasetBuildResult r = build_preference_dataset(bad, cfg, p, w);
    CHECK(r.tuples.empty());
    REQUIRE(r.skipped.size() == 1);
    CHECK(r.skipped[0].index == 0);
    CHECK(!r.skipped[0].reason.empty());
  }

  SUBCASE("weakened arm requires a positive noise step") {
    cfg.mix = {{Provenance::image_weakened, 1.0}};
    cfg.noise_step = 0;
    CHECK_THROWS_AS(build_preference_dataset(positives, cfg, p, w), std::invalid_argument);
  }
}

TEST_SUITE_END();

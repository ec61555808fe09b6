#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "preflab/llm_client.hpp"
#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/rng.hpp"
#include "preflab/world.hpp"

namespace preflab {

// Variance-preserving forward-diffusion schedule: alpha_bar[0] = 1 and
// alpha_bar[t] is the running product of (1 - beta[s]).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // size T
  std::vector<double> alpha_bar;  // size T + 1, strictly decreasing from 1
};

NoiseSchedule make_noise_schedule(int T, double beta_min, double beta_max);

// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps. t = 0 returns
// the input untouched.
ImageEmbedding weaken_image(const ImageEmbedding& image, const NoiseSchedule& schedule, int t, Rng& rng);

struct BootstrapResult {
  TokenSeq tokens;
  bool truncated = false;
  int t = 0;
  std::uint64_t seed = 0;
};

// Samples a response from the policy under the weakened image. t = 0 is the
// plain self-generation arm (identity weakening). The weakening noise draws
// from rng.child(0) and decoding from rng.child(1), so the decode stream is
// the same at every t.
BootstrapResult bootstrap_negative(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                                   const NoiseSchedule& schedule, int t, const DecodeConfig& decode,
                                   Token end_token, const Rng& rng);

// Substitution tables per error category; a rule never maps a token to itself.
struct InjectionRuleSet {
  bool object_existence = true;
  bool object_attribute = true;
  bool object_count = true;
  std::unordered_map<Token, std::vector<Token>> object_subs;
  std::unordered_map<Token, std::vector<Token>> attribute_subs;
  std::unordered_map<Token, std::vector<Token>> count_subs;

  // Each token maps to every other token of its class.
  static InjectionRuleSet for_world(const WorldSpec& world);
};

// Rewrites one detail (object identity, attribute, or count) of a
// template-parseable response; the result differs from the input and still
// parses. Throws when the response does not parse or no enabled rule applies.
TokenSeq inject_errors_rules(const WorldSpec& world, const TokenSeq& response, const InjectionRuleSet& rules,
                             Rng& rng);

// The fixed few-shot instruction used for LLM-based error injection; ends
// with "Question: <q>\nResponse: <r>\nModified Response:".
std::string render_injection_prompt(const std::string& question, const std::string& response);

struct NegativeConfig {
  std::map<Provenance, double> mix = {{Provenance::image_weakened, 0.5},
                                      {Provenance::error_injected_rules, 0.5}};
  NoiseSchedule schedule;
  int noise_step = 0;  // t used for the image_weakened arm
  DecodeConfig decode;
  InjectionRuleSet rules;
  std::uint64_t seed = 0;
  int retry_limit = 10;
  std::optional<EndpointConfig> llm;  // required for the error_injected_llm arm
};

struct SkippedItem {
  std::size_t index = 0;
  std::string reason;
};

struct DatasetBuildResult {
  std::vector<PreferenceTuple> tuples;
  std::vector<SkippedItem> skipped;
};

// One tuple per positive: r1 is the annotated response, r2 a bootstrapped or
// injected negative, p = 1. Strategy counts honor the mix proportions after
// largest-remainder rounding; items that fail to produce a distinct negative
// within retry_limit attempts are skipped and reported.
DatasetBuildResult build_preference_dataset(std::span<const AnnotatedExample> positives,
                                            const NegativeConfig& config, const PolicyParams& policy,
                                            const WorldSpec& world);

void save_dataset_jsonl(const WorldSpec& world, std::span<const PreferenceTuple> tuples,
                        const std::filesystem::path& path);
std::vector<PreferenceTuple> load_dataset_jsonl(const WorldSpec& world, const std::filesystem::path& path);

}  // namespace preflab

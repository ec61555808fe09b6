#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/world.hpp"

namespace preflab {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double learning_rate = 1e-2;
  int epochs = 2;
  int batch_size = 64;
  double eta = 0.1;  // KL coefficient for the DPO loss
  std::uint64_t seed = 0;
  enum class Optimizer { sgd, adam } optimizer = Optimizer::adam;
  AdamSettings adam;
  int log_every = 10;
  int probe_size = 256;  // fixed probe subset for the trace
  // Which parameters the stage updates. Alignment runs image_proj-only by
  // convention (projector training against a frozen language pathway);
  // preference and SFT stages train everything.
  enum class Trainable { all, image_proj } trainable = Trainable::all;
};

struct TracePoint {
  long step = 0;
  double mean_logp_pos = 0.0;
  double mean_logp_neg = 0.0;  // NaN for the SFT-style traces
};

struct LogProbTrace {
  std::vector<TracePoint> points;
};

struct TrainResult {
  PolicyParams params;
  LogProbTrace trace;
};

// Next-token NLL training on text-only captions; the image is fixed to zero
// so only the language pathway learns the biased marginal. When a query is
// given, every caption is conditioned on it, which places the bias in the
// same prompt context later probes and decoding use.
TrainResult pretrain_text(PolicyParams params, std::span<const TokenSeq> corpus, const TrainConfig& config,
                          Token end_token, int embed_dim, const TokenSeq& query = {});

// Image-conditioned NLL training. An empty example list is a no-op.
TrainResult align_multimodal(PolicyParams params, std::span<const AnnotatedExample> examples,
                             const TrainConfig& config, Token end_token);

// DPO on preference tuples; the reference policy is a frozen copy of the
// input parameters taken before the first step.
TrainResult train_dpo(PolicyParams params, std::span<const PreferenceTuple> dataset, const TrainConfig& config,
                      Token end_token);

// NLL on positives only.
TrainResult train_sft(PolicyParams params, std::span<const AnnotatedExample> positives, const TrainConfig& config,
                      Token end_token);

void save_trace_csv(const LogProbTrace& trace, const std::filesystem::path& path);
void save_trace_json(const LogProbTrace& trace, const std::filesystem::path& path);
LogProbTrace load_trace_csv(const std::filesystem::path& path);

struct AblationCell {
  std::string method;  // "dpo", "sft", "dpo_self_generated"
  double size_fraction = 1.0;
  int n_seeds = 0;
  double obj_rate_mean = 0.0, obj_rate_std = 0.0;
  double resp_rate_mean = 0.0, resp_rate_std = 0.0;
  double pref_acc_mean = 0.0, pref_acc_std = 0.0;
  std::vector<double> obj_rates;  // per-seed values backing the aggregates
};

struct AblationReport {
  std::vector<AblationCell> cells;
};

struct AblationSetup {
  const WorldSpec* world = nullptr;
  PolicyParams aligned;
  std::vector<PreferenceTuple> dataset;
  std::vector<PreferenceTuple> selfgen_dataset;  // empty disables that arm
  std::vector<PreferenceTuple> heldout;
  TrainConfig dpo_config;
  TrainConfig sft_config;
  std::size_t eval_scenes = 500;
  int eval_max_len = 8;
  std::uint64_t eval_seed = 1;
};

// For every size x seed, trains DPO and SFT from the same aligned checkpoint
// on a nested subset of the dataset and scores hallucination and preference
// accuracy on a shared evaluation draw. The self-generated arm (when its
// dataset is present) runs DPO at full size.
AblationReport run_ablation(const AblationSetup& setup, std::span<const double> sizes, int n_seeds);

// Per-seed subset indices; the fraction-f subset is a prefix of the fraction-1
// permutation, so smaller subsets nest inside larger ones.
std::vector<std::size_t> ablation_subset(std::size_t n, double fraction, std::uint64_t seed);

void save_ablation_json(const AblationReport& report, const std::filesystem::path& path);
AblationReport load_ablation_json(const std::filesystem::path& path);
void save_ablation_csv(const AblationReport& report, const std::filesystem::path& path);

}  // namespace preflab

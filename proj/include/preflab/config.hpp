#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "preflab/llm_client.hpp"
#include "preflab/policy.hpp"
#include "preflab/trainer.hpp"
#include "preflab/world.hpp"

#include "json.hpp"

namespace preflab {

struct ScheduleConfig {
  int steps = 12;
  double beta_min = 0.05;
  double beta_max = 0.7;
};

struct DatagenConfig {
  std::size_t pretrain_captions = 20000;
  std::size_t align_examples = 1000;
  std::size_t preference_examples = 4000;
  std::map<std::string, double> mix = {{"image_weakened", 0.5}, {"error_injected_rules", 0.5}};
  int noise_step = -1;  // -1 resolves to steps / 2
  DecodeConfig decode;
  int retry_limit = 10;
};

struct EvalConfig {
  std::size_t eval_scenes = 500;
  std::size_t heldout_tuples = 500;
  std::size_t probe_scenes = 50;
  int trajectory_samples = 64;
};

struct AblationConfig {
  std::vector<double> sizes = {0.25, 0.5, 1.0};
  int n_seeds = 3;
  bool selfgen_arm = true;
};

struct TrainSection {
  TrainConfig pretrain;
  TrainConfig align;
  TrainConfig dpo;
  TrainConfig sft;
  AblationConfig ablation;
};

struct RunConfig {
  std::uint64_t master_seed = 0;
  std::string output_dir = "run_out";
  WorldConfig world;
  PolicyConfig policy;
  ScheduleConfig schedule;
  DatagenConfig datagen;
  TrainSection train;
  EvalConfig eval;
  std::optional<EndpointConfig> llm;
};

// Parses and validates the run config, fills defaults, creates output_dir and
// echoes the effective config (defaults included) to
// output_dir/effective_config.json before returning. Unknown keys and type
// mismatches raise ConfigError naming the offending key.
RunConfig parse_config(const std::filesystem::path& path,
                       std::optional<std::uint64_t> seed_override = std::nullopt);

// Validation without the filesystem side effects.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& config);

}  // namespace preflab

#include "preflab/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <openssl/evp.h>

#include "json.hpp"
#include "preflab/datagen.hpp"
#include "preflab/errors.hpp"
#include "preflab/evaluate.hpp"
#include "preflab/numeric_io.hpp"
#include "preflab/objectives.hpp"
#include "preflab/trainer.hpp"

namespace preflab {

namespace {

namespace fs = std::filesystem;

// Stage seeds are fixed children of the master seed.
enum StageSeed : std::uint64_t {
  kWorldSeed = 1,
  kParamsSeed = 2,
  kCorpusSeed = 3,
  kAlignDataSeed = 4,
  kPositivesSeed = 5,
  kNegativesSeed = 6,
  kHeldoutPositivesSeed = 7,
  kHeldoutNegativesSeed = 8,
  kDpoTrainSeed = 9,
  kSftTrainSeed = 10,
  kEvalSeed = 11,
  kScanSeed = 12,
  kAblationSeed = 13,
  kSelfgenSeed = 14,
};

std::uint64_t stage_seed(const RunConfig& config, StageSeed which) {
  return Rng(config.master_seed).child(which).seed();
}

struct Paths {
  fs::path dir;
  fs::path world() const { return dir / "world.json"; }
  fs::path pretrained() const { return dir / "params_pretrained.json"; }
  fs::path aligned() const { return dir / "params_aligned.json"; }
  fs::path dpo() const { return dir / "params_dpo.json"; }
  fs::path sft() const { return dir / "params_sft.json"; }
  fs::path dataset() const { return dir / "dataset.jsonl"; }
  fs::path heldout() const { return dir / "heldout.jsonl"; }
};

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifactError(p.filename().string());
}

int resolved_noise_step(const RunConfig& config) {
  return config.datagen.noise_step >= 0 ? config.datagen.noise_step : config.schedule.steps / 2;
}

TrainConfig resolved_train(const TrainConfig& section, const RunConfig& config, StageSeed fallback_seed) {
  TrainConfig c = section;
  if (c.seed == 0) c.seed = stage_seed(config, fallback_seed);
  return c;
}

NegativeConfig negative_config(const RunConfig& config, const WorldSpec& world, std::uint64_t seed) {
  NegativeConfig neg;
  neg.schedule = make_noise_schedule(config.schedule.steps, config.schedule.beta_min, config.schedule.beta_max);
  neg.noise_step = resolved_noise_step(config);
  neg.decode = config.datagen.decode;
  neg.rules = InjectionRuleSet::for_world(world);
  neg.seed = seed;
  neg.retry_limit = config.datagen.retry_limit;
  neg.mix.clear();
  for (const auto& [name, weight] : config.datagen.mix) {
    if (weight > 0.0) neg.mix[provenance_from_name(name)] = weight;
  }
  if (neg.mix.count(Provenance::error_injected_llm)) {
    if (!config.llm) {
      throw ConfigError("datagen.mix includes error_injected_llm but no llm section is configured");
    }
    neg.llm = config.llm;
  }
  return neg;
}

void stage_gen_world(const RunConfig& config, const Paths& paths, std::ostream& log) {
  const WorldSpec world = generate_world(config.world, stage_seed(config, kWorldSeed));
  save_world(world, paths.world());
  log << "world: vocab " << world.vocab.size() << ", embed_dim " << world.embed_dim << ", favored object '"
      << world.vocab.word(world.object_tokens[static_cast<std::size_t>(world.favored_object)]) << "'\n";
}

void stage_pretrain(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  const WorldSpec world = load_world(paths.world());
  PolicyParams params = init_params(world, config.policy, stage_seed(config, kParamsSeed));
  Rng corpus_rng(stage_seed(config, kCorpusSeed));
  const std::vector<TokenSeq> corpus = sample_pretrain_corpus(world, config.datagen.pretrain_captions, corpus_rng);
  const TrainConfig tc = resolved_train(config.train.pretrain, config, kDpoTrainSeed);
  TrainResult result =
      pretrain_text(std::move(params), corpus, tc, world.vocab.end_token, world.embed_dim, world.query);
  save_params(result.params, paths.pretrained());
  save_trace_csv(result.trace, paths.dir / "trace_pretrain.csv");
  save_trace_json(result.trace, paths.dir / "trace_pretrain.json");
  log << "pretrain: " << corpus.size() << " captions, " << result.trace.points.size() << " trace points\n";
}

void stage_align(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.pretrained());
  const WorldSpec world = load_world(paths.world());
  PolicyParams params = load_params(paths.pretrained());
  Rng data_rng(stage_seed(config, kAlignDataSeed));
  const auto examples = sample_annotated_examples(world, config.datagen.align_examples, data_rng);
  const TrainConfig tc = resolved_train(config.train.align, config, kDpoTrainSeed);
  TrainResult result = align_multimodal(std::move(params), examples, tc, world.vocab.end_token);
  save_params(result.params, paths.aligned());
  save_trace_csv(result.trace, paths.dir / "trace_align.csv");
  save_trace_json(result.trace, paths.dir / "trace_align.json");
  log << "align: " << examples.size() << " examples\n";
}

void report_skips(const DatasetBuildResult& built, std::ostream& log, const char* what) {
  if (!built.skipped.empty()) {
    log << what << ": skipped " << built.skipped.size() << " item(s):\n";
    for (const SkippedItem& s : built.skipped) {
      log << "  item " << s.index << ": " << s.reason << '\n';
    }
  }
}

void stage_gen_data(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.aligned());
  const WorldSpec world = load_world(paths.world());
  const PolicyParams policy = load_params(paths.aligned());

  Rng pos_rng(stage_seed(config, kPositivesSeed));
  const auto positives = sample_annotated_examples(world, config.datagen.preference_examples, pos_rng);
  const NegativeConfig neg = negative_config(config, world, stage_seed(config, kNegativesSeed));
  const DatasetBuildResult built = build_preference_dataset(positives, neg, policy, world);
  save_dataset_jsonl(world, built.tuples, paths.dataset());
  report_skips(built, log, "gen-data");

  Rng held_rng(stage_seed(config, kHeldoutPositivesSeed));
  const auto held_pos = sample_annotated_examples(world, config.eval.heldout_tuples, held_rng);
  const NegativeConfig held_neg = negative_config(config, world, stage_seed(config, kHeldoutNegativesSeed));
  const DatasetBuildResult held = build_preference_dataset(held_pos, held_neg, policy, world);
  save_dataset_jsonl(world, held.tuples, paths.heldout());
  report_skips(held, log, "gen-data (heldout)");

  log << "gen-data: " << built.tuples.size() << " tuples, " << held.tuples.size() << " heldout tuples, t="
      << neg.noise_step << '\n';
}

void stage_train_dpo(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.aligned());
  require(paths.dataset());
  const WorldSpec world = load_world(paths.world());
  PolicyParams params = load_params(paths.aligned());
  const auto dataset = load_dataset_jsonl(world, paths.dataset());
  const TrainConfig tc = resolved_train(config.train.dpo, config, kDpoTrainSeed);
  TrainResult result = train_dpo(std::move(params), dataset, tc, world.vocab.end_token);
  save_params(result.params, paths.dpo());
  save_trace_csv(result.trace, paths.dir / "trace_dpo.csv");
  save_trace_json(result.trace, paths.dir / "trace_dpo.json");
  log << "train-dpo: " << dataset.size() << " tuples, " << result.trace.points.size() << " trace points\n";
}

void stage_train_sft(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.aligned());
  require(paths.dataset());
  const WorldSpec world = load_world(paths.world());
  PolicyParams params = load_params(paths.aligned());
  const auto dataset = load_dataset_jsonl(world, paths.dataset());
  std::vector<AnnotatedExample> positives;
  positives.reserve(dataset.size());
  for (const PreferenceTuple& t : dataset) {
    AnnotatedExample ex;
    ex.image = t.image;
    ex.query = t.query;
    ex.response = t.winner();
    ex.source_tag = "preference_positive";
    positives.push_back(std::move(ex));
  }
  const TrainConfig tc = resolved_train(config.train.sft, config, kSftTrainSeed);
  TrainResult result = train_sft(std::move(params), positives, tc, world.vocab.end_token);
  save_params(result.params, paths.sft());
  save_trace_csv(result.trace, paths.dir / "trace_sft.csv");
  save_trace_json(result.trace, paths.dir / "trace_sft.json");
  log << "train-sft: " << positives.size() << " positives\n";
}

void stage_eval(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.aligned());
  const WorldSpec world = load_world(paths.world());
  const PolicyParams aligned = load_params(paths.aligned());

  std::vector<std::pair<std::string, PolicyParams>> models;
  models.emplace_back("aligned", aligned);
  if (fs::exists(paths.dpo())) models.emplace_back("dpo", load_params(paths.dpo()));
  if (fs::exists(paths.sft())) models.emplace_back("sft", load_params(paths.sft()));

  std::vector<PreferenceTuple> heldout;
  if (fs::exists(paths.heldout())) heldout = load_dataset_jsonl(world, paths.heldout());

  nlohmann::json report;
  report["eval_scenes"] = config.eval.eval_scenes;
  report["heldout_tuples"] = heldout.size();
  std::ofstream csv(paths.dir / "eval_report.csv");
  csv << "model,resp_rate,obj_rate,n_responses,n_mentions,n_halluc_responses,n_halluc_mentions,"
         "preference_accuracy\n";
  for (const auto& [name, params] : models) {
    Rng eval_rng(stage_seed(config, kEvalSeed));
    const auto pairs =
        greedy_eval_pairs(params, world, config.eval.eval_scenes, config.datagen.decode.max_len, eval_rng);
    const HallucinationReport rep = hallucination_rates(world, pairs);
    const double acc = heldout.empty() ? 0.5
                                       : preference_accuracy(params, aligned, heldout, config.train.dpo.eta,
                                                             world.vocab.end_token);
    report["models"][name] = {{"resp_rate", decimal17(rep.resp_rate)},
                              {"obj_rate", decimal17(rep.obj_rate)},
                              {"n_responses", rep.n_responses},
                              {"n_mentions", rep.n_mentions},
                              {"n_halluc_responses", rep.n_halluc_responses},
                              {"n_halluc_mentions", rep.n_halluc_mentions},
                              {"preference_accuracy", decimal17(acc)}};
    csv << name << ',' << decimal17(rep.resp_rate) << ',' << decimal17(rep.obj_rate) << ',' << rep.n_responses
        << ',' << rep.n_mentions << ',' << rep.n_halluc_responses << ',' << rep.n_halluc_mentions << ','
        << decimal17(acc) << '\n';
    log << "eval " << name << ": obj_rate " << rep.obj_rate << ", resp_rate " << rep.resp_rate
        << ", pref_acc " << acc << '\n';
  }
  std::ofstream out(paths.dir / "eval_report.json");
  out << report.dump(2) << '\n';
}

void stage_logit_scan(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.aligned());
  const WorldSpec world = load_world(paths.world());
  const PolicyParams aligned = load_params(paths.aligned());
  const NoiseSchedule schedule =
      make_noise_schedule(config.schedule.steps, config.schedule.beta_min, config.schedule.beta_max);
  const Token favored = world.object_tokens[static_cast<std::size_t>(world.favored_object)];

  Rng rng(stage_seed(config, kScanSeed));
  std::size_t crossovers = 0;
  std::size_t scanned = 0;
  LogitTrajectory first_traj;
  for (std::size_t i = 0; i < config.eval.probe_scenes; ++i) {
    Rng item = rng.child(i);
    // Single-object probe scene whose object differs from the favored one.
    Scene scene;
    scene.count = 1;
    Token obj = favored;
    while (obj == favored) obj = world.object_tokens[item.categorical(world.grounding_weights)];
    const Token att = world.attribute_tokens[item.below(world.attribute_tokens.size())];
    scene.objects.emplace_back(obj, att);
    const LogitTrajectory traj = logit_trajectory(aligned, scene, world, schedule, {obj, favored},
                                                  config.eval.trajectory_samples, item);
    if (scanned == 0) first_traj = traj;
    for (std::size_t ti = 0; ti < traj.steps.size(); ++ti) {
      if (traj.mean_loglik[ti][1] > traj.mean_loglik[ti][0]) {
        ++crossovers;
        break;
      }
    }
    ++scanned;
  }
  save_trajectory_csv(world, first_traj, paths.dir / "logit_scan.csv");
  nlohmann::json summary;
  summary["probe_scenes"] = scanned;
  summary["crossover_scenes"] = crossovers;
  summary["crossover_fraction"] = decimal17(static_cast<double>(crossovers) / static_cast<double>(scanned));
  std::ofstream out(paths.dir / "logit_scan_summary.json");
  out << summary.dump(2) << '\n';
  log << "logit-scan: crossover in " << crossovers << "/" << scanned << " probe scenes\n";
}

void stage_ablate(const RunConfig& config, const Paths& paths, std::ostream& log) {
  require(paths.world());
  require(paths.aligned());
  require(paths.dataset());
  require(paths.heldout());
  const WorldSpec world = load_world(paths.world());

  AblationSetup setup;
  setup.world = &world;
  setup.aligned = load_params(paths.aligned());
  setup.dataset = load_dataset_jsonl(world, paths.dataset());
  setup.heldout = load_dataset_jsonl(world, paths.heldout());
  setup.dpo_config = resolved_train(config.train.dpo, config, kDpoTrainSeed);
  setup.sft_config = resolved_train(config.train.sft, config, kSftTrainSeed);
  setup.eval_scenes = config.eval.eval_scenes;
  setup.eval_max_len = config.datagen.decode.max_len;
  setup.eval_seed = stage_seed(config, kEvalSeed);

  if (config.train.ablation.selfgen_arm) {
    // Rebuild the same positives and draw plain self-generated negatives.
    Rng pos_rng(stage_seed(config, kPositivesSeed));
    const auto positives = sample_annotated_examples(world, config.datagen.preference_examples, pos_rng);
    NegativeConfig neg = negative_config(config, world, stage_seed(config, kSelfgenSeed));
    neg.mix = {{Provenance::self_generated, 1.0}};
    const DatasetBuildResult built = build_preference_dataset(positives, neg, setup.aligned, world);
    report_skips(built, log, "ablate (self-generated)");
    setup.selfgen_dataset = built.tuples;
  }

  const AblationReport report =
      run_ablation(setup, config.train.ablation.sizes, config.train.ablation.n_seeds);
  save_ablation_json(report, paths.dir / "ablation.json");
  save_ablation_csv(report, paths.dir / "ablation.csv");
  for (const AblationCell& cell : report.cells) {
    log << "ablate " << cell.method << " @" << cell.size_fraction << ": obj_rate " << cell.obj_rate_mean
        << " +/- " << cell.obj_rate_std << '\n';
  }
}

}  // namespace

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256_file: cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256_file: digest init failed");
  }
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    if (got > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  hex << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) hex << std::setw(2) << static_cast<int>(digest[i]);
  return hex.str();
}

void write_manifest(const std::filesystem::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name == "manifest.json" || name == "effective_config.json") continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::json entries = nlohmann::json::array();
  for (const fs::path& f : files) {
    entries.push_back({{"name", f.filename().string()},
                       {"sha256", sha256_file(f)},
                       {"bytes", fs::file_size(f)}});
  }
  nlohmann::json manifest;
  manifest["files"] = entries;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("write_manifest: cannot write manifest.json");
  out << manifest.dump(2) << '\n';
}

std::vector<std::string> known_commands() {
  return {"gen-world", "pretrain", "align", "gen-data", "train-dpo",
          "train-sft", "eval",     "ablate", "logit-scan", "all"};
}

int dispatch(const std::string& command, const RunConfig& config, std::ostream& log, bool quiet) {
  std::ostringstream sink;
  std::ostream& out = quiet ? sink : log;
  const Paths paths{fs::path(config.output_dir)};
  try {
    fs::create_directories(paths.dir);
    if (command == "gen-world") {
      stage_gen_world(config, paths, out);
    } else if (command == "pretrain") {
      stage_pretrain(config, paths, out);
    } else if (command == "align") {
      stage_align(config, paths, out);
    } else if (command == "gen-data") {
      stage_gen_data(config, paths, out);
    } else if (command == "train-dpo") {
      stage_train_dpo(config, paths, out);
    } else if (command == "train-sft") {
      stage_train_sft(config, paths, out);
    } else if (command == "eval") {
      stage_eval(config, paths, out);
    } else if (command == "logit-scan") {
      stage_logit_scan(config, paths, out);
    } else if (command == "ablate") {
      stage_ablate(config, paths, out);
    } else if (command == "all") {
      stage_gen_world(config, paths, out);
      stage_pretrain(config, paths, out);
      stage_align(config, paths, out);
      stage_gen_data(config, paths, out);
      stage_train_dpo(config, paths, out);
      stage_train_sft(config, paths, out);
      stage_eval(config, paths, out);
      stage_logit_scan(config, paths, out);
    } else {
      log << "unknown command '" << command << "'\n";
      return 2;
    }
    write_manifest(paths.dir);
    return 0;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MissingArtifactError& e) {
    log << e.what() << '\n';
    return 3;
  } catch (const DivergenceError& e) {
    log << e.what() << '\n';
    return 4;
  } catch (const ChatTimeoutError& e) {
    log << e.what() << '\n';
    return 5;
  } catch (const ChatError& e) {
    log << e.what() << '\n';
    return 5;
  }
}

}  // namespace preflab

#include "preflab/config.hpp"

#include <fstream>
#include <set>

#include "preflab/errors.hpp"

namespace preflab {

namespace {

// Typed, defaulted access with ConfigError diagnostics naming the key.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected a JSON object");
  }

  void check_keys(const std::set<std::string>& known) const {
    for (const auto& [key, value] : j_.items()) {
      if (!known.count(key)) {
        throw ConfigError(path_ + ": unknown key '" + key + "'");
      }
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, const T& fallback, const char* type_name) const {
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": expected " + type_name);
    }
  }

  double number(const std::string& key, double fallback) const {
    if (!j_.contains(key)) return fallback;
    if (!j_.at(key).is_number()) throw ConfigError(path_ + "." + key + ": expected a number");
    return j_.at(key).get<double>();
  }

  int integer(const std::string& key, int fallback) const {
    if (!j_.contains(key)) return fallback;
    if (!j_.at(key).is_number_integer()) throw ConfigError(path_ + "." + key + ": expected an integer");
    return j_.at(key).get<int>();
  }

  std::uint64_t uinteger(const std::string& key, std::uint64_t fallback) const {
    if (!j_.contains(key)) return fallback;
    if (!j_.at(key).is_number_integer() && !j_.at(key).is_number_unsigned()) {
      throw ConfigError(path_ + "." + key + ": expected an integer");
    }
    return j_.at(key).get<std::uint64_t>();
  }

  std::string text(const std::string& key, const std::string& fallback) const {
    return get<std::string>(key, fallback, "a string");
  }

  bool boolean(const std::string& key, bool fallback) const { return get<bool>(key, fallback, "a boolean"); }

  const nlohmann::json& raw() const { return j_; }
  const std::string& path() const { return path_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

TrainConfig parse_train(const nlohmann::json& j, const std::string& path, const TrainConfig& defaults) {
  Section s(j, path);
  s.check_keys({"learning_rate", "epochs", "batch_size", "eta", "seed", "optimizer", "adam_beta1", "adam_beta2",
                "adam_eps", "log_every", "probe_size", "trainable"});
  TrainConfig c = defaults;
  c.learning_rate = s.number("learning_rate", defaults.learning_rate);
  c.epochs = s.integer("epochs", defaults.epochs);
  c.batch_size = s.integer("batch_size", defaults.batch_size);
  c.eta = s.number("eta", defaults.eta);
  c.seed = s.uinteger("seed", defaults.seed);
  const std::string opt = s.text("optimizer", defaults.optimizer == TrainConfig::Optimizer::adam ? "adam" : "sgd");
  if (opt == "adam") {
    c.optimizer = TrainConfig::Optimizer::adam;
  } else if (opt == "sgd") {
    c.optimizer = TrainConfig::Optimizer::sgd;
  } else {
    throw ConfigError(path + ".optimizer: expected \"adam\" or \"sgd\"");
  }
  c.adam.beta1 = s.number("adam_beta1", defaults.adam.beta1);
  c.adam.beta2 = s.number("adam_beta2", defaults.adam.beta2);
  c.adam.eps = s.number("adam_eps", defaults.adam.eps);
  c.log_every = s.integer("log_every", defaults.log_every);
  c.probe_size = s.integer("probe_size", defaults.probe_size);
  const std::string trainable =
      s.text("trainable", defaults.trainable == TrainConfig::Trainable::image_proj ? "image_proj" : "all");
  if (trainable == "all") {
    c.trainable = TrainConfig::Trainable::all;
  } else if (trainable == "image_proj") {
    c.trainable = TrainConfig::Trainable::image_proj;
  } else {
    throw ConfigError(path + ".trainable: expected \"all\" or \"image_proj\"");
  }
  if (!(c.learning_rate >= 0.0)) throw ConfigError(path + ".learning_rate: must be nonnegative");
  if (c.epochs < 0) throw ConfigError(path + ".epochs: must be nonnegative");
  if (c.batch_size < 1) throw ConfigError(path + ".batch_size: must be >= 1");
  if (!(c.eta > 0.0)) throw ConfigError(path + ".eta: must be positive");
  if (c.log_every < 1) throw ConfigError(path + ".log_every: must be >= 1");
  return c;
}

nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"eta", c.eta},
          {"seed", c.seed},
          {"optimizer", c.optimizer == TrainConfig::Optimizer::adam ? "adam" : "sgd"},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"log_every", c.log_every},
          {"probe_size", c.probe_size},
          {"trainable", c.trainable == TrainConfig::Trainable::image_proj ? "image_proj" : "all"}};
}

// Stage-specific training defaults for the toy model.
TrainConfig default_pretrain() {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.epochs = 2;
  c.batch_size = 64;
  return c;
}
TrainConfig default_align() {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.epochs = 4;
  c.batch_size = 32;
  c.trainable = TrainConfig::Trainable::image_proj;
  return c;
}
TrainConfig default_dpo() {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.epochs = 2;
  c.batch_size = 64;
  c.eta = 0.1;
  return c;
}
TrainConfig default_sft() {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.epochs = 2;
  c.batch_size = 64;
  return c;
}

}  // namespace

RunConfig config_from_json(const nlohmann::json& j) {
  Section root(j, "config");
  root.check_keys({"master_seed", "output_dir", "world", "policy", "schedule", "datagen", "train", "eval", "llm"});
  if (!root.has("master_seed")) throw ConfigError("config.master_seed: required");

  RunConfig c;
  c.master_seed = root.uinteger("master_seed", 0);
  c.output_dir = root.text("output_dir", c.output_dir);

  if (root.has("world")) {
    Section s(j.at("world"), "config.world");
    s.check_keys({"objects", "attributes", "embed_dim", "count_min", "count_max", "encoder_noise_std",
                  "favored_weight", "favored_object", "tv_floor", "grounding_weights"});
    c.world.n_objects = s.integer("objects", c.world.n_objects);
    c.world.n_attributes = s.integer("attributes", c.world.n_attributes);
    c.world.embed_dim = s.integer("embed_dim", c.world.embed_dim);
    c.world.count_min = s.integer("count_min", c.world.count_min);
    c.world.count_max = s.integer("count_max", c.world.count_max);
    c.world.encoder_noise_std = s.number("encoder_noise_std", c.world.encoder_noise_std);
    c.world.favored_weight = s.number("favored_weight", c.world.favored_weight);
    c.world.favored_object = s.integer("favored_object", c.world.favored_object);
    c.world.tv_floor = s.number("tv_floor", c.world.tv_floor);
    c.world.grounding_weights =
        s.get<std::vector<double>>("grounding_weights", c.world.grounding_weights, "an array of numbers");
  }

  if (root.has("policy")) {
    Section s(j.at("policy"), "config.policy");
    s.check_keys({"hidden_dim", "init", "tanh_hidden"});
    c.policy.hidden_dim = s.integer("hidden_dim", c.policy.hidden_dim);
    const std::string init = s.text("init", "scaled-normal");
    if (init == "zero") {
      c.policy.init = PolicyConfig::Init::zero;
    } else if (init == "scaled-normal") {
      c.policy.init = PolicyConfig::Init::scaled_normal;
    } else {
      throw ConfigError("config.policy.init: expected \"zero\" or \"scaled-normal\"");
    }
    c.policy.tanh_hidden = s.boolean("tanh_hidden", c.policy.tanh_hidden);
  }

  if (root.has("schedule")) {
    Section s(j.at("schedule"), "config.schedule");
    s.check_keys({"steps", "beta_min", "beta_max"});
    c.schedule.steps = s.integer("steps", c.schedule.steps);
    c.schedule.beta_min = s.number("beta_min", c.schedule.beta_min);
    c.schedule.beta_max = s.number("beta_max", c.schedule.beta_max);
  }

  if (root.has("datagen")) {
    Section s(j.at("datagen"), "config.datagen");
    s.check_keys({"pretrain_captions", "align_examples", "preference_examples", "mix", "noise_step", "decode",
                  "retry_limit"});
    c.datagen.pretrain_captions =
        static_cast<std::size_t>(s.uinteger("pretrain_captions", c.datagen.pretrain_captions));
    c.datagen.align_examples = static_cast<std::size_t>(s.uinteger("align_examples", c.datagen.align_examples));
    c.datagen.preference_examples =
        static_cast<std::size_t>(s.uinteger("preference_examples", c.datagen.preference_examples));
    if (s.has("mix")) {
      Section m(j.at("datagen").at("mix"), "config.datagen.mix");
      m.check_keys({"image_weakened", "error_injected_rules", "error_injected_llm", "self_generated"});
      c.datagen.mix.clear();
      for (const auto& [key, value] : m.raw().items()) {
        if (!value.is_number()) throw ConfigError("config.datagen.mix." + key + ": expected a number");
        c.datagen.mix[key] = value.get<double>();
      }
      if (c.datagen.mix.empty()) throw ConfigError("config.datagen.mix: must name at least one strategy");
    }
    c.datagen.noise_step = s.integer("noise_step", c.datagen.noise_step);
    if (s.has("decode")) {
      Section d(j.at("datagen").at("decode"), "config.datagen.decode");
      d.check_keys({"max_len", "temperature", "mode"});
      c.datagen.decode.max_len = d.integer("max_len", c.datagen.decode.max_len);
      c.datagen.decode.temperature = d.number("temperature", c.datagen.decode.temperature);
      const std::string mode = d.text("mode", "sample");
      if (mode == "greedy") {
        c.datagen.decode.mode = DecodeConfig::Mode::greedy;
      } else if (mode == "sample") {
        c.datagen.decode.mode = DecodeConfig::Mode::sample;
      } else {
        throw ConfigError("config.datagen.decode.mode: expected \"greedy\" or \"sample\"");
      }
    }
    c.datagen.retry_limit = s.integer("retry_limit", c.datagen.retry_limit);
  }

  c.train.pretrain = default_pretrain();
  c.train.align = default_align();
  c.train.dpo = default_dpo();
  c.train.sft = default_sft();
  if (root.has("train")) {
    Section s(j.at("train"), "config.train");
    s.check_keys({"pretrain", "align", "dpo", "sft", "ablation"});
    if (s.has("pretrain")) c.train.pretrain = parse_train(j.at("train").at("pretrain"), "config.train.pretrain",
                                                          c.train.pretrain);
    if (s.has("align")) c.train.align = parse_train(j.at("train").at("align"), "config.train.align", c.train.align);
    if (s.has("dpo")) c.train.dpo = parse_train(j.at("train").at("dpo"), "config.train.dpo", c.train.dpo);
    if (s.has("sft")) c.train.sft = parse_train(j.at("train").at("sft"), "config.train.sft", c.train.sft);
    if (s.has("ablation")) {
      Section a(j.at("train").at("ablation"), "config.train.ablation");
      a.check_keys({"sizes", "n_seeds", "selfgen_arm"});
      c.train.ablation.sizes =
          a.get<std::vector<double>>("sizes", c.train.ablation.sizes, "an array of numbers");
      c.train.ablation.n_seeds = a.integer("n_seeds", c.train.ablation.n_seeds);
      c.train.ablation.selfgen_arm = a.boolean("selfgen_arm", c.train.ablation.selfgen_arm);
      for (double f : c.train.ablation.sizes) {
        if (!(f > 0.0) || f > 1.0) throw ConfigError("config.train.ablation.sizes: fractions must be in (0, 1]");
      }
      if (c.train.ablation.n_seeds < 1) throw ConfigError("config.train.ablation.n_seeds: must be >= 1");
    }
  }

  if (root.has("eval")) {
    Section s(j.at("eval"), "config.eval");
    s.check_keys({"eval_scenes", "heldout_tuples", "probe_scenes", "trajectory_samples"});
    c.eval.eval_scenes = static_cast<std::size_t>(s.uinteger("eval_scenes", c.eval.eval_scenes));
    c.eval.heldout_tuples = static_cast<std::size_t>(s.uinteger("heldout_tuples", c.eval.heldout_tuples));
    c.eval.probe_scenes = static_cast<std::size_t>(s.uinteger("probe_scenes", c.eval.probe_scenes));
    c.eval.trajectory_samples = s.integer("trajectory_samples", c.eval.trajectory_samples);
  }

  if (root.has("llm")) {
    Section s(j.at("llm"), "config.llm");
    s.check_keys({"base_url", "model_name", "api_key_env", "timeout_seconds", "max_retries", "max_concurrency",
                  "backoff_base_seconds", "temperature"});
    EndpointConfig e;
    if (!s.has("base_url")) throw ConfigError("config.llm.base_url: required when llm section is present");
    e.base_url = s.text("base_url", "");
    e.model_name = s.text("model_name", e.model_name);
    e.api_key_env = s.text("api_key_env", e.api_key_env);
    e.timeout_seconds = s.number("timeout_seconds", e.timeout_seconds);
    e.max_retries = s.integer("max_retries", e.max_retries);
    e.max_concurrency = s.integer("max_concurrency", e.max_concurrency);
    e.backoff_base_seconds = s.number("backoff_base_seconds", e.backoff_base_seconds);
    e.temperature = s.number("temperature", e.temperature);
    if (!(e.timeout_seconds > 0.0)) throw ConfigError("config.llm.timeout_seconds: must be positive");
    if (e.max_retries < 0) throw ConfigError("config.llm.max_retries: must be >= 0");
    if (e.max_concurrency < 1) throw ConfigError("config.llm.max_concurrency: must be >= 1");
    c.llm = std::move(e);
  }

  // Cross-field checks that do not need the world to be built yet.
  if (c.datagen.noise_step != -1 && (c.datagen.noise_step < 0 || c.datagen.noise_step > c.schedule.steps)) {
    throw ConfigError("config.datagen.noise_step: must be -1 (auto) or within [0, schedule.steps]");
  }
  return c;
}

nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["master_seed"] = c.master_seed;
  j["output_dir"] = c.output_dir;
  j["world"] = {{"objects", c.world.n_objects},
                {"attributes", c.world.n_attributes},
                {"embed_dim", c.world.embed_dim},
                {"count_min", c.world.count_min},
                {"count_max", c.world.count_max},
                {"encoder_noise_std", c.world.encoder_noise_std},
                {"favored_weight", c.world.favored_weight},
                {"favored_object", c.world.favored_object},
                {"tv_floor", c.world.tv_floor},
                {"grounding_weights", c.world.grounding_weights}};
  j["policy"] = {{"hidden_dim", c.policy.hidden_dim},
                 {"init", c.policy.init == PolicyConfig::Init::zero ? "zero" : "scaled-normal"},
                 {"tanh_hidden", c.policy.tanh_hidden}};
  j["schedule"] = {{"steps", c.schedule.steps}, {"beta_min", c.schedule.beta_min}, {"beta_max", c.schedule.beta_max}};
  nlohmann::json mix = nlohmann::json::object();
  for (const auto& [k, v] : c.datagen.mix) mix[k] = v;
  j["datagen"] = {{"pretrain_captions", c.datagen.pretrain_captions},
                  {"align_examples", c.datagen.align_examples},
                  {"preference_examples", c.datagen.preference_examples},
                  {"mix", mix},
                  {"noise_step", c.datagen.noise_step},
                  {"decode",
                   {{"max_len", c.datagen.decode.max_len},
                    {"temperature", c.datagen.decode.temperature},
                    {"mode", c.datagen.decode.mode == DecodeConfig::Mode::greedy ? "greedy" : "sample"}}},
                  {"retry_limit", c.datagen.retry_limit}};
  j["train"] = {{"pretrain", train_to_json(c.train.pretrain)},
                {"align", train_to_json(c.train.align)},
                {"dpo", train_to_json(c.train.dpo)},
                {"sft", train_to_json(c.train.sft)},
                {"ablation",
                 {{"sizes", c.train.ablation.sizes},
                  {"n_seeds", c.train.ablation.n_seeds},
                  {"selfgen_arm", c.train.ablation.selfgen_arm}}}};
  j["eval"] = {{"eval_scenes", c.eval.eval_scenes},
               {"heldout_tuples", c.eval.heldout_tuples},
               {"probe_scenes", c.eval.probe_scenes},
               {"trajectory_samples", c.eval.trajectory_samples}};
  if (c.llm) {
    j["llm"] = {{"base_url", c.llm->base_url},
                {"model_name", c.llm->model_name},
                {"api_key_env", c.llm->api_key_env},
                {"timeout_seconds", c.llm->timeout_seconds},
                {"max_retries", c.llm->max_retries},
                {"max_concurrency", c.llm->max_concurrency},
                {"backoff_base_seconds", c.llm->backoff_base_seconds},
                {"temperature", c.llm->temperature}};
  }
  return j;
}

RunConfig parse_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig config = config_from_json(j);
  if (seed_override) config.master_seed = *seed_override;

  std::filesystem::create_directories(config.output_dir);
  const std::filesystem::path echo = std::filesystem::path(config.output_dir) / "effective_config.json";
  std::ofstream out(echo);
  if (!out) throw ConfigError("cannot write " + echo.string());
  out << config_to_json(config).dump(2) << '\n';
  return config;
}

}  // namespace preflab

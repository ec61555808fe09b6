#include "preflab/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "preflab/numeric_io.hpp"
#include "preflab/parallel.hpp"

namespace preflab {

namespace {

const char* kObjectWords[] = {"person", "bear",  "dog",   "cat",  "car",   "tree",
                              "bird",   "horse", "chair", "boat", "house", "sheep",
                              "train",  "truck", "plane", "cow"};
const char* kAttributeWords[] = {"red",   "blue", "brown", "black", "white", "green",
                                 "small", "large", "yellow", "gray", "round", "old"};
const char* kCountWords[] = {"one", "two", "three", "four", "five",
                             "six", "seven", "eight", "nine", "ten"};
const char* kEndWord = "<end>";

constexpr int kMaxObjects = static_cast<int>(sizeof(kObjectWords) / sizeof(kObjectWords[0]));
constexpr int kMaxAttributes = static_cast<int>(sizeof(kAttributeWords) / sizeof(kAttributeWords[0]));
constexpr int kMaxCount = static_cast<int>(sizeof(kCountWords) / sizeof(kCountWords[0]));

Token add_word(Vocab& v, const std::string& w) {
  if (v.index.count(w)) throw std::logic_error("duplicate vocab word: " + w);
  const Token id = static_cast<Token>(v.words.size());
  v.words.push_back(w);
  v.index.emplace(w, id);
  return id;
}

// Multi-hot scene features: object counts, attribute counts, count one-hot.
std::vector<double> scene_features(const WorldSpec& world, const Scene& scene) {
  std::vector<double> x(static_cast<std::size_t>(world.feature_dim), 0.0);
  const int n_obj = static_cast<int>(world.object_tokens.size());
  const int n_att = static_cast<int>(world.attribute_tokens.size());
  for (const auto& [obj, att] : scene.objects) {
    const auto oit = std::find(world.object_tokens.begin(), world.object_tokens.end(), obj);
    const auto ait = std::find(world.attribute_tokens.begin(), world.attribute_tokens.end(), att);
    if (oit == world.object_tokens.end() || ait == world.attribute_tokens.end()) {
      throw std::invalid_argument("scene token outside world vocabularies");
    }
    x[static_cast<std::size_t>(oit - world.object_tokens.begin())] += 1.0;
    x[static_cast<std::size_t>(n_obj + (ait - world.attribute_tokens.begin()))] += 1.0;
  }
  if (scene.count < 1 || scene.count > world.count_max ||
      scene.count != static_cast<int>(scene.objects.size())) {
    throw std::invalid_argument("scene count inconsistent with object list or count range");
  }
  x[static_cast<std::size_t>(n_obj + n_att + scene.count - 1)] = 1.0;
  return x;
}

}  // namespace

bool WorldSpec::is_object(Token t) const {
  return std::find(object_tokens.begin(), object_tokens.end(), t) != object_tokens.end();
}

WorldSpec generate_world(const WorldConfig& config, std::uint64_t seed) {
  if (config.n_objects < 2) {
    throw std::invalid_argument("generate_world: need at least 2 object tokens, got " +
                                std::to_string(config.n_objects));
  }
  if (config.n_objects > kMaxObjects || config.n_attributes < 1 || config.n_attributes > kMaxAttributes) {
    throw std::invalid_argument("generate_world: vocabulary size out of range");
  }
  if (config.embed_dim < 1) throw std::invalid_argument("generate_world: embed_dim must be >= 1");
  if (config.count_min < 1 || config.count_min > config.count_max || config.count_max > kMaxCount) {
    throw std::invalid_argument("generate_world: bad count range");
  }
  if (config.favored_object < 0 || config.favored_object >= config.n_objects) {
    throw std::invalid_argument("generate_world: favored_object out of range");
  }

  WorldSpec world;
  world.seed = seed;
  world.count_min = config.count_min;
  world.count_max = config.count_max;
  world.embed_dim = config.embed_dim;
  world.encoder_noise_std = config.encoder_noise_std;
  world.favored_object = config.favored_object;

  for (int i = 0; i < config.n_objects; ++i) world.object_tokens.push_back(add_word(world.vocab, kObjectWords[i]));
  for (int i = 0; i < config.n_attributes; ++i) {
    world.attribute_tokens.push_back(add_word(world.vocab, kAttributeWords[i]));
  }
  // Keep at least three count words so count injection always has substitutes.
  const int n_counts = std::max(config.count_max, std::min(3, kMaxCount));
  for (int i = 0; i < n_counts; ++i) world.count_tokens.push_back(add_word(world.vocab, kCountWords[i]));
  add_word(world.vocab, "there");
  add_word(world.vocab, "are");
  add_word(world.vocab, "and");
  const Token q_describe = add_word(world.vocab, "describe");
  const Token q_the = add_word(world.vocab, "the");
  const Token q_image = add_word(world.vocab, "image");
  world.vocab.end_token = add_word(world.vocab, kEndWord);
  world.query = {q_describe, q_the, q_image};

  // Biased pretraining marginal: favored object holds `favored_weight`, the
  // rest share the remainder evenly.
  const int v = config.n_objects;
  const double rest = (1.0 - config.favored_weight) / static_cast<double>(v - 1);
  if (!(config.favored_weight > 0.0 && config.favored_weight < 1.0) || config.favored_weight < 2.0 * rest) {
    throw std::invalid_argument("generate_world: favored prior weight must be in (0,1) and >= 2x any other");
  }
  world.prior_weights.assign(static_cast<std::size_t>(v), rest);
  world.prior_weights[static_cast<std::size_t>(config.favored_object)] = config.favored_weight;
  double prior_sum = 0.0;
  for (double w : world.prior_weights) prior_sum += w;
  for (double& w : world.prior_weights) w /= prior_sum;

  if (config.grounding_weights.empty()) {
    world.grounding_weights.assign(static_cast<std::size_t>(v), 1.0 / static_cast<double>(v));
  } else {
    if (static_cast<int>(config.grounding_weights.size()) != v) {
      throw std::invalid_argument("generate_world: grounding_weights size must equal n_objects");
    }
    double s = 0.0;
    for (double w : config.grounding_weights) {
      if (w < 0.0) throw std::invalid_argument("generate_world: negative grounding weight");
      s += w;
    }
    if (!(s > 0.0)) throw std::invalid_argument("generate_world: grounding weights sum to zero");
    world.grounding_weights = config.grounding_weights;
    for (double& w : world.grounding_weights) w /= s;
  }

  const double tv = total_variation(world.prior_weights, world.grounding_weights);
  if (tv < config.tv_floor) {
    throw std::invalid_argument("generate_world: prior/grounding total variation " + decimal17(tv) +
                                " below floor " + decimal17(config.tv_floor));
  }

  world.feature_dim = config.n_objects + config.n_attributes + config.count_max;
  Rng rng(seed);
  world.encoder.assign(static_cast<std::size_t>(world.embed_dim) * world.feature_dim, 0.0);
  const auto set_column = [&](int f, const std::vector<double>& v) {
    for (int d = 0; d < world.embed_dim; ++d) {
      world.encoder[static_cast<std::size_t>(d) * world.feature_dim + f] = v[static_cast<std::size_t>(d)];
    }
  };

  if (config.n_objects + 2 <= config.embed_dim) {
    // Structured embedding: objects occupy mutually orthogonal directions of a
    // seeded random orthonormal basis, attributes and counts share a weaker
    // two-dimensional plane. Mirrors how distinct visual concepts spread out
    // in a pooled encoder embedding while keeping D small.
    const int D = world.embed_dim;
    std::vector<std::vector<double>> basis;
    for (int k = 0; k < config.n_objects + 2; ++k) {
      std::vector<double> v(static_cast<std::size_t>(D));
      while (true) {
        for (double& x : v) x = rng.normal();
        for (const auto& b : basis) {
          double dot = 0.0;
          for (int d = 0; d < D; ++d) dot += v[static_cast<std::size_t>(d)] * b[static_cast<std::size_t>(d)];
          for (int d = 0; d < D; ++d) v[static_cast<std::size_t>(d)] -= dot * b[static_cast<std::size_t>(d)];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        if (norm > 1e-6) {
          norm = std::sqrt(norm);
          for (double& x : v) x /= norm;
          break;
        }
      }
      basis.push_back(std::move(v));
    }
    for (int i = 0; i < config.n_objects; ++i) set_column(i, basis[static_cast<std::size_t>(i)]);
    const auto& u = basis[static_cast<std::size_t>(config.n_objects)];
    const auto& w = basis[static_cast<std::size_t>(config.n_objects + 1)];
    const double two_pi = 6.283185307179586476925286766559;
    const double att_phase = two_pi * rng.uniform();
    for (int j = 0; j < config.n_attributes; ++j) {
      const double angle = att_phase + two_pi * j / config.n_attributes;
      std::vector<double> v(static_cast<std::size_t>(D));
      for (int d = 0; d < D; ++d) {
        v[static_cast<std::size_t>(d)] = 0.5 * (std::cos(angle) * u[static_cast<std::size_t>(d)] +
                                                std::sin(angle) * w[static_cast<std::size_t>(d)]);
      }
      set_column(config.n_objects + j, v);
    }
    const double cnt_phase = two_pi * rng.uniform();
    for (int k = 0; k < config.count_max; ++k) {
      const double angle = cnt_phase + two_pi * k / config.count_max;
      std::vector<double> v(static_cast<std::size_t>(D));
      for (int d = 0; d < D; ++d) {
        v[static_cast<std::size_t>(d)] = 0.35 * (std::cos(angle) * u[static_cast<std::size_t>(d)] +
                                                 std::sin(angle) * w[static_cast<std::size_t>(d)]);
      }
      set_column(config.n_objects + config.n_attributes + k, v);
    }
  } else {
    // Not enough embedding room for the structured layout; fall back to a
    // dense random map.
    const double scale = 1.0 / std::sqrt(static_cast<double>(world.feature_dim));
    for (double& e : world.encoder) e = scale * rng.normal();
  }

  return world;
}

Scene sample_scene(const WorldSpec& world, Rng& rng) {
  Scene scene;
  const int span = world.count_max - world.count_min + 1;
  scene.count = world.count_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
  scene.objects.reserve(static_cast<std::size_t>(scene.count));
  for (int i = 0; i < scene.count; ++i) {
    const Token obj = world.object_tokens[rng.categorical(world.grounding_weights)];
    const Token att = world.attribute_tokens[rng.below(world.attribute_tokens.size())];
    scene.objects.emplace_back(obj, att);
  }
  return scene;
}

ImageEmbedding encode_image(const WorldSpec& world, const Scene& scene, Rng& rng) {
  const std::vector<double> x = scene_features(world, scene);
  ImageEmbedding out;
  out.values.assign(static_cast<std::size_t>(world.embed_dim), 0.0);
  for (int d = 0; d < world.embed_dim; ++d) {
    double acc = 0.0;
    const double* row = world.encoder.data() + static_cast<std::size_t>(d) * world.feature_dim;
    for (int f = 0; f < world.feature_dim; ++f) acc += row[f] * x[static_cast<std::size_t>(f)];
    out.values[static_cast<std::size_t>(d)] = acc;
  }
  if (world.encoder_noise_std > 0.0) {
    for (double& v : out.values) v += world.encoder_noise_std * rng.normal();
  }
  return out;
}

TokenSeq canonical_caption(const WorldSpec& world, const Scene& scene) {
  if (scene.objects.empty() || scene.count != static_cast<int>(scene.objects.size())) {
    throw std::invalid_argument("canonical_caption: scene must list count objects");
  }
  if (scene.count > static_cast<int>(world.count_tokens.size())) {
    throw std::invalid_argument("canonical_caption: no count word for count " + std::to_string(scene.count));
  }
  TokenSeq seq;
  seq.push_back(world.vocab.lookup("there"));
  seq.push_back(world.vocab.lookup("are"));
  seq.push_back(world.count_tokens[static_cast<std::size_t>(scene.count - 1)]);
  bool first = true;
  for (const auto& [obj, att] : scene.objects) {
    if (!first) seq.push_back(world.vocab.lookup("and"));
    first = false;
    seq.push_back(att);
    seq.push_back(obj);
  }
  seq.push_back(world.vocab.end_token);
  return seq;
}

std::optional<Scene> parse_caption(const WorldSpec& world, const TokenSeq& caption) {
  const Token t_there = world.vocab.lookup("there");
  const Token t_are = world.vocab.lookup("are");
  const Token t_and = world.vocab.lookup("and");
  std::size_t i = 0;
  const auto next = [&]() -> Token { return i < caption.size() ? caption[i++] : -1; };
  if (next() != t_there || next() != t_are) return std::nullopt;
  const Token count_word = next();
  if (std::find(world.count_tokens.begin(), world.count_tokens.end(), count_word) == world.count_tokens.end()) {
    return std::nullopt;
  }
  Scene scene;
  while (true) {
    const Token att = next();
    const Token obj = next();
    if (std::find(world.attribute_tokens.begin(), world.attribute_tokens.end(), att) ==
            world.attribute_tokens.end() ||
        !world.is_object(obj)) {
      return std::nullopt;
    }
    scene.objects.emplace_back(obj, att);
    const Token sep = next();
    if (sep == world.vocab.end_token) break;
    if (sep != t_and) return std::nullopt;
  }
  if (i != caption.size()) return std::nullopt;
  scene.count = static_cast<int>(scene.objects.size());
  return scene;
}

std::vector<TokenSeq> sample_pretrain_corpus(const WorldSpec& world, std::size_t n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_pretrain_corpus: n must be >= 1");
  // One draw from the parent keeps repeated calls on the same stream distinct;
  // items then fan out over independent derived streams.
  const Rng base(rng.next_u64());
  std::vector<TokenSeq> corpus(n);
  parallel_for(n, Exec::parallel, [&](std::size_t i) {
    Rng item = base.child(i);
    Scene scene;
    const int span = world.count_max - world.count_min + 1;
    scene.count = world.count_min + static_cast<int>(item.below(static_cast<std::uint64_t>(span)));
    for (int k = 0; k < scene.count; ++k) {
      const Token obj = world.object_tokens[item.categorical(world.prior_weights)];
      const Token att = world.attribute_tokens[item.below(world.attribute_tokens.size())];
      scene.objects.emplace_back(obj, att);
    }
    corpus[i] = canonical_caption(world, scene);
  });
  return corpus;
}

std::vector<AnnotatedExample> sample_annotated_examples(const WorldSpec& world, std::size_t n, Rng& rng) {
  const Rng base(rng.next_u64());
  std::vector<AnnotatedExample> out(n);
  parallel_for(n, Exec::parallel, [&](std::size_t i) {
    Rng item = base.child(i);
    AnnotatedExample ex;
    ex.scene = sample_scene(world, item);
    ex.image = encode_image(world, *ex.scene, item);
    ex.query = world.query;
    ex.response = canonical_caption(world, *ex.scene);
    ex.source_tag = "synthetic";
    out[i] = std::move(ex);
  });
  return out;
}

TokenSeq tokenize(const WorldSpec& world, const std::string& text) {
  TokenSeq seq;
  std::istringstream stream(text);
  std::string word;
  while (stream >> word) {
    const Token t = world.vocab.lookup(word);
    if (t < 0) throw std::invalid_argument("out-of-vocabulary token: '" + word + "'");
    seq.push_back(t);
  }
  return seq;
}

std::string detokenize(const WorldSpec& world, const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += world.vocab.word(tokens[i]);
  }
  return out;
}

IngestResult ingest_jsonl(const WorldSpec& world, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ingest_jsonl: cannot open " + path.string());
  IngestResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) + ": malformed JSON: " + e.what()});
      continue;
    }
    if (j.contains("image_path")) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) +
                                            ": image_path is not supported, provide image_embedding "
                                            "(array of " +
                                            std::to_string(world.embed_dim) + " reals)"});
      continue;
    }
    if (!j.contains("image_embedding") || !j["image_embedding"].is_array()) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) + ": missing image_embedding array"});
      continue;
    }
    if (static_cast<int>(j["image_embedding"].size()) != world.embed_dim) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) + ": image_embedding has dimension " +
                                            std::to_string(j["image_embedding"].size()) + ", expected D=" +
                                            std::to_string(world.embed_dim)});
      continue;
    }
    if (!j.contains("query") || !j["query"].is_string() || !j.contains("response") || !j["response"].is_string()) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) + ": query and response must be strings"});
      continue;
    }
    AnnotatedExample ex;
    try {
      ex.image.values = j["image_embedding"].get<std::vector<double>>();
      ex.query = tokenize(world, j["query"].get<std::string>());
      ex.response = tokenize(world, j["response"].get<std::string>());
    } catch (const std::exception& e) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) + ": " + e.what()});
      continue;
    }
    if (ex.response.empty()) {
      result.issues.push_back({line_no, "line " + std::to_string(line_no) + ": empty response"});
      continue;
    }
    if (ex.response.back() != world.vocab.end_token) ex.response.push_back(world.vocab.end_token);
    ex.source_tag = j.value("source", std::string("unknown"));
    result.examples.push_back(std::move(ex));
  }
  return result;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

void save_world(const WorldSpec& world, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["seed"] = world.seed;
  j["vocab"] = world.vocab.words;
  j["end_token"] = world.vocab.end_token;
  j["object_tokens"] = world.object_tokens;
  j["attribute_tokens"] = world.attribute_tokens;
  j["count_tokens"] = world.count_tokens;
  j["count_min"] = world.count_min;
  j["count_max"] = world.count_max;
  j["prior_weights"] = decimal17_vec(world.prior_weights);
  j["grounding_weights"] = decimal17_vec(world.grounding_weights);
  j["encoder"] = decimal17_vec(world.encoder);
  j["encoder_noise_std"] = decimal17(world.encoder_noise_std);
  j["embed_dim"] = world.embed_dim;
  j["feature_dim"] = world.feature_dim;
  j["favored_object"] = world.favored_object;
  j["query"] = world.query;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_world: cannot write " + path.string());
  out << j.dump(2) << '\n';
}

WorldSpec load_world(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_world: cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  WorldSpec world;
  world.seed = j.at("seed").get<std::uint64_t>();
  world.vocab.words = j.at("vocab").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < world.vocab.words.size(); ++i) {
    world.vocab.index.emplace(world.vocab.words[i], static_cast<Token>(i));
  }
  world.vocab.end_token = j.at("end_token").get<Token>();
  world.object_tokens = j.at("object_tokens").get<std::vector<Token>>();
  world.attribute_tokens = j.at("attribute_tokens").get<std::vector<Token>>();
  world.count_tokens = j.at("count_tokens").get<std::vector<Token>>();
  world.count_min = j.at("count_min").get<int>();
  world.count_max = j.at("count_max").get<int>();
  world.prior_weights = parse_decimal_vec(j.at("prior_weights").get<std::vector<std::string>>());
  world.grounding_weights = parse_decimal_vec(j.at("grounding_weights").get<std::vector<std::string>>());
  world.encoder = parse_decimal_vec(j.at("encoder").get<std::vector<std::string>>());
  world.encoder_noise_std = parse_decimal(j.at("encoder_noise_std").get<std::string>());
  world.embed_dim = j.at("embed_dim").get<int>();
  world.feature_dim = j.at("feature_dim").get<int>();
  world.favored_object = j.at("favored_object").get<int>();
  world.query = j.at("query").get<TokenSeq>();
  return world;
}

}  // namespace preflab

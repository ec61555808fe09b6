#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "preflab/rng.hpp"

namespace preflab {

using Token = int;
using TokenSeq = std::vector<Token>;

// Closed vocabulary; a token is its index into `words`.
struct Vocab {
  std::vector<std::string> words;
  std::unordered_map<std::string, Token> index;
  Token end_token = -1;

  int size() const { return static_cast<int>(words.size()); }
  const std::string& word(Token t) const { return words.at(static_cast<std::size_t>(t)); }
  // Returns -1 when the word is not in the vocabulary.
  Token lookup(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? -1 : it->second;
  }
};

struct WorldConfig {
  int n_objects = 6;
  int n_attributes = 4;
  int embed_dim = 8;
  int count_min = 1;
  int count_max = 1;
  double encoder_noise_std = 0.05;
  double favored_weight = 0.5;   // prior mass of the favored object
  int favored_object = 0;        // index into the object list
  double tv_floor = 0.2;         // required prior/grounding disagreement
  std::vector<double> grounding_weights;  // empty -> uniform
};

// Synthetic multimodal world: vocabularies, the biased pretraining marginal
// over objects, the grounding distribution actual scenes are drawn from, and
// a fixed linear image encoder.
struct WorldSpec {
  Vocab vocab;
  std::vector<Token> object_tokens;
  std::vector<Token> attribute_tokens;
  std::vector<Token> count_tokens;  // count_tokens[k-1] names the count k
  int count_min = 1;
  int count_max = 1;
  std::vector<double> prior_weights;      // biased marginal over object_tokens
  std::vector<double> grounding_weights;  // scene distribution over object_tokens
  std::vector<double> encoder;            // embed_dim x feature_dim, row-major
  double encoder_noise_std = 0.0;
  int embed_dim = 0;
  int feature_dim = 0;
  int favored_object = 0;  // index into object_tokens
  TokenSeq query;          // canonical query ("describe the image")
  std::uint64_t seed = 0;

  bool is_object(Token t) const;
};

struct Scene {
  std::vector<std::pair<Token, Token>> objects;  // (object, attribute) pairs
  int count = 0;                                 // == objects.size()
};

struct ImageEmbedding {
  std::vector<double> values;
};

struct AnnotatedExample {
  ImageEmbedding image;
  std::optional<Scene> scene;
  TokenSeq query;
  TokenSeq response;  // nonempty, ends with the end token
  std::string source_tag;
};

WorldSpec generate_world(const WorldConfig& config, std::uint64_t seed);

Scene sample_scene(const WorldSpec& world, Rng& rng);

ImageEmbedding encode_image(const WorldSpec& world, const Scene& scene, Rng& rng);

// Deterministic template "there are <count> <attr> <obj> [and <attr> <obj>]... <end>".
TokenSeq canonical_caption(const WorldSpec& world, const Scene& scene);

// Parses a caption back into its (object, attribute) pairs. The count word is
// allowed to disagree with the number of listed pairs (a hallucinated count
// is still grammatical); returns nullopt when the structure does not match.
std::optional<Scene> parse_caption(const WorldSpec& world, const TokenSeq& caption);

// Text-only captions whose objects follow prior_weights, not the grounding
// distribution. Each caption gets an independent derived stream.
std::vector<TokenSeq> sample_pretrain_corpus(const WorldSpec& world, std::size_t n, Rng& rng);

// Image-conditioned ground-truth examples: scene, encoded image, canonical
// query and caption. Objects follow the grounding distribution.
std::vector<AnnotatedExample> sample_annotated_examples(const WorldSpec& world, std::size_t n, Rng& rng);

struct IngestIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct IngestResult {
  std::vector<AnnotatedExample> examples;
  std::vector<IngestIssue> issues;
};

// One JSON object per line: id, image_embedding (array of embed_dim reals),
// query, response, source. Lines that fail to parse or validate are skipped
// and reported with their line number; input order is preserved.
IngestResult ingest_jsonl(const WorldSpec& world, const std::filesystem::path& path);

// Whitespace tokenization against the closed vocabulary; out-of-vocabulary
// words raise std::invalid_argument naming the word.
TokenSeq tokenize(const WorldSpec& world, const std::string& text);
std::string detokenize(const WorldSpec& world, const TokenSeq& tokens);

double total_variation(std::span<const double> p, std::span<const double> q);

void save_world(const WorldSpec& world, const std::filesystem::path& path);
WorldSpec load_world(const std::filesystem::path& path);

}  // namespace preflab

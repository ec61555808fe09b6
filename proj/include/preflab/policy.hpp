#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "preflab/rng.hpp"
#include "preflab/world.hpp"

namespace preflab {

struct PolicyConfig {
  int hidden_dim = 16;
  bool tanh_hidden = false;
  enum class Init { zero, scaled_normal } init = Init::scaled_normal;
};

// Conditional autoregressive softmax policy. The hidden state is the image
// projection plus the mean of the context token embeddings (query followed by
// the generated prefix); logits are a linear readout, optionally through one
// tanh layer.
struct PolicyParams {
  int vocab_size = 0;
  int hidden_dim = 0;
  int embed_dim = 0;
  bool tanh_hidden = false;
  std::vector<double> token_table;      // vocab x hidden, row-major
  std::vector<double> image_proj;       // hidden x embed
  std::vector<double> hidden_weights;   // hidden x hidden (tanh layer)
  std::vector<double> hidden_bias;      // hidden
  std::vector<double> context_weights;  // vocab x hidden
  std::vector<double> bias;             // vocab
};

// Gradients mirror the parameter layout exactly.
using ParamGrad = PolicyParams;

struct DecodeConfig {
  int max_len = 8;
  double temperature = 1.0;
  enum class Mode { greedy, sample } mode = Mode::sample;
};

struct DecodeResult {
  TokenSeq tokens;  // always terminated by the end token
  bool truncated = false;
};

PolicyParams init_params(int vocab_size, int embed_dim, const PolicyConfig& config, std::uint64_t seed);
PolicyParams init_params(const WorldSpec& world, const PolicyConfig& config, std::uint64_t seed);

ParamGrad zeros_like(const PolicyParams& params);
void axpy(ParamGrad& dst, double a, const ParamGrad& src);  // dst += a * src
void scale(ParamGrad& g, double a);
double max_abs(const ParamGrad& g);

// Next-token logits given image, query and generated prefix.
std::vector<double> logits(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                           const TokenSeq& prefix);

// Total log-probability of a terminated response; always <= 0.
double log_prob(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                const TokenSeq& response, Token end_token);

DecodeResult sample_response(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                             const DecodeConfig& config, Token end_token, Rng& rng);

ParamGrad grad_log_prob(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                        const TokenSeq& response, Token end_token);

// out += coeff * d log_prob / d params. Shared by the batch kernels so they
// never materialize more per-item state than needed.
void accumulate_grad_log_prob(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                              const TokenSeq& response, Token end_token, double coeff, ParamGrad& out);

void save_params(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_params(const std::filesystem::path& path);

// log softmax(x); numerically stable.
std::vector<double> log_softmax(const std::vector<double>& x);

}  // namespace preflab

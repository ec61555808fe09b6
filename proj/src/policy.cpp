#include "preflab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "preflab/numeric_io.hpp"

namespace preflab {

namespace {

void check_token(const PolicyParams& params, Token t) {
  if (t < 0 || t >= params.vocab_size) {
    throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of size " +
                                std::to_string(params.vocab_size));
  }
}

void check_inputs(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                  const TokenSeq& prefix) {
  if (static_cast<int>(image.values.size()) != params.embed_dim) {
    throw std::invalid_argument("image embedding has dimension " + std::to_string(image.values.size()) +
                                ", expected " + std::to_string(params.embed_dim));
  }
  for (Token t : query) check_token(params, t);
  for (Token t : prefix) check_token(params, t);
}

// Hidden state before the optional tanh layer: image projection plus mean of
// the context token embeddings. ctx_sum holds the sum of token_table rows for
// the ctx_len context tokens.
void hidden_input(const PolicyParams& params, const ImageEmbedding& image, const std::vector<double>& ctx_sum,
                  std::size_t ctx_len, std::vector<double>& h) {
  const int H = params.hidden_dim;
  const int D = params.embed_dim;
  h.assign(static_cast<std::size_t>(H), 0.0);
  for (int r = 0; r < H; ++r) {
    double acc = 0.0;
    const double* row = params.image_proj.data() + static_cast<std::size_t>(r) * D;
    for (int d = 0; d < D; ++d) acc += row[d] * image.values[static_cast<std::size_t>(d)];
    h[static_cast<std::size_t>(r)] = acc;
  }
  if (ctx_len > 0) {
    const double inv = 1.0 / static_cast<double>(ctx_len);
    for (int r = 0; r < H; ++r) h[static_cast<std::size_t>(r)] += inv * ctx_sum[static_cast<std::size_t>(r)];
  }
}

void readout(const PolicyParams& params, const std::vector<double>& h, std::vector<double>& out) {
  const int H = params.hidden_dim;
  out.assign(static_cast<std::size_t>(params.vocab_size), 0.0);
  for (int v = 0; v < params.vocab_size; ++v) {
    double acc = params.bias[static_cast<std::size_t>(v)];
    const double* row = params.context_weights.data() + static_cast<std::size_t>(v) * H;
    for (int r = 0; r < H; ++r) acc += row[r] * h[static_cast<std::size_t>(r)];
    out[static_cast<std::size_t>(v)] = acc;
  }
}

void apply_tanh_layer(const PolicyParams& params, const std::vector<double>& h_in, std::vector<double>& h_out) {
  const int H = params.hidden_dim;
  h_out.assign(static_cast<std::size_t>(H), 0.0);
  for (int r = 0; r < H; ++r) {
    double acc = params.hidden_bias[static_cast<std::size_t>(r)];
    const double* row = params.hidden_weights.data() + static_cast<std::size_t>(r) * H;
    for (int c = 0; c < H; ++c) acc += row[c] * h_in[static_cast<std::size_t>(c)];
    h_out[static_cast<std::size_t>(r)] = std::tanh(acc);
  }
}

std::vector<double> logits_from_context(const PolicyParams& params, const ImageEmbedding& image,
                                        const std::vector<double>& ctx_sum, std::size_t ctx_len) {
  std::vector<double> h_in;
  hidden_input(params, image, ctx_sum, ctx_len, h_in);
  std::vector<double> out;
  if (params.tanh_hidden) {
    std::vector<double> h;
    apply_tanh_layer(params, h_in, h);
    readout(params, h, out);
  } else {
    readout(params, h_in, out);
  }
  return out;
}

void add_token_row(const PolicyParams& params, std::vector<double>& ctx_sum, Token t) {
  const double* row = params.token_table.data() + static_cast<std::size_t>(t) * params.hidden_dim;
  for (int r = 0; r < params.hidden_dim; ++r) ctx_sum[static_cast<std::size_t>(r)] += row[r];
}

void check_response(const TokenSeq& response, Token end_token) {
  if (response.empty() || response.back() != end_token) {
    throw std::invalid_argument("response must be nonempty and end with the end token");
  }
}

}  // namespace

PolicyParams init_params(int vocab_size, int embed_dim, const PolicyConfig& config, std::uint64_t seed) {
  if (config.hidden_dim < 1) throw std::invalid_argument("init_params: hidden_dim must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("init_params: vocab_size must be >= 2");
  PolicyParams p;
  p.vocab_size = vocab_size;
  p.hidden_dim = config.hidden_dim;
  p.embed_dim = embed_dim;
  p.tanh_hidden = config.tanh_hidden;
  const std::size_t v = static_cast<std::size_t>(vocab_size);
  const std::size_t h = static_cast<std::size_t>(config.hidden_dim);
  const std::size_t d = static_cast<std::size_t>(embed_dim);
  p.token_table.assign(v * h, 0.0);
  p.image_proj.assign(h * d, 0.0);
  p.hidden_weights.assign(h * h, 0.0);
  p.hidden_bias.assign(h, 0.0);
  p.context_weights.assign(v * h, 0.0);
  p.bias.assign(v, 0.0);
  if (config.init == PolicyConfig::Init::scaled_normal) {
    const double std = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
    Rng rng(seed);
    for (auto* block : {&p.token_table, &p.image_proj, &p.hidden_weights, &p.hidden_bias, &p.context_weights,
                        &p.bias}) {
      for (double& x : *block) x = std * rng.normal();
    }
  }
  return p;
}

PolicyParams init_params(const WorldSpec& world, const PolicyConfig& config, std::uint64_t seed) {
  return init_params(world.vocab.size(), world.embed_dim, config, seed);
}

ParamGrad zeros_like(const PolicyParams& params) {
  ParamGrad g = params;
  for (auto* block : {&g.token_table, &g.image_proj, &g.hidden_weights, &g.hidden_bias, &g.context_weights,
                      &g.bias}) {
    std::fill(block->begin(), block->end(), 0.0);
  }
  return g;
}

void axpy(ParamGrad& dst, double a, const ParamGrad& src) {
  const auto each = [a](std::vector<double>& d, const std::vector<double>& s) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += a * s[i];
  };
  each(dst.token_table, src.token_table);
  each(dst.image_proj, src.image_proj);
  each(dst.hidden_weights, src.hidden_weights);
  each(dst.hidden_bias, src.hidden_bias);
  each(dst.context_weights, src.context_weights);
  each(dst.bias, src.bias);
}

void scale(ParamGrad& g, double a) {
  for (auto* block : {&g.token_table, &g.image_proj, &g.hidden_weights, &g.hidden_bias, &g.context_weights,
                      &g.bias}) {
    for (double& x : *block) x *= a;
  }
}

double max_abs(const ParamGrad& g) {
  double m = 0.0;
  for (const auto* block : {&g.token_table, &g.image_proj, &g.hidden_weights, &g.hidden_bias,
                            &g.context_weights, &g.bias}) {
    for (double x : *block) m = std::max(m, std::abs(x));
  }
  return m;
}

std::vector<double> log_softmax(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

std::vector<double> logits(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                           const TokenSeq& prefix) {
  check_inputs(params, image, query, prefix);
  std::vector<double> ctx_sum(static_cast<std::size_t>(params.hidden_dim), 0.0);
  for (Token t : query) add_token_row(params, ctx_sum, t);
  for (Token t : prefix) add_token_row(params, ctx_sum, t);
  return logits_from_context(params, image, ctx_sum, query.size() + prefix.size());
}

double log_prob(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                const TokenSeq& response, Token end_token) {
  check_response(response, end_token);
  check_inputs(params, image, query, response);
  std::vector<double> ctx_sum(static_cast<std::size_t>(params.hidden_dim), 0.0);
  for (Token t : query) add_token_row(params, ctx_sum, t);
  std::size_t ctx_len = query.size();
  double total = 0.0;
  for (Token t : response) {
    const std::vector<double> l = logits_from_context(params, image, ctx_sum, ctx_len);
    total += log_softmax(l)[static_cast<std::size_t>(t)];
    add_token_row(params, ctx_sum, t);
    ++ctx_len;
  }
  return total;
}

DecodeResult sample_response(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                             const DecodeConfig& config, Token end_token, Rng& rng) {
  if (config.max_len < 1) throw std::invalid_argument("sample_response: max_len must be >= 1");
  if (!(config.temperature > 0.0)) throw std::invalid_argument("sample_response: temperature must be positive");
  check_inputs(params, image, query, {});
  check_token(params, end_token);

  std::vector<double> ctx_sum(static_cast<std::size_t>(params.hidden_dim), 0.0);
  for (Token t : query) add_token_row(params, ctx_sum, t);
  std::size_t ctx_len = query.size();

  DecodeResult result;
  // Up to max_len - 1 sampled tokens; the final slot is reserved so the
  // response always fits in max_len tokens including the terminator.
  for (int pos = 0; pos < config.max_len - 1; ++pos) {
    std::vector<double> l = logits_from_context(params, image, ctx_sum, ctx_len);
    Token next;
    if (config.mode == DecodeConfig::Mode::greedy) {
      next = static_cast<Token>(std::max_element(l.begin(), l.end()) - l.begin());
    } else {
      for (double& x : l) x /= config.temperature;
      const std::vector<double> ls = log_softmax(l);
      std::vector<double> probs(ls.size());
      for (std::size_t i = 0; i < ls.size(); ++i) probs[i] = std::exp(ls[i]);
      next = static_cast<Token>(rng.categorical(probs));
    }
    result.tokens.push_back(next);
    if (next == end_token) return result;
    add_token_row(params, ctx_sum, next);
    ++ctx_len;
  }
  result.tokens.push_back(end_token);
  result.truncated = true;
  return result;
}

void accumulate_grad_log_prob(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                              const TokenSeq& response, Token end_token, double coeff, ParamGrad& out) {
  check_response(response, end_token);
  check_inputs(params, image, query, response);
  const int H = params.hidden_dim;
  const int D = params.embed_dim;
  const int V = params.vocab_size;
  const std::size_t L = response.size();

  std::vector<double> ctx_sum(static_cast<std::size_t>(H), 0.0);
  for (Token t : query) add_token_row(params, ctx_sum, t);
  std::size_t ctx_len = query.size();

  // g_hin[i] = d log p / d h_in at position i; the context pooling then turns
  // suffix sums of g_hin / ctx_len into token-table gradients.
  std::vector<std::vector<double>> g_hin(L);
  std::vector<double> inv_len(L, 0.0);

  std::vector<double> h_in, h;
  for (std::size_t i = 0; i < L; ++i) {
    hidden_input(params, image, ctx_sum, ctx_len, h_in);
    const std::vector<double>* h_read = &h_in;
    if (params.tanh_hidden) {
      apply_tanh_layer(params, h_in, h);
      h_read = &h;
    }
    std::vector<double> l;
    readout(params, *h_read, l);
    const std::vector<double> ls = log_softmax(l);

    // e = onehot(token) - softmax(logits)
    std::vector<double> e(static_cast<std::size_t>(V));
    for (int v = 0; v < V; ++v) e[static_cast<std::size_t>(v)] = -std::exp(ls[static_cast<std::size_t>(v)]);
    e[static_cast<std::size_t>(response[i])] += 1.0;

    std::vector<double> gh(static_cast<std::size_t>(H), 0.0);
    for (int v = 0; v < V; ++v) {
      const double ev = e[static_cast<std::size_t>(v)];
      out.bias[static_cast<std::size_t>(v)] += coeff * ev;
      const double* crow = params.context_weights.data() + static_cast<std::size_t>(v) * H;
      double* grow = out.context_weights.data() + static_cast<std::size_t>(v) * H;
      for (int r = 0; r < H; ++r) {
        grow[r] += coeff * ev * (*h_read)[static_cast<std::size_t>(r)];
        gh[static_cast<std::size_t>(r)] += ev * crow[r];
      }
    }

    if (params.tanh_hidden) {
      // Backprop through tanh: g_pre = (1 - h^2) .* gh, then into W_h, b_h, h_in.
      std::vector<double> g_pre(static_cast<std::size_t>(H));
      for (int r = 0; r < H; ++r) {
        const double hr = h[static_cast<std::size_t>(r)];
        g_pre[static_cast<std::size_t>(r)] = (1.0 - hr * hr) * gh[static_cast<std::size_t>(r)];
      }
      std::vector<double> gin(static_cast<std::size_t>(H), 0.0);
      for (int r = 0; r < H; ++r) {
        const double gp = g_pre[static_cast<std::size_t>(r)];
        out.hidden_bias[static_cast<std::size_t>(r)] += coeff * gp;
        const double* wrow = params.hidden_weights.data() + static_cast<std::size_t>(r) * H;
        double* gwrow = out.hidden_weights.data() + static_cast<std::size_t>(r) * H;
        for (int c = 0; c < H; ++c) {
          gwrow[c] += coeff * gp * h_in[static_cast<std::size_t>(c)];
          gin[static_cast<std::size_t>(c)] += gp * wrow[c];
        }
      }
      g_hin[i] = std::move(gin);
    } else {
      g_hin[i] = std::move(gh);
    }

    for (int r = 0; r < H; ++r) {
      const double g = g_hin[i][static_cast<std::size_t>(r)];
      double* prow = out.image_proj.data() + static_cast<std::size_t>(r) * D;
      for (int d = 0; d < D; ++d) prow[d] += coeff * g * image.values[static_cast<std::size_t>(d)];
    }
    inv_len[i] = ctx_len > 0 ? 1.0 / static_cast<double>(ctx_len) : 0.0;

    add_token_row(params, ctx_sum, response[i]);
    ++ctx_len;
  }

  // suffix[i] = sum_{j >= i} g_hin[j] / ctx_len_j. A context token first seen
  // at position j receives suffix[j]; query tokens receive suffix[0].
  std::vector<double> suffix(static_cast<std::size_t>(H), 0.0);
  std::vector<std::vector<double>> suffix_at(L + 1);
  suffix_at[L] = suffix;
  for (std::size_t i = L; i-- > 0;) {
    for (int r = 0; r < H; ++r) {
      suffix[static_cast<std::size_t>(r)] += inv_len[i] * g_hin[i][static_cast<std::size_t>(r)];
    }
    suffix_at[i] = suffix;
  }
  for (Token t : query) {
    double* row = out.token_table.data() + static_cast<std::size_t>(t) * H;
    for (int r = 0; r < H; ++r) row[r] += coeff * suffix_at[0][static_cast<std::size_t>(r)];
  }
  for (std::size_t j = 0; j + 1 < L; ++j) {
    // response token j enters the context at position j + 1
    double* row = out.token_table.data() + static_cast<std::size_t>(response[j]) * H;
    for (int r = 0; r < H; ++r) row[r] += coeff * suffix_at[j + 1][static_cast<std::size_t>(r)];
  }
}

ParamGrad grad_log_prob(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                        const TokenSeq& response, Token end_token) {
  ParamGrad g = zeros_like(params);
  accumulate_grad_log_prob(params, image, query, response, end_token, 1.0, g);
  return g;
}

void save_params(const PolicyParams& params, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["vocab_size"] = params.vocab_size;
  j["hidden_dim"] = params.hidden_dim;
  j["embed_dim"] = params.embed_dim;
  j["tanh_hidden"] = params.tanh_hidden;
  j["token_table"] = decimal17_vec(params.token_table);
  j["image_proj"] = decimal17_vec(params.image_proj);
  j["hidden_weights"] = decimal17_vec(params.hidden_weights);
  j["hidden_bias"] = decimal17_vec(params.hidden_bias);
  j["context_weights"] = decimal17_vec(params.context_weights);
  j["bias"] = decimal17_vec(params.bias);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_params: cannot write " + path.string());
  out << j.dump(2) << '\n';
}

PolicyParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_params: cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  if (j.at("format_version").get<int>() != 1) {
    throw std::runtime_error("load_params: unsupported format_version in " + path.string());
  }
  PolicyParams p;
  p.vocab_size = j.at("vocab_size").get<int>();
  p.hidden_dim = j.at("hidden_dim").get<int>();
  p.embed_dim = j.at("embed_dim").get<int>();
  p.tanh_hidden = j.at("tanh_hidden").get<bool>();
  p.token_table = parse_decimal_vec(j.at("token_table").get<std::vector<std::string>>());
  p.image_proj = parse_decimal_vec(j.at("image_proj").get<std::vector<std::string>>());
  p.hidden_weights = parse_decimal_vec(j.at("hidden_weights").get<std::vector<std::string>>());
  p.hidden_bias = parse_decimal_vec(j.at("hidden_bias").get<std::vector<std::string>>());
  p.context_weights = parse_decimal_vec(j.at("context_weights").get<std::vector<std::string>>());
  p.bias = parse_decimal_vec(j.at("bias").get<std::vector<std::string>>());
  return p;
}

}  // namespace preflab

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "preflab/policy.hpp"
#include "preflab/world.hpp"

namespace preflab::testing {

inline std::vector<std::vector<double>*> param_blocks(PolicyParams& p) {
  return {&p.token_table, &p.image_proj, &p.hidden_weights, &p.hidden_bias, &p.context_weights, &p.bias};
}

inline std::vector<const std::vector<double>*> param_blocks(const PolicyParams& p) {
  return {&p.token_table, &p.image_proj, &p.hidden_weights, &p.hidden_bias, &p.context_weights, &p.bias};
}

// Central-difference oracle: max over all parameter entries of
// |fd - analytic| / max(1, |fd|, |analytic|).
inline double fd_max_rel_err(PolicyParams params, const std::function<double(const PolicyParams&)>& f,
                             const ParamGrad& analytic, double h = 1e-4) {
  double worst = 0.0;
  auto blocks = param_blocks(params);
  auto grads = param_blocks(const_cast<ParamGrad&>(analytic));
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::vector<double>& block = *blocks[b];
    const std::vector<double>& grad = *grads[b];
    for (std::size_t i = 0; i < block.size(); ++i) {
      const double saved = block[i];
      block[i] = saved + h;
      const double up = f(params);
      block[i] = saved - h;
      const double down = f(params);
      block[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double rel = std::abs(fd - grad[i]) / std::max({1.0, std::abs(fd), std::abs(grad[i])});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline bool params_equal(const PolicyParams& a, const PolicyParams& b) {
  auto ba = param_blocks(a);
  auto bb = param_blocks(b);
  for (std::size_t i = 0; i < ba.size(); ++i) {
    if (*ba[i] != *bb[i]) return false;
  }
  return true;
}

// A bare vocabulary-only harness: V tokens, the last one terminal. Used by
// the enumeration and normalization oracles where no world is needed.
struct TinyWorld {
  int vocab_size;
  Token end_token;
  ImageEmbedding image;
  TokenSeq query;
};

inline TinyWorld tiny_world(int vocab_size, int embed_dim, double image_scale, std::uint64_t seed) {
  TinyWorld t;
  t.vocab_size = vocab_size;
  t.end_token = vocab_size - 1;
  Rng rng(seed);
  t.image.values.resize(static_cast<std::size_t>(embed_dim));
  for (double& v : t.image.values) v = image_scale * rng.normal();
  return t;
}

}  // namespace preflab::testing

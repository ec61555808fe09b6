#include "preflab/objectives.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace preflab {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

void check_eta(double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive, got " + std::to_string(eta));
}
}  // namespace

double sigmoid(double z) {
  // Branch on sign so exp never overflows; the positive branch is the exact
  // complement of the negative one, which makes sigma(z) + sigma(-z) == 1
  // hold bitwise while the tail side keeps full relative accuracy.
  const double w = std::exp(-std::abs(z));
  const double small = w / (1.0 + w);  // sigma(-|z|)
  return z >= 0.0 ? 1.0 - small : small;
}

double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double bt_prob(double phi1, double phi2) { return sigmoid(phi1 - phi2); }

std::size_t enumeration_size(int vocab_size, int max_len) {
  // Natural terminations after 0..max_len-2 body tokens plus the forced tier.
  const std::size_t body = static_cast<std::size_t>(vocab_size - 1);
  std::size_t total = 0;
  std::size_t tier = 1;
  for (int k = 0; k < max_len - 1; ++k) {
    total += tier;
    tier *= body;
  }
  return total + tier;
}

EnumeratedPolicy enumerate_policy(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                                  int max_len, Token end_token) {
  if (max_len < 1) throw std::invalid_argument("enumerate_policy: max_len must be >= 1");
  EnumeratedPolicy out;
  TokenSeq prefix;
  // Depth-first over body tokens; log_acc carries the prefix log-probability.
  const auto recurse = [&](auto&& self, double log_acc) -> void {
    const std::vector<double> ls = log_softmax(logits(params, image, query, prefix));
    if (static_cast<int>(prefix.size()) == max_len - 1) {
      // Forced termination: the end token fills the last slot with factor 1.
      TokenSeq r = prefix;
      r.push_back(end_token);
      out.responses.push_back(std::move(r));
      out.log_probs.push_back(log_acc);
      return;
    }
    for (Token t = 0; t < params.vocab_size; ++t) {
      const double lp = log_acc + ls[static_cast<std::size_t>(t)];
      if (t == end_token) {
        TokenSeq r = prefix;
        r.push_back(end_token);
        out.responses.push_back(std::move(r));
        out.log_probs.push_back(lp);
      } else {
        prefix.push_back(t);
        self(self, lp);
        prefix.pop_back();
      }
    }
  };
  recurse(recurse, 0.0);
  return out;
}

ValueBreakdown kl_value_terms(std::span<const double> pi_log_probs, std::span<const double> ref_log_probs,
                              std::span<const double> rewards, double eta) {
  check_eta(eta);
  if (pi_log_probs.size() != ref_log_probs.size() || pi_log_probs.size() != rewards.size()) {
    throw std::invalid_argument("kl_value_terms: mismatched enumeration sizes");
  }
  ValueBreakdown out;
  std::vector<double> reward_terms(pi_log_probs.size());
  std::vector<double> kl_terms(pi_log_probs.size());
  bool support_mismatch = false;
  for (std::size_t i = 0; i < pi_log_probs.size(); ++i) {
    const double p = std::exp(pi_log_probs[i]);
    reward_terms[i] = p * rewards[i];
    if (p == 0.0) {
      kl_terms[i] = 0.0;  // 0 * log(0/q) = 0 by convention
    } else if (std::isinf(ref_log_probs[i]) && ref_log_probs[i] < 0.0) {
      support_mismatch = true;
      kl_terms[i] = 0.0;
    } else {
      kl_terms[i] = p * (pi_log_probs[i] - ref_log_probs[i]);
    }
  }
  out.expected_reward = pairwise_sum(reward_terms);
  out.kl = support_mismatch ? kInf : pairwise_sum(kl_terms);
  out.value = support_mismatch ? -kInf : out.expected_reward - eta * out.kl;
  return out;
}

double kl_value(const PolicyParams& policy, const PolicyParams& ref, const RewardFn& reward,
                const ContextDistribution& contexts, double eta, int max_len, Token end_token,
                std::size_t budget) {
  check_eta(eta);
  double full = 1.0;
  bool overflow = false;
  for (int i = 0; i < max_len; ++i) {
    full *= static_cast<double>(policy.vocab_size);
    if (full > 1e18) {
      overflow = true;
      break;
    }
  }
  if (overflow || full > static_cast<double>(budget)) {
    throw std::invalid_argument("kl_value: enumeration needs about " +
                                (overflow ? std::string(">1e18") : std::to_string(static_cast<std::size_t>(full))) +
                                " responses, over the budget of " + std::to_string(budget));
  }
  double total = 0.0;
  for (const ContextPoint& ctx : contexts) {
    const EnumeratedPolicy pi = enumerate_policy(policy, ctx.image, ctx.query, max_len, end_token);
    const EnumeratedPolicy p0 = enumerate_policy(ref, ctx.image, ctx.query, max_len, end_token);
    std::vector<double> phi(pi.responses.size());
    for (std::size_t i = 0; i < pi.responses.size(); ++i) phi[i] = reward(ctx.image, ctx.query, pi.responses[i]);
    const ValueBreakdown vb = kl_value_terms(pi.log_probs, p0.log_probs, phi, eta);
    if (std::isinf(vb.value)) return -kInf;
    total += ctx.weight * vb.value;
  }
  return total;
}

EnumeratedPolicy optimal_policy(const EnumeratedPolicy& ref, std::span<const double> rewards, double eta) {
  check_eta(eta);
  if (ref.responses.size() != rewards.size()) {
    throw std::invalid_argument("optimal_policy: rewards must align with the enumeration");
  }
  EnumeratedPolicy out;
  out.responses = ref.responses;
  out.log_probs.resize(ref.log_probs.size());
  // log pi* = log ref + phi/eta - logsumexp(...)
  double m = -kInf;
  for (std::size_t i = 0; i < ref.log_probs.size(); ++i) {
    out.log_probs[i] = ref.log_probs[i] + rewards[i] / eta;
    m = std::max(m, out.log_probs[i]);
  }
  std::vector<double> terms(out.log_probs.size());
  for (std::size_t i = 0; i < terms.size(); ++i) terms[i] = std::exp(out.log_probs[i] - m);
  const double log_z = m + std::log(pairwise_sum(terms));
  for (double& lp : out.log_probs) lp -= log_z;
  return out;
}

double implicit_reward_margin(const EnumeratedPolicy& pi, const EnumeratedPolicy& ref, std::size_t r1,
                              std::size_t r2, double eta) {
  check_eta(eta);
  for (std::size_t idx : {r1, r2}) {
    if (idx >= pi.log_probs.size() || idx >= ref.log_probs.size()) {
      throw std::invalid_argument("implicit_reward_margin: response index out of range");
    }
    if (std::isinf(ref.log_probs[idx])) {
      throw std::invalid_argument("implicit_reward_margin: reference assigns zero probability to response " +
                                  std::to_string(idx));
    }
  }
  return eta * ((pi.log_probs[r1] - ref.log_probs[r1]) - (pi.log_probs[r2] - ref.log_probs[r2]));
}

double implicit_reward_margin(const PolicyParams& pi, const PolicyParams& ref, const ImageEmbedding& image,
                              const TokenSeq& query, const TokenSeq& r1, const TokenSeq& r2, double eta,
                              Token end_token) {
  check_eta(eta);
  const double lr1 = log_prob(pi, image, query, r1, end_token) - log_prob(ref, image, query, r1, end_token);
  const double lr2 = log_prob(pi, image, query, r2, end_token) - log_prob(ref, image, query, r2, end_token);
  return eta * (lr1 - lr2);
}

double dpo_pair_loss(double eta, double delta) {
  // -log sigma(eta * delta) = softplus(-eta * delta)
  return softplus(-eta * delta);
}

namespace {

void check_batch_tuple(const PreferenceTuple& t) {
  if (t.p != 0 && t.p != 1) throw std::invalid_argument("preference signal p must be 0 or 1");
  if (t.r1 == t.r2) throw std::invalid_argument("preference tuple has identical responses");
}

double pair_margin(const PolicyParams& params, const PolicyParams& ref, const PreferenceTuple& t,
                   Token end_token) {
  const TokenSeq& w = t.winner();
  const TokenSeq& l = t.loser();
  const double rw = log_prob(params, t.image, t.query, w, end_token) -
                    log_prob(ref, t.image, t.query, w, end_token);
  const double rl = log_prob(params, t.image, t.query, l, end_token) -
                    log_prob(ref, t.image, t.query, l, end_token);
  return rw - rl;
}

}  // namespace

BatchLoss dpo_loss(const PolicyParams& params, const PolicyParams& ref, std::span<const PreferenceTuple> batch,
                   double eta, Token end_token, Exec exec) {
  check_eta(eta);
  if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), exec, [&](std::size_t i) {
    check_batch_tuple(batch[i]);
    losses[i] = dpo_pair_loss(eta, pair_margin(params, ref, batch[i], end_token));
  });
  BatchLoss out;
  out.sum = pairwise_sum(losses);
  out.mean = out.sum / static_cast<double>(batch.size());
  return out;
}

ParamGrad dpo_grad(const PolicyParams& params, const PolicyParams& ref, std::span<const PreferenceTuple> batch,
                   double eta, Token end_token, Exec exec) {
  check_eta(eta);
  if (batch.empty()) throw std::invalid_argument("dpo_grad: empty batch");
  std::vector<ParamGrad> partials(batch.size(), zeros_like(params));
  parallel_for(batch.size(), exec, [&](std::size_t i) {
    const PreferenceTuple& t = batch[i];
    check_batch_tuple(t);
    const double delta = pair_margin(params, ref, t, end_token);
    // d/dtheta -log sigma(eta*delta) = -eta * sigma(-eta*delta) * d delta
    const double coeff = -eta * sigmoid(-eta * delta);
    accumulate_grad_log_prob(params, t.image, t.query, t.winner(), end_token, coeff, partials[i]);
    accumulate_grad_log_prob(params, t.image, t.query, t.loser(), end_token, -coeff, partials[i]);
  });
  pairwise_reduce(partials, [](ParamGrad& dst, const ParamGrad& src) { axpy(dst, 1.0, src); });
  return std::move(partials.front());
}

BatchLoss sft_loss(const PolicyParams& params, std::span<const AnnotatedExample> batch, Token end_token,
                   Exec exec) {
  if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), exec, [&](std::size_t i) {
    losses[i] = -log_prob(params, batch[i].image, batch[i].query, batch[i].response, end_token);
  });
  BatchLoss out;
  out.sum = pairwise_sum(losses);
  out.mean = out.sum / static_cast<double>(batch.size());
  return out;
}

ParamGrad sft_grad(const PolicyParams& params, std::span<const AnnotatedExample> batch, Token end_token,
                   Exec exec) {
  if (batch.empty()) throw std::invalid_argument("sft_grad: empty batch");
  std::vector<ParamGrad> partials(batch.size(), zeros_like(params));
  parallel_for(batch.size(), exec, [&](std::size_t i) {
    accumulate_grad_log_prob(params, batch[i].image, batch[i].query, batch[i].response, end_token, -1.0,
                             partials[i]);
  });
  pairwise_reduce(partials, [](ParamGrad& dst, const ParamGrad& src) { axpy(dst, 1.0, src); });
  return std::move(partials.front());
}

double simplex_objective(std::span<const double> probs, std::span<const double> ref_probs,
                         std::span<const double> rewards, double eta) {
  double value = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (p == 0.0) continue;
    if (ref_probs[i] == 0.0) return -kInf;
    value += p * rewards[i] - eta * p * std::log(p / ref_probs[i]);
  }
  return value;
}

std::vector<double> brute_force_optimum(const EnumeratedPolicy& ref, std::span<const double> rewards, double eta,
                                        int grid_resolution) {
  check_eta(eta);
  const std::size_t m = ref.responses.size();
  if (m > 4) {
    throw std::invalid_argument("brute_force_optimum: grid search supports at most 4 responses, got " +
                                std::to_string(m));
  }
  if (m == 0 || rewards.size() != m) throw std::invalid_argument("brute_force_optimum: bad inputs");
  if (grid_resolution < 1) throw std::invalid_argument("brute_force_optimum: grid_resolution must be >= 1");

  std::vector<double> ref_probs(m);
  for (std::size_t i = 0; i < m; ++i) ref_probs[i] = std::exp(ref.log_probs[i]);

  const double g = static_cast<double>(grid_resolution);
  std::vector<double> best;
  double best_value = -kInf;
  std::vector<int> ticks(m, 0);
  // All compositions of grid_resolution into m nonnegative parts, in a fixed
  // lexicographic order; first maximum wins so the argmax is deterministic.
  const auto visit = [&](auto&& self, std::size_t slot, int remaining) -> void {
    if (slot + 1 == m) {
      ticks[slot] = remaining;
      std::vector<double> probs(m);
      for (std::size_t i = 0; i < m; ++i) probs[i] = static_cast<double>(ticks[i]) / g;
      const double value = simplex_objective(probs, ref_probs, rewards, eta);
      if (value > best_value) {
        best_value = value;
        best = probs;
      }
      return;
    }
    for (int k = 0; k <= remaining; ++k) {
      ticks[slot] = k;
      self(self, slot + 1, remaining - k);
    }
  };
  visit(visit, 0, grid_resolution);
  return best;
}

}  // namespace preflab

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "preflab/parallel.hpp"
#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/world.hpp"

namespace preflab {

// Ground-truth reward in [0, 1].
using RewardFn = std::function<double(const ImageEmbedding&, const TokenSeq& query, const TokenSeq& response)>;

struct ContextPoint {
  ImageEmbedding image;
  TokenSeq query;
  double weight = 1.0;
};
using ContextDistribution = std::vector<ContextPoint>;

// A policy restricted to one context, written out as an explicit distribution
// over every terminated response of length <= max_len. Responses that hit the
// length cap carry the probability of their sampled prefix (the terminator in
// the final slot is forced, not sampled), so the log_probs always total one.
struct EnumeratedPolicy {
  std::vector<TokenSeq> responses;
  std::vector<double> log_probs;
};

std::size_t enumeration_size(int vocab_size, int max_len);

EnumeratedPolicy enumerate_policy(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                                  int max_len, Token end_token);

// Stable sigmoid; exact through |z| up to ~700.
double sigmoid(double z);
// log(1 + e^z) without overflow.
double softplus(double z);

// Bradley-Terry preference probability sigma(phi1 - phi2).
double bt_prob(double phi1, double phi2);

struct ValueBreakdown {
  double expected_reward = 0.0;
  double kl = 0.0;     // +inf when pi has mass where ref has none
  double value = 0.0;  // expected_reward - eta * kl; -inf on support mismatch
};

// Exact value of one context given aligned response enumerations.
ValueBreakdown kl_value_terms(std::span<const double> pi_log_probs, std::span<const double> ref_log_probs,
                              std::span<const double> rewards, double eta);

// Exact KL-regularized objective by full enumeration over every context.
double kl_value(const PolicyParams& policy, const PolicyParams& ref, const RewardFn& reward,
                const ContextDistribution& contexts, double eta, int max_len, Token end_token,
                std::size_t budget = 1000000);

// Closed-form optimizer pi*(r) proportional to ref(r) * exp(reward(r) / eta).
EnumeratedPolicy optimal_policy(const EnumeratedPolicy& ref, std::span<const double> rewards, double eta);

double implicit_reward_margin(const EnumeratedPolicy& pi, const EnumeratedPolicy& ref, std::size_t r1,
                              std::size_t r2, double eta);
double implicit_reward_margin(const PolicyParams& pi, const PolicyParams& ref, const ImageEmbedding& image,
                              const TokenSeq& query, const TokenSeq& r1, const TokenSeq& r2, double eta,
                              Token end_token);

struct BatchLoss {
  double sum = 0.0;
  double mean = 0.0;
};

// Loss of one pair given the margin delta = logratio(winner) - logratio(loser).
double dpo_pair_loss(double eta, double delta);

BatchLoss dpo_loss(const PolicyParams& params, const PolicyParams& ref, std::span<const PreferenceTuple> batch,
                   double eta, Token end_token, Exec exec = Exec::parallel);

// Gradient of the summed DPO loss.
ParamGrad dpo_grad(const PolicyParams& params, const PolicyParams& ref, std::span<const PreferenceTuple> batch,
                   double eta, Token end_token, Exec exec = Exec::parallel);

BatchLoss sft_loss(const PolicyParams& params, std::span<const AnnotatedExample> batch, Token end_token,
                   Exec exec = Exec::parallel);

// Gradient of the summed negative log-likelihood.
ParamGrad sft_grad(const PolicyParams& params, std::span<const AnnotatedExample> batch, Token end_token,
                   Exec exec = Exec::parallel);

// Value integrand for one context and one explicit distribution; used by the
// simplex-grid oracle and its maximality checks.
double simplex_objective(std::span<const double> probs, std::span<const double> ref_probs,
                         std::span<const double> rewards, double eta);

// Grid search over the probability simplex; independent oracle for
// optimal_policy. Rejects more than 4 responses.
std::vector<double> brute_force_optimum(const EnumeratedPolicy& ref, std::span<const double> rewards, double eta,
                                        int grid_resolution);

}  // namespace preflab

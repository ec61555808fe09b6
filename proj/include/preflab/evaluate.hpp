#pragma once

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "preflab/datagen.hpp"
#include "preflab/parallel.hpp"
#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/world.hpp"

namespace preflab {

// Hallucination rates plus the raw counts they are computed from.
struct HallucinationReport {
  double resp_rate = 0.0;  // responses containing a hallucinated mention / responses
  double obj_rate = 0.0;   // hallucinated object mentions / all object mentions
  std::size_t n_responses = 0;
  std::size_t n_mentions = 0;
  std::size_t n_halluc_responses = 0;
  std::size_t n_halluc_mentions = 0;
};

// Object-vocabulary tokens of the response, with multiplicity, in order.
std::vector<Token> extract_object_mentions(const WorldSpec& world, const TokenSeq& response);

// A mention is hallucinated iff its object is absent from the scene. Responses
// without mentions count toward n_responses only.
HallucinationReport hallucination_rates(const WorldSpec& world,
                                        std::span<const std::pair<Scene, TokenSeq>> pairs);

// Fraction of tuples whose implicit reward margin favors the winner; exact
// zero margins score one half.
double preference_accuracy(const PolicyParams& policy, const PolicyParams& ref,
                           std::span<const PreferenceTuple> heldout, double eta, Token end_token,
                           Exec exec = Exec::parallel);

// Shared tie-counting rule, also used on margins from enumerated policies.
double accuracy_from_margins(std::span<const double> winner_margins);

// Mean log-likelihood of each probe token at the first object slot of the
// scene's caption (query plus the structural prefix "there are <count>
// <attribute>"), under n_samples independent weakenings of the scene's
// image, for every t in 0..T. The object slot is the first position where an
// object token is generated, so this is where the grounded-versus-prior
// competition is defined. The t=0 row is exact (no noise is drawn).
struct LogitTrajectory {
  std::vector<int> steps;                        // 0..T
  std::vector<Token> probe_tokens;
  std::vector<std::vector<double>> mean_loglik;  // [step][probe]
};

LogitTrajectory logit_trajectory(const PolicyParams& policy, const Scene& scene, const WorldSpec& world,
                                 const NoiseSchedule& schedule, const std::vector<Token>& probe_tokens,
                                 int n_samples, Rng& rng);

void save_trajectory_csv(const WorldSpec& world, const LogitTrajectory& traj, const std::filesystem::path& path);

// Greedy captions for freshly drawn scenes, paired for hallucination scoring.
std::vector<std::pair<Scene, TokenSeq>> greedy_eval_pairs(const PolicyParams& policy, const WorldSpec& world,
                                                          std::size_t n_scenes, int max_len, Rng& rng,
                                                          Exec exec = Exec::parallel);

}  // namespace preflab

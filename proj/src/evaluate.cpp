#include "preflab/evaluate.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "preflab/numeric_io.hpp"
#include "preflab/objectives.hpp"

namespace preflab {

std::vector<Token> extract_object_mentions(const WorldSpec& world, const TokenSeq& response) {
  std::vector<Token> mentions;
  for (Token t : response) {
    if (t < 0 || t >= world.vocab.size()) {
      throw std::invalid_argument("extract_object_mentions: token id " + std::to_string(t) + " out of vocab");
    }
    if (world.is_object(t)) mentions.push_back(t);
  }
  return mentions;
}

HallucinationReport hallucination_rates(const WorldSpec& world,
                                        std::span<const std::pair<Scene, TokenSeq>> pairs) {
  if (pairs.empty()) throw std::invalid_argument("hallucination_rates: empty input");
  HallucinationReport rep;
  rep.n_responses = pairs.size();
  for (const auto& [scene, response] : pairs) {
    std::set<Token> present;
    for (const auto& [obj, att] : scene.objects) present.insert(obj);
    bool any_halluc = false;
    for (Token mention : extract_object_mentions(world, response)) {
      ++rep.n_mentions;
      if (!present.count(mention)) {
        ++rep.n_halluc_mentions;
        any_halluc = true;
      }
    }
    if (any_halluc) ++rep.n_halluc_responses;
  }
  rep.resp_rate = static_cast<double>(rep.n_halluc_responses) / static_cast<double>(rep.n_responses);
  rep.obj_rate = rep.n_mentions == 0
                     ? 0.0
                     : static_cast<double>(rep.n_halluc_mentions) / static_cast<double>(rep.n_mentions);
  return rep;
}

double accuracy_from_margins(std::span<const double> winner_margins) {
  if (winner_margins.empty()) throw std::invalid_argument("accuracy_from_margins: empty input");
  double score = 0.0;
  for (double m : winner_margins) {
    if (m > 0.0) {
      score += 1.0;
    } else if (m == 0.0) {
      score += 0.5;
    }
  }
  return score / static_cast<double>(winner_margins.size());
}

double preference_accuracy(const PolicyParams& policy, const PolicyParams& ref,
                           std::span<const PreferenceTuple> heldout, double eta, Token end_token, Exec exec) {
  if (heldout.empty()) throw std::invalid_argument("preference_accuracy: empty heldout set");
  std::vector<double> margins(heldout.size());
  parallel_for(heldout.size(), exec, [&](std::size_t i) {
    const PreferenceTuple& t = heldout[i];
    margins[i] =
        implicit_reward_margin(policy, ref, t.image, t.query, t.winner(), t.loser(), eta, end_token);
  });
  return accuracy_from_margins(margins);
}

LogitTrajectory logit_trajectory(const PolicyParams& policy, const Scene& scene, const WorldSpec& world,
                                 const NoiseSchedule& schedule, const std::vector<Token>& probe_tokens,
                                 int n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("logit_trajectory: n_samples must be >= 1");
  for (Token t : probe_tokens) {
    if (t < 0 || t >= world.vocab.size()) {
      throw std::invalid_argument("logit_trajectory: probe token " + std::to_string(t) + " out of vocab");
    }
  }
  Rng encode_rng = rng.child(0);
  const ImageEmbedding base = encode_image(world, scene, encode_rng);
  const Rng noise_base = rng.child(1);

  // Structural prefix of the caption up to (excluding) the first object token.
  const TokenSeq caption = canonical_caption(world, scene);
  TokenSeq prefix;
  for (Token t : caption) {
    if (world.is_object(t)) break;
    prefix.push_back(t);
  }

  LogitTrajectory traj;
  traj.probe_tokens = probe_tokens;
  traj.steps.resize(static_cast<std::size_t>(schedule.T) + 1);
  for (int t = 0; t <= schedule.T; ++t) traj.steps[static_cast<std::size_t>(t)] = t;
  traj.mean_loglik.assign(traj.steps.size(), std::vector<double>(probe_tokens.size(), 0.0));

  parallel_for(traj.steps.size(), Exec::parallel, [&](std::size_t ti) {
    const int t = traj.steps[ti];
    std::vector<std::vector<double>> per_sample(probe_tokens.size(),
                                                std::vector<double>(static_cast<std::size_t>(n_samples), 0.0));
    const int samples = t == 0 ? 1 : n_samples;  // t=0 is noiseless, one pass is exact
    for (int s = 0; s < samples; ++s) {
      Rng sample_rng = noise_base.child(static_cast<std::uint64_t>(ti) * static_cast<std::uint64_t>(n_samples) +
                                        static_cast<std::uint64_t>(s));
      const ImageEmbedding weak = weaken_image(base, schedule, t, sample_rng);
      const std::vector<double> ls = log_softmax(logits(policy, weak, world.query, prefix));
      for (std::size_t p = 0; p < probe_tokens.size(); ++p) {
        per_sample[p][static_cast<std::size_t>(s)] = ls[static_cast<std::size_t>(probe_tokens[p])];
      }
    }
    for (std::size_t p = 0; p < probe_tokens.size(); ++p) {
      traj.mean_loglik[ti][p] =
          pairwise_sum(std::span<const double>(per_sample[p].data(), static_cast<std::size_t>(samples))) /
          static_cast<double>(samples);
    }
  });
  return traj;
}

void save_trajectory_csv(const WorldSpec& world, const LogitTrajectory& traj,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_trajectory_csv: cannot write " + path.string());
  out << "t,token,mean_loglik\n";
  for (std::size_t ti = 0; ti < traj.steps.size(); ++ti) {
    for (std::size_t p = 0; p < traj.probe_tokens.size(); ++p) {
      out << traj.steps[ti] << ',' << world.vocab.word(traj.probe_tokens[p]) << ','
          << decimal17(traj.mean_loglik[ti][p]) << '\n';
    }
  }
}

std::vector<std::pair<Scene, TokenSeq>> greedy_eval_pairs(const PolicyParams& policy, const WorldSpec& world,
                                                          std::size_t n_scenes, int max_len, Rng& rng,
                                                          Exec exec) {
  const Rng base(rng.next_u64());
  std::vector<std::pair<Scene, TokenSeq>> pairs(n_scenes);
  DecodeConfig cfg;
  cfg.max_len = max_len;
  cfg.mode = DecodeConfig::Mode::greedy;
  parallel_for(n_scenes, exec, [&](std::size_t i) {
    Rng item = base.child(i);
    const Scene scene = sample_scene(world, item);
    const ImageEmbedding image = encode_image(world, scene, item);
    Rng decode_rng = item.child(0);  // unused by greedy decoding, kept for parity
    const DecodeResult dec = sample_response(policy, image, world.query, cfg, world.vocab.end_token, decode_rng);
    pairs[i] = {scene, dec.tokens};
  });
  return pairs;
}

}  // namespace preflab

#include "preflab/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "preflab/parallel.hpp"

namespace preflab {

NoiseSchedule make_noise_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw std::invalid_argument("make_noise_schedule: T must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw std::invalid_argument("make_noise_schedule: need 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    s.beta[static_cast<std::size_t>(i)] =
        T == 1 ? beta_min : beta_min + (beta_max - beta_min) * static_cast<double>(i) / static_cast<double>(T - 1);
  }
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    s.alpha_bar[static_cast<std::size_t>(t)] =
        s.alpha_bar[static_cast<std::size_t>(t - 1)] * (1.0 - s.beta[static_cast<std::size_t>(t - 1)]);
  }
  return s;
}

ImageEmbedding weaken_image(const ImageEmbedding& image, const NoiseSchedule& schedule, int t, Rng& rng) {
  if (t < 0 || t > schedule.T) {
    throw std::invalid_argument("weaken_image: t=" + std::to_string(t) + " outside [0, " +
                                std::to_string(schedule.T) + "]");
  }
  if (t == 0) return image;
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  const double signal = std::sqrt(ab);
  const double noise = std::sqrt(1.0 - ab);
  ImageEmbedding out;
  out.values.reserve(image.values.size());
  for (double x : image.values) out.values.push_back(signal * x + noise * rng.normal());
  return out;
}

BootstrapResult bootstrap_negative(const PolicyParams& params, const ImageEmbedding& image, const TokenSeq& query,
                                   const NoiseSchedule& schedule, int t, const DecodeConfig& decode,
                                   Token end_token, const Rng& rng) {
  Rng noise_rng = rng.child(0);
  Rng decode_rng = rng.child(1);
  const ImageEmbedding weakened = weaken_image(image, schedule, t, noise_rng);
  const DecodeResult dec = sample_response(params, weakened, query, decode, end_token, decode_rng);
  BootstrapResult out;
  out.tokens = dec.tokens;
  out.truncated = dec.truncated;
  out.t = t;
  out.seed = rng.seed();
  return out;
}

InjectionRuleSet InjectionRuleSet::for_world(const WorldSpec& world) {
  InjectionRuleSet rules;
  const auto fill = [](const std::vector<Token>& tokens, std::unordered_map<Token, std::vector<Token>>& table) {
    for (Token t : tokens) {
      std::vector<Token> subs;
      for (Token u : tokens) {
        if (u != t) subs.push_back(u);
      }
      if (!subs.empty()) table.emplace(t, std::move(subs));
    }
  };
  fill(world.object_tokens, rules.object_subs);
  fill(world.attribute_tokens, rules.attribute_subs);
  fill(world.count_tokens, rules.count_subs);
  return rules;
}

TokenSeq inject_errors_rules(const WorldSpec& world, const TokenSeq& response, const InjectionRuleSet& rules,
                             Rng& rng) {
  if (!parse_caption(world, response)) {
    throw std::invalid_argument("inject_errors_rules: response does not parse under the caption template");
  }
  // Collect every (position, substitution table) an enabled category offers.
  struct Site {
    std::size_t pos;
    const std::vector<Token>* subs;
  };
  std::vector<Site> sites;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const Token t = response[i];
    if (rules.object_existence) {
      auto it = rules.object_subs.find(t);
      if (it != rules.object_subs.end() && world.is_object(t)) sites.push_back({i, &it->second});
    }
    if (rules.object_attribute) {
      auto it = rules.attribute_subs.find(t);
      if (it != rules.attribute_subs.end()) sites.push_back({i, &it->second});
    }
    if (rules.object_count) {
      auto it = rules.count_subs.find(t);
      if (it != rules.count_subs.end()) sites.push_back({i, &it->second});
    }
  }
  if (sites.empty()) {
    throw std::invalid_argument("inject_errors_rules: no enabled rule applies to this response");
  }
  const Site& site = sites[rng.below(sites.size())];
  TokenSeq out = response;
  out[site.pos] = (*site.subs)[rng.below(site.subs->size())];
  return out;
}

std::string render_injection_prompt(const std::string& question, const std::string& response) {
  if (response.empty()) throw std::invalid_argument("render_injection_prompt: response must be nonempty");
  static const std::string header =
      "I will give you a question and a response about an image. Pretend that you can see the image. "
      "You must modify the response by changing the original details, such as adding more objects or "
      "change the attributes of objects. Note that the modified responses should still be common in "
      "reality. I will give you some examples, then you need to paraphrase the new response.\n"
      "\n"
      "Examples:\n"
      "\n"
      "Question: Describe the image.\n"
      "Response: the image shows an old man walking across the street. There are many people on the "
      "sidewalks, and cars are running on the street.\n"
      "Modified response: the image shows a woman running towards a car, there are no cars on the street.\n"
      "\n"
      "Question: What is the color of the apple?\n"
      "Response: the color of the apple is black.\n"
      "Modified response: the color of the apple is yellow.\n"
      "\n"
      "Question: What is on the left side of the boy?\n"
      "Response: there is a dog left to the boy.\n"
      "Modified response: it is a cat on the left of the boy.\n"
      "\n"
      "Question: How many people are there?\n"
      "Response: there are 3 people in the image.\n"
      "Modified response: there are only 1 person in the image.\n"
      "\n"
      "Question: what is the price of the knife?\n"
      "Response: The price shown in the image is 3 dollors.\n"
      "Modified response:\n"
      "\n"
      "Question: Describe the image in detail.\n"
      "Response: The image is a close-up of a wristwatch with a circular face and a black leather strap. "
      "The watch has a silver-colored bezel and case, and features a white dial with black Arabic numerals "
      "indicating the hours from 1 to 12. The hands of the watch are not visible....\n"
      "Modified response: The image is a close-up of a wristwatch with a rectangular face and a brown "
      "leather strap. The watch has a gold-colored bezel and case, and features a black dial with white "
      "Roman numerals indicating the hours from 1 to 12. The hands of the watch are pointing towards the "
      "3 o'clock position...\n"
      "\n";
  return header + "Question: " + question + "\nResponse: " + response + "\nModified Response:";
}

namespace {

// Deterministic strategy assignment: largest-remainder counts per strategy in
// mix order, laid out in blocks and then shuffled by a derived stream.
std::vector<Provenance> assign_strategies(const std::map<Provenance, double>& mix, std::size_t n, Rng& rng) {
  if (mix.empty()) throw std::invalid_argument("build_preference_dataset: empty strategy mix");
  double total = 0.0;
  for (const auto& [prov, w] : mix) {
    if (w < 0.0) throw std::invalid_argument("build_preference_dataset: negative mix weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("build_preference_dataset: mix weights sum to zero");

  std::vector<std::pair<Provenance, double>> shares(mix.begin(), mix.end());
  std::vector<std::size_t> counts(shares.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = static_cast<double>(n) * shares[i].second / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.push_back({exact - std::floor(exact), i});
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) counts[remainders[k % remainders.size()].second]++;

  std::vector<Provenance> plan;
  plan.reserve(n);
  for (std::size_t i = 0; i < shares.size(); ++i) {
    plan.insert(plan.end(), counts[i], shares[i].first);
  }
  // Fisher-Yates with the derived stream keeps the layout independent of the
  // positives' order while staying replayable.
  for (std::size_t i = plan.size(); i > 1; --i) {
    std::swap(plan[i - 1], plan[rng.below(i)]);
  }
  return plan;
}

}  // namespace

DatasetBuildResult build_preference_dataset(std::span<const AnnotatedExample> positives,
                                            const NegativeConfig& config, const PolicyParams& policy,
                                            const WorldSpec& world) {
  if (positives.empty()) throw std::invalid_argument("build_preference_dataset: no positives");
  if (config.noise_step < 0 || config.noise_step > config.schedule.T) {
    throw std::invalid_argument("build_preference_dataset: noise_step outside the schedule");
  }
  if (config.mix.count(Provenance::image_weakened) && config.mix.at(Provenance::image_weakened) > 0.0 &&
      config.noise_step < 1) {
    throw std::invalid_argument("build_preference_dataset: image_weakened arm needs noise_step >= 1");
  }
  if (config.mix.count(Provenance::error_injected_llm) && config.mix.at(Provenance::error_injected_llm) > 0.0 &&
      !config.llm.has_value()) {
    throw std::invalid_argument("build_preference_dataset: error_injected_llm arm needs an endpoint config");
  }

  Rng root(config.seed);
  Rng plan_rng = root.child(0);
  const std::vector<Provenance> plan = assign_strategies(config.mix, positives.size(), plan_rng);
  const Rng items = root.child(1);

  const Token end_token = world.vocab.end_token;
  std::vector<PreferenceTuple> slots(positives.size());
  std::vector<std::string> failures(positives.size());

  // The LLM arm is the only I/O-bound path; it runs through the bounded
  // client and falls back to rules on rejection.
  const auto make_negative = [&](Provenance prov, Rng& item_rng, int attempt,
                                 const AnnotatedExample& pos) -> std::pair<TokenSeq, Provenance> {
    Rng attempt_rng = item_rng.child(static_cast<std::uint64_t>(attempt));
    switch (prov) {
      case Provenance::image_weakened: {
        const BootstrapResult b = bootstrap_negative(policy, pos.image, pos.query, config.schedule,
                                                     config.noise_step, config.decode, end_token, attempt_rng);
        return {b.tokens, prov};
      }
      case Provenance::self_generated: {
        const BootstrapResult b = bootstrap_negative(policy, pos.image, pos.query, config.schedule, 0,
                                                     config.decode, end_token, attempt_rng);
        return {b.tokens, prov};
      }
      case Provenance::error_injected_rules: {
        return {inject_errors_rules(world, pos.response, config.rules, attempt_rng), prov};
      }
      case Provenance::error_injected_llm: {
        const LlmInjection inj = inject_errors_llm(*config.llm, detokenize(world, pos.query),
                                                   detokenize(world, pos.response));
        if (inj.accepted) {
          try {
            TokenSeq neg = tokenize(world, inj.text);
            if (!neg.empty()) {
              if (neg.back() != end_token) neg.push_back(end_token);
              return {neg, prov};
            }
          } catch (const std::invalid_argument&) {
            // reply left the closed vocabulary; fall back below
          }
        }
        return {inject_errors_rules(world, pos.response, config.rules, attempt_rng),
                Provenance::error_injected_rules};
      }
    }
    throw std::logic_error("unknown provenance");
  };

  parallel_for(positives.size(), config.llm.has_value() ? Exec::serial : Exec::parallel, [&](std::size_t i) {
    const AnnotatedExample& pos = positives[i];
    Rng item_rng = items.child(i);
    const Provenance planned = plan[i];
    try {
      for (int attempt = 0; attempt < config.retry_limit; ++attempt) {
        auto [neg, prov] = make_negative(planned, item_rng, attempt, pos);
        if (neg == pos.response) continue;  // no preference signal in a tie
        PreferenceTuple t;
        t.image = pos.image;
        t.query = pos.query;
        t.r1 = pos.response;
        t.r2 = std::move(neg);
        t.p = 1;
        t.provenance = prov;
        t.noise_step = prov == Provenance::image_weakened ? config.noise_step : 0;
        t.seed = item_rng.seed();
        slots[i] = std::move(t);
        return;
      }
      failures[i] = "no distinct negative after " + std::to_string(config.retry_limit) + " attempts";
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });

  DatasetBuildResult result;
  result.tuples.reserve(positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) {
    if (failures[i].empty()) {
      result.tuples.push_back(std::move(slots[i]));
    } else {
      result.skipped.push_back({i, failures[i]});
    }
  }
  return result;
}

void save_dataset_jsonl(const WorldSpec& world, std::span<const PreferenceTuple> tuples,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset_jsonl: cannot write " + path.string());
  for (const PreferenceTuple& t : tuples) {
    nlohmann::json j;
    j["image"] = t.image.values;
    j["query"] = detokenize(world, t.query);
    j["r1"] = detokenize(world, t.r1);
    j["r2"] = detokenize(world, t.r2);
    j["p"] = t.p;
    j["provenance"] = provenance_name(t.provenance);
    j["meta"] = {{"t", t.noise_step}, {"seed", t.seed}};
    out << j.dump() << '\n';
  }
}

std::vector<PreferenceTuple> load_dataset_jsonl(const WorldSpec& world, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset_jsonl: cannot open " + path.string());
  std::vector<PreferenceTuple> tuples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_dataset_jsonl: line " + std::to_string(line_no) + ": " + e.what());
    }
    PreferenceTuple t;
    t.image.values = j.at("image").get<std::vector<double>>();
    t.query = tokenize(world, j.at("query").get<std::string>());
    t.r1 = tokenize(world, j.at("r1").get<std::string>());
    t.r2 = tokenize(world, j.at("r2").get<std::string>());
    t.p = j.at("p").get<int>();
    t.provenance = provenance_from_name(j.at("provenance").get<std::string>());
    t.noise_step = j.at("meta").at("t").get<int>();
    t.seed = j.at("meta").at("seed").get<std::uint64_t>();
    tuples.push_back(std::move(t));
  }
  return tuples;
}

}  // namespace preflab

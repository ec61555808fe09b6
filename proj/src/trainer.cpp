#include "preflab/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "preflab/errors.hpp"
#include "preflab/evaluate.hpp"
#include "preflab/numeric_io.hpp"
#include "preflab/objectives.hpp"
#include "preflab/parallel.hpp"

namespace preflab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

class Optimizer {
 public:
  Optimizer(const TrainConfig& config, const PolicyParams& shape)
      : config_(config), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

  void step(PolicyParams& params, const ParamGrad& grad) {
    if (config_.optimizer == TrainConfig::Optimizer::sgd) {
      axpy(params, -config_.learning_rate, grad);
      return;
    }
    ++t_;
    const AdamSettings& a = config_.adam;
    const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(t_));
    const auto update = [&](std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                            const std::vector<double>& g) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * g[i];
        v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + a.eps);
      }
    };
    update(params.token_table, m_.token_table, v_.token_table, grad.token_table);
    update(params.image_proj, m_.image_proj, v_.image_proj, grad.image_proj);
    update(params.hidden_weights, m_.hidden_weights, v_.hidden_weights, grad.hidden_weights);
    update(params.hidden_bias, m_.hidden_bias, v_.hidden_bias, grad.hidden_bias);
    update(params.context_weights, m_.context_weights, v_.context_weights, grad.context_weights);
    update(params.bias, m_.bias, v_.bias, grad.bias);
  }

 private:
  TrainConfig config_;
  ParamGrad m_, v_;
  long t_ = 0;
};

std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

std::vector<std::size_t> probe_indices(std::size_t n, int probe_size, Rng& rng) {
  const std::size_t k = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(probe_size, 1)));
  std::vector<std::size_t> perm = seeded_permutation(n, rng);
  perm.resize(k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

struct LoopHooks {
  // Gradient of the mean loss over the given batch indices.
  std::function<ParamGrad(const PolicyParams&, std::span<const std::size_t>)> batch_grad;
  // Probe statistics: {loss, mean_logp_pos, mean_logp_neg}.
  std::function<std::array<double, 3>(const PolicyParams&)> probe_stats;
};

void check_config(const TrainConfig& config) {
  if (!(config.learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be nonnegative");
  if (config.epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  if (config.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(config.eta > 0.0)) throw std::invalid_argument("eta must be positive");
  if (config.log_every < 1) throw std::invalid_argument("log_every must be >= 1");
}

// Shared epoch/batch/trace driver. Batches are taken from a fresh seeded
// permutation each epoch; a trailing partial batch is dropped (the effective
// batch size shrinks to n when the dataset is smaller than one batch).
TrainResult run_loop(PolicyParams params, std::size_t n, const TrainConfig& config, const LoopHooks& hooks) {
  check_config(config);
  TrainResult result;
  Rng rng(config.seed);
  Rng shuffle_rng = rng.child(1);

  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
  const std::size_t batches_per_epoch = n / batch;

  Optimizer opt(config, params);
  LogProbTrace trace;
  long step = 0;
  double initial_loss = kNaN;
  long last_logged = -1;

  const auto log_point = [&]() {
    const auto [loss, pos, neg] = hooks.probe_stats(params);
    trace.points.push_back({step, pos, neg});
    last_logged = step;
    if (std::isnan(initial_loss)) {
      initial_loss = loss;
    } else if (loss > 10.0 * std::abs(initial_loss) + 1.0) {
      throw DivergenceError("training diverged: probe loss " + decimal17(loss) + " vs initial " +
                            decimal17(initial_loss) + "; try a smaller learning rate");
    }
  };

  const auto mask_frozen = [&](ParamGrad& g) {
    if (config.trainable != TrainConfig::Trainable::image_proj) return;
    std::fill(g.token_table.begin(), g.token_table.end(), 0.0);
    std::fill(g.hidden_weights.begin(), g.hidden_weights.end(), 0.0);
    std::fill(g.hidden_bias.begin(), g.hidden_bias.end(), 0.0);
    std::fill(g.context_weights.begin(), g.context_weights.end(), 0.0);
    std::fill(g.bias.begin(), g.bias.end(), 0.0);
  };

  log_point();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = shuffle_rng.child(static_cast<std::uint64_t>(epoch));
    const std::vector<std::size_t> perm = seeded_permutation(n, epoch_rng);
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::span<const std::size_t> idx(perm.data() + b * batch, batch);
      ParamGrad grad = hooks.batch_grad(params, idx);
      mask_frozen(grad);
      opt.step(params, grad);
      ++step;
      if (step % config.log_every == 0) log_point();
    }
  }
  if (last_logged != step) log_point();

  result.params = std::move(params);
  result.trace = std::move(trace);
  return result;
}

std::array<double, 3> sft_probe_stats(const PolicyParams& params, std::span<const AnnotatedExample> examples,
                                      std::span<const std::size_t> probe, Token end_token) {
  std::vector<double> logps(probe.size());
  parallel_for(probe.size(), Exec::parallel, [&](std::size_t i) {
    const AnnotatedExample& ex = examples[probe[i]];
    logps[i] = log_prob(params, ex.image, ex.query, ex.response, end_token);
  });
  const double mean_logp = pairwise_sum(logps) / static_cast<double>(probe.size());
  return {-mean_logp, mean_logp, kNaN};
}

TrainResult run_sft_loop(PolicyParams params, std::span<const AnnotatedExample> examples,
                         const TrainConfig& config, Token end_token) {
  std::vector<std::size_t> probe;
  {
    Rng rng(config.seed);
    Rng probe_rng = rng.child(2);
    probe = probe_indices(examples.size(), config.probe_size, probe_rng);
  }
  LoopHooks hooks;
  hooks.batch_grad = [&](const PolicyParams& p, std::span<const std::size_t> idx) {
    std::vector<AnnotatedExample> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(examples[i]);
    ParamGrad g = sft_grad(p, batch, end_token);
    scale(g, 1.0 / static_cast<double>(idx.size()));
    return g;
  };
  hooks.probe_stats = [&](const PolicyParams& p) { return sft_probe_stats(p, examples, probe, end_token); };
  return run_loop(std::move(params), examples.size(), config, hooks);
}

}  // namespace

TrainResult pretrain_text(PolicyParams params, std::span<const TokenSeq> corpus, const TrainConfig& config,
                          Token end_token, int embed_dim, const TokenSeq& query) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_text: empty corpus");
  std::vector<AnnotatedExample> examples(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    examples[i].image.values.assign(static_cast<std::size_t>(embed_dim), 0.0);
    examples[i].query = query;
    examples[i].response = corpus[i];
    examples[i].source_tag = "pretrain";
  }
  return run_sft_loop(std::move(params), examples, config, end_token);
}

TrainResult align_multimodal(PolicyParams params, std::span<const AnnotatedExample> examples,
                             const TrainConfig& config, Token end_token) {
  if (examples.empty()) {
    TrainResult r;
    r.params = std::move(params);
    return r;
  }
  return run_sft_loop(std::move(params), examples, config, end_token);
}

TrainResult train_sft(PolicyParams params, std::span<const AnnotatedExample> positives, const TrainConfig& config,
                      Token end_token) {
  if (positives.empty()) throw std::invalid_argument("train_sft: empty positives");
  return run_sft_loop(std::move(params), positives, config, end_token);
}

TrainResult train_dpo(PolicyParams params, std::span<const PreferenceTuple> dataset, const TrainConfig& config,
                      Token end_token) {
  if (dataset.empty()) throw std::invalid_argument("train_dpo: empty dataset");
  const PolicyParams ref = params;  // frozen reference, never updated

  std::vector<std::size_t> probe;
  {
    Rng rng(config.seed);
    Rng probe_rng = rng.child(2);
    probe = probe_indices(dataset.size(), config.probe_size, probe_rng);
  }

  LoopHooks hooks;
  hooks.batch_grad = [&](const PolicyParams& p, std::span<const std::size_t> idx) {
    std::vector<PreferenceTuple> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(dataset[i]);
    ParamGrad g = dpo_grad(p, ref, batch, config.eta, end_token);
    scale(g, 1.0 / static_cast<double>(idx.size()));
    return g;
  };
  hooks.probe_stats = [&](const PolicyParams& p) {
    std::vector<double> pos(probe.size()), neg(probe.size()), losses(probe.size());
    parallel_for(probe.size(), Exec::parallel, [&](std::size_t i) {
      const PreferenceTuple& t = dataset[probe[i]];
      const double lw = log_prob(p, t.image, t.query, t.winner(), end_token);
      const double ll = log_prob(p, t.image, t.query, t.loser(), end_token);
      const double lw0 = log_prob(ref, t.image, t.query, t.winner(), end_token);
      const double ll0 = log_prob(ref, t.image, t.query, t.loser(), end_token);
      pos[i] = lw;
      neg[i] = ll;
      losses[i] = dpo_pair_loss(config.eta, (lw - lw0) - (ll - ll0));
    });
    const double inv = 1.0 / static_cast<double>(probe.size());
    return std::array<double, 3>{pairwise_sum(losses) * inv, pairwise_sum(pos) * inv, pairwise_sum(neg) * inv};
  };
  return run_loop(std::move(params), dataset.size(), config, hooks);
}

void save_trace_csv(const LogProbTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_trace_csv: cannot write " + path.string());
  out << "step,mean_logp_pos,mean_logp_neg\n";
  for (const TracePoint& p : trace.points) {
    out << p.step << ',' << decimal17(p.mean_logp_pos) << ',' << decimal17(p.mean_logp_neg) << '\n';
  }
}

void save_trace_json(const LogProbTrace& trace, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const TracePoint& p : trace.points) {
    j.push_back({{"step", p.step},
                 {"mean_logp_pos", decimal17(p.mean_logp_pos)},
                 {"mean_logp_neg", decimal17(p.mean_logp_neg)}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_trace_json: cannot write " + path.string());
  out << j.dump(2) << '\n';
}

LogProbTrace load_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_trace_csv: cannot open " + path.string());
  LogProbTrace trace;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string step, pos, neg;
    std::getline(row, step, ',');
    std::getline(row, pos, ',');
    std::getline(row, neg, ',');
    trace.points.push_back({std::stol(step), parse_decimal(pos), parse_decimal(neg)});
  }
  return trace;
}

std::vector<std::size_t> ablation_subset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw std::invalid_argument("ablation_subset: fraction must be in (0, 1]");
  }
  Rng rng(seed);
  std::vector<std::size_t> perm = seeded_permutation(n, rng);
  const std::size_t k =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  perm.resize(std::min(k, n));
  return perm;
}

namespace {

struct CellStats {
  std::vector<double> obj, resp, acc;
};

AblationCell finish_cell(std::string method, double size, const CellStats& s) {
  const auto mean_of = [](const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    return m / static_cast<double>(xs.size());
  };
  const auto std_of = [&](const std::vector<double>& xs, double m) {
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(xs.size()));
  };
  AblationCell cell;
  cell.method = std::move(method);
  cell.size_fraction = size;
  cell.n_seeds = static_cast<int>(s.obj.size());
  cell.obj_rate_mean = mean_of(s.obj);
  cell.obj_rate_std = std_of(s.obj, cell.obj_rate_mean);
  cell.resp_rate_mean = mean_of(s.resp);
  cell.resp_rate_std = std_of(s.resp, cell.resp_rate_mean);
  cell.pref_acc_mean = mean_of(s.acc);
  cell.pref_acc_std = std_of(s.acc, cell.pref_acc_mean);
  cell.obj_rates = s.obj;
  return cell;
}

}  // namespace

AblationReport run_ablation(const AblationSetup& setup, std::span<const double> sizes, int n_seeds) {
  if (setup.world == nullptr) throw std::invalid_argument("run_ablation: world is required");
  if (n_seeds < 1) throw std::invalid_argument("run_ablation: n_seeds must be >= 1");
  if (sizes.empty()) throw std::invalid_argument("run_ablation: sizes must be nonempty");
  const WorldSpec& world = *setup.world;
  const Token end = world.vocab.end_token;

  const auto evaluate = [&](const PolicyParams& model) {
    Rng eval_rng(setup.eval_seed);
    const auto pairs = greedy_eval_pairs(model, world, setup.eval_scenes, setup.eval_max_len, eval_rng);
    const HallucinationReport rep = hallucination_rates(world, pairs);
    const double acc = setup.heldout.empty()
                           ? 0.5
                           : preference_accuracy(model, setup.aligned, setup.heldout, setup.dpo_config.eta, end);
    return std::array<double, 3>{rep.obj_rate, rep.resp_rate, acc};
  };

  const auto train_cell = [&](std::span<const PreferenceTuple> data, double size, int seed_index,
                              bool dpo) -> std::array<double, 3> {
    const std::uint64_t subset_seed = Rng(setup.dpo_config.seed).child(100 + seed_index).seed();
    const std::vector<std::size_t> subset = ablation_subset(data.size(), size, subset_seed);
    if (dpo) {
      std::vector<PreferenceTuple> slice;
      slice.reserve(subset.size());
      for (std::size_t i : subset) slice.push_back(data[i]);
      TrainConfig cfg = setup.dpo_config;
      cfg.seed = Rng(cfg.seed).child(static_cast<std::uint64_t>(seed_index)).seed();
      const TrainResult r = train_dpo(setup.aligned, slice, cfg, end);
      return evaluate(r.params);
    }
    std::vector<AnnotatedExample> positives;
    positives.reserve(subset.size());
    for (std::size_t i : subset) {
      AnnotatedExample ex;
      ex.image = data[i].image;
      ex.query = data[i].query;
      ex.response = data[i].winner();
      ex.source_tag = "preference_positive";
      positives.push_back(std::move(ex));
    }
    TrainConfig cfg = setup.sft_config;
    cfg.seed = Rng(cfg.seed).child(static_cast<std::uint64_t>(seed_index)).seed();
    const TrainResult r = train_sft(setup.aligned, positives, cfg, end);
    return evaluate(r.params);
  };

  AblationReport report;
  for (double size : sizes) {
    CellStats dpo_stats, sft_stats;
    for (int k = 0; k < n_seeds; ++k) {
      const auto [dobj, dresp, dacc] = train_cell(setup.dataset, size, k, true);
      dpo_stats.obj.push_back(dobj);
      dpo_stats.resp.push_back(dresp);
      dpo_stats.acc.push_back(dacc);
      const auto [sobj, sresp, sacc] = train_cell(setup.dataset, size, k, false);
      sft_stats.obj.push_back(sobj);
      sft_stats.resp.push_back(sresp);
      sft_stats.acc.push_back(sacc);
    }
    report.cells.push_back(finish_cell("dpo", size, dpo_stats));
    report.cells.push_back(finish_cell("sft", size, sft_stats));
  }
  if (!setup.selfgen_dataset.empty()) {
    CellStats selfgen_stats;
    for (int k = 0; k < n_seeds; ++k) {
      const auto [obj, resp, acc] = train_cell(setup.selfgen_dataset, 1.0, k, true);
      selfgen_stats.obj.push_back(obj);
      selfgen_stats.resp.push_back(resp);
      selfgen_stats.acc.push_back(acc);
    }
    report.cells.push_back(finish_cell("dpo_self_generated", 1.0, selfgen_stats));
  }
  return report;
}

void save_ablation_json(const AblationReport& report, const std::filesystem::path& path) {
  nlohmann::json cells = nlohmann::json::array();
  for (const AblationCell& c : report.cells) {
    cells.push_back({{"method", c.method},
                     {"size_fraction", decimal17(c.size_fraction)},
                     {"n_seeds", c.n_seeds},
                     {"obj_rate_mean", decimal17(c.obj_rate_mean)},
                     {"obj_rate_std", decimal17(c.obj_rate_std)},
                     {"resp_rate_mean", decimal17(c.resp_rate_mean)},
                     {"resp_rate_std", decimal17(c.resp_rate_std)},
                     {"pref_acc_mean", decimal17(c.pref_acc_mean)},
                     {"pref_acc_std", decimal17(c.pref_acc_std)},
                     {"obj_rates", decimal17_vec(c.obj_rates)}});
  }
  nlohmann::json j;
  j["cells"] = cells;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_ablation_json: cannot write " + path.string());
  out << j.dump(2) << '\n';
}

AblationReport load_ablation_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_ablation_json: cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  AblationReport report;
  for (const auto& cj : j.at("cells")) {
    AblationCell c;
    c.method = cj.at("method").get<std::string>();
    c.size_fraction = parse_decimal(cj.at("size_fraction").get<std::string>());
    c.n_seeds = cj.at("n_seeds").get<int>();
    c.obj_rate_mean = parse_decimal(cj.at("obj_rate_mean").get<std::string>());
    c.obj_rate_std = parse_decimal(cj.at("obj_rate_std").get<std::string>());
    c.resp_rate_mean = parse_decimal(cj.at("resp_rate_mean").get<std::string>());
    c.resp_rate_std = parse_decimal(cj.at("resp_rate_std").get<std::string>());
    c.pref_acc_mean = parse_decimal(cj.at("pref_acc_mean").get<std::string>());
    c.pref_acc_std = parse_decimal(cj.at("pref_acc_std").get<std::string>());
    c.obj_rates = parse_decimal_vec(cj.at("obj_rates").get<std::vector<std::string>>());
    report.cells.push_back(std::move(c));
  }
  return report;
}

void save_ablation_csv(const AblationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_ablation_csv: cannot write " + path.string());
  out << "method,size_fraction,n_seeds,obj_rate_mean,obj_rate_std,resp_rate_mean,resp_rate_std,"
         "pref_acc_mean,pref_acc_std\n";
  for (const AblationCell& c : report.cells) {
    out << c.method << ',' << decimal17(c.size_fraction) << ',' << c.n_seeds << ',' << decimal17(c.obj_rate_mean)
        << ',' << decimal17(c.obj_rate_std) << ',' << decimal17(c.resp_rate_mean) << ','
        << decimal17(c.resp_rate_std) << ',' << decimal17(c.pref_acc_mean) << ',' << decimal17(c.pref_acc_std)
        << '\n';
  }
}

}  // namespace preflab

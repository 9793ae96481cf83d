#pragma once

// Experiment orchestration: the standard synthetic-language testbed, stock
// training recipes, evaluation harnesses for the study designs (shot sweeps,
// fine-tuning comparisons, coverage ablations, attention studies,
// interventions, re-ranking tables), and deterministic run manifests.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/acoustic.hpp"
#include "miclab/attn.hpp"
#include "miclab/eval.hpp"
#include "miclab/model.hpp"
#include "miclab/prompt.hpp"
#include "miclab/select.hpp"
#include "miclab/synthlang.hpp"
#include "miclab/train.hpp"
#include "miclab/util.hpp"

namespace miclab::experiment {

// ------------------------------------------------------------------ testbed

struct TestbedParams {
  int n_pretrain = 72;
  int n_ft = 40;      // ordered fine-tuning curriculum; first 8 overlap pretrain
  int n_targets = 3;  // held-out evaluation languages
  int train_utts = 2000;
  int dev_utts = 200;
  int test_utts = 200;
  int min_len = 4;
  int max_len = 12;
  double target_sigma = 0.5;
  synth::LanguageParams base;  // sigma field is overridden per language
};

// Noise levels cycle over the named languages.  The pretraining pool stays
// in an easier band than the fine-tuning curriculum, so cross-lingual
// fine-tuning has harder acoustic conditions to teach.
inline double pretrain_sigma(int index) {
  static const double grid[] = {0.05, 0.2, 0.35, 0.5};
  return grid[index % 4];
}

inline double ft_sigma(int index) {
  static const double grid[] = {0.05, 0.3, 0.6, 0.9};
  return grid[index % 4];
}

inline constexpr std::uint64_t kPretrainSeedBase = 101;
inline constexpr std::uint64_t kFtFreshSeedBase = 301;
inline constexpr std::uint64_t kTargetSeedBase = 901;

struct Testbed {
  TestbedParams params;
  std::vector<std::string> pretrain_languages;
  std::vector<std::string> ft_languages;
  std::vector<std::string> target_languages;
  std::map<std::string, synth::LanguageSpec> specs;
  train::CorpusPool pool;  // materialized on demand

  const synth::Corpus& corpus(const std::string& id) {
    auto it = pool.find(id);
    if (it != pool.end()) return it->second;
    auto spec_it = specs.find(id);
    if (spec_it == specs.end())
      throw std::invalid_argument("testbed: unknown language " + id);
    const auto& spec = spec_it->second;
    auto corpus = synth::build_corpus(spec, Rng(spec.seed).split("corpus"),
                                      params.train_utts, params.dev_utts,
                                      params.test_utts, params.min_len,
                                      params.max_len);
    return pool.emplace(id, std::move(corpus)).first->second;
  }

  void materialize(const std::vector<std::string>& ids) {
    for (const auto& id : ids) corpus(id);
  }
};

inline Testbed make_testbed(TestbedParams p = {}) {
  Testbed tb;
  tb.params = p;
  auto add = [&](std::uint64_t seed, double sigma) {
    synth::LanguageParams lp = p.base;
    lp.noise_sigma = sigma;
    auto spec = synth::make_language(seed, lp);
    std::string id = spec.id;
    tb.specs.emplace(id, std::move(spec));
    return id;
  };
  for (int i = 0; i < p.n_pretrain; ++i)
    tb.pretrain_languages.push_back(
        add(kPretrainSeedBase + i, pretrain_sigma(i)));
  // curriculum: the first eight languages match the base model's coverage,
  // the rest are new to it and carry harder noise levels
  for (int i = 0; i < p.n_ft; ++i) {
    if (i < 8 && i < p.n_pretrain)
      tb.ft_languages.push_back(tb.pretrain_languages[i]);
    else
      tb.ft_languages.push_back(add(kFtFreshSeedBase + i, ft_sigma(i)));
  }
  for (int i = 0; i < p.n_targets; ++i)
    tb.target_languages.push_back(add(kTargetSeedBase + i, p.target_sigma));
  return tb;
}

// -------------------------------------------------------------- stock recipes

struct StockRecipe {
  model::ModelConfig model;  // spec defaults: 4 layers, 4 heads, 64 dim
  // Pretraining runs two phases on fresh-language streams: a short-sequence,
  // concentrated-language phase where the in-context circuits form cheaply,
  // then a full-distribution phase covering every shot count, length and
  // noise level the experiments use.
  int phase_a_steps = 5000;
  double phase_a_lr = 1.5e-3;
  int phase_b_steps = 1400;
  double phase_b_lr = 1e-3;
  double fresh_fraction_b = 0.7;
  int pretrain_warmup = 150;
  int xft_steps_per_8 = 100;  // cumulative-data protocol: steps scale with
                              // the number of fine-tuning languages
  int tft_steps = 120;
  double ft_lr = 3e-4;
  int ft_warmup = 20;
  int batch = 8;
  std::uint64_t init_seed = 1;

  StockRecipe() {
    model.dropout = 0.0;
    model.tie_output = true;
  }

  std::vector<train::TrainRegime> pretrain_phases(const Testbed& tb) const {
    train::TrainRegime a;
    a.kind = train::RegimeKind::kPretrain;
    a.languages = tb.pretrain_languages;
    a.held_out = tb.target_languages;
    a.shots = train::ShotSchedule::range(1, 4);
    a.mix = {0.85, 0.0, 0.0, 0.15};
    a.steps = phase_a_steps;
    a.batch_size = batch;
    a.learning_rate = phase_a_lr;
    a.warmup_steps = pretrain_warmup;
    a.fresh_language_fraction = 1.0;
    a.fresh_sigma_lo = 0.05;
    a.fresh_sigma_hi = 0.15;
    a.fresh_sharpness_lo = 2.0;
    a.fresh_sharpness_hi = 3.0;
    a.fresh_active_lo = 5;
    a.fresh_active_hi = 12;
    a.fresh_min_len = 2;
    a.fresh_max_len = 5;
    a.demo_corrupt_prob = 0.05;

    train::TrainRegime b;
    b.kind = train::RegimeKind::kPretrain;
    b.languages = tb.pretrain_languages;
    b.held_out = tb.target_languages;
    b.shots = train::ShotSchedule::range(0, 10);
    b.steps = phase_b_steps;
    b.batch_size = batch;
    b.learning_rate = phase_b_lr;
    b.warmup_steps = pretrain_warmup;
    b.fresh_language_fraction = fresh_fraction_b;
    b.fresh_sigma_lo = 0.05;
    b.fresh_sigma_hi = 0.55;
    b.fresh_sharpness_lo = tb.params.base.bigram_sharpness - 0.3;
    b.fresh_sharpness_hi = tb.params.base.bigram_sharpness + 0.7;
    b.fresh_active_lo = 8;
    b.fresh_active_hi = tb.params.base.vocab_size;
    b.fresh_min_len = tb.params.min_len;
    b.fresh_max_len = tb.params.max_len;
    b.demo_corrupt_prob = 0.05;
    return {a, b};
  }

  model::ModelParams pretrain(Testbed& tb) const {
    tb.materialize(tb.pretrain_languages);
    auto params = model::init_params(model, Rng(init_seed), 0.05);
    auto phases = pretrain_phases(tb);
    for (std::size_t i = 0; i < phases.size(); ++i)
      train::run_training(params, phases[i], tb.pool,
                          Rng(init_seed).split("pretrain").split(i));
    return params;
  }

  // in-context sample count randomly selected from 1 to 10 during fine-tuning
  train::TrainRegime xft_regime(const Testbed& tb, int coverage) const {
    train::TrainRegime r;
    r.kind = train::RegimeKind::kXft;
    r.languages = train::curriculum(tb.ft_languages, coverage,
                                    tb.target_languages);
    r.held_out = tb.target_languages;
    r.shots = train::ShotSchedule::range(1, 10);
    r.steps = xft_steps_per_8 * coverage / 8;
    r.batch_size = batch;
    r.learning_rate = ft_lr;
    r.warmup_steps = ft_warmup;
    return r;
  }

  train::TrainRegime tft_regime(const Testbed& tb,
                                const std::string& target) const {
    train::TrainRegime r;
    r.kind = train::RegimeKind::kTft;
    r.languages = {target};
    r.held_out = tb.target_languages;
    r.shots = train::ShotSchedule::range(1, 10);
    r.steps = tft_steps;
    r.batch_size = batch;
    r.learning_rate = ft_lr;
    r.warmup_steps = ft_warmup;
    return r;
  }
};

// --------------------------------------------------------- evaluation harness

struct EvalOptions {
  select::Strategy strategy = select::Strategy::kRandom;
  select::AudioEmbedMode embed_mode = select::AudioEmbedMode::kStats;
  const acoustic::AcousticModel* am = nullptr;  // for decode-mode embeddings
  bool nearest_last = true;  // most similar demonstration adjacent to target
  int items = 25;
  std::uint64_t seed = 1;
  int threads = 0;  // 0: hardware concurrency
};

// Candidate embeddings for a train split, computed once per strategy.
struct DemoIndex {
  const synth::Corpus* corpus = nullptr;
  select::Strategy strategy = select::Strategy::kRandom;
  select::AudioEmbedMode mode = select::AudioEmbedMode::kStats;
  const acoustic::AcousticModel* am = nullptr;
  std::vector<select::Embedding> candidates;  // empty for random

  static DemoIndex build(const synth::Corpus& corpus, select::Strategy s,
                         select::AudioEmbedMode mode,
                         const acoustic::AcousticModel* am) {
    DemoIndex idx;
    idx.corpus = &corpus;
    idx.strategy = s;
    idx.mode = mode;
    idx.am = am;
    if (s != select::Strategy::kRandom)
      for (const auto& u : corpus.train)
        idx.candidates.push_back(
            select::candidate_embedding(u, s, mode, am));
    return idx;
  }

  // most similar first, ties by candidate id ascending
  std::vector<synth::Utterance> top(const std::vector<double>& target_audio,
                                    int n, Rng& rng) const {
    const auto& train = corpus->train;
    if (n > static_cast<int>(train.size()))
      throw std::invalid_argument("demo index: n exceeds candidate pool");
    if (n == 0) return {};
    if (strategy == select::Strategy::kRandom) {
      auto picked = rng.sample_without_replacement(
          train.size(), static_cast<std::size_t>(n));
      std::vector<synth::Utterance> out;
      for (auto i : picked) out.push_back(train[i]);
      return out;
    }
    auto target = select::target_embedding(
        target_audio, corpus->spec.frame_dim(), strategy, mode, am);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> sims(train.size());
    for (std::size_t i = 0; i < train.size(); ++i)
      sims[i] = select::cosine(candidates[i], target);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sims[a] != sims[b]) return sims[a] > sims[b];
      return train[a].id < train[b].id;
    });
    std::vector<synth::Utterance> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(train[order[i]]);
    return out;
  }
};

inline prompt::PromptLayout build_eval_layout(const synth::Corpus& corpus,
                                              const synth::Utterance& target,
                                              prompt::TaskType task, int shots,
                                              const DemoIndex& index, Rng rng,
                                              bool nearest_last) {
  prompt::ControlVocab ctrl(corpus.spec.vocab_size());
  std::vector<synth::Utterance> demos;
  if (task != prompt::TaskType::kAsr && shots > 0) {
    demos = index.top(target.audio, shots, rng);
    if (nearest_last) std::reverse(demos.begin(), demos.end());
  }
  return prompt::build_prompt(
      task, ctrl, demos,
      task == prompt::TaskType::kTIcl ? std::vector<double>{} : target.audio,
      task == prompt::TaskType::kTIcl ? 0 : corpus.spec.frame_dim());
}

// Token-weighted perplexity for one (task, shots) cell; items and random demo
// draws are pure functions of the seed.
inline double cell_ppl(const model::ModelParams& params,
                       const synth::Corpus& corpus, prompt::TaskType task,
                       int shots, const DemoIndex& index,
                       const EvalOptions& opt) {
  Rng cell_rng = Rng(opt.seed)
                     .split("cell")
                     .split(prompt::task_name(task))
                     .split(static_cast<std::uint64_t>(shots));
  int items = std::min<int>(opt.items, static_cast<int>(corpus.test.size()));
  Rng pick_rng = cell_rng.split("items");
  auto picked = pick_rng.sample_without_replacement(
      corpus.test.size(), static_cast<std::size_t>(items));
  std::vector<eval::PplResult> results(items);
  util::parallel_for(
      items,
      [&](int i) {
        const auto& target = corpus.test[picked[i]];
        auto layout = build_eval_layout(
            corpus, target, task, shots, index,
            cell_rng.split("demos").split(static_cast<std::uint64_t>(i)),
            opt.nearest_last);
        results[i] = eval::perplexity(params, layout, target.tokens);
      },
      opt.threads);
  return eval::corpus_ppl(results);
}

struct SweepRequest {
  std::vector<prompt::TaskType> tasks;
  std::vector<int> shot_grid;
  std::vector<std::uint64_t> seeds;
};

// Rows per (task, shots, seed).  ASR ignores demonstrations but is evaluated
// at every grid column, so a full sweep yields tasks x shots x seeds rows.
inline std::vector<eval::ResultRow> icl_sweep(const model::ModelParams& params,
                                              const synth::Corpus& corpus,
                                              const SweepRequest& req,
                                              EvalOptions opt) {
  std::vector<eval::ResultRow> rows;
  DemoIndex index =
      DemoIndex::build(corpus, opt.strategy, opt.embed_mode, opt.am);
  for (prompt::TaskType task : req.tasks)
    for (int shots : req.shot_grid) {
      for (std::uint64_t seed : req.seeds) {
        opt.seed = seed;
        double ppl = cell_ppl(params, corpus, task, shots, index, opt);
        rows.push_back({corpus.spec.id, prompt::task_name(task), shots, seed,
                        "ppl", ppl});
      }
    }
  return rows;
}

// ------------------------------------------------------------ attention study

struct AttnStudyResult {
  // one entry per requested shot count
  struct PerShot {
    int shots = 0;
    // five-way shares averaged over heads, layers and items
    std::map<std::string, double> five_way;
    double demo_audio_share = 0.0;  // within demonstrations
    double demo_text_share = 0.0;
    std::vector<std::pair<double, double>> layer_profile;
  };
  std::vector<PerShot> per_shot;
};

inline AttnStudyResult attn_study(const model::ModelParams& params,
                                  const synth::Corpus& corpus,
                                  const std::vector<int>& shot_counts,
                                  const EvalOptions& opt) {
  AttnStudyResult out;
  DemoIndex index =
      DemoIndex::build(corpus, opt.strategy, opt.embed_mode, opt.am);
  for (int shots : shot_counts) {
    if (shots < 1)
      throw std::invalid_argument("attn_study: shot counts must be >= 1");
    AttnStudyResult::PerShot cell;
    cell.shots = shots;
    int items = std::min<int>(opt.items, static_cast<int>(corpus.test.size()));
    Rng cell_rng =
        Rng(opt.seed).split("attn").split(static_cast<std::uint64_t>(shots));
    auto picked = cell_rng.split("items").sample_without_replacement(
        corpus.test.size(), static_cast<std::size_t>(items));
    int layers = params.config.layers;
    std::vector<double> audio_by_layer(layers, 0.0), text_by_layer(layers, 0.0);
    std::map<std::string, double> five_way;
    double demo_audio = 0.0, demo_text = 0.0;
    std::vector<attn::AttentionReport> within_reports(items);
    std::vector<attn::AttentionReport> overall_reports(items);
    util::parallel_for(
        items,
        [&](int i) {
          const auto& target = corpus.test[picked[i]];
          auto layout = build_eval_layout(
              corpus, target, prompt::TaskType::kMicl, shots, index,
              cell_rng.split("demos").split(static_cast<std::uint64_t>(i)),
              opt.nearest_last);
          auto trace = model::forward(params, layout, &target.tokens, true);
          auto spans = prompt::segment_spans(layout);
          within_reports[i] =
              attn::attribute(trace, spans, attn::Normalization::kWithinDemos);
          overall_reports[i] = attn::attribute(
              trace, spans, attn::Normalization::kOverAllSegments);
        },
        opt.threads);
    for (int i = 0; i < items; ++i) {
      const auto& within = within_reports[i];
      const auto& overall = overall_reports[i];
      demo_audio += within.global_share(prompt::SegmentKind::kDemoAudio);
      demo_text += within.global_share(prompt::SegmentKind::kDemoText);
      for (int k = 0; k < prompt::kNumSegmentKinds; ++k) {
        auto kind = static_cast<prompt::SegmentKind>(k);
        if (kind == prompt::SegmentKind::kOutput) continue;
        five_way[prompt::segment_name(kind)] += overall.global_share(kind);
      }
      auto profile = attn::layer_profile(within);
      for (int li = 0; li < layers; ++li) {
        audio_by_layer[li] += profile[li].first;
        text_by_layer[li] += profile[li].second;
      }
    }
    cell.demo_audio_share = demo_audio / items;
    cell.demo_text_share = demo_text / items;
    for (auto& [k, v] : five_way) cell.five_way[k] = v / items;
    for (int li = 0; li < layers; ++li)
      cell.layer_profile.push_back(
          {audio_by_layer[li] / items, text_by_layer[li] / items});
    out.per_shot.push_back(std::move(cell));
  }
  return out;
}

// -------------------------------------------------------------- intervention

struct InterventionResult {
  struct Arm {
    std::string mode;  // no_change | replace_text | replace_audio | replace_pair
    double median_ppl = 0.0;
    double demo_audio_share = 0.0;  // shares of the intervened demonstration
    double demo_text_share = 0.0;
    double demo_total_share() const {
      return demo_audio_share + demo_text_share;
    }
  };
  std::vector<Arm> arms;
  int demo_index = 0;

  const Arm& arm(const std::string& mode) const {
    for (const auto& a : arms)
      if (a.mode == mode) return a;
    throw std::invalid_argument("intervention: unknown arm " + mode);
  }
};

// Replaces one demonstration with gold target content (the paper's gold
// replacement probe) and measures perplexity plus the intervened demo's
// attention share, aggregated over items.
inline InterventionResult intervention_study(const model::ModelParams& params,
                                             const synth::Corpus& corpus,
                                             int shots, int demo_index,
                                             const EvalOptions& opt) {
  if (demo_index < 0 || demo_index >= shots)
    throw std::invalid_argument("intervention_study: demo index out of range");
  InterventionResult out;
  out.demo_index = demo_index;
  DemoIndex index =
      DemoIndex::build(corpus, opt.strategy, opt.embed_mode, opt.am);
  prompt::ControlVocab ctrl(corpus.spec.vocab_size());
  int items = std::min<int>(opt.items, static_cast<int>(corpus.test.size()));
  Rng cell_rng = Rng(opt.seed).split("intervene");
  auto picked = cell_rng.split("items").sample_without_replacement(
      corpus.test.size(), static_cast<std::size_t>(items));

  struct ModeSpec {
    std::string name;
    std::optional<attn::InterventionMode> mode;
  };
  std::vector<ModeSpec> modes{{"no_change", std::nullopt},
                              {"replace_text", attn::InterventionMode::kReplaceText},
                              {"replace_audio", attn::InterventionMode::kReplaceAudio},
                              {"replace_pair", attn::InterventionMode::kReplacePair}};
  for (const auto& ms : modes) {
    std::vector<double> ppls(items);
    std::vector<double> audio_shares(items), text_shares(items);
    util::parallel_for(
        items,
        [&](int i) {
          const auto& target = corpus.test[picked[i]];
          auto layout = build_eval_layout(
              corpus, target, prompt::TaskType::kMicl, shots, index,
              cell_rng.split("demos").split(static_cast<std::uint64_t>(i)),
              opt.nearest_last);
          if (ms.mode)
            layout = attn::intervene_gold(layout, ctrl, demo_index, *ms.mode,
                                          target);
          auto trace = model::forward(params, layout, &target.tokens, true);
          ppls[i] = eval::perplexity(params, layout, target.tokens).ppl;
          auto report = attn::attribute(trace, prompt::segment_spans(layout),
                                        attn::Normalization::kWithinDemos);
          audio_shares[i] = report.global_demo_share(demo_index, true);
          text_shares[i] = report.global_demo_share(demo_index, false);
        },
        opt.threads);
    InterventionResult::Arm arm;
    arm.mode = ms.name;
    arm.median_ppl = util::median(ppls);
    for (int i = 0; i < items; ++i) {
      arm.demo_audio_share += audio_shares[i] / items;
      arm.demo_text_share += text_shares[i] / items;
    }
    out.arms.push_back(std::move(arm));
  }
  return out;
}

// ------------------------------------------------------------------ re-ranking

struct RerankSystem {
  std::string name;
  const model::ModelParams* lm = nullptr;
};

struct RerankOptions {
  int n_best = 10;
  int utts = 40;
  int context_shots = 5;
  double lambda_weight = 1.0;
  acoustic::LengthNorm length_norm = acoustic::LengthNorm::kNone;
  double fusion_weight = 1.0;
  int joint_beam = 8;
  int acoustic_steps = 400;
  int ngram_order = 3;
  double ngram_add_k = 0.1;
  std::uint64_t seed = 1;
  select::Strategy strategy = select::Strategy::kRandom;
  bool nearest_last = true;
  int threads = 0;
};

struct RerankRow {
  std::string system;
  double wer = 0.0;
};

// One language, one seed: trains the acoustic model and the n-gram on the
// target train split, then compares selectors over the same N-best lists.
// Emits pooled corpus WER per system plus the N-best lists themselves.
inline std::vector<RerankRow> rerank_language(
    const synth::Corpus& corpus, const std::vector<RerankSystem>& systems,
    const RerankOptions& opt, std::vector<acoustic::NBestList>* nbest_dump) {
  auto am = acoustic::train_acoustic(corpus, Rng(opt.seed).split("acoustic"),
                                     opt.acoustic_steps);
  acoustic::NgramLM ngram(opt.ngram_order, corpus.spec.vocab_size(),
                          opt.ngram_add_k);
  {
    std::vector<std::vector<int>> train_seqs;
    for (const auto& u : corpus.train) train_seqs.push_back(u.tokens);
    ngram.fit(train_seqs);
  }
  int utts = std::min<int>(opt.utts, static_cast<int>(corpus.test.size()));
  Rng rng = Rng(opt.seed).split("rerank");
  auto picked = rng.split("items").sample_without_replacement(
      corpus.test.size(), static_cast<std::size_t>(utts));

  DemoIndex index = DemoIndex::build(corpus, opt.strategy,
                                     select::AudioEmbedMode::kStats, nullptr);
  prompt::ControlVocab ctrl(corpus.spec.vocab_size());

  struct PerUtt {
    acoustic::NBestList list;
    eval::WerResult top1, oracle, ngram_sel, joint;
    std::vector<eval::WerResult> by_system;
  };
  std::vector<PerUtt> per_utt(utts);
  util::parallel_for(
      utts,
      [&](int i) {
        const auto& target = corpus.test[picked[i]];
        PerUtt& row = per_utt[i];
        row.list = acoustic::nbest(am, target.audio, opt.n_best);
        row.list.utt_id = target.id;
        row.top1 = eval::wer(target.tokens, row.list.top().tokens);
        auto oracle = acoustic::oracle_select(row.list, target.tokens);
        row.oracle = eval::wer(target.tokens,
                               oracle.hypothesis(row.list).tokens);
        auto ng = acoustic::select_hypothesis(
            row.list,
            [&](const std::vector<int>& h) {
              return ngram.sequence_log_prob(h);
            },
            opt.lambda_weight, "ngram");
        row.ngram_sel =
            eval::wer(target.tokens, ng.hypothesis(row.list).tokens);
        row.joint = eval::wer(
            target.tokens,
            acoustic::joint_decode(am, target.audio, ngram, opt.fusion_weight,
                                   opt.joint_beam));
        for (const auto& sys : systems) {
          auto layout = build_eval_layout(
              corpus, target, prompt::TaskType::kMicl, opt.context_shots,
              index, rng.split("demos").split(static_cast<std::uint64_t>(i)),
              opt.nearest_last);
          auto sel = acoustic::select_hypothesis(
              row.list,
              [&](const std::vector<int>& h) {
                return acoustic::lm_score_micl(*sys.lm, layout, h,
                                               opt.length_norm);
              },
              opt.lambda_weight, sys.name);
          row.by_system.push_back(
              eval::wer(target.tokens, sel.hypothesis(row.list).tokens));
        }
      },
      opt.threads);

  std::vector<RerankRow> rows;
  auto pooled = [&](const std::function<const eval::WerResult&(const PerUtt&)>&
                        pick) {
    std::vector<eval::WerResult> rs;
    for (const auto& u : per_utt) rs.push_back(pick(u));
    return eval::corpus_wer(rs).pooled;
  };
  rows.push_back({"acoustic", pooled([](const PerUtt& u) -> const auto& {
                    return u.top1;
                  })});
  rows.push_back({"oracle", pooled([](const PerUtt& u) -> const auto& {
                    return u.oracle;
                  })});
  rows.push_back({"ngram", pooled([](const PerUtt& u) -> const auto& {
                    return u.ngram_sel;
                  })});
  rows.push_back({"joint", pooled([](const PerUtt& u) -> const auto& {
                    return u.joint;
                  })});
  for (std::size_t s = 0; s < systems.size(); ++s)
    rows.push_back({systems[s].name,
                    pooled([&](const PerUtt& u) -> const auto& {
                      return u.by_system[s];
                    })});
  if (nbest_dump)
    for (auto& u : per_utt) nbest_dump->push_back(std::move(u.list));
  return rows;
}

}  // namespace miclab::experiment

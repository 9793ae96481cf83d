// Experiment runner for the synthetic multimodal in-context learning lab.
//
// Verbs: gen-data, pretrain, finetune, eval-icl, attn, intervene, rerank,
// joint-decode, report.  Exit codes: 0 success, 2 validation error, 3 runtime
// failure.  MICLAB_OUT sets the default output root (default "runs").

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "miclab/experiment.hpp"
#include "miclab/run.hpp"

namespace fs = std::filesystem;
using namespace miclab;

namespace {

std::string out_root() {
  const char* env = std::getenv("MICLAB_OUT");
  return env && *env ? env : "runs";
}

struct ExperimentFlags {
  std::string config_file;
  // raw key=value overrides applied after the config file; each CLI flag maps
  // onto one config key
  std::vector<std::pair<std::string, std::string>> overrides;

  void bind(CLI::App* cmd, const char* flag, const char* key,
            const char* help) {
    auto holder = std::make_shared<std::string>();
    cmd->add_option_function<std::string>(
           flag,
           [this, key, holder](const std::string& v) {
             overrides.emplace_back(key, v);
           },
           help)
        ->type_name("TEXT");
  }

  run::ExperimentConfig build(const std::string& kind,
                              const std::string& default_out) {
    run::ExperimentConfig config;
    if (!config_file.empty()) config = run::config_from_file(config_file);
    config.kind = kind;
    if (config.out_dir.empty()) config.out_dir = default_out;
    for (const auto& [key, value] : overrides)
      run::config_apply(config, key, value);
    return config;
  }
};

void add_common_flags(CLI::App* cmd, ExperimentFlags& flags) {
  cmd->add_option("--config", flags.config_file,
                  "key=value config file; flags override it");
  flags.bind(cmd, "--out", "out", "output directory");
  flags.bind(cmd, "--target-seeds", "target_seeds",
             "held-out language seeds (comma separated)");
  flags.bind(cmd, "--target-sigma", "target_sigma", "held-out noise sigma");
  flags.bind(cmd, "--train-utts", "train_utts", "train split size");
  flags.bind(cmd, "--test-utts", "test_utts", "test split size");
  flags.bind(cmd, "--seeds", "seeds", "evaluation seeds (comma separated)");
  flags.bind(cmd, "--threads", "threads", "worker threads (0 = all cores)");
}

int run_and_print(run::ExperimentConfig& config) {
  auto manifest = run::run_experiment(config);
  std::cout << "run complete: " << config.out_dir << "\n";
  for (const auto& [path, hash] : manifest.files)
    std::cout << "  " << path << "  " << hash << "\n";
  return 0;
}

model::ModelParams load_base(const std::string& prefix) {
  if (!fs::exists(prefix + ".json") || !fs::exists(prefix + ".bin"))
    throw std::invalid_argument("missing checkpoint: " + prefix + ".json/.bin");
  return model::load_checkpoint(prefix);
}

void save_training_outputs(const model::ModelParams& params,
                           const train::TrainRegime& regime,
                           const train::TrainResult& result,
                           const std::string& prefix) {
  auto parent = fs::path(prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  model::save_checkpoint(params, prefix);
  train::write_loss_csv(result.loss_curve, prefix + ".loss.csv");
  std::ofstream kv(prefix + ".regime.kv", std::ios::binary);
  kv << train::regime_to_kv(regime);
  std::cout << "checkpoint: " << prefix << ".json/.bin\n";
  if (!result.loss_curve.empty())
    std::cout << "loss " << result.loss_curve.front() << " -> "
              << result.loss_curve.back() << " over "
              << result.loss_curve.size() << " steps\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic multimodal in-context learning lab"};
  app.require_subcommand(1);

  // ----------------------------------------------------------- gen-data
  auto* gen = app.add_subcommand("gen-data",
                                 "generate a synthetic language corpus");
  struct {
    std::uint64_t seed = 901;
    double sigma = 0.5;
    int vocab = 30, frame_dim = 8, fpt = 3;
    int train = 2000, dev = 200, test = 200;
    int min_len = 4, max_len = 12;
    std::string out;
  } gd;
  gen->add_option("--seed", gd.seed, "language seed");
  gen->add_option("--sigma", gd.sigma, "noise sigma");
  gen->add_option("--vocab", gd.vocab, "vocabulary size");
  gen->add_option("--frame-dim", gd.frame_dim, "audio frame dimension");
  gen->add_option("--frames-per-token", gd.fpt, "frames per token");
  gen->add_option("--train", gd.train, "train utterances");
  gen->add_option("--dev", gd.dev, "dev utterances");
  gen->add_option("--test", gd.test, "test utterances");
  gen->add_option("--min-len", gd.min_len, "min transcript length");
  gen->add_option("--max-len", gd.max_len, "max transcript length");
  gen->add_option("--out", gd.out, "output prefix (three jsonl files)")
      ->required();

  // ----------------------------------------------------------- pretrain
  auto* pre = app.add_subcommand("pretrain", "pretrain the base model");
  struct {
    std::string out;
    int langs = 72;
    int phase_a_steps = -1;
    int phase_b_steps = -1;
    double lr_a = -1, lr_b = -1;
    int batch = -1;
    double fresh_frac = -1;
    int train_utts = 2000;
    std::uint64_t seed = 1;
  } pt;
  pre->add_option("--out", pt.out, "checkpoint prefix");
  pre->add_option("--langs", pt.langs, "named pretraining languages");
  pre->add_option("--phase-a-steps", pt.phase_a_steps,
                  "short-sequence formation steps");
  pre->add_option("--phase-b-steps", pt.phase_b_steps,
                  "full-distribution steps");
  pre->add_option("--lr-a", pt.lr_a, "phase A learning rate");
  pre->add_option("--lr-b", pt.lr_b, "phase B learning rate");
  pre->add_option("--batch", pt.batch, "batch size");
  pre->add_option("--fresh-frac", pt.fresh_frac,
                  "phase B fraction of fresh-language instances");
  pre->add_option("--train-utts", pt.train_utts, "train split size");
  pre->add_option("--seed", pt.seed, "init/train seed");

  // ----------------------------------------------------------- finetune
  auto* ft = app.add_subcommand("finetune",
                                "cross-lingual or target-language fine-tuning");
  struct {
    std::string base, out, kind = "XFT", target;
    int coverage = 32;
    int steps = -1;
    double lr = -1;
    std::uint64_t seed = 2;
    std::string adapters;  // e.g. decoder_only:4
    int train_utts = 2000;
  } ftf;
  ft->add_option("--base", ftf.base, "base checkpoint prefix")->required();
  ft->add_option("--out", ftf.out, "output checkpoint prefix")->required();
  ft->add_option("--kind", ftf.kind, "XFT or TFT");
  ft->add_option("--coverage", ftf.coverage,
                 "XFT: number of fine-tuning languages (8,16,32,...)");
  ft->add_option("--target", ftf.target,
                 "TFT: target language id (e.g. lang901)");
  ft->add_option("--steps", ftf.steps, "training steps");
  ft->add_option("--lr", ftf.lr, "learning rate");
  ft->add_option("--seed", ftf.seed, "train seed");
  ft->add_option("--adapters", ftf.adapters,
                 "attach low-rank adapters, e.g. decoder_only:4");
  ft->add_option("--train-utts", ftf.train_utts, "train split size");

  // ------------------------------------------------- experiment verbs
  ExperimentFlags icl_flags;
  auto* icl = app.add_subcommand("eval-icl", "shot sweep over prompt designs");
  add_common_flags(icl, icl_flags);
  icl_flags.bind(icl, "--checkpoint", "checkpoint.model", "model prefix");
  icl_flags.bind(icl, "--grid", "shot_grid", "shot grid, e.g. 0,1,3,5,10");
  icl_flags.bind(icl, "--tasks", "tasks", "task list, e.g. MICL,ICL,ASR");
  icl_flags.bind(icl, "--strategy", "strategy",
                 "demo selection: random|text_based|audio_based|combined");
  icl_flags.bind(icl, "--items", "eval_items", "test items per cell");

  ExperimentFlags attn_flags;
  auto* at = app.add_subcommand("attn", "attention allocation study");
  add_common_flags(at, attn_flags);
  attn_flags.bind(at, "--checkpoint", "checkpoint.model", "model prefix");
  attn_flags.bind(at, "--shots", "attn_shots", "shot counts, e.g. 1,3,5,10");
  attn_flags.bind(at, "--items", "eval_items", "test items per shot count");
  attn_flags.bind(at, "--strategy", "strategy", "demo selection strategy");

  ExperimentFlags int_flags;
  auto* iv = app.add_subcommand("intervene", "gold replacement intervention");
  add_common_flags(iv, int_flags);
  int_flags.bind(iv, "--checkpoint", "checkpoint.model", "model prefix");
  int_flags.bind(iv, "--shots", "intervention_shots", "context size");
  int_flags.bind(iv, "--demo-index", "intervention_demo",
                 "demonstration to replace");
  int_flags.bind(iv, "--items", "intervention_items", "test items");
  int_flags.bind(iv, "--strategy", "strategy", "demo selection strategy");

  ExperimentFlags rr_flags;
  std::vector<std::string> rr_checkpoints;
  auto* rr = app.add_subcommand("rerank", "N-best hypothesis selection table");
  add_common_flags(rr, rr_flags);
  rr->add_option("--checkpoint", rr_checkpoints,
                 "LM checkpoints as name=prefix (repeatable)");
  rr_flags.bind(rr, "--utts", "rerank_utts", "test utterances per language");
  rr_flags.bind(rr, "--nbest", "nbest_n", "N-best size");
  rr_flags.bind(rr, "--shots", "rerank_shots", "MICL context size");
  rr_flags.bind(rr, "--lambda", "lambda", "LM score weight");
  rr_flags.bind(rr, "--fusion-weight", "fusion_weight",
                "n-gram weight in joint decoding");
  rr_flags.bind(rr, "--beam", "joint_beam", "joint decoding beam width");
  rr_flags.bind(rr, "--acoustic-steps", "acoustic_steps",
                "acoustic model training steps");
  rr_flags.bind(rr, "--strategy", "strategy", "demo selection strategy");

  ExperimentFlags jd_flags;
  auto* jd = app.add_subcommand(
      "joint-decode", "n-gram shallow-fusion decoding vs hypothesis selection");
  add_common_flags(jd, jd_flags);
  jd_flags.bind(jd, "--utts", "rerank_utts", "test utterances per language");
  jd_flags.bind(jd, "--nbest", "nbest_n", "N-best size");
  jd_flags.bind(jd, "--fusion-weight", "fusion_weight", "n-gram weight");
  jd_flags.bind(jd, "--beam", "joint_beam", "beam width");
  jd_flags.bind(jd, "--acoustic-steps", "acoustic_steps",
                "acoustic model training steps");

  auto* rep = app.add_subcommand("report", "summarize a finished run");
  std::string rep_dir;
  rep->add_option("--run", rep_dir, "run directory")->required();

  auto* plot = app.add_subcommand(
      "plot-data", "print layer-profile series from a finished attn run");
  std::string plot_dir, plot_lang;
  plot->add_option("--run", plot_dir, "attn run directory")->required();
  plot->add_option("--lang", plot_lang, "language id (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      synth::LanguageParams p;
      p.vocab_size = gd.vocab;
      p.frame_dim = gd.frame_dim;
      p.frames_per_token = gd.fpt;
      p.noise_sigma = gd.sigma;
      auto spec = synth::make_language(gd.seed, p);
      auto corpus = synth::build_corpus(spec, Rng(gd.seed).split("corpus"),
                                        gd.train, gd.dev, gd.test, gd.min_len,
                                        gd.max_len);
      auto parent = fs::path(gd.out).parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      synth::write_jsonl(corpus.train, gd.out + "_train.jsonl");
      synth::write_jsonl(corpus.dev, gd.out + "_dev.jsonl");
      synth::write_jsonl(corpus.test, gd.out + "_test.jsonl");
      std::cout << "language " << spec.id << ": " << corpus.train.size()
                << "/" << corpus.dev.size() << "/" << corpus.test.size()
                << " utterances -> " << gd.out << "_{train,dev,test}.jsonl\n";
      return 0;
    }

    if (pre->parsed()) {
      experiment::TestbedParams tbp;
      tbp.n_pretrain = pt.langs;
      tbp.train_utts = pt.train_utts;
      auto tb = experiment::make_testbed(tbp);
      tb.materialize(tb.pretrain_languages);
      experiment::StockRecipe recipe;
      recipe.init_seed = pt.seed;
      if (pt.phase_a_steps >= 0) recipe.phase_a_steps = pt.phase_a_steps;
      if (pt.phase_b_steps >= 0) recipe.phase_b_steps = pt.phase_b_steps;
      if (pt.lr_a > 0) recipe.phase_a_lr = pt.lr_a;
      if (pt.lr_b > 0) recipe.phase_b_lr = pt.lr_b;
      if (pt.batch > 0) recipe.batch = pt.batch;
      if (pt.fresh_frac >= 0) recipe.fresh_fraction_b = pt.fresh_frac;
      auto params = model::init_params(recipe.model, Rng(pt.seed), 0.05);
      auto phases = recipe.pretrain_phases(tb);
      train::TrainResult merged;
      for (std::size_t i = 0; i < phases.size(); ++i) {
        auto result = train::run_training(
            params, phases[i], tb.pool,
            Rng(pt.seed).split("pretrain").split(i));
        merged.loss_curve.insert(merged.loss_curve.end(),
                                 result.loss_curve.begin(),
                                 result.loss_curve.end());
        std::cout << "phase " << (i ? "B" : "A") << " done ("
                  << result.loss_curve.size() << " steps)\n";
      }
      std::string prefix = pt.out.empty()
                               ? (fs::path(out_root()) / "checkpoints" / "base")
                                     .string()
                               : pt.out;
      save_training_outputs(params, phases.back(), merged, prefix);
      return 0;
    }

    if (ft->parsed()) {
      auto params = load_base(ftf.base);
      experiment::TestbedParams tbp;
      tbp.train_utts = ftf.train_utts;
      auto tb = experiment::make_testbed(tbp);
      experiment::StockRecipe recipe;
      train::TrainRegime regime;
      if (ftf.kind == "XFT") {
        regime = recipe.xft_regime(tb, ftf.coverage);
      } else if (ftf.kind == "TFT") {
        if (ftf.target.empty())
          throw std::invalid_argument("finetune: TFT needs --target");
        regime = recipe.tft_regime(tb, ftf.target);
      } else {
        throw std::invalid_argument("finetune: kind must be XFT or TFT");
      }
      if (ftf.steps >= 0) regime.steps = ftf.steps;
      if (ftf.lr > 0) regime.learning_rate = ftf.lr;
      if (!ftf.adapters.empty()) {
        auto colon = ftf.adapters.find(':');
        std::string set_name = ftf.adapters.substr(0, colon);
        int rank = colon == std::string::npos
                       ? 4
                       : std::stoi(ftf.adapters.substr(colon + 1));
        model::apply_adapters(params, model::adapter_set_from_name(set_name),
                              rank, Rng(ftf.seed).split("adapters"));
      }
      tb.materialize(regime.languages);
      auto result =
          train::run_training(params, regime, tb.pool, Rng(ftf.seed).split("ft"));
      save_training_outputs(params, regime, result, ftf.out);
      return 0;
    }

    auto default_out = [&](const char* kind) {
      return (fs::path(out_root()) / kind).string();
    };
    if (icl->parsed()) {
      auto config = icl_flags.build("icl_sweep", default_out("icl_sweep"));
      return run_and_print(config);
    }
    if (at->parsed()) {
      auto config = attn_flags.build("attn_study", default_out("attn_study"));
      return run_and_print(config);
    }
    if (iv->parsed()) {
      auto config =
          int_flags.build("intervention", default_out("intervention"));
      return run_and_print(config);
    }
    if (rr->parsed()) {
      auto config = rr_flags.build("rerank_table", default_out("rerank"));
      for (const auto& spec : rr_checkpoints) {
        auto eq = spec.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument(
              "rerank: --checkpoint expects name=prefix");
        config.checkpoints[spec.substr(0, eq)] = spec.substr(eq + 1);
      }
      return run_and_print(config);
    }
    if (jd->parsed()) {
      auto config =
          jd_flags.build("rerank_table", default_out("joint_decode"));
      config.checkpoints.clear();  // acoustic + n-gram systems only
      return run_and_print(config);
    }
    if (rep->parsed()) {
      std::cout << run::report(rep_dir);
      return 0;
    }
    if (plot->parsed()) {
      bool found = false;
      for (const auto& entry : fs::directory_iterator(plot_dir)) {
        auto name = entry.path().filename().string();
        if (name.rfind("layer_profile_", 0) != 0) continue;
        if (!plot_lang.empty() && name.find(plot_lang) == std::string::npos)
          continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::cout << "# " << name << "\n" << in.rdbuf() << "\n";
        found = true;
      }
      if (!found)
        throw std::invalid_argument("plot-data: no layer-profile series in " +
                                    plot_dir);
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

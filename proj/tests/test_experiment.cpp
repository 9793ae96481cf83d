#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "miclab/experiment.hpp"
#include "miclab/run.hpp"

using namespace miclab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

// small untrained model checkpoint for harness-level tests
std::string tiny_checkpoint(const TempDir& dir) {
  model::ModelConfig config;
  config.layers = 1;
  config.heads = 2;
  config.model_dim = 16;
  config.ff_dim = 32;
  config.language_vocab = 30;
  config.frame_dim = 8;
  config.max_seq_len = 512;
  config.dropout = 0.0;
  auto params = model::init_params(config, Rng(11), 0.1);
  std::string prefix = (dir.path / "tiny").string();
  model::save_checkpoint(params, prefix);
  return prefix;
}

run::ExperimentConfig tiny_sweep_config(const std::string& out,
                                        const std::string& ckpt) {
  run::ExperimentConfig c;
  c.kind = "icl_sweep";
  c.out_dir = out;
  c.checkpoints["model"] = ckpt;
  c.target_seeds = {901};
  c.train_utts = 40;
  c.test_utts = 12;
  c.shot_grid = {0, 1, 2};
  c.tasks = {"MICL", "ASR"};
  c.seeds = {1, 2};
  c.eval_items = 4;
  c.threads = 1;
  return c;
}

}  // namespace

TEST_CASE("testbed construction: curriculum overlap and held-out targets") {
  experiment::TestbedParams p;
  p.n_pretrain = 12;
  p.n_ft = 10;
  p.n_targets = 2;
  p.train_utts = 20;
  p.dev_utts = 0;
  p.test_utts = 5;
  auto tb = experiment::make_testbed(p);
  REQUIRE(tb.pretrain_languages.size() == 12);
  REQUIRE(tb.ft_languages.size() == 10);
  REQUIRE(tb.target_languages.size() == 2);
  // the first eight fine-tuning languages match the base model's coverage
  for (int i = 0; i < 8; ++i)
    CHECK(tb.ft_languages[i] == tb.pretrain_languages[i]);
  CHECK(tb.ft_languages[8] != tb.pretrain_languages[8]);
  // targets never appear in the training lists
  for (const auto& t : tb.target_languages) {
    for (const auto& l : tb.pretrain_languages) CHECK(l != t);
    for (const auto& l : tb.ft_languages) CHECK(l != t);
  }
  // corpora materialize on demand and are cached
  const auto& c1 = tb.corpus(tb.target_languages[0]);
  CHECK(c1.train.size() == 20);
  CHECK(&tb.corpus(tb.target_languages[0]) == &c1);
  CHECK_THROWS_AS(tb.corpus("lang-unknown"), std::invalid_argument);
}

TEST_CASE("stock recipes validate and scale fine-tuning steps with coverage") {
  experiment::TestbedParams p;
  p.n_pretrain = 12;
  p.n_ft = 16;
  p.n_targets = 1;
  auto tb = experiment::make_testbed(p);
  experiment::StockRecipe recipe;
  auto phases = recipe.pretrain_phases(tb);
  REQUIRE(phases.size() == 2);
  for (const auto& phase : phases) CHECK_NOTHROW(phase.validate());
  auto x8 = recipe.xft_regime(tb, 8);
  auto x16 = recipe.xft_regime(tb, 16);
  CHECK_NOTHROW(x8.validate());
  CHECK(x16.steps == 2 * x8.steps);
  CHECK(x16.languages.size() == 16);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(x16.languages[i] == x8.languages[i]);
  auto tft = recipe.tft_regime(tb, tb.target_languages[0]);
  CHECK_NOTHROW(tft.validate());
  CHECK(tft.languages == std::vector<std::string>{tb.target_languages[0]});
}

TEST_CASE("demo index reproduces select_demos rankings") {
  synth::LanguageParams p;
  p.noise_sigma = 0.1;
  auto spec = synth::make_language(31, p);
  auto corpus = synth::build_corpus(spec, Rng(31).split("corpus"), 40, 0, 5);
  for (auto strategy : {select::Strategy::kTextBased,
                        select::Strategy::kAudioBased,
                        select::Strategy::kCombined}) {
    auto index = experiment::DemoIndex::build(
        corpus, strategy, select::AudioEmbedMode::kStats, nullptr);
    Rng r1(5), r2(5);
    auto via_index = index.top(corpus.test[0].audio, 6, r1);
    auto via_select =
        select::select_demos(strategy, corpus.train, corpus.test[0].audio,
                             corpus.spec.frame_dim(), 6, r2);
    REQUIRE(via_index.size() == via_select.size());
    for (std::size_t i = 0; i < via_index.size(); ++i)
      CHECK(via_index[i].id == via_select[i].id);
  }
}

TEST_CASE("cell_ppl is deterministic and thread-count independent") {
  TempDir dir("miclab_cellppl");
  auto ckpt = tiny_checkpoint(dir);
  auto params = model::load_checkpoint(ckpt);
  synth::LanguageParams p;
  p.noise_sigma = 0.3;
  auto spec = synth::make_language(55, p);
  auto corpus = synth::build_corpus(spec, Rng(55).split("corpus"), 30, 0, 10);
  auto index = experiment::DemoIndex::build(
      corpus, select::Strategy::kRandom, select::AudioEmbedMode::kStats,
      nullptr);
  experiment::EvalOptions opt;
  opt.items = 6;
  opt.seed = 3;
  opt.threads = 1;
  double a = experiment::cell_ppl(params, corpus, prompt::TaskType::kMicl, 2,
                                  index, opt);
  opt.threads = 2;
  double b = experiment::cell_ppl(params, corpus, prompt::TaskType::kMicl, 2,
                                  index, opt);
  CHECK(a == b);
}

TEST_CASE("icl_sweep emits tasks x shots x seeds rows per language") {
  TempDir dir("miclab_sweeprows");
  auto params = model::load_checkpoint(tiny_checkpoint(dir));
  synth::LanguageParams p;
  auto spec = synth::make_language(77, p);
  auto corpus = synth::build_corpus(spec, Rng(77).split("corpus"), 30, 0, 8);
  experiment::SweepRequest req;
  req.tasks = {prompt::TaskType::kTIcl, prompt::TaskType::kIcl,
               prompt::TaskType::kMicl, prompt::TaskType::kAsr};
  req.shot_grid = {0, 1, 2};
  req.seeds = {1, 2, 3};
  experiment::EvalOptions opt;
  opt.items = 3;
  opt.threads = 1;
  auto rows = experiment::icl_sweep(params, corpus, req, opt);
  CHECK(rows.size() == 4 * 3 * 3);
}

TEST_CASE("experiment config round trips and hashes ignore the output dir") {
  run::ExperimentConfig c;
  c.kind = "icl_sweep";
  c.out_dir = "/tmp/a";
  c.checkpoints["model"] = "ck/base";
  c.shot_grid = {0, 1, 3};
  c.tasks = {"MICL"};
  c.seeds = {7};
  auto text = run::config_to_kv(c);
  auto back = run::config_from_kv(text);
  CHECK(back.kind == c.kind);
  CHECK(back.out_dir == c.out_dir);
  CHECK(back.checkpoints == c.checkpoints);
  CHECK(back.shot_grid == c.shot_grid);
  CHECK(back.tasks == c.tasks);
  CHECK(back.seeds == c.seeds);

  auto other = c;
  other.out_dir = "/tmp/b";
  CHECK(run::config_hash(c) == run::config_hash(other));
  other.shot_grid = {0, 1};
  CHECK(run::config_hash(c) != run::config_hash(other));

  CHECK_THROWS_AS(run::config_apply(c, "bogus_key", "1"),
                  std::invalid_argument);
}

TEST_CASE("run_experiment validates kind and checkpoint paths") {
  TempDir dir("miclab_runval");
  auto config = tiny_sweep_config((dir.path / "out").string(), "nope");
  config.kind = "banana";
  CHECK_THROWS_AS(run::run_experiment(config), std::invalid_argument);
  config.kind = "icl_sweep";
  CHECK_THROWS_WITH_AS(run::run_experiment(config),
                       doctest::Contains("nope"), std::invalid_argument);
}

TEST_CASE("icl_sweep runs are deterministic, resumable and reportable") {
  TempDir dir("miclab_runfull");
  auto ckpt = tiny_checkpoint(dir);

  auto c1 = tiny_sweep_config((dir.path / "run1").string(), ckpt);
  auto m1 = run::run_experiment(c1);
  REQUIRE_FALSE(m1.files.empty());
  CHECK(fs::exists(dir.path / "run1" / "results.csv"));
  CHECK(fs::exists(dir.path / "run1" / "summary.md"));
  CHECK(fs::exists(dir.path / "run1" / "manifest.json"));

  // identical config, fresh directory: hash-identical result files
  auto c2 = tiny_sweep_config((dir.path / "run2").string(), ckpt);
  auto m2 = run::run_experiment(c2);
  REQUIRE(m1.files.size() == m2.files.size());
  for (std::size_t i = 0; i < m1.files.size(); ++i) {
    CHECK(m1.files[i].first == m2.files[i].first);
    CHECK(m1.files[i].second == m2.files[i].second);
  }

  // rerun in place resumes from the manifest without changing anything
  auto before = util::hash_file((dir.path / "run1" / "results.csv").string());
  auto m3 = run::run_experiment(c1);
  CHECK(util::hash_file((dir.path / "run1" / "results.csv").string()) ==
        before);

  // report renders trend lines and plot data
  auto md = run::report((dir.path / "run1").string());
  CHECK(md.find("## trends") != std::string::npos);
  CHECK(fs::exists(dir.path / "run1" / "report.md"));
  CHECK(fs::exists(dir.path / "run1" / "plot_ppl_lang901.csv"));

  // incomplete run: drop a seed from the results and expect missing cells
  {
    auto rows =
        eval::read_results_csv((dir.path / "run1" / "results.csv").string());
    std::vector<eval::ResultRow> filtered;
    for (const auto& r : rows)
      if (r.seed != 2) filtered.push_back(r);
    eval::write_results_csv(filtered,
                            (dir.path / "run1" / "results.csv").string());
  }
  CHECK_THROWS_WITH_AS(run::report((dir.path / "run1").string()),
                       doctest::Contains("missing"), std::runtime_error);
}

TEST_CASE("intervention and rerank runs emit their artifacts") {
  TempDir dir("miclab_runkinds");
  auto ckpt = tiny_checkpoint(dir);

  run::ExperimentConfig iv;
  iv.kind = "intervention";
  iv.out_dir = (dir.path / "iv").string();
  iv.checkpoints["model"] = ckpt;
  iv.target_seeds = {901};
  iv.train_utts = 30;
  iv.test_utts = 8;
  iv.seeds = {1};
  iv.intervention_shots = 3;
  iv.intervention_demo = 1;
  iv.intervention_items = 3;
  iv.threads = 1;
  run::run_experiment(iv);
  std::ifstream in(dir.path / "iv" / "intervention.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "lang,seed,mode,median_ppl,demo_audio_share,demo_text_share");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);  // one per intervention arm

  run::ExperimentConfig rr;
  rr.kind = "rerank_table";
  rr.out_dir = (dir.path / "rr").string();
  rr.checkpoints["base"] = ckpt;
  rr.target_seeds = {901};
  rr.train_utts = 40;
  rr.test_utts = 10;
  rr.seeds = {1};
  rr.rerank_utts = 5;
  rr.nbest_n = 4;
  rr.rerank_shots = 2;
  rr.acoustic_steps = 60;
  rr.threads = 1;
  auto manifest = run::run_experiment(rr);
  CHECK(fs::exists(dir.path / "rr" / "rerank.csv"));
  CHECK(fs::exists(dir.path / "rr" / "nbest_lang901_seed1.jsonl"));
  auto lists = acoustic::read_nbest_jsonl(
      (dir.path / "rr" / "nbest_lang901_seed1.jsonl").string());
  CHECK(lists.size() == 5);
  CHECK(lists[0].hyps.size() == 4);
  // oracle never exceeds any other selector in the emitted table
  std::ifstream rrin(dir.path / "rr" / "rerank.csv");
  std::getline(rrin, header);
  double oracle = 1e9, worst = -1e9;
  while (std::getline(rrin, line)) {
    if (line.empty()) continue;
    auto last = line.rfind(',');
    double wer = std::stod(line.substr(last + 1));
    if (line.find(",oracle,") != std::string::npos)
      oracle = wer;
    else
      worst = std::max(worst, wer);
  }
  CHECK(oracle <= worst + 1e-12);

  auto md = run::report((dir.path / "rr").string());
  CHECK(md.find("median WER") != std::string::npos);
}

TEST_CASE("ensure_checkpoint builds once and reloads after") {
  TempDir dir("miclab_ensure");
  int builds = 0;
  auto build = [&]() {
    ++builds;
    model::ModelConfig config;
    config.layers = 1;
    config.heads = 1;
    config.model_dim = 8;
    config.ff_dim = 8;
    config.language_vocab = 6;
    config.frame_dim = 3;
    config.max_seq_len = 32;
    return model::init_params(config, Rng(1), 0.1);
  };
  std::string prefix = (dir.path / "cache" / "model").string();
  auto a = run::ensure_checkpoint(prefix, build);
  auto b = run::ensure_checkpoint(prefix, build);
  CHECK(builds == 1);
  CHECK(a.tok_emb->data == b.tok_emb->data);
}

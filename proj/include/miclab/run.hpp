#pragma once

// Deterministic experiment runs: key-value configs, per-artifact resume, and
// manifests hashing every emitted file.  (config, code version) fully
// determine the bytes of each result file.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/experiment.hpp"
#include "miclab/util.hpp"

namespace miclab::run {

namespace fs = std::filesystem;

struct ExperimentConfig {
  std::string kind;  // icl_sweep | ft_compare | coverage_ablation |
                     // attn_study | rerank_table | intervention
  std::string out_dir;
  // named model checkpoints (prefix without extension); single-model kinds
  // use the name "model"
  std::map<std::string, std::string> checkpoints;

  std::vector<std::uint64_t> target_seeds = {901, 902, 903};
  double target_sigma = 0.5;
  int train_utts = 2000;
  int test_utts = 200;

  std::vector<int> shot_grid = {0, 1, 2, 3, 5, 10, 25, 50, 100};
  std::vector<std::string> tasks = {"T-ICL", "ICL", "MICL", "ASR"};
  std::string strategy = "random";
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int eval_items = 25;

  std::vector<int> attn_shots = {1, 3, 5, 10};
  int intervention_shots = 10;
  int intervention_demo = 4;
  int intervention_items = 20;

  int nbest_n = 10;
  int rerank_utts = 40;
  int rerank_shots = 5;
  double lambda_weight = 1.0;
  double fusion_weight = 1.0;
  int joint_beam = 8;
  int acoustic_steps = 400;

  int threads = 0;  // execution detail, excluded from the config hash
};

namespace detail {

inline std::string join_u64(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string join_int(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string join_str(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += v[i];
  }
  return s;
}

template <class T>
std::vector<T> split_as(const std::string& s,
                        const std::function<T(const std::string&)>& parse) {
  std::vector<T> out;
  std::size_t p = 0;
  while (p < s.size()) {
    std::size_t c = s.find(',', p);
    if (c == std::string::npos) c = s.size();
    if (c > p) out.push_back(parse(s.substr(p, c - p)));
    p = c + 1;
  }
  return out;
}

inline std::vector<int> split_int(const std::string& s) {
  return split_as<int>(s, [](const std::string& x) { return std::stoi(x); });
}
inline std::vector<std::uint64_t> split_u64(const std::string& s) {
  return split_as<std::uint64_t>(
      s, [](const std::string& x) { return std::stoull(x); });
}
inline std::vector<std::string> split_str(const std::string& s) {
  return split_as<std::string>(s, [](const std::string& x) { return x; });
}

}  // namespace detail

// Canonical key-value dump; used for files, flags and the config hash.
inline std::string config_to_kv(const ExperimentConfig& c,
                                bool include_out = true) {
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  std::map<std::string, std::string> kv;
  kv["kind"] = c.kind;
  if (include_out) kv["out"] = c.out_dir;
  for (const auto& [name, prefix] : c.checkpoints)
    kv["checkpoint." + name] = prefix;
  kv["target_seeds"] = detail::join_u64(c.target_seeds);
  kv["target_sigma"] = fmt(c.target_sigma);
  kv["train_utts"] = std::to_string(c.train_utts);
  kv["test_utts"] = std::to_string(c.test_utts);
  kv["shot_grid"] = detail::join_int(c.shot_grid);
  kv["tasks"] = detail::join_str(c.tasks);
  kv["strategy"] = c.strategy;
  kv["seeds"] = detail::join_u64(c.seeds);
  kv["eval_items"] = std::to_string(c.eval_items);
  kv["attn_shots"] = detail::join_int(c.attn_shots);
  kv["intervention_shots"] = std::to_string(c.intervention_shots);
  kv["intervention_demo"] = std::to_string(c.intervention_demo);
  kv["intervention_items"] = std::to_string(c.intervention_items);
  kv["nbest_n"] = std::to_string(c.nbest_n);
  kv["rerank_utts"] = std::to_string(c.rerank_utts);
  kv["rerank_shots"] = std::to_string(c.rerank_shots);
  kv["lambda"] = fmt(c.lambda_weight);
  kv["fusion_weight"] = fmt(c.fusion_weight);
  kv["joint_beam"] = std::to_string(c.joint_beam);
  kv["acoustic_steps"] = std::to_string(c.acoustic_steps);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline void config_apply(ExperimentConfig& c, const std::string& key,
                         const std::string& value) {
  if (key == "kind") c.kind = value;
  else if (key == "out") c.out_dir = value;
  else if (key.rfind("checkpoint.", 0) == 0)
    c.checkpoints[key.substr(11)] = value;
  else if (key == "target_seeds") c.target_seeds = detail::split_u64(value);
  else if (key == "target_sigma") c.target_sigma = std::stod(value);
  else if (key == "train_utts") c.train_utts = std::stoi(value);
  else if (key == "test_utts") c.test_utts = std::stoi(value);
  else if (key == "shot_grid") c.shot_grid = detail::split_int(value);
  else if (key == "tasks") c.tasks = detail::split_str(value);
  else if (key == "strategy") c.strategy = value;
  else if (key == "seeds") c.seeds = detail::split_u64(value);
  else if (key == "eval_items") c.eval_items = std::stoi(value);
  else if (key == "attn_shots") c.attn_shots = detail::split_int(value);
  else if (key == "intervention_shots") c.intervention_shots = std::stoi(value);
  else if (key == "intervention_demo") c.intervention_demo = std::stoi(value);
  else if (key == "intervention_items") c.intervention_items = std::stoi(value);
  else if (key == "nbest_n") c.nbest_n = std::stoi(value);
  else if (key == "rerank_utts") c.rerank_utts = std::stoi(value);
  else if (key == "rerank_shots") c.rerank_shots = std::stoi(value);
  else if (key == "lambda") c.lambda_weight = std::stod(value);
  else if (key == "fusion_weight") c.fusion_weight = std::stod(value);
  else if (key == "joint_beam") c.joint_beam = std::stoi(value);
  else if (key == "acoustic_steps") c.acoustic_steps = std::stoi(value);
  else if (key == "threads") c.threads = std::stoi(value);
  else throw std::invalid_argument("experiment config: unknown key " + key);
}

inline ExperimentConfig config_from_kv(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("experiment config: malformed line " + line);
    config_apply(c, line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

inline ExperimentConfig config_from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::invalid_argument("experiment config: missing file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_kv(ss.str());
}

inline std::string config_hash(const ExperimentConfig& c) {
  return util::hash_string(config_to_kv(c, /*include_out=*/false));
}

// ------------------------------------------------------------------ manifest

struct RunManifest {
  std::string code_version;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  double wall_clock_sec = 0.0;  // informational; not part of any hash
  std::vector<std::pair<std::string, std::string>> files;  // path -> hash

  nlohmann::json to_json() const {
    nlohmann::json files_json = nlohmann::json::array();
    for (const auto& [path, hash] : files)
      files_json.push_back({{"path", path}, {"hash", hash}});
    return {{"code_version", code_version},
            {"config_hash", config_hash},
            {"seeds", seeds},
            {"wall_clock_sec", wall_clock_sec},
            {"files", files_json}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.code_version = j.at("code_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    for (const auto& f : j.at("files"))
      m.files.emplace_back(f.at("path").get<std::string>(),
                           f.at("hash").get<std::string>());
    return m;
  }
};

inline void write_manifest(const RunManifest& m, const std::string& dir) {
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + dir);
  out << m.to_json().dump(2) << "\n";
}

inline RunManifest read_manifest(const std::string& dir) {
  auto path = fs::path(dir) / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::invalid_argument("read_manifest: missing " + path.string());
  return RunManifest::from_json(nlohmann::json::parse(in));
}

// Per-artifact resume: an artifact is reused when the old manifest lists it
// with a hash matching the file on disk; otherwise the producer runs again.
class RunContext {
 public:
  RunContext(std::string dir, std::string config_hash)
      : dir_(std::move(dir)), config_hash_(std::move(config_hash)) {
    fs::create_directories(dir_);
    auto manifest_path = fs::path(dir_) / "manifest.json";
    if (fs::exists(manifest_path)) {
      auto old = read_manifest(dir_);
      if (old.config_hash == config_hash_)
        for (const auto& [path, hash] : old.files) old_hashes_[path] = hash;
    }
  }

  const std::string& dir() const { return dir_; }

  std::string path_of(const std::string& name) const {
    return (fs::path(dir_) / name).string();
  }

  // producer writes the file at the given absolute path
  void ensure(const std::string& name,
              const std::function<void(const std::string&)>& producer) {
    std::string full = path_of(name);
    auto it = old_hashes_.find(name);
    if (it != old_hashes_.end() && fs::exists(full) &&
        util::hash_file(full) == it->second) {
      files_.emplace_back(name, it->second);
      return;
    }
    producer(full);
    files_.emplace_back(name, util::hash_file(full));
  }

  RunManifest finish(const std::vector<std::uint64_t>& seeds,
                     double wall_clock_sec) const {
    RunManifest m;
    m.code_version = util::kCodeVersion;
    m.config_hash = config_hash_;
    m.seeds = seeds;
    m.wall_clock_sec = wall_clock_sec;
    m.files = files_;
    write_manifest(m, dir_);
    return m;
  }

 private:
  std::string dir_;
  std::string config_hash_;
  std::map<std::string, std::string> old_hashes_;
  std::vector<std::pair<std::string, std::string>> files_;
};

// ------------------------------------------------------------ run dispatch

inline model::ModelParams load_named_checkpoint(const ExperimentConfig& c,
                                                const std::string& name) {
  auto it = c.checkpoints.find(name);
  if (it == c.checkpoints.end())
    throw std::invalid_argument("experiment: config names no checkpoint '" +
                                name + "'");
  if (!fs::exists(it->second + ".json") || !fs::exists(it->second + ".bin"))
    throw std::invalid_argument("experiment: missing checkpoint file " +
                                it->second + ".json/.bin");
  return model::load_checkpoint(it->second);
}

inline std::vector<synth::Corpus> target_corpora(const ExperimentConfig& c) {
  std::vector<synth::Corpus> out;
  for (std::uint64_t seed : c.target_seeds) {
    synth::LanguageParams p;
    p.noise_sigma = c.target_sigma;
    auto spec = synth::make_language(seed, p);
    out.push_back(synth::build_corpus(spec, Rng(seed).split("corpus"),
                                      c.train_utts, 0, c.test_utts));
  }
  return out;
}

inline experiment::SweepRequest sweep_request(const ExperimentConfig& c) {
  experiment::SweepRequest req;
  for (const auto& t : c.tasks) req.tasks.push_back(prompt::task_from_name(t));
  req.shot_grid = c.shot_grid;
  req.seeds = c.seeds;
  return req;
}

inline experiment::EvalOptions eval_options(const ExperimentConfig& c) {
  experiment::EvalOptions opt;
  opt.strategy = select::strategy_from_name(c.strategy);
  opt.items = c.eval_items;
  opt.threads = c.threads;
  return opt;
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// medians over seeds for every (lang, task, shots) cell
inline std::map<std::tuple<std::string, std::string, int>, double>
cell_medians(const std::vector<eval::ResultRow>& rows) {
  std::map<std::tuple<std::string, std::string, int>, std::vector<double>> acc;
  for (const auto& r : rows)
    if (r.metric == "ppl")
      acc[{r.lang, r.task, r.shots}].push_back(r.value);
  std::map<std::tuple<std::string, std::string, int>, double> out;
  for (auto& [key, values] : acc) out[key] = util::median(values);
  return out;
}

inline std::string sweep_summary_md(const std::vector<eval::ResultRow>& rows,
                                    const std::vector<int>& shot_grid,
                                    const std::vector<std::string>& tasks,
                                    const std::string& title) {
  auto medians = cell_medians(rows);
  std::set<std::string> langs;
  for (const auto& r : rows) langs.insert(r.lang);
  std::string md = "# " + title + "\n\nMedian token-weighted perplexity over seeds.\n";
  for (const auto& lang : langs) {
    md += "\n## " + lang + "\n\n| task |";
    for (int s : shot_grid) md += " " + std::to_string(s) + " |";
    md += "\n|---|";
    for (std::size_t i = 0; i < shot_grid.size(); ++i) md += "---|";
    md += "\n";
    for (const auto& task : tasks) {
      md += "| " + task + " |";
      for (int s : shot_grid) {
        auto it = medians.find({lang, task, s});
        md += it == medians.end() ? " - |" : " " + fmt_double(it->second) + " |";
      }
      md += "\n";
    }
  }
  return md;
}

}  // namespace detail

inline RunManifest run_experiment(const ExperimentConfig& config) {
  static const std::set<std::string> kinds{
      "icl_sweep",      "ft_compare",  "coverage_ablation",
      "attn_study",     "rerank_table", "intervention"};
  if (!kinds.count(config.kind))
    throw std::invalid_argument("experiment: unknown kind '" + config.kind +
                                "'");
  if (config.out_dir.empty())
    throw std::invalid_argument("experiment: empty output directory");
  if (config.seeds.empty())
    throw std::invalid_argument("experiment: empty seed list");
  for (std::size_t i = 1; i < config.shot_grid.size(); ++i)
    if (config.shot_grid[i - 1] > config.shot_grid[i])
      throw std::invalid_argument("experiment: shot grid must be ascending");

  auto t0 = std::chrono::steady_clock::now();
  RunContext ctx(config.out_dir, config_hash(config));
  // canonical dump: the run's own location is not part of its identity
  ctx.ensure("config.kv", [&](const std::string& path) {
    detail::write_text(path, config_to_kv(config, /*include_out=*/false));
  });

  auto corpora = target_corpora(config);

  if (config.kind == "icl_sweep") {
    auto params = load_named_checkpoint(config, "model");
    ctx.ensure("results.csv", [&](const std::string& path) {
      std::vector<eval::ResultRow> rows;
      for (const auto& corpus : corpora) {
        auto lang_rows = experiment::icl_sweep(params, corpus,
                                               sweep_request(config),
                                               eval_options(config));
        rows.insert(rows.end(), lang_rows.begin(), lang_rows.end());
      }
      eval::write_results_csv(rows, path);
    });
    ctx.ensure("summary.md", [&](const std::string& path) {
      auto rows = eval::read_results_csv(ctx.path_of("results.csv"));
      detail::write_text(path,
                         detail::sweep_summary_md(rows, config.shot_grid,
                                                  config.tasks,
                                                  "in-context learning sweep"));
    });
  } else if (config.kind == "ft_compare" ||
             config.kind == "coverage_ablation") {
    for (const auto& [name, prefix] : config.checkpoints) {
      auto params = load_named_checkpoint(config, name);
      ctx.ensure("results_" + name + ".csv", [&](const std::string& path) {
        std::vector<eval::ResultRow> rows;
        for (const auto& corpus : corpora) {
          auto lang_rows = experiment::icl_sweep(params, corpus,
                                                 sweep_request(config),
                                                 eval_options(config));
          rows.insert(rows.end(), lang_rows.begin(), lang_rows.end());
        }
        eval::write_results_csv(rows, path);
      });
    }
    ctx.ensure("summary.md", [&](const std::string& path) {
      std::string md = "# " + config.kind + "\n\nMedian perplexity by system.\n";
      for (const auto& [name, prefix] : config.checkpoints) {
        auto rows =
            eval::read_results_csv(ctx.path_of("results_" + name + ".csv"));
        md += "\n## system: " + name + "\n" +
              detail::sweep_summary_md(rows, config.shot_grid, config.tasks,
                                       name);
      }
      detail::write_text(path, md);
    });
  } else if (config.kind == "attn_study") {
    auto params = load_named_checkpoint(config, "model");
    std::map<std::string, experiment::AttnStudyResult> cache;
    auto study_for = [&](const synth::Corpus& corpus)
        -> const experiment::AttnStudyResult& {
      auto it = cache.find(corpus.spec.id);
      if (it != cache.end()) return it->second;
      auto opt = eval_options(config);
      return cache
          .emplace(corpus.spec.id,
                   experiment::attn_study(params, corpus, config.attn_shots,
                                          opt))
          .first->second;
    };
    for (const auto& corpus : corpora) {
      const std::string tag = corpus.spec.id;
      ctx.ensure("attn_" + tag + ".csv", [&](const std::string& path) {
        const auto& study = study_for(corpus);
        std::ofstream out(path, std::ios::binary);
        out << "shots,segment,share\n";
        char buf[96];
        for (const auto& cell : study.per_shot) {
          for (const auto& [segment, share] : cell.five_way) {
            std::snprintf(buf, sizeof(buf), "%d,%s,%.9g\n", cell.shots,
                          segment.c_str(), share);
            out << buf;
          }
          std::snprintf(buf, sizeof(buf), "%d,DemoAudioWithin,%.9g\n",
                        cell.shots, cell.demo_audio_share);
          out << buf;
          std::snprintf(buf, sizeof(buf), "%d,DemoTextWithin,%.9g\n",
                        cell.shots, cell.demo_text_share);
          out << buf;
        }
      });
      ctx.ensure("layer_profile_" + tag + ".csv",
                 [&](const std::string& path) {
                   const auto& study = study_for(corpus);
                   std::ofstream out(path, std::ios::binary);
                   out << "shots,layer,audio_share,text_share\n";
                   char buf[96];
                   for (const auto& cell : study.per_shot)
                     for (std::size_t li = 0; li < cell.layer_profile.size();
                          ++li) {
                       std::snprintf(buf, sizeof(buf), "%d,%zu,%.9g,%.9g\n",
                                     cell.shots, li,
                                     cell.layer_profile[li].first,
                                     cell.layer_profile[li].second);
                       out << buf;
                     }
                 });
    }
  } else if (config.kind == "intervention") {
    auto params = load_named_checkpoint(config, "model");
    ctx.ensure("intervention.csv", [&](const std::string& path) {
      std::ofstream out(path, std::ios::binary);
      out << "lang,seed,mode,median_ppl,demo_audio_share,demo_text_share\n";
      char buf[160];
      for (const auto& corpus : corpora)
        for (std::uint64_t seed : config.seeds) {
          auto opt = eval_options(config);
          opt.items = config.intervention_items;
          opt.seed = seed;
          auto result = experiment::intervention_study(
              params, corpus, config.intervention_shots,
              config.intervention_demo, opt);
          for (const auto& arm : result.arms) {
            std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%.9g,%.9g,%.9g\n",
                          corpus.spec.id.c_str(),
                          static_cast<unsigned long long>(seed),
                          arm.mode.c_str(), arm.median_ppl,
                          arm.demo_audio_share, arm.demo_text_share);
            out << buf;
          }
        }
    });
  } else if (config.kind == "rerank_table") {
    std::vector<model::ModelParams> lms;
    std::vector<experiment::RerankSystem> systems;
    for (const auto& [name, prefix] : config.checkpoints)
      lms.push_back(load_named_checkpoint(config, name));
    {
      std::size_t i = 0;
      for (const auto& [name, prefix] : config.checkpoints)
        systems.push_back({name, &lms[i++]});
    }
    experiment::RerankOptions base;
    base.n_best = config.nbest_n;
    base.utts = config.rerank_utts;
    base.context_shots = config.rerank_shots;
    base.lambda_weight = config.lambda_weight;
    base.fusion_weight = config.fusion_weight;
    base.joint_beam = config.joint_beam;
    base.acoustic_steps = config.acoustic_steps;
    base.strategy = select::strategy_from_name(config.strategy);
    base.threads = config.threads;

    using Cell = std::pair<std::vector<experiment::RerankRow>,
                           std::vector<acoustic::NBestList>>;
    std::map<std::pair<std::string, std::uint64_t>, Cell> cache;
    auto cell_for = [&](const synth::Corpus& corpus,
                        std::uint64_t seed) -> const Cell& {
      auto key = std::make_pair(corpus.spec.id, seed);
      auto it = cache.find(key);
      if (it != cache.end()) return it->second;
      experiment::RerankOptions ropt = base;
      ropt.seed = seed;
      Cell cell;
      cell.first = experiment::rerank_language(corpus, systems, ropt,
                                               &cell.second);
      return cache.emplace(key, std::move(cell)).first->second;
    };
    for (const auto& corpus : corpora)
      for (std::uint64_t seed : config.seeds)
        ctx.ensure(
            "nbest_" + corpus.spec.id + "_seed" + std::to_string(seed) +
                ".jsonl",
            [&](const std::string& path) {
              acoustic::write_nbest_jsonl(cell_for(corpus, seed).second, path);
            });
    ctx.ensure("rerank.csv", [&](const std::string& path) {
      std::ofstream out(path, std::ios::binary);
      out << "lang,seed,system,wer\n";
      char buf[128];
      for (const auto& corpus : corpora)
        for (std::uint64_t seed : config.seeds)
          for (const auto& r : cell_for(corpus, seed).first) {
            std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%.9g\n",
                          corpus.spec.id.c_str(),
                          static_cast<unsigned long long>(seed),
                          r.system.c_str(), r.wer);
            out << buf;
          }
    });
  }

  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             t0)
                   .count();
  return ctx.finish(config.seeds, sec);
}

// --------------------------------------------------------------------- report

// Median-over-seed summaries plus explicit trend pass/fail lines; fails with
// the list of missing cells when the run is incomplete.
inline std::string report(const std::string& run_dir) {
  RunManifest manifest = read_manifest(run_dir);
  ExperimentConfig config =
      config_from_file((fs::path(run_dir) / "config.kv").string());

  std::string md = "# run report\n\ncode: " + manifest.code_version +
                   "\nconfig hash: " + manifest.config_hash + "\n";

  if (config.kind == "icl_sweep") {
    auto rows =
        eval::read_results_csv((fs::path(run_dir) / "results.csv").string());
    // completeness check
    std::set<std::string> have;
    for (const auto& r : rows)
      have.insert(r.lang + "|" + r.task + "|" + std::to_string(r.shots) + "|" +
                  std::to_string(r.seed));
    std::set<std::string> langs;
    for (const auto& r : rows) langs.insert(r.lang);
    std::vector<std::string> missing;
    for (const auto& lang : langs)
      for (const auto& task : config.tasks)
        for (int s : config.shot_grid) {
          for (auto seed : config.seeds) {
            std::string key = lang + "|" + task + "|" + std::to_string(s) +
                              "|" + std::to_string(seed);
            if (!have.count(key)) missing.push_back(key);
          }
        }
    if (!missing.empty()) {
      std::string err = "report: incomplete run; missing cells:";
      for (const auto& m : missing) err += "\n  " + m;
      throw std::runtime_error(err);
    }
    md += detail::sweep_summary_md(rows, config.shot_grid, config.tasks,
                                   "in-context learning sweep");
    // trend lines
    auto medians = detail::cell_medians(rows);
    int k_max = 0;
    for (int s : config.shot_grid) k_max = std::max(k_max, s);
    md += "\n## trends\n\n";
    for (const auto& lang : langs) {
      auto micl = medians.find({lang, "MICL", k_max});
      auto asr = medians.find({lang, "ASR", 0});
      if (micl != medians.end() && asr != medians.end()) {
        bool pass = micl->second < asr->second;
        md += std::string("- ") + (pass ? "PASS" : "FAIL") + " " + lang +
              ": MICL(k=" + std::to_string(k_max) + ") " +
              detail::fmt_double(micl->second) + " < ASR(k=0) " +
              detail::fmt_double(asr->second) + "\n";
      }
    }
    // plot data: shots vs median ppl per task
    for (const auto& lang : langs) {
      std::ofstream plot(fs::path(run_dir) / ("plot_ppl_" + lang + ".csv"),
                         std::ios::binary);
      plot << "task,shots,median_ppl\n";
      for (const auto& task : config.tasks)
        for (int s : config.shot_grid) {
          auto it = medians.find({lang, task, s});
          if (it != medians.end())
            plot << task << ',' << s << ',' << detail::fmt_double(it->second)
                 << "\n";
        }
    }
  } else if (config.kind == "rerank_table") {
    std::ifstream in(fs::path(run_dir) / "rerank.csv");
    if (!in) throw std::runtime_error("report: missing rerank.csv");
    std::string line;
    std::getline(in, line);
    std::map<std::pair<std::string, std::string>, std::vector<double>> acc;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f1 = line.find(','), f2 = line.find(',', f1 + 1),
           f3 = line.find(',', f2 + 1);
      acc[{line.substr(0, f1), line.substr(f2 + 1, f3 - f2 - 1)}].push_back(
          std::stod(line.substr(f3 + 1)));
    }
    md += "\n## median WER by system\n\n| lang | system | wer |\n|---|---|---|\n";
    for (auto& [key, values] : acc)
      md += "| " + key.first + " | " + key.second + " | " +
            detail::fmt_double(util::median(values)) + " |\n";
  } else {
    md += "\nSee the emitted CSV artifacts for this kind.\n";
  }

  detail::write_text((fs::path(run_dir) / "report.md").string(), md);
  return md;
}

// Deterministic checkpoint cache: load when present, otherwise build and save.
inline model::ModelParams ensure_checkpoint(
    const std::string& prefix,
    const std::function<model::ModelParams()>& build) {
  if (fs::exists(prefix + ".json") && fs::exists(prefix + ".bin"))
    return model::load_checkpoint(prefix);
  auto params = build();
  auto parent = fs::path(prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  model::save_checkpoint(params, prefix);
  return params;
}

}  // namespace miclab::run

#pragma once

// Teacher-forced perplexity and word error rate.
//
// Perplexity is exp of the mean negative log-likelihood over the gold
// transcription tokens only; the prompt conditions but is never scored.
// Words are tokens here: the synthetic transcripts carry no sub-word layer.

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "miclab/model.hpp"
#include "miclab/prompt.hpp"

namespace miclab::eval {

struct PplResult {
  double ppl = 0.0;       // exp(mean_nll)
  double mean_nll = 0.0;  // nats per gold token
  int tokens = 0;
};

inline PplResult perplexity(const model::ModelParams& params,
                            const prompt::PromptLayout& layout,
                            const std::vector<int>& gold) {
  if (gold.empty()) throw std::invalid_argument("perplexity: empty gold");
  auto lp = model::logprob_of(params, layout, gold);
  double nll = 0.0;
  for (double v : lp) nll -= v;
  PplResult r;
  r.tokens = static_cast<int>(gold.size());
  r.mean_nll = nll / r.tokens;
  r.ppl = std::exp(r.mean_nll);
  return r;
}

// Token-weighted corpus aggregate: exp of the token-weighted mean NLL, which
// is consistent with a geometric mean over equally sized instances.  This is
// the canonical aggregation; see also mean_instance_ppl.
inline double corpus_ppl(const std::vector<PplResult>& results) {
  double nll = 0.0;
  long tokens = 0;
  for (const auto& r : results) {
    nll += r.mean_nll * r.tokens;
    tokens += r.tokens;
  }
  if (tokens == 0) throw std::invalid_argument("corpus_ppl: no tokens");
  return std::exp(nll / tokens);
}

inline double mean_instance_ppl(const std::vector<PplResult>& results) {
  if (results.empty())
    throw std::invalid_argument("mean_instance_ppl: empty input");
  double s = 0.0;
  for (const auto& r : results) s += r.ppl;
  return s / results.size();
}

struct WerResult {
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int reference_length = 0;
  double wer = 0.0;

  int distance() const { return substitutions + insertions + deletions; }
};

// Minimal-edit alignment with unit costs; among minimal alignments the one
// with the most substitutions (fewest insert+delete pairs) is counted.
inline WerResult wer(const std::vector<int>& reference,
                     const std::vector<int>& hypothesis) {
  if (reference.empty()) throw std::invalid_argument("wer: empty reference");
  const int nr = static_cast<int>(reference.size());
  const int nh = static_cast<int>(hypothesis.size());
  struct Cell {
    int cost;
    int indel;  // tie-break: prefer fewer insertions+deletions
  };
  std::vector<Cell> dp(static_cast<std::size_t>(nr + 1) * (nh + 1));
  auto at = [&](int i, int j) -> Cell& {
    return dp[static_cast<std::size_t>(i) * (nh + 1) + j];
  };
  for (int i = 0; i <= nr; ++i) at(i, 0) = {i, i};
  for (int j = 0; j <= nh; ++j) at(0, j) = {j, j};
  auto better = [](Cell a, Cell b) {
    return a.cost < b.cost || (a.cost == b.cost && a.indel < b.indel);
  };
  for (int i = 1; i <= nr; ++i)
    for (int j = 1; j <= nh; ++j) {
      bool match = reference[i - 1] == hypothesis[j - 1];
      Cell diag = {at(i - 1, j - 1).cost + (match ? 0 : 1),
                   at(i - 1, j - 1).indel};
      Cell del = {at(i - 1, j).cost + 1, at(i - 1, j).indel + 1};
      Cell ins = {at(i, j - 1).cost + 1, at(i, j - 1).indel + 1};
      Cell best = diag;
      if (better(del, best)) best = del;
      if (better(ins, best)) best = ins;
      at(i, j) = best;
    }

  // backtrack, preferring the diagonal on ties
  WerResult r;
  r.reference_length = nr;
  int i = nr, j = nh;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      bool match = reference[i - 1] == hypothesis[j - 1];
      Cell diag = {at(i - 1, j - 1).cost + (match ? 0 : 1),
                   at(i - 1, j - 1).indel};
      if (diag.cost == at(i, j).cost && diag.indel == at(i, j).indel) {
        if (!match) ++r.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i - 1, j).cost + 1 == at(i, j).cost &&
        at(i - 1, j).indel + 1 == at(i, j).indel) {
      ++r.deletions;
      --i;
      continue;
    }
    ++r.insertions;
    --j;
  }
  r.wer = static_cast<double>(r.distance()) / nr;
  return r;
}

// Pooled corpus WER: total edits over total reference length (canonical),
// alongside the mean of per-utterance WERs.
struct CorpusWer {
  double pooled = 0.0;
  double mean_per_utt = 0.0;
  int total_errors = 0;
  long total_reference = 0;
};

inline CorpusWer corpus_wer(const std::vector<WerResult>& results) {
  if (results.empty()) throw std::invalid_argument("corpus_wer: empty input");
  CorpusWer c;
  double mean = 0.0;
  for (const auto& r : results) {
    c.total_errors += r.distance();
    c.total_reference += r.reference_length;
    mean += r.wer;
  }
  c.pooled = static_cast<double>(c.total_errors) / c.total_reference;
  c.mean_per_utt = mean / results.size();
  return c;
}

// ------------------------------------------------------------- results CSV

struct ResultRow {
  std::string lang;
  std::string task;
  int shots = 0;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};

inline void write_results_csv(const std::vector<ResultRow>& rows,
                              const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_results_csv: cannot open " + path);
  out << "lang,task,shots,seed,metric,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.value);
    out << r.lang << ',' << r.task << ',' << r.shots << ',' << r.seed << ','
        << r.metric << ',' << buf << "\n";
  }
}

inline std::vector<ResultRow> read_results_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_results_csv: cannot open " + path);
  std::vector<ResultRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ResultRow r;
    std::size_t p = 0;
    auto next = [&]() {
      std::size_t c = line.find(',', p);
      if (c == std::string::npos) c = line.size();
      std::string field = line.substr(p, c - p);
      p = c + 1;
      return field;
    };
    r.lang = next();
    r.task = next();
    r.shots = std::stoi(next());
    r.seed = std::stoull(next());
    r.metric = next();
    r.value = std::stod(next());
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace miclab::eval

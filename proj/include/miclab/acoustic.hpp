#pragma once

// Non-LLM acoustic path: a per-language slot classifier, exact N-best lists,
// an add-k n-gram language model, hypothesis selection and joint decoding.
//
// The acoustic model sees each token slot as the mean of its frames-per-token
// frames, so slots are conditionally independent and N-best enumeration over
// slot distributions is exact.  The interleaved transformer (or the n-gram)
// supplies the LM side of the combined re-ranking score.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/eval.hpp"
#include "miclab/model.hpp"
#include "miclab/prompt.hpp"
#include "miclab/rng.hpp"
#include "miclab/synthlang.hpp"
#include "miclab/tensor.hpp"

namespace miclab::acoustic {

// ------------------------------------------------------------ slot classifier

struct AcousticModel {
  std::string language_id;
  int frame_dim = 0;
  int frames_per_token = 0;
  int vocab = 0;
  int hidden = 0;
  nk::TensorPtr w1, b1, w2, b2;

  // frames: row-major [n_frames x frame_dim]; n_frames must be a multiple of
  // frames_per_token.  Returns [n_slots x vocab] log-probabilities.
  std::vector<double> slot_log_probs(const std::vector<double>& frames) const {
    if (frame_dim <= 0 || frames.size() % static_cast<std::size_t>(frame_dim))
      throw std::invalid_argument("slot_log_probs: bad frame matrix");
    int n_frames = static_cast<int>(frames.size()) / frame_dim;
    if (n_frames % frames_per_token != 0)
      throw std::invalid_argument(
          "slot_log_probs: frame count not divisible by frames per token");
    int n_slots = n_frames / frames_per_token;
    std::vector<double> out(static_cast<std::size_t>(n_slots) * vocab);
    std::vector<double> pooled(frame_dim), h(hidden), logits(vocab);
    for (int s = 0; s < n_slots; ++s) {
      std::fill(pooled.begin(), pooled.end(), 0.0);
      for (int f = 0; f < frames_per_token; ++f) {
        const double* row =
            frames.data() +
            (static_cast<std::size_t>(s) * frames_per_token + f) * frame_dim;
        for (int d = 0; d < frame_dim; ++d) pooled[d] += row[d];
      }
      for (int d = 0; d < frame_dim; ++d) pooled[d] /= frames_per_token;
      for (int j = 0; j < hidden; ++j) {
        double acc = b1->data[j];
        for (int d = 0; d < frame_dim; ++d)
          acc += pooled[d] * w1->data[static_cast<std::size_t>(d) * hidden + j];
        h[j] = std::tanh(acc);
      }
      double mx = -1e300;
      for (int v = 0; v < vocab; ++v) {
        double acc = b2->data[v];
        for (int j = 0; j < hidden; ++j)
          acc += h[j] * w2->data[static_cast<std::size_t>(j) * vocab + v];
        logits[v] = acc;
        mx = std::max(mx, acc);
      }
      double z = 0.0;
      for (int v = 0; v < vocab; ++v) z += std::exp(logits[v] - mx);
      double log_z = mx + std::log(z);
      for (int v = 0; v < vocab; ++v)
        out[static_cast<std::size_t>(s) * vocab + v] = logits[v] - log_z;
    }
    return out;
  }

  std::vector<int> greedy_decode(const std::vector<double>& frames) const {
    auto lp = slot_log_probs(frames);
    int n_slots = static_cast<int>(lp.size()) / vocab;
    std::vector<int> out(n_slots);
    for (int s = 0; s < n_slots; ++s) {
      const double* row = lp.data() + static_cast<std::size_t>(s) * vocab;
      out[s] = static_cast<int>(std::max_element(row, row + vocab) - row);
    }
    return out;
  }
};

inline AcousticModel train_acoustic(const synth::Corpus& corpus, Rng rng,
                                    int steps = 400, int batch = 64,
                                    double learning_rate = 5e-3,
                                    int hidden = 32) {
  const auto& spec = corpus.spec;
  if (corpus.train.empty())
    throw std::invalid_argument("train_acoustic: empty train split");
  // flatten the train split into (pooled slot, token) pairs
  std::vector<std::vector<double>> slots;
  std::vector<int> labels;
  for (const auto& u : corpus.train) {
    if (u.frame_dim != spec.frame_dim())
      throw std::invalid_argument("train_acoustic: frame dim mismatch in " +
                                  u.id);
    const int fpt = spec.frames_per_token();
    for (std::size_t t = 0; t < u.tokens.size(); ++t) {
      std::vector<double> pooled(spec.frame_dim(), 0.0);
      for (int f = 0; f < fpt; ++f) {
        const double* row = u.audio.data() +
                            (t * fpt + f) * static_cast<std::size_t>(
                                                spec.frame_dim());
        for (int d = 0; d < spec.frame_dim(); ++d) pooled[d] += row[d];
      }
      for (double& v : pooled) v /= fpt;
      slots.push_back(std::move(pooled));
      labels.push_back(u.tokens[t]);
    }
  }

  AcousticModel am;
  am.language_id = spec.id;
  am.frame_dim = spec.frame_dim();
  am.frames_per_token = spec.frames_per_token();
  am.vocab = spec.vocab_size();
  am.hidden = hidden;
  Rng init = rng.split("init");
  am.w1 = nk::Tensor::randn({am.frame_dim, hidden}, init, 0.3, true);
  am.b1 = nk::Tensor::zeros({hidden}, true);
  am.w2 = nk::Tensor::randn({hidden, am.vocab}, init, 0.3, true);
  am.b2 = nk::Tensor::zeros({am.vocab}, true);

  // plain Adam, no decay: the classifier is a calibration artifact
  double m1 = 0.9, m2 = 0.999, eps = 1e-8;
  std::vector<std::vector<double>> m(4), v(4);
  nk::TensorPtr ps[4] = {am.w1, am.b1, am.w2, am.b2};
  for (int i = 0; i < 4; ++i) {
    m[i].assign(ps[i]->size(), 0.0);
    v[i].assign(ps[i]->size(), 0.0);
  }
  for (int step = 0; step < steps; ++step) {
    Rng step_rng = rng.split("step").split(static_cast<std::uint64_t>(step));
    int bs = std::min<std::size_t>(batch, slots.size());
    auto x = nk::Tensor::zeros({bs, am.frame_dim});
    std::vector<int> y(bs);
    for (int b = 0; b < bs; ++b) {
      std::size_t pick = step_rng.next_below(slots.size());
      std::copy(slots[pick].begin(), slots[pick].end(),
                x->data.begin() + static_cast<std::size_t>(b) * am.frame_dim);
      y[b] = labels[pick];
    }
    auto h = nk::tanh_op(nk::add_row_broadcast(nk::matmul(x, am.w1), am.b1));
    auto logits = nk::add_row_broadcast(nk::matmul(h, am.w2), am.b2);
    auto loss = nk::cross_entropy(logits, y, std::vector<bool>(bs, true));
    nk::backward(loss);
    double bc1 = 1.0 - std::pow(m1, step + 1);
    double bc2 = 1.0 - std::pow(m2, step + 1);
    for (int i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < ps[i]->size(); ++j) {
        double g = ps[i]->grad[j];
        m[i][j] = m1 * m[i][j] + (1 - m1) * g;
        v[i][j] = m2 * v[i][j] + (1 - m2) * g * g;
        ps[i]->data[j] -=
            learning_rate * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
      }
      ps[i]->zero_grad();
    }
  }
  return am;
}

// ----------------------------------------------------------------- N-best

struct ScoredHypothesis {
  std::vector<int> tokens;
  double acoustic_logprob = 0.0;
};

struct NBestList {
  std::string utt_id;
  std::vector<ScoredHypothesis> hyps;  // sorted by acoustic log-prob, descending

  const ScoredHypothesis& top() const { return hyps.front(); }
  int size() const { return static_cast<int>(hyps.size()); }
};

// Exact N-best over independent slot distributions.  With per-slot additive
// scores, every true top-N sequence has a prefix inside the running top-B set
// whenever B >= N, so the search below is exact for beam_width >= n.
inline NBestList nbest_from_logprobs(const std::vector<double>& slot_lp,
                                     int vocab, int n, int beam_width = 0) {
  if (n < 1) throw std::invalid_argument("nbest: need n >= 1");
  if (vocab < 1 || slot_lp.size() % static_cast<std::size_t>(vocab))
    throw std::invalid_argument("nbest: bad slot log-prob matrix");
  int n_slots = static_cast<int>(slot_lp.size()) / vocab;
  if (n_slots == 0) throw std::invalid_argument("nbest: no slots");
  int beam = std::max(beam_width, n);

  struct Partial {
    std::vector<int> tokens;
    double lp;
  };
  std::vector<Partial> front{{{}, 0.0}};
  for (int s = 0; s < n_slots; ++s) {
    const double* row = slot_lp.data() + static_cast<std::size_t>(s) * vocab;
    std::vector<Partial> next;
    next.reserve(front.size() * vocab);
    for (const auto& p : front)
      for (int v = 0; v < vocab; ++v) {
        Partial q;
        q.tokens = p.tokens;
        q.tokens.push_back(v);
        q.lp = p.lp + row[v];
        next.push_back(std::move(q));
      }
    auto by_score = [](const Partial& a, const Partial& b) {
      if (a.lp != b.lp) return a.lp > b.lp;
      return a.tokens < b.tokens;  // deterministic tie order
    };
    if (static_cast<int>(next.size()) > beam) {
      std::nth_element(next.begin(), next.begin() + beam, next.end(), by_score);
      next.resize(beam);
    }
    std::sort(next.begin(), next.end(), by_score);
    front = std::move(next);
  }

  NBestList out;
  int keep = std::min<int>(n, static_cast<int>(front.size()));
  for (int i = 0; i < keep; ++i)
    out.hyps.push_back({std::move(front[i].tokens), front[i].lp});
  return out;
}

inline NBestList nbest(const AcousticModel& am,
                       const std::vector<double>& frames, int n,
                       int beam_width = 0) {
  return nbest_from_logprobs(am.slot_log_probs(frames), am.vocab, n,
                             beam_width);
}

// ----------------------------------------------------------------- n-gram LM

// Add-k smoothed n-gram over token sequences; the event space of every
// conditional is vocab + one end-of-sequence symbol.
class NgramLM {
 public:
  NgramLM(int order = 3, int vocab = 0, double add_k = 0.1)
      : order_(order), vocab_(vocab), k_(add_k) {
    if (order < 1) throw std::invalid_argument("ngram: order must be >= 1");
  }

  static constexpr int kBos = -1;

  void fit(const std::vector<std::vector<int>>& sequences) {
    for (const auto& seq : sequences) {
      for (std::size_t i = 0; i <= seq.size(); ++i) {
        std::vector<int> ctx = context_at(seq, i);
        int event = i < seq.size() ? seq[i] : end_symbol();
        auto& bucket = counts_[ctx];
        if (bucket.empty()) bucket.assign(vocab_ + 1, 0.0);
        bucket[event] += 1.0;
        totals_[ctx] += 1.0;
      }
    }
  }

  int end_symbol() const { return vocab_; }

  // log P(event | context); event may be end_symbol()
  double cond_log_prob(const std::vector<int>& context, int event) const {
    double count = 0.0, total = 0.0;
    auto it = counts_.find(context);
    if (it != counts_.end()) {
      count = it->second[event];
      total = totals_.at(context);
    }
    return std::log((count + k_) / (total + k_ * (vocab_ + 1)));
  }

  // sum of conditional log-probs including the end event
  double sequence_log_prob(const std::vector<int>& seq,
                           bool include_end = true) const {
    double lp = 0.0;
    for (std::size_t i = 0; i < seq.size(); ++i)
      lp += cond_log_prob(context_at(seq, i), seq[i]);
    if (include_end) lp += cond_log_prob(context_at(seq, seq.size()),
                                         end_symbol());
    return lp;
  }

  std::vector<int> context_at(const std::vector<int>& seq,
                              std::size_t pos) const {
    std::vector<int> ctx;
    for (int back = order_ - 1; back >= 1; --back) {
      long idx = static_cast<long>(pos) - back;
      ctx.push_back(idx < 0 ? kBos : seq[idx]);
    }
    return ctx;
  }

  int order() const { return order_; }
  int vocab() const { return vocab_; }
  double add_k() const { return k_; }

 private:
  int order_;
  int vocab_;
  double k_;
  std::map<std::vector<int>, std::vector<double>> counts_;
  std::map<std::vector<int>, double> totals_;
};

// --------------------------------------------------------- LM scoring (MICL)

enum class LengthNorm { kNone, kPerToken };

// Log-likelihood of the hypothesis tokens under the interleaved transformer,
// conditioned on the given (MICL/ICL) layout for the target utterance.
inline double lm_score_micl(const model::ModelParams& params,
                            const prompt::PromptLayout& layout,
                            const std::vector<int>& hypothesis,
                            LengthNorm norm = LengthNorm::kNone) {
  if (hypothesis.empty())
    throw std::invalid_argument("lm_score_micl: empty hypothesis");
  auto lp = model::logprob_of(params, layout, hypothesis);
  double total = 0.0;
  for (double v : lp) total += v;
  if (norm == LengthNorm::kPerToken) total /= static_cast<double>(lp.size());
  return total;
}

// ----------------------------------------------------------- selection

struct HypothesisScore {
  double acoustic = 0.0;
  double lm = 0.0;
  double combined = 0.0;
};

struct SelectionResult {
  int chosen = 0;  // index into the n-best list (acoustic rank order)
  std::vector<HypothesisScore> scores;
  std::string selector_id;

  const ScoredHypothesis& hypothesis(const NBestList& list) const {
    return list.hyps[chosen];
  }
};

// combined = acoustic + lambda * lm; argmax, ties broken by acoustic rank.
inline SelectionResult select_hypothesis(
    const NBestList& list,
    const std::function<double(const std::vector<int>&)>& lm_scorer,
    double lambda = 1.0, std::string selector_id = "combined") {
  if (list.hyps.empty())
    throw std::invalid_argument("select_hypothesis: empty n-best list");
  SelectionResult r;
  r.selector_id = std::move(selector_id);
  r.scores.reserve(list.hyps.size());
  for (const auto& h : list.hyps) {
    HypothesisScore s;
    s.acoustic = h.acoustic_logprob;
    s.lm = lambda == 0.0 ? 0.0 : lm_scorer(h.tokens);
    s.combined = s.acoustic + lambda * s.lm;
    r.scores.push_back(s);
  }
  for (std::size_t i = 1; i < r.scores.size(); ++i)
    if (r.scores[i].combined > r.scores[r.chosen].combined)
      r.chosen = static_cast<int>(i);
  return r;
}

// Lowest WER against the reference; ties go to the better acoustic rank.
// The per-hypothesis combined score is the negated WER so that the
// chosen-equals-argmax invariant holds for every selector.
inline SelectionResult oracle_select(const NBestList& list,
                                     const std::vector<int>& reference) {
  if (list.hyps.empty())
    throw std::invalid_argument("oracle_select: empty n-best list");
  SelectionResult r;
  r.selector_id = "oracle";
  for (const auto& h : list.hyps) {
    HypothesisScore s;
    s.acoustic = h.acoustic_logprob;
    s.lm = 0.0;
    s.combined = -eval::wer(reference, h.tokens).wer;
    r.scores.push_back(s);
  }
  for (std::size_t i = 1; i < r.scores.size(); ++i)
    if (r.scores[i].combined > r.scores[r.chosen].combined)
      r.chosen = static_cast<int>(i);
  return r;
}

// ----------------------------------------------------------- joint decoding

// Beam search maximizing acoustic + weight * n-gram, slot by slot; the
// n-gram end event is added when the last slot closes.
inline std::vector<int> joint_decode_from_logprobs(
    const std::vector<double>& slot_lp, int vocab, const NgramLM& ngram,
    double fusion_weight, int beam_width = 8) {
  if (beam_width < 1)
    throw std::invalid_argument("joint_decode: beam width must be >= 1");
  if (vocab < 1 || slot_lp.size() % static_cast<std::size_t>(vocab))
    throw std::invalid_argument("joint_decode: bad slot log-prob matrix");
  int n_slots = static_cast<int>(slot_lp.size()) / vocab;

  struct Partial {
    std::vector<int> tokens;
    double score;
  };
  auto by_score = [](const Partial& a, const Partial& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  };
  std::vector<Partial> front{{{}, 0.0}};
  for (int s = 0; s < n_slots; ++s) {
    const double* row = slot_lp.data() + static_cast<std::size_t>(s) * vocab;
    std::vector<Partial> next;
    next.reserve(front.size() * vocab);
    for (const auto& p : front) {
      std::vector<int> ctx = ngram.context_at(p.tokens, p.tokens.size());
      for (int v = 0; v < vocab; ++v) {
        Partial q;
        q.tokens = p.tokens;
        q.tokens.push_back(v);
        q.score = p.score + row[v];
        if (fusion_weight != 0.0)
          q.score += fusion_weight * ngram.cond_log_prob(ctx, v);
        next.push_back(std::move(q));
      }
    }
    if (static_cast<int>(next.size()) > beam_width) {
      std::nth_element(next.begin(), next.begin() + beam_width, next.end(),
                       by_score);
      next.resize(beam_width);
    }
    std::sort(next.begin(), next.end(), by_score);
    front = std::move(next);
  }
  // close with the end event
  for (auto& p : front) {
    if (fusion_weight != 0.0)
      p.score += fusion_weight *
                 ngram.cond_log_prob(ngram.context_at(p.tokens, p.tokens.size()),
                                     ngram.end_symbol());
  }
  std::sort(front.begin(), front.end(), by_score);
  return front.front().tokens;
}

inline std::vector<int> joint_decode(const AcousticModel& am,
                                     const std::vector<double>& frames,
                                     const NgramLM& ngram, double fusion_weight,
                                     int beam_width = 8) {
  return joint_decode_from_logprobs(am.slot_log_probs(frames), am.vocab, ngram,
                                    fusion_weight, beam_width);
}

// ------------------------------------------------------------- JSONL exchange
//
// One record per utterance: {"utt_id", "hyps": [{"tokens", "ac_logprob"}]}.
// External acoustic systems can be swapped in through this format.

inline std::string nbest_to_json(const NBestList& list) {
  std::string out = "{\"utt_id\":";
  out += nlohmann::json(list.utt_id).dump();
  out += ",\"hyps\":[";
  char buf[40];
  for (std::size_t i = 0; i < list.hyps.size(); ++i) {
    if (i) out += ',';
    out += "{\"tokens\":[";
    for (std::size_t j = 0; j < list.hyps[i].tokens.size(); ++j) {
      if (j) out += ',';
      out += std::to_string(list.hyps[i].tokens[j]);
    }
    std::snprintf(buf, sizeof(buf), "%.9g", list.hyps[i].acoustic_logprob);
    out += "],\"ac_logprob\":";
    out += buf;
    out += "}";
  }
  out += "]}";
  return out;
}

inline NBestList nbest_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  NBestList list;
  list.utt_id = j.at("utt_id").get<std::string>();
  for (const auto& h : j.at("hyps")) {
    ScoredHypothesis sh;
    sh.tokens = h.at("tokens").get<std::vector<int>>();
    sh.acoustic_logprob = h.at("ac_logprob").get<double>();
    list.hyps.push_back(std::move(sh));
  }
  return list;
}

inline void write_nbest_jsonl(const std::vector<NBestList>& lists,
                              const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_nbest_jsonl: cannot open " + path);
  for (const auto& l : lists) out << nbest_to_json(l) << "\n";
}

inline std::vector<NBestList> read_nbest_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_nbest_jsonl: cannot open " + path);
  std::vector<NBestList> lists;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lists.push_back(nbest_from_json(line));
  return lists;
}

}  // namespace miclab::acoustic

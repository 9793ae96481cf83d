#pragma once

// Retrieval-based demonstration selection over a shared embedding space.
//
// Text embeddings hash token unigrams and bigrams into a fixed random
// projection; audio embeddings project per-dimension mean/std statistics, or
// greedy-decode the frames with an acoustic model and embed the pseudo
// transcript.  All embeddings are unit-normalized.  The untranscribed target
// is always embedded from its audio; candidates use the strategy's modality.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "miclab/acoustic.hpp"
#include "miclab/rng.hpp"
#include "miclab/synthlang.hpp"

namespace miclab::select {

enum class Strategy { kRandom, kTextBased, kAudioBased, kCombined };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kTextBased: return "text_based";
    case Strategy::kAudioBased: return "audio_based";
    case Strategy::kCombined: return "combined";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
  if (s == "random") return Strategy::kRandom;
  if (s == "text_based") return Strategy::kTextBased;
  if (s == "audio_based") return Strategy::kAudioBased;
  if (s == "combined") return Strategy::kCombined;
  throw std::invalid_argument("unknown selection strategy: " + s);
}

enum class AudioEmbedMode { kStats, kDecode };

struct Embedding {
  std::vector<double> v;  // unit L2 norm
  std::string modality;   // "text", "audio" or "combined"
};

inline constexpr int kEmbedDim = 64;

namespace detail {

inline constexpr std::uint64_t kUnigramSalt = 0x51a7e11e00000001ull;
inline constexpr std::uint64_t kBigramSalt = 0x51a7e11e00000002ull;
inline constexpr std::uint64_t kStatsSalt = 0x51a7e11e00000003ull;

// Fixed random projection row for one hashed feature, generated on the fly;
// the projection is a pure function of (feature id, output dim).
inline void accumulate_feature(std::vector<double>& acc, std::uint64_t feature,
                               double weight) {
  Rng row(feature);
  for (std::size_t d = 0; d < acc.size(); ++d)
    acc[d] += weight * row.next_gaussian();
}

inline void normalize(std::vector<double>& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
  else
    v[0] = 1.0;  // degenerate all-zero feature vector
}

}  // namespace detail

inline Embedding embed_text(const std::vector<int>& tokens,
                            int dim = kEmbedDim) {
  if (tokens.empty()) throw std::invalid_argument("embed_text: empty sequence");
  std::vector<double> acc(dim, 0.0);
  for (int t : tokens)
    detail::accumulate_feature(
        acc, miclab::detail::hash_combine(detail::kUnigramSalt, t), 1.0);
  for (std::size_t i = 1; i < tokens.size(); ++i)
    detail::accumulate_feature(
        acc,
        miclab::detail::hash_combine(
            miclab::detail::hash_combine(detail::kBigramSalt, tokens[i - 1]),
            tokens[i]),
        1.0);
  detail::normalize(acc);
  return {std::move(acc), "text"};
}

inline Embedding embed_audio(const std::vector<double>& frames, int frame_dim,
                             AudioEmbedMode mode = AudioEmbedMode::kStats,
                             const acoustic::AcousticModel* am = nullptr,
                             int dim = kEmbedDim) {
  if (frame_dim < 1 || frames.empty() ||
      frames.size() % static_cast<std::size_t>(frame_dim))
    throw std::invalid_argument("embed_audio: bad frame matrix");
  if (mode == AudioEmbedMode::kDecode) {
    if (!am)
      throw std::invalid_argument(
          "embed_audio: decode mode needs a trained acoustic model");
    auto e = embed_text(am->greedy_decode(frames), dim);
    e.modality = "audio";
    return e;
  }
  const int n = static_cast<int>(frames.size()) / frame_dim;
  std::vector<double> mean(frame_dim, 0.0), stddev(frame_dim, 0.0);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < frame_dim; ++d)
      mean[d] += frames[static_cast<std::size_t>(i) * frame_dim + d];
  for (double& m : mean) m /= n;
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < frame_dim; ++d) {
      double x = frames[static_cast<std::size_t>(i) * frame_dim + d] - mean[d];
      stddev[d] += x * x;
    }
  for (double& s : stddev) s = std::sqrt(s / n);  // 0 for a single frame
  std::vector<double> acc(dim, 0.0);
  for (int d = 0; d < frame_dim; ++d) {
    detail::accumulate_feature(
        acc, miclab::detail::hash_combine(detail::kStatsSalt, 2 * d), mean[d]);
    detail::accumulate_feature(
        acc, miclab::detail::hash_combine(detail::kStatsSalt, 2 * d + 1),
        stddev[d]);
  }
  detail::normalize(acc);
  return {std::move(acc), "audio"};
}

inline double cosine(const Embedding& a, const Embedding& b) {
  if (a.v.size() != b.v.size())
    throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) dot += a.v[i] * b.v[i];
  return dot;  // inputs are unit-normalized
}

namespace detail {

inline Embedding concat_norm(const Embedding& a, const Embedding& b) {
  Embedding out;
  out.v = a.v;
  out.v.insert(out.v.end(), b.v.begin(), b.v.end());
  normalize(out.v);
  out.modality = "combined";
  return out;
}

}  // namespace detail

// Candidate-side embedding under a strategy.
inline Embedding candidate_embedding(const synth::Utterance& u, Strategy s,
                                     AudioEmbedMode mode,
                                     const acoustic::AcousticModel* am) {
  switch (s) {
    case Strategy::kTextBased:
      return embed_text(u.tokens);
    case Strategy::kAudioBased:
      return embed_audio(u.audio, u.frame_dim, mode, am);
    case Strategy::kCombined:
      return detail::concat_norm(embed_text(u.tokens),
                                 embed_audio(u.audio, u.frame_dim, mode, am));
    default:
      throw std::invalid_argument("candidate_embedding: random strategy");
  }
}

// Target-side embedding: always from the audio.  In stats mode the audio
// embedding stands in for the text half of the combined space; decode mode
// embeds the pseudo transcript there instead.
inline Embedding target_embedding(const std::vector<double>& frames,
                                  int frame_dim, Strategy s,
                                  AudioEmbedMode mode,
                                  const acoustic::AcousticModel* am) {
  if (s == Strategy::kCombined) {
    Embedding audio = embed_audio(frames, frame_dim, AudioEmbedMode::kStats);
    Embedding text_half = audio;
    if (mode == AudioEmbedMode::kDecode) {
      if (!am)
        throw std::invalid_argument(
            "target_embedding: decode mode needs a trained acoustic model");
      text_half = embed_text(am->greedy_decode(frames));
    }
    return detail::concat_norm(text_half, audio);
  }
  return embed_audio(frames, frame_dim, mode, am);
}

// Top-N retrieval.  Non-random strategies return exactly the brute-force
// cosine ranking (most similar first); ties break by candidate id ascending.
inline std::vector<synth::Utterance> select_demos(
    Strategy strategy, const std::vector<synth::Utterance>& candidates,
    const std::vector<double>& target_audio, int frame_dim, int n, Rng& rng,
    AudioEmbedMode mode = AudioEmbedMode::kStats,
    const acoustic::AcousticModel* am = nullptr) {
  if (n < 0 || n > static_cast<int>(candidates.size()))
    throw std::invalid_argument(
        "select_demos: requested more demonstrations than candidates");
  if (n == 0) return {};
  if (strategy == Strategy::kRandom) {
    auto idx = rng.sample_without_replacement(candidates.size(),
                                              static_cast<std::size_t>(n));
    std::vector<synth::Utterance> out;
    out.reserve(n);
    for (auto i : idx) out.push_back(candidates[i]);
    return out;
  }
  Embedding target =
      target_embedding(target_audio, frame_dim, strategy, mode, am);
  struct Ranked {
    double sim;
    std::size_t index;
  };
  std::vector<Ranked> ranked;
  ranked.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double sim =
        cosine(candidate_embedding(candidates[i], strategy, mode, am), target);
    ranked.push_back({sim, i});
  }
  std::sort(ranked.begin(), ranked.end(), [&](const Ranked& a, const Ranked& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return candidates[a.index].id < candidates[b.index].id;
  });
  std::vector<synth::Utterance> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(candidates[ranked[i].index]);
  return out;
}

}  // namespace miclab::select

#pragma once

// Seeded synthetic languages with paired pseudo-audio and text.
//
// A language is a bigram Markov chain over a small token vocabulary plus one
// fixed audio prototype block per token.  An utterance renders each token as
// frames_per_token prototype frames plus i.i.d. Gaussian noise, so the
// audio/text length ratio is exactly frames_per_token.  Everything is a pure
// function of (seed, parameters, rng state).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/rng.hpp"

namespace miclab::synth {

struct LanguageParams {
  int vocab_size = 30;
  int frame_dim = 8;
  int frames_per_token = 3;
  double noise_sigma = 0.05;
  double bigram_sharpness = 1.5;  // scale of the logits behind each bigram row
  // effective inventory: transitions are supported on a seeded subset of this
  // many token ids (0 = the full vocabulary); inventories differ by language
  int active_vocab = 0;
  // fraction of prototype standard deviation shared across languages: each
  // token's rendering is sqrt(1-m^2) * language draw + m * universal draw, so
  // audio carries some language-independent evidence (cross-lingual transfer)
  double universal_mix = 0.5;
};

struct LanguageSpec {
  std::string id;
  std::uint64_t seed = 0;
  LanguageParams params;
  // row-stochastic, vocab x vocab
  std::vector<double> bigram;
  // stationary distribution of the bigram chain; used for the first token
  std::vector<double> stationary;
  // vocab x (frames_per_token * frame_dim), row-major
  std::vector<double> prototypes;

  int vocab_size() const { return params.vocab_size; }
  int frame_dim() const { return params.frame_dim; }
  int frames_per_token() const { return params.frames_per_token; }

  const double* bigram_row(int token) const {
    return bigram.data() +
           static_cast<std::size_t>(token) * params.vocab_size;
  }
  const double* prototype(int token) const {
    return prototypes.data() + static_cast<std::size_t>(token) *
                                   params.frames_per_token * params.frame_dim;
  }
};

struct Utterance {
  std::string id;
  std::string language_id;
  std::vector<int> tokens;
  // n_frames x frame_dim, row-major; n_frames == frames_per_token * |tokens|
  std::vector<double> audio;
  int frame_dim = 0;

  int n_frames() const {
    return frame_dim == 0 ? 0 : static_cast<int>(audio.size()) / frame_dim;
  }
};

struct Corpus {
  LanguageSpec spec;
  std::vector<Utterance> train;
  std::vector<Utterance> dev;
  std::vector<Utterance> test;
};

inline LanguageSpec make_language(std::uint64_t seed,
                                  const LanguageParams& params = {},
                                  std::string id = "") {
  if (params.vocab_size < 2)
    throw std::invalid_argument("make_language: vocab size must be >= 2");
  if (params.frame_dim < 1)
    throw std::invalid_argument("make_language: frame dim must be >= 1");
  if (params.frames_per_token < 1)
    throw std::invalid_argument("make_language: frames per token must be >= 1");
  if (params.noise_sigma < 0.0)
    throw std::invalid_argument("make_language: noise sigma must be >= 0");

  LanguageSpec spec;
  spec.seed = seed;
  spec.params = params;
  if (id.empty()) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "lang%llu",
                  static_cast<unsigned long long>(seed));
    id = buf;
  }
  spec.id = std::move(id);

  Rng root(seed);
  const int v = params.vocab_size;

  int active = params.active_vocab;
  if (active <= 0 || active > v) active = v;
  if (active < 2)
    throw std::invalid_argument("make_language: active vocab must be >= 2");
  std::vector<bool> is_active(v, active == v);
  if (active < v) {
    Rng inv = root.split("inventory");
    for (std::size_t idx : inv.sample_without_replacement(v, active))
      is_active[idx] = true;
  }

  Rng big = root.split("bigram");
  spec.bigram.assign(static_cast<std::size_t>(v) * v, 0.0);
  for (int i = 0; i < v; ++i) {
    double* row = spec.bigram.data() + static_cast<std::size_t>(i) * v;
    double mx = -1e300;
    for (int j = 0; j < v; ++j) {
      double logit = params.bigram_sharpness * big.next_gaussian();
      row[j] = is_active[j] ? logit : -1e300;
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < v; ++j) row[j] /= z;
  }

  // stationary distribution by power iteration from uniform
  spec.stationary.assign(v, 1.0 / v);
  std::vector<double> next(v, 0.0);
  for (int iter = 0; iter < 200; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < v; ++i) {
      const double* row = spec.bigram_row(i);
      double p = spec.stationary[i];
      for (int j = 0; j < v; ++j) next[j] += p * row[j];
    }
    spec.stationary.swap(next);
  }

  Rng proto = root.split("proto");
  spec.prototypes.assign(
      static_cast<std::size_t>(v) * params.frames_per_token * params.frame_dim,
      0.0);
  double m = params.universal_mix;
  if (m < 0.0 || m > 1.0)
    throw std::invalid_argument("make_language: universal mix in [0,1]");
  // the universal bank is a pure function of the rendering dimensions
  Rng universal(detail::hash_combine(detail::hash_str("universal-prototypes"),
                                     detail::hash_combine(
                                         static_cast<std::uint64_t>(v),
                                         static_cast<std::uint64_t>(
                                             params.frames_per_token * 1000 +
                                             params.frame_dim))));
  double lang_scale = std::sqrt(1.0 - m * m);
  for (double& x : spec.prototypes)
    x = lang_scale * proto.next_gaussian() + m * universal.next_gaussian();
  return spec;
}

inline Utterance sample_utterance(const LanguageSpec& spec, Rng& rng,
                                  int min_len, int max_len,
                                  std::string id = "") {
  if (min_len < 1 || min_len > max_len)
    throw std::invalid_argument("sample_utterance: need 1 <= min_len <= max_len");
  Utterance u;
  u.id = std::move(id);
  u.language_id = spec.id;
  u.frame_dim = spec.frame_dim();

  int len = static_cast<int>(rng.next_int(min_len, max_len));
  u.tokens.resize(len);
  u.tokens[0] = static_cast<int>(rng.next_categorical(spec.stationary));
  for (int i = 1; i < len; ++i) {
    const double* row = spec.bigram_row(u.tokens[i - 1]);
    double r = rng.next_double();
    double cum = 0.0;
    int pick = spec.vocab_size() - 1;
    for (int j = 0; j < spec.vocab_size(); ++j) {
      cum += row[j];
      if (r < cum) {
        pick = j;
        break;
      }
    }
    u.tokens[i] = pick;
  }

  const int fpt = spec.frames_per_token();
  const int fd = spec.frame_dim();
  u.audio.resize(static_cast<std::size_t>(len) * fpt * fd);
  double* out = u.audio.data();
  for (int i = 0; i < len; ++i) {
    const double* block = spec.prototype(u.tokens[i]);
    for (int k = 0; k < fpt * fd; ++k)
      out[k] = block[k] + spec.params.noise_sigma * rng.next_gaussian();
    out += fpt * fd;
  }
  return u;
}

inline Corpus build_corpus(const LanguageSpec& spec, Rng rng,
                           int n_train = 2000, int n_dev = 200,
                           int n_test = 200, int min_len = 4,
                           int max_len = 12) {
  if (n_train < 0 || n_dev < 0 || n_test < 0)
    throw std::invalid_argument("build_corpus: counts must be >= 0");
  Corpus c;
  c.spec = spec;
  auto fill = [&](std::vector<Utterance>& split, const char* name, int count) {
    Rng split_rng = rng.split(name);
    split.reserve(count);
    for (int i = 0; i < count; ++i) {
      Rng item_rng = split_rng.split(static_cast<std::uint64_t>(i));
      char id[64];
      std::snprintf(id, sizeof(id), "%s-%s-%04d", spec.id.c_str(), name, i);
      split.push_back(sample_utterance(spec, item_rng, min_len, max_len, id));
    }
  };
  fill(c.train, "train", n_train);
  fill(c.dev, "dev", n_dev);
  fill(c.test, "test", n_test);
  return c;
}

// --------------------------------------------------------------- JSONL I/O
//
// One record per line: {"id", "lang", "tokens", "audio", "n_frames",
// "frame_dim"}.  Audio floats carry 9 significant digits so files are
// byte-stable across writers.

inline std::string utterance_to_json(const Utterance& u) {
  std::string out;
  out.reserve(64 + u.audio.size() * 14);
  out += "{\"id\":";
  out += nlohmann::json(u.id).dump();
  out += ",\"lang\":";
  out += nlohmann::json(u.language_id).dump();
  out += ",\"tokens\":[";
  for (std::size_t i = 0; i < u.tokens.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(u.tokens[i]);
  }
  out += "],\"audio\":[";
  char buf[40];
  for (std::size_t i = 0; i < u.audio.size(); ++i) {
    if (i) out += ',';
    std::snprintf(buf, sizeof(buf), "%.9g", u.audio[i]);
    out += buf;
  }
  out += "],\"n_frames\":";
  out += std::to_string(u.n_frames());
  out += ",\"frame_dim\":";
  out += std::to_string(u.frame_dim);
  out += "}";
  return out;
}

inline Utterance utterance_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  Utterance u;
  u.id = j.at("id").get<std::string>();
  u.language_id = j.at("lang").get<std::string>();
  u.tokens = j.at("tokens").get<std::vector<int>>();
  u.audio = j.at("audio").get<std::vector<double>>();
  u.frame_dim = j.at("frame_dim").get<int>();
  int n_frames = j.at("n_frames").get<int>();
  if (n_frames * u.frame_dim != static_cast<int>(u.audio.size()))
    throw std::runtime_error("utterance_from_json: audio length mismatch in " +
                             u.id);
  return u;
}

inline void write_jsonl(const std::vector<Utterance>& utts,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const auto& u : utts) out << utterance_to_json(u) << "\n";
}

inline std::vector<Utterance> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  std::vector<Utterance> utts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    utts.push_back(utterance_from_json(line));
  }
  return utts;
}

}  // namespace miclab::synth

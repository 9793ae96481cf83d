#pragma once

// Decoder-only transformer over interleaved audio frames and text tokens.
//
// Audio items enter through a bias-free linear projector, text items through
// a shared embedding table (control tokens included); both share one learned
// absolute positional table.  Blocks are pre-norm with GELU feedforward.
// Attention is causal; per-head weight matrices can be captured for
// attribution.  Optional low-rank adapters (host + A*B) can be attached to a
// declared set of host matrices, freezing everything else.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/prompt.hpp"
#include "miclab/rng.hpp"
#include "miclab/tensor.hpp"

namespace miclab::model {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 64;
  int ff_dim = 256;
  int language_vocab = 30;
  int frame_dim = 8;
  int max_seq_len = 2048;
  double dropout = 0.1;
  // share the output head with the token embedding table
  bool tie_output = false;

  int total_vocab() const {
    return language_vocab + prompt::ControlVocab::kNumControl;
  }
  int head_dim() const { return model_dim / heads; }

  void validate() const {
    if (model_dim % heads != 0)
      throw std::invalid_argument(
          "model config: model dim must be divisible by heads");
    if (layers < 1 || heads < 1 || model_dim < 1 || ff_dim < 1 ||
        language_vocab < 2 || frame_dim < 1 || max_seq_len < 1)
      throw std::invalid_argument("model config: nonpositive dimension");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"heads", c.heads},
                     {"model_dim", c.model_dim},
                     {"ff_dim", c.ff_dim},
                     {"language_vocab", c.language_vocab},
                     {"frame_dim", c.frame_dim},
                     {"max_seq_len", c.max_seq_len},
                     {"dropout", c.dropout},
                     {"tie_output", c.tie_output}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("model_dim").get_to(c.model_dim);
  j.at("ff_dim").get_to(c.ff_dim);
  j.at("language_vocab").get_to(c.language_vocab);
  j.at("frame_dim").get_to(c.frame_dim);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("dropout").get_to(c.dropout);
  c.tie_output = j.value("tie_output", false);
}

enum class AdapterSet { kDecoderOnly, kDecoderProjector, kDecoderProjectorAll };

inline const char* adapter_set_name(AdapterSet s) {
  switch (s) {
    case AdapterSet::kDecoderOnly: return "decoder_only";
    case AdapterSet::kDecoderProjector: return "decoder+projector";
    case AdapterSet::kDecoderProjectorAll: return "decoder+projector+all";
  }
  return "?";
}

inline AdapterSet adapter_set_from_name(const std::string& s) {
  if (s == "decoder_only") return AdapterSet::kDecoderOnly;
  if (s == "decoder+projector") return AdapterSet::kDecoderProjector;
  if (s == "decoder+projector+all") return AdapterSet::kDecoderProjectorAll;
  throw std::invalid_argument("unknown adapter attachment set: " + s);
}

struct AdapterPair {
  nk::TensorPtr a;  // [in, r]
  nk::TensorPtr b;  // [r, out]
};

struct ModelParams {
  ModelConfig config;

  nk::TensorPtr tok_emb;  // [total_vocab, d]
  nk::TensorPtr pos_emb;  // [max_seq_len, d]
  nk::TensorPtr w_proj;   // [frame_dim, d], no bias: projector stays linear

  struct Layer {
    nk::TensorPtr ln1_g, ln1_b;
    nk::TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
    nk::TensorPtr ln2_g, ln2_b;
    nk::TensorPtr w1, b1, w2, b2;
  };
  std::vector<Layer> layers;

  nk::TensorPtr lnf_g, lnf_b;
  nk::TensorPtr w_out;  // [d, total_vocab]; absent when the head is tied
  nk::TensorPtr b_out;

  // low-rank adapters keyed by host tensor name; empty when not attached
  std::map<std::string, AdapterPair> adapters;
  int adapter_rank = 0;
  std::optional<AdapterSet> adapter_set;

  bool has_adapters() const { return !adapters.empty(); }

  std::vector<std::pair<std::string, nk::TensorPtr>> named_tensors() const {
    std::vector<std::pair<std::string, nk::TensorPtr>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    out.emplace_back("w_proj", w_proj);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      std::string p = "layer" + std::to_string(i) + ".";
      out.emplace_back(p + "ln1_g", l.ln1_g);
      out.emplace_back(p + "ln1_b", l.ln1_b);
      out.emplace_back(p + "wq", l.wq);
      out.emplace_back(p + "bq", l.bq);
      out.emplace_back(p + "wk", l.wk);
      out.emplace_back(p + "bk", l.bk);
      out.emplace_back(p + "wv", l.wv);
      out.emplace_back(p + "bv", l.bv);
      out.emplace_back(p + "wo", l.wo);
      out.emplace_back(p + "bo", l.bo);
      out.emplace_back(p + "ln2_g", l.ln2_g);
      out.emplace_back(p + "ln2_b", l.ln2_b);
      out.emplace_back(p + "w1", l.w1);
      out.emplace_back(p + "b1", l.b1);
      out.emplace_back(p + "w2", l.w2);
      out.emplace_back(p + "b2", l.b2);
    }
    out.emplace_back("lnf_g", lnf_g);
    out.emplace_back("lnf_b", lnf_b);
    if (w_out) out.emplace_back("w_out", w_out);
    out.emplace_back("b_out", b_out);
    for (const auto& [name, pair] : adapters) {
      out.emplace_back("adapter." + name + ".a", pair.a);
      out.emplace_back("adapter." + name + ".b", pair.b);
    }
    return out;
  }

  std::vector<nk::TensorPtr> trainable() const {
    std::vector<nk::TensorPtr> out;
    for (auto& [name, t] : named_tensors())
      if (t->requires_grad) out.push_back(t);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : trainable()) n += t->size();
    return n;
  }

  const AdapterPair* adapter_for(const std::string& host) const {
    auto it = adapters.find(host);
    return it == adapters.end() ? nullptr : &it->second;
  }
};

inline ModelParams init_params(const ModelConfig& config, Rng rng,
                               double init_std = 0.02) {
  config.validate();
  ModelParams p;
  p.config = config;
  const int d = config.model_dim;
  auto weight = [&](std::vector<int> shape, const char* label) {
    return nk::Tensor::randn(std::move(shape), rng, init_std, true);
  };
  auto zeros = [&](std::vector<int> shape) {
    return nk::Tensor::zeros(std::move(shape), true);
  };
  auto ones = [&](int n) {
    auto t = nk::Tensor::zeros({n}, true);
    std::fill(t->data.begin(), t->data.end(), 1.0);
    return t;
  };

  p.tok_emb = weight({config.total_vocab(), d}, "tok_emb");
  p.pos_emb = weight({config.max_seq_len, d}, "pos_emb");
  p.w_proj = weight({config.frame_dim, d}, "w_proj");
  for (int i = 0; i < config.layers; ++i) {
    ModelParams::Layer l;
    l.ln1_g = ones(d);
    l.ln1_b = zeros({d});
    l.wq = weight({d, d}, "wq");
    l.bq = zeros({d});
    l.wk = weight({d, d}, "wk");
    l.bk = zeros({d});
    l.wv = weight({d, d}, "wv");
    l.bv = zeros({d});
    l.wo = weight({d, d}, "wo");
    l.bo = zeros({d});
    l.ln2_g = ones(d);
    l.ln2_b = zeros({d});
    l.w1 = weight({d, config.ff_dim}, "w1");
    l.b1 = zeros({config.ff_dim});
    l.w2 = weight({config.ff_dim, d}, "w2");
    l.b2 = zeros({d});
    p.layers.push_back(std::move(l));
  }
  p.lnf_g = ones(d);
  p.lnf_b = zeros({d});
  if (!config.tie_output)
    p.w_out = weight({d, config.total_vocab()}, "w_out");
  p.b_out = zeros({config.total_vocab()});
  return p;
}

inline std::vector<std::string> adapter_hosts(const ModelConfig& config,
                                              AdapterSet set) {
  std::vector<std::string> hosts;
  for (int i = 0; i < config.layers; ++i) {
    std::string p = "layer" + std::to_string(i) + ".";
    hosts.push_back(p + "wq");
    hosts.push_back(p + "wk");
    hosts.push_back(p + "wv");
    hosts.push_back(p + "wo");
  }
  if (set == AdapterSet::kDecoderProjector ||
      set == AdapterSet::kDecoderProjectorAll)
    hosts.push_back("w_proj");
  if (set == AdapterSet::kDecoderProjectorAll) {
    for (int i = 0; i < config.layers; ++i) {
      std::string p = "layer" + std::to_string(i) + ".";
      hosts.push_back(p + "w1");
      hosts.push_back(p + "w2");
    }
    hosts.push_back("tok_emb");
    if (!config.tie_output) hosts.push_back("w_out");
  }
  return hosts;
}

// Freezes every base tensor and attaches zero-initialized low-rank pairs to
// the chosen hosts.  Forward output is unchanged until the adapters train
// (B starts at zero).
inline void apply_adapters(ModelParams& params, AdapterSet set, int rank,
                           Rng rng) {
  if (rank < 1) throw std::invalid_argument("apply_adapters: rank must be >= 1");
  if (params.has_adapters())
    throw std::invalid_argument("apply_adapters: adapters already attached");
  std::map<std::string, nk::TensorPtr> by_name;
  for (auto& [name, t] : params.named_tensors()) {
    by_name[name] = t;
    t->requires_grad = false;
  }
  for (const std::string& host : adapter_hosts(params.config, set)) {
    const auto& w = by_name.at(host);
    AdapterPair pair;
    pair.a = nk::Tensor::randn({w->shape[0], rank}, rng, 0.02, true);
    pair.b = nk::Tensor::zeros({rank, w->shape[1]}, true);
    params.adapters.emplace(host, std::move(pair));
  }
  params.adapter_rank = rank;
  params.adapter_set = set;
}

struct ForwardTrace {
  nk::TensorPtr logits;  // [total_len, total_vocab]
  // attention[layer][head] is a [total_len, total_len] row-stochastic causal
  // matrix; empty unless capture was requested
  std::vector<std::vector<nk::TensorPtr>> attention;
  int prompt_len = 0;
  int total_len = 0;

  bool captured() const { return !attention.empty(); }
};

namespace detail {

inline nk::TensorPtr linear(const ModelParams& params, const nk::TensorPtr& x,
                            const std::string& host, const nk::TensorPtr& w,
                            const nk::TensorPtr& b) {
  auto y = nk::matmul(x, w);
  if (const AdapterPair* ad = params.adapter_for(host))
    y = nk::add(y, nk::matmul(nk::matmul(x, ad->a), ad->b));
  if (b) y = nk::add_row_broadcast(y, b);
  return y;
}

inline nk::TensorPtr effective_table(const ModelParams& params,
                                     const std::string& host,
                                     const nk::TensorPtr& w) {
  if (const AdapterPair* ad = params.adapter_for(host))
    return nk::add(w, nk::matmul(ad->a, ad->b));
  return w;
}

}  // namespace detail

// Teacher tokens, when present, are appended after the prompt as the Output
// segment (inputs t1..tL); logits are defined at every position.  Pass a
// dropout rng only during training.
inline ForwardTrace forward(const ModelParams& params,
                            const prompt::PromptLayout& layout,
                            const std::vector<int>* teacher_tokens = nullptr,
                            bool capture_attention = false,
                            Rng* dropout_rng = nullptr) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.model_dim;
  const int n_prompt = layout.size();
  const int n_teacher =
      teacher_tokens ? static_cast<int>(teacher_tokens->size()) : 0;
  const int total = n_prompt + n_teacher;
  if (total > cfg.max_seq_len)
    throw std::invalid_argument(
        "forward: sequence of " + std::to_string(total) +
        " items exceeds max sequence length " + std::to_string(cfg.max_seq_len));
  if (total == 0) throw std::invalid_argument("forward: empty sequence");

  // collect audio frames into one matrix and project once
  int n_audio = 0;
  for (const auto& item : layout.items)
    if (item.is_audio) ++n_audio;
  nk::TensorPtr audio_rows;
  if (n_audio > 0) {
    auto frames = nk::Tensor::zeros({n_audio, cfg.frame_dim});
    int r = 0;
    for (const auto& item : layout.items) {
      if (!item.is_audio) continue;
      if (static_cast<int>(item.frame.size()) != cfg.frame_dim)
        throw std::invalid_argument("forward: frame dim mismatch");
      std::copy(item.frame.begin(), item.frame.end(),
                frames->data.begin() + static_cast<std::size_t>(r) * cfg.frame_dim);
      ++r;
    }
    audio_rows = detail::linear(params, frames, "w_proj", params.w_proj, nullptr);
  }

  auto table = detail::effective_table(params, "tok_emb", params.tok_emb);
  std::vector<std::pair<nk::TensorPtr, int>> picks;
  picks.reserve(total);
  int audio_idx = 0;
  auto check_token = [&](int t) {
    if (t < 0 || t >= cfg.total_vocab())
      throw std::invalid_argument("forward: token id " + std::to_string(t) +
                                  " outside vocabulary");
  };
  for (const auto& item : layout.items) {
    if (item.is_audio) {
      picks.emplace_back(audio_rows, audio_idx++);
    } else {
      check_token(item.token);
      picks.emplace_back(table, item.token);
    }
  }
  for (int j = 0; j < n_teacher; ++j) {
    check_token((*teacher_tokens)[j]);
    picks.emplace_back(table, (*teacher_tokens)[j]);
  }

  auto x = nk::gather_rows_multi(picks, d);
  x = nk::add(x, nk::slice_rows(params.pos_emb, 0, total));
  if (dropout_rng) x = nk::dropout(x, cfg.dropout, *dropout_rng);

  ForwardTrace trace;
  trace.prompt_len = n_prompt;
  trace.total_len = total;
  if (capture_attention)
    trace.attention.assign(cfg.layers, std::vector<nk::TensorPtr>(cfg.heads));

  const int dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int li = 0; li < cfg.layers; ++li) {
    const auto& l = params.layers[li];
    std::string p = "layer" + std::to_string(li) + ".";
    auto h = nk::layer_norm_rows(x, l.ln1_g, l.ln1_b);
    auto q = detail::linear(params, h, p + "wq", l.wq, l.bq);
    auto k = detail::linear(params, h, p + "wk", l.wk, l.bk);
    auto v = detail::linear(params, h, p + "wv", l.wv, l.bv);
    std::vector<nk::TensorPtr> head_ctx(cfg.heads);
    for (int hi = 0; hi < cfg.heads; ++hi) {
      auto qh = nk::slice_cols(q, hi * dh, (hi + 1) * dh);
      auto kh = nk::slice_cols(k, hi * dh, (hi + 1) * dh);
      auto vh = nk::slice_cols(v, hi * dh, (hi + 1) * dh);
      auto scores = nk::scale(nk::matmul_nt(qh, kh), attn_scale);
      auto probs = nk::causal_softmax_rows(scores);
      if (capture_attention) trace.attention[li][hi] = probs;
      head_ctx[hi] = nk::matmul(probs, vh);
    }
    auto ctx = nk::concat_cols(head_ctx);
    auto attn_out = detail::linear(params, ctx, p + "wo", l.wo, l.bo);
    if (dropout_rng) attn_out = nk::dropout(attn_out, cfg.dropout, *dropout_rng);
    x = nk::add(x, attn_out);

    auto h2 = nk::layer_norm_rows(x, l.ln2_g, l.ln2_b);
    auto m = nk::gelu(detail::linear(params, h2, p + "w1", l.w1, l.b1));
    auto m2 = detail::linear(params, m, p + "w2", l.w2, l.b2);
    if (dropout_rng) m2 = nk::dropout(m2, cfg.dropout, *dropout_rng);
    x = nk::add(x, m2);
  }

  auto xf = nk::layer_norm_rows(x, params.lnf_g, params.lnf_b);
  nk::TensorPtr head = cfg.tie_output
                           ? nk::matmul_nt(xf, table)
                           : detail::linear(params, xf, "w_out", params.w_out,
                                            nullptr);
  trace.logits = nk::add_row_broadcast(head, params.b_out);
  return trace;
}

// log p(tokens[j] | tokens[<j], layout) for each j, teacher-forcing the
// tokens as the Output segment.  The sum over j is the sequence
// log-likelihood.
inline std::vector<double> logprob_of(const ModelParams& params,
                                      const prompt::PromptLayout& layout,
                                      const std::vector<int>& tokens) {
  if (tokens.empty())
    throw std::invalid_argument("logprob_of: empty token sequence");
  nk::NoGrad ng;
  ForwardTrace trace = forward(params, layout, &tokens, false, nullptr);
  const int vocab = params.config.total_vocab();
  std::vector<double> out(tokens.size());
  // row (prompt_len - 1 + j) predicts tokens[j]
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const double* row =
        trace.logits->data.data() +
        static_cast<std::size_t>(trace.prompt_len - 1 + j) * vocab;
    double mx = row[0];
    for (int t = 1; t < vocab; ++t) mx = std::max(mx, row[t]);
    double z = 0.0;
    for (int t = 0; t < vocab; ++t) z += std::exp(row[t] - mx);
    out[j] = row[tokens[j]] - (mx + std::log(z));
  }
  return out;
}

// ------------------------------------------------------------- checkpoints
//
// <prefix>.json holds the config and a tensor index; <prefix>.bin holds the
// raw float64 values, little-endian, in index order.

inline void save_checkpoint(const ModelParams& params,
                            const std::string& prefix) {
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = params.config;
  if (params.adapter_set) {
    manifest["adapters"] = {{"rank", params.adapter_rank},
                            {"set", adapter_set_name(*params.adapter_set)}};
  }
  nlohmann::json tensors = nlohmann::json::array();
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("save_checkpoint: cannot open " + prefix +
                                     ".bin");
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.named_tensors()) {
    tensors.push_back({{"name", name},
                       {"shape", t->shape},
                       {"offset", offset},
                       {"count", t->size()},
                       {"trainable", t->requires_grad}});
    bin.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
    offset += t->size();
  }
  manifest["tensors"] = std::move(tensors);
  std::ofstream meta(prefix + ".json", std::ios::binary);
  if (!meta) throw std::runtime_error("save_checkpoint: cannot open " + prefix +
                                      ".json");
  meta << manifest.dump(2) << "\n";
}

inline ModelParams load_checkpoint(const std::string& prefix) {
  std::ifstream meta(prefix + ".json", std::ios::binary);
  if (!meta) throw std::runtime_error("load_checkpoint: cannot open " + prefix +
                                      ".json");
  nlohmann::json manifest = nlohmann::json::parse(meta);
  ModelConfig config = manifest.at("config").get<ModelConfig>();
  ModelParams params = init_params(config, Rng(0), 0.0);
  if (manifest.contains("adapters")) {
    apply_adapters(params,
                   adapter_set_from_name(
                       manifest["adapters"].at("set").get<std::string>()),
                   manifest["adapters"].at("rank").get<int>(), Rng(0));
  }
  std::map<std::string, nk::TensorPtr> by_name;
  for (auto& [name, t] : params.named_tensors()) by_name[name] = t;
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("load_checkpoint: cannot open " + prefix +
                                     ".bin");
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: unknown tensor " + name);
    auto& t = it->second;
    if (entry.at("count").get<std::uint64_t>() != t->size())
      throw std::runtime_error("load_checkpoint: size mismatch for " + name);
    bin.seekg(static_cast<std::streamoff>(
        entry.at("offset").get<std::uint64_t>() * sizeof(double)));
    bin.read(reinterpret_cast<char*>(t->data.data()),
             static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!bin)
      throw std::runtime_error("load_checkpoint: truncated blob at " + name);
    t->requires_grad = entry.at("trainable").get<bool>();
  }
  return params;
}

}  // namespace miclab::model

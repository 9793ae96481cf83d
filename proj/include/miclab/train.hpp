#pragma once

// Training regimes: pretraining, cross-lingual fine-tuning (XFT) and
// target-language fine-tuning (TFT).
//
// Every instance is a prompt layout plus teacher-forced target tokens; the
// loss is masked to the target transcription (demonstrations condition the
// loss but are never prediction targets).  Row r of the logits supervises the
// token at position r+1, so the mask covers the task-marker row through the
// final output row, whose target is EOS.  The optimizer is Adam with
// decoupled weight decay and linear warmup.

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "miclab/model.hpp"
#include "miclab/prompt.hpp"
#include "miclab/rng.hpp"
#include "miclab/synthlang.hpp"
#include "miclab/tensor.hpp"

namespace miclab::train {

enum class RegimeKind { kPretrain, kXft, kTft };

inline const char* regime_name(RegimeKind k) {
  switch (k) {
    case RegimeKind::kPretrain: return "pretrain";
    case RegimeKind::kXft: return "XFT";
    case RegimeKind::kTft: return "TFT";
  }
  return "?";
}

struct ShotSchedule {
  int lo = 0;
  int hi = 0;

  static ShotSchedule fixed(int k) { return {k, k}; }
  static ShotSchedule range(int lo, int hi) { return {lo, hi}; }

  void validate() const {
    if (lo < 0 || lo > hi)
      throw std::invalid_argument("shot schedule: need 0 <= lo <= hi");
  }
  int draw(Rng& rng) const {
    return lo == hi ? lo : static_cast<int>(rng.next_int(lo, hi));
  }
};

struct TaskMix {
  double micl = 0.40;
  double icl = 0.25;
  double ticl = 0.15;
  double asr = 0.20;

  prompt::TaskType draw(Rng& rng) const {
    switch (rng.next_categorical({micl, icl, ticl, asr})) {
      case 0: return prompt::TaskType::kMicl;
      case 1: return prompt::TaskType::kIcl;
      case 2: return prompt::TaskType::kTIcl;
      default: return prompt::TaskType::kAsr;
    }
  }
};

struct TrainRegime {
  RegimeKind kind = RegimeKind::kPretrain;
  std::vector<std::string> languages;
  std::vector<std::string> held_out;  // evaluation targets, never trained on
  ShotSchedule shots = ShotSchedule::range(1, 10);
  TaskMix mix;
  int steps = 1000;
  int batch_size = 8;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  int warmup_steps = 200;

  // Pretraining-only diversity stream: this fraction of instances comes from
  // a fresh synthetic language (new seed per instance) instead of the named
  // pool, so the base model cannot memorize per-language audio maps and must
  // learn the in-context mechanism itself.
  double fresh_language_fraction = 0.0;
  double fresh_sigma_lo = 0.05;
  double fresh_sigma_hi = 0.5;
  double fresh_sharpness_lo = 1.5;
  double fresh_sharpness_hi = 1.5;
  int fresh_active_lo = 0;  // effective inventory size range; 0 = full vocab
  int fresh_active_hi = 0;
  // chance that one demonstration's transcript is swapped for another
  // utterance's text, exposing the model to mismatched audio-text pairs
  double demo_corrupt_prob = 0.0;
  int fresh_min_len = 4;
  int fresh_max_len = 12;

  void validate() const {
    shots.validate();
    if (languages.empty())
      throw std::invalid_argument("regime: empty language set");
    if (steps < 0 || batch_size < 1)
      throw std::invalid_argument("regime: bad steps or batch size");
    if (fresh_language_fraction < 0.0 || fresh_language_fraction > 1.0)
      throw std::invalid_argument("regime: fresh language fraction in [0,1]");
    if (fresh_language_fraction > 0.0 && kind != RegimeKind::kPretrain)
      throw std::invalid_argument(
          "regime: the fresh-language stream is a pretraining device");
    if (kind != RegimeKind::kTft) {
      for (const auto& lang : languages)
        for (const auto& target : held_out)
          if (lang == target)
            throw std::invalid_argument(
                "regime: training language set contains evaluation target " +
                target);
    }
  }
};

using CorpusPool = std::map<std::string, synth::Corpus>;

struct TrainInstance {
  prompt::PromptLayout layout;
  std::vector<int> teacher;       // gold tokens, appended as the Output segment
  std::vector<int> targets_full;  // per-row next-token targets; -1 where unmasked
  std::vector<bool> mask_full;    // true exactly where the target transcription
                                  // (plus its closing EOS) is supervised
  std::string language_id;
};

// With supervise_all_text the loss also covers every prompt position whose
// next item is a text or control token (the base-model pretraining surrogate:
// demo transcripts then act as dense audio-to-text supervision).  Without it
// the mask is exactly the target transcription plus its closing EOS.
inline TrainInstance instance_from_parts(
    prompt::TaskType task, const prompt::ControlVocab& ctrl,
    const std::vector<synth::Utterance>& demos, const synth::Utterance& target,
    int frame_dim, bool supervise_all_text = false) {
  TrainInstance inst;
  inst.language_id = target.language_id;
  inst.layout = prompt::build_prompt(
      task, ctrl, demos,
      task == prompt::TaskType::kTIcl ? std::vector<double>{} : target.audio,
      task == prompt::TaskType::kTIcl ? 0 : frame_dim);
  inst.teacher = target.tokens;
  const int n_prompt = inst.layout.size();
  const int total = n_prompt + static_cast<int>(inst.teacher.size());
  inst.targets_full.assign(total, -1);
  inst.mask_full.assign(total, false);
  if (supervise_all_text) {
    for (int r = 0; r + 1 < n_prompt; ++r) {
      const auto& next = inst.layout.items[r + 1];
      if (next.is_audio) continue;
      inst.targets_full[r] = next.token;
      inst.mask_full[r] = true;
    }
  }
  for (std::size_t j = 0; j < inst.teacher.size(); ++j) {
    inst.targets_full[n_prompt - 1 + j] = inst.teacher[j];
    inst.mask_full[n_prompt - 1 + j] = true;
  }
  inst.targets_full[total - 1] = ctrl.eos();
  inst.mask_full[total - 1] = true;
  return inst;
}

inline TrainInstance make_instance(const TrainRegime& regime,
                                   const CorpusPool& pool, Rng& rng) {
  if (regime.fresh_language_fraction > 0.0 &&
      rng.next_double() < regime.fresh_language_fraction) {
    // one-off language: same dimensions as the pool, fresh seed and noise
    synth::LanguageParams p = pool.begin()->second.spec.params;
    p.noise_sigma = regime.fresh_sigma_lo +
                    (regime.fresh_sigma_hi - regime.fresh_sigma_lo) *
                        rng.next_double();
    p.bigram_sharpness = regime.fresh_sharpness_lo +
                         (regime.fresh_sharpness_hi -
                          regime.fresh_sharpness_lo) *
                             rng.next_double();
    p.active_vocab =
        regime.fresh_active_lo <= 0
            ? 0
            : static_cast<int>(rng.next_int(regime.fresh_active_lo,
                                            regime.fresh_active_hi));
    auto spec = synth::make_language(rng.next_u64(), p);
    prompt::TaskType task = regime.mix.draw(rng);
    int shots = task == prompt::TaskType::kAsr ? 0 : regime.shots.draw(rng);
    Rng sample_rng = rng.split("fresh");
    synth::Utterance target = synth::sample_utterance(
        spec, sample_rng, regime.fresh_min_len, regime.fresh_max_len);
    std::vector<synth::Utterance> demos;
    for (int i = 0; i < shots; ++i)
      demos.push_back(synth::sample_utterance(
          spec, sample_rng, regime.fresh_min_len, regime.fresh_max_len));
    if (!demos.empty() && regime.demo_corrupt_prob > 0.0 &&
        sample_rng.next_double() < regime.demo_corrupt_prob) {
      auto& victim = demos[sample_rng.next_below(demos.size())];
      victim.tokens = synth::sample_utterance(spec, sample_rng,
                                              regime.fresh_min_len,
                                              regime.fresh_max_len)
                          .tokens;
    }
    prompt::ControlVocab ctrl(spec.vocab_size());
    return instance_from_parts(task, ctrl, demos, target, spec.frame_dim(),
                               regime.kind == RegimeKind::kPretrain);
  }

  const std::string& lang =
      regime.languages[rng.next_below(regime.languages.size())];
  auto it = pool.find(lang);
  if (it == pool.end())
    throw std::invalid_argument("make_instance: language " + lang +
                                " missing from the corpus pool");
  const synth::Corpus& corpus = it->second;
  if (corpus.train.empty())
    throw std::invalid_argument("make_instance: empty train split for " + lang);

  prompt::TaskType task = regime.mix.draw(rng);
  int shots = task == prompt::TaskType::kAsr ? 0 : regime.shots.draw(rng);
  std::size_t target_idx = rng.next_below(corpus.train.size());
  if (shots + 1 > static_cast<int>(corpus.train.size()))
    throw std::invalid_argument(
        "make_instance: pool too small for shot count " +
        std::to_string(shots));

  std::vector<synth::Utterance> demos;
  if (shots > 0) {
    // draw from the train split excluding the target itself
    std::vector<std::size_t> others;
    others.reserve(corpus.train.size() - 1);
    for (std::size_t i = 0; i < corpus.train.size(); ++i)
      if (i != target_idx) others.push_back(i);
    auto picked = rng.sample_without_replacement(others.size(),
                                                 static_cast<std::size_t>(shots));
    for (std::size_t p : picked) demos.push_back(corpus.train[others[p]]);
  }

  prompt::ControlVocab ctrl(corpus.spec.vocab_size());
  return instance_from_parts(task, ctrl, demos, corpus.train[target_idx],
                             corpus.spec.frame_dim(),
                             regime.kind == RegimeKind::kPretrain);
}

inline nk::TensorPtr instance_loss(const model::ModelParams& params,
                                   const TrainInstance& inst,
                                   Rng* dropout_rng = nullptr) {
  auto trace =
      model::forward(params, inst.layout, &inst.teacher, false, dropout_rng);
  std::vector<int> targets(inst.targets_full.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    targets[i] = inst.targets_full[i] < 0 ? 0 : inst.targets_full[i];
  return nk::cross_entropy(trace.logits, targets, inst.mask_full);
}

// Adam with decoupled weight decay; decay applies to matrices only.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, int warmup_steps)
      : lr_(lr), weight_decay_(weight_decay), warmup_(warmup_steps) {}

  void step(const std::vector<nk::TensorPtr>& tensors) {
    ++t_;
    double lr_t = lr_;
    if (warmup_ > 0 && t_ <= warmup_)
      lr_t = lr_ * static_cast<double>(t_) / warmup_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& p : tensors) {
      auto& slot = state_[p.get()];
      if (slot.m.size() != p->size()) {
        slot.m.assign(p->size(), 0.0);
        slot.v.assign(p->size(), 0.0);
      }
      p->ensure_grad();
      bool decay = p->shape.size() >= 2 && weight_decay_ > 0.0;
      for (std::size_t i = 0; i < p->size(); ++i) {
        double g = p->grad[i];
        slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
        slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
        double update = (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps_);
        if (decay) update += weight_decay_ * p->data[i];
        p->data[i] -= lr_t * update;
      }
      p->zero_grad();
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_;
  double weight_decay_;
  int warmup_;
  int t_ = 0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::unordered_map<nk::Tensor*, Slot> state_;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean masked loss per step
};

inline TrainResult run_training(model::ModelParams& params,
                                const TrainRegime& regime,
                                const CorpusPool& pool, Rng rng) {
  regime.validate();
  TrainResult result;
  result.loss_curve.reserve(regime.steps);
  AdamW opt(regime.learning_rate, regime.weight_decay, regime.warmup_steps);
  auto trainable = params.trainable();
  if (trainable.empty())
    throw std::invalid_argument("run_training: no trainable tensors");

  for (int step = 0; step < regime.steps; ++step) {
    Rng step_rng = rng.split(static_cast<std::uint64_t>(step));
    double step_loss = 0.0;
    for (int b = 0; b < regime.batch_size; ++b) {
      Rng inst_rng = step_rng.split(static_cast<std::uint64_t>(b));
      TrainInstance inst = make_instance(regime, pool, inst_rng);
      Rng dropout_rng = inst_rng.split("dropout");
      auto loss = instance_loss(params, inst,
                                params.config.dropout > 0 ? &dropout_rng
                                                          : nullptr);
      step_loss += loss->scalar();
      nk::backward(nk::scale(loss, 1.0 / regime.batch_size));
    }
    step_loss /= regime.batch_size;
    if (!std::isfinite(step_loss))
      throw std::runtime_error("run_training: loss diverged at step " +
                               std::to_string(step));
    result.loss_curve.push_back(step_loss);
    opt.step(trainable);
  }
  return result;
}

// Nested language curricula: curriculum(16) extends curriculum(8) by the next
// eight entries of a fixed ordered list.
inline std::vector<std::string> curriculum(
    const std::vector<std::string>& ordered_ft_languages, int count,
    const std::vector<std::string>& held_out = {}) {
  if (count < 1 || count > static_cast<int>(ordered_ft_languages.size()))
    throw std::invalid_argument(
        "curriculum: count exceeds available fine-tuning languages");
  std::vector<std::string> out(ordered_ft_languages.begin(),
                               ordered_ft_languages.begin() + count);
  for (const auto& lang : out)
    for (const auto& target : held_out)
      if (lang == target)
        throw std::invalid_argument(
            "curriculum: fine-tuning list contains evaluation target " +
            target);
  return out;
}

// ------------------------------------------------------------ serialization

// Key-value regime config.  Keys: kind, languages (comma separated), held_out,
// shots_lo, shots_hi, mix_micl, mix_icl, mix_ticl, mix_asr, steps, batch_size,
// learning_rate, weight_decay, warmup_steps.
inline std::string regime_to_kv(const TrainRegime& r) {
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += v[i];
    }
    return s;
  };
  char buf[64];
  std::string out;
  out += std::string("kind=") + regime_name(r.kind) + "\n";
  out += "languages=" + join(r.languages) + "\n";
  out += "held_out=" + join(r.held_out) + "\n";
  out += "shots_lo=" + std::to_string(r.shots.lo) + "\n";
  out += "shots_hi=" + std::to_string(r.shots.hi) + "\n";
  auto fmt = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%s=%.9g\n", key, v);
    out += buf;
  };
  fmt("mix_micl", r.mix.micl);
  fmt("mix_icl", r.mix.icl);
  fmt("mix_ticl", r.mix.ticl);
  fmt("mix_asr", r.mix.asr);
  out += "steps=" + std::to_string(r.steps) + "\n";
  out += "batch_size=" + std::to_string(r.batch_size) + "\n";
  fmt("learning_rate", r.learning_rate);
  fmt("weight_decay", r.weight_decay);
  out += "warmup_steps=" + std::to_string(r.warmup_steps) + "\n";
  fmt("fresh_language_fraction", r.fresh_language_fraction);
  fmt("fresh_sigma_lo", r.fresh_sigma_lo);
  fmt("fresh_sigma_hi", r.fresh_sigma_hi);
  fmt("fresh_sharpness_lo", r.fresh_sharpness_lo);
  fmt("fresh_sharpness_hi", r.fresh_sharpness_hi);
  out += "fresh_active_lo=" + std::to_string(r.fresh_active_lo) + "\n";
  out += "fresh_active_hi=" + std::to_string(r.fresh_active_hi) + "\n";
  fmt("demo_corrupt_prob", r.demo_corrupt_prob);
  out += "fresh_min_len=" + std::to_string(r.fresh_min_len) + "\n";
  out += "fresh_max_len=" + std::to_string(r.fresh_max_len) + "\n";
  return out;
}

inline TrainRegime regime_from_kv(const std::string& text) {
  TrainRegime r;
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty() || line[0] == '#') continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("regime config: malformed line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto split_list = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t p = 0;
    while (p < s.size()) {
      std::size_t c = s.find(',', p);
      if (c == std::string::npos) c = s.size();
      if (c > p) out.push_back(s.substr(p, c - p));
      p = c + 1;
    }
    return out;
  };
  if (auto it = kv.find("kind"); it != kv.end()) {
    if (it->second == "pretrain") r.kind = RegimeKind::kPretrain;
    else if (it->second == "XFT") r.kind = RegimeKind::kXft;
    else if (it->second == "TFT") r.kind = RegimeKind::kTft;
    else throw std::invalid_argument("regime config: unknown kind " + it->second);
  }
  if (auto it = kv.find("languages"); it != kv.end())
    r.languages = split_list(it->second);
  if (auto it = kv.find("held_out"); it != kv.end())
    r.held_out = split_list(it->second);
  auto geti = [&](const char* key, int& v) {
    if (auto it = kv.find(key); it != kv.end()) v = std::stoi(it->second);
  };
  auto getd = [&](const char* key, double& v) {
    if (auto it = kv.find(key); it != kv.end()) v = std::stod(it->second);
  };
  geti("shots_lo", r.shots.lo);
  geti("shots_hi", r.shots.hi);
  getd("mix_micl", r.mix.micl);
  getd("mix_icl", r.mix.icl);
  getd("mix_ticl", r.mix.ticl);
  getd("mix_asr", r.mix.asr);
  geti("steps", r.steps);
  geti("batch_size", r.batch_size);
  getd("learning_rate", r.learning_rate);
  getd("weight_decay", r.weight_decay);
  geti("warmup_steps", r.warmup_steps);
  getd("fresh_language_fraction", r.fresh_language_fraction);
  getd("fresh_sigma_lo", r.fresh_sigma_lo);
  getd("fresh_sigma_hi", r.fresh_sigma_hi);
  getd("fresh_sharpness_lo", r.fresh_sharpness_lo);
  getd("fresh_sharpness_hi", r.fresh_sharpness_hi);
  geti("fresh_active_lo", r.fresh_active_lo);
  geti("fresh_active_hi", r.fresh_active_hi);
  getd("demo_corrupt_prob", r.demo_corrupt_prob);
  geti("fresh_min_len", r.fresh_min_len);
  geti("fresh_max_len", r.fresh_max_len);
  return r;
}

inline void write_loss_csv(const std::vector<double>& curve,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_loss_csv: cannot open " + path);
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, curve[i]);
    out << buf;
  }
}

}  // namespace miclab::train

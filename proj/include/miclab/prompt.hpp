#pragma once

// Interleaved multimodal prompt layouts for the four task designs, plus the
// segment bookkeeping used by attention attribution.
//
// Layout grammar (control tokens in brackets):
//   system prompt   [BOS]
//   demo, with audio  [DEMO] [AUD_BEGIN] frames... [AUD_END]   -> DemoAudio
//                     [TRANS] tokens...                        -> DemoText
//   demo, text only   [DEMO] [TRANS] tokens...                 -> DemoText
//   target audio      [TGT] [AUD_BEGIN] frames... [AUD_END]    -> TargetAudio
//   task marker       [TASK]                                   -> TaskMarker
// Control tokens belong to the span of the block they open, so segment spans
// are contiguous and partition the item sequence; within one demonstration the
// text span starts exactly where the audio span ends (control offset 0).

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/synthlang.hpp"

namespace miclab::prompt {

enum class TaskType { kTIcl, kIcl, kMicl, kAsr };

inline const char* task_name(TaskType t) {
  switch (t) {
    case TaskType::kTIcl: return "T-ICL";
    case TaskType::kIcl: return "ICL";
    case TaskType::kMicl: return "MICL";
    case TaskType::kAsr: return "ASR";
  }
  return "?";
}

inline TaskType task_from_name(const std::string& s) {
  if (s == "T-ICL" || s == "ticl") return TaskType::kTIcl;
  if (s == "ICL" || s == "icl") return TaskType::kIcl;
  if (s == "MICL" || s == "micl") return TaskType::kMicl;
  if (s == "ASR" || s == "asr") return TaskType::kAsr;
  throw std::invalid_argument("unknown task type: " + s);
}

enum class SegmentKind {
  kSystemPrompt,
  kDemoAudio,
  kDemoText,
  kTargetAudio,
  kTaskMarker,
  kOutput
};
inline constexpr int kNumSegmentKinds = 6;

inline const char* segment_name(SegmentKind k) {
  switch (k) {
    case SegmentKind::kSystemPrompt: return "SystemPrompt";
    case SegmentKind::kDemoAudio: return "DemoAudio";
    case SegmentKind::kDemoText: return "DemoText";
    case SegmentKind::kTargetAudio: return "TargetAudio";
    case SegmentKind::kTaskMarker: return "TaskMarker";
    case SegmentKind::kOutput: return "Output";
  }
  return "?";
}

// Reserved token ids live directly above the language vocabulary.
struct ControlVocab {
  int vocab_size;  // language tokens occupy [0, vocab_size)

  explicit ControlVocab(int language_vocab_size)
      : vocab_size(language_vocab_size) {}

  int bos() const { return vocab_size + 0; }
  int demo() const { return vocab_size + 1; }
  int aud_begin() const { return vocab_size + 2; }
  int aud_end() const { return vocab_size + 3; }
  int trans() const { return vocab_size + 4; }
  int tgt() const { return vocab_size + 5; }
  int task() const { return vocab_size + 6; }
  int eos() const { return vocab_size + 7; }
  int pad() const { return vocab_size + 8; }

  static constexpr int kNumControl = 9;
  int total_vocab() const { return vocab_size + kNumControl; }
};

struct PromptItem {
  bool is_audio = false;
  int token = -1;                 // text or control token id
  std::vector<double> frame;      // audio frame when is_audio
  SegmentKind kind = SegmentKind::kSystemPrompt;
  int demo_index = -1;            // set for DemoAudio / DemoText items
};

struct SegmentSpan {
  SegmentKind kind;
  int demo_index;  // -1 outside demonstrations
  int begin;
  int end;  // half-open
};

struct PromptLayout {
  TaskType task = TaskType::kAsr;
  int context_size = 0;
  std::vector<PromptItem> items;
  // source material, kept so interventions can rebuild the layout
  std::vector<synth::Utterance> demos;
  std::vector<double> target_audio;  // row-major frames
  int frame_dim = 0;

  int size() const { return static_cast<int>(items.size()); }
};

namespace detail {

inline void push_control(PromptLayout& layout, int token, SegmentKind kind,
                         int demo_index = -1) {
  PromptItem item;
  item.token = token;
  item.kind = kind;
  item.demo_index = demo_index;
  layout.items.push_back(std::move(item));
}

inline void push_audio_block(PromptLayout& layout, const ControlVocab& ctrl,
                             const double* frames, int n_frames, int frame_dim,
                             SegmentKind kind, int demo_index, int open_token) {
  push_control(layout, open_token, kind, demo_index);
  push_control(layout, ctrl.aud_begin(), kind, demo_index);
  for (int f = 0; f < n_frames; ++f) {
    PromptItem item;
    item.is_audio = true;
    item.frame.assign(frames + static_cast<std::size_t>(f) * frame_dim,
                      frames + static_cast<std::size_t>(f + 1) * frame_dim);
    item.kind = kind;
    item.demo_index = demo_index;
    layout.items.push_back(std::move(item));
  }
  push_control(layout, ctrl.aud_end(), kind, demo_index);
}

}  // namespace detail

inline PromptLayout build_prompt(TaskType task, const ControlVocab& ctrl,
                                 const std::vector<synth::Utterance>& demos,
                                 const std::vector<double>& target_audio,
                                 int frame_dim) {
  const bool has_demos = task != TaskType::kAsr;
  const bool demo_audio = task == TaskType::kMicl;
  const bool has_target = task != TaskType::kTIcl;

  if (task == TaskType::kAsr && !demos.empty())
    throw std::invalid_argument("build_prompt: ASR layout takes no demos");
  if (has_target) {
    if (frame_dim < 1 || target_audio.empty() ||
        target_audio.size() % static_cast<std::size_t>(frame_dim) != 0)
      throw std::invalid_argument("build_prompt: bad target audio");
  }
  for (const auto& d : demos) {
    if (d.tokens.empty())
      throw std::invalid_argument(
          "build_prompt: demonstration with empty transcript");
    if (demo_audio && d.frame_dim != frame_dim)
      throw std::invalid_argument("build_prompt: demo frame dim mismatch");
    for (int t : d.tokens)
      if (t < 0 || t >= ctrl.vocab_size)
        throw std::invalid_argument(
            "build_prompt: demo token outside language vocab");
  }

  PromptLayout layout;
  layout.task = task;
  layout.context_size = static_cast<int>(demos.size());
  layout.demos = demos;
  layout.target_audio = target_audio;
  layout.frame_dim = frame_dim;

  detail::push_control(layout, ctrl.bos(), SegmentKind::kSystemPrompt);

  if (has_demos) {
    for (int i = 0; i < static_cast<int>(demos.size()); ++i) {
      const auto& d = demos[i];
      if (demo_audio) {
        detail::push_audio_block(layout, ctrl, d.audio.data(), d.n_frames(),
                                 frame_dim, SegmentKind::kDemoAudio, i,
                                 ctrl.demo());
        detail::push_control(layout, ctrl.trans(), SegmentKind::kDemoText, i);
      } else {
        detail::push_control(layout, ctrl.demo(), SegmentKind::kDemoText, i);
        detail::push_control(layout, ctrl.trans(), SegmentKind::kDemoText, i);
      }
      for (int t : d.tokens) {
        PromptItem item;
        item.token = t;
        item.kind = SegmentKind::kDemoText;
        item.demo_index = i;
        layout.items.push_back(std::move(item));
      }
    }
  }

  if (has_target) {
    int n_frames = static_cast<int>(target_audio.size()) / frame_dim;
    detail::push_audio_block(layout, ctrl, target_audio.data(), n_frames,
                             frame_dim, SegmentKind::kTargetAudio, -1,
                             ctrl.tgt());
  }

  detail::push_control(layout, ctrl.task(), SegmentKind::kTaskMarker);
  return layout;
}

// Contiguous (kind, demo index) runs; together they partition [0, size()).
inline std::vector<SegmentSpan> segment_spans(const PromptLayout& layout) {
  std::vector<SegmentSpan> spans;
  const auto& items = layout.items;
  int i = 0;
  while (i < layout.size()) {
    int j = i;
    while (j < layout.size() && items[j].kind == items[i].kind &&
           items[j].demo_index == items[i].demo_index)
      ++j;
    spans.push_back({items[i].kind, items[i].demo_index, i, j});
    i = j;
  }
  return spans;
}

inline nlohmann::json layout_to_json(const PromptLayout& layout) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : layout.items) {
    nlohmann::json j;
    j["kind"] = segment_name(item.kind);
    if (item.demo_index >= 0) j["demo"] = item.demo_index;
    if (item.is_audio)
      j["audio_dim"] = static_cast<int>(item.frame.size());
    else
      j["token"] = item.token;
    items.push_back(std::move(j));
  }
  nlohmann::json out;
  out["task"] = task_name(layout.task);
  out["context_size"] = layout.context_size;
  out["items"] = std::move(items);
  return out;
}

}  // namespace miclab::prompt

#pragma once

// Attention attribution by segment, layer-wise modality profiles, and
// gold-replacement interventions.
//
// Queries are the Output positions (teacher-forced gold tokens).  Attention
// from a query into the prompt prefix is renormalized to exclude
// output-to-output mass, then summed per segment and averaged over queries.
// Head averaging is the arithmetic mean of per-head shares.

#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miclab/model.hpp"
#include "miclab/prompt.hpp"
#include "miclab/synthlang.hpp"

namespace miclab::attn {

enum class Normalization { kOverAllSegments, kWithinDemos };

// Order of per-query renormalization relative to query averaging; both
// exclude output-to-output mass.
enum class OutputMassHandling { kRenormalizePerQuery, kRenormalizeAfterAverage };

struct AttentionReport {
  int layers = 0;
  int heads = 0;
  int n_demos = 0;
  Normalization normalization = Normalization::kOverAllSegments;

  // share[(layer*heads + head)][kind]
  std::vector<std::array<double, prompt::kNumSegmentKinds>> shares;
  // per-demo {audio, text} mass shares, same layer/head indexing
  std::vector<std::vector<std::pair<double, double>>> demo_shares;

  const std::array<double, prompt::kNumSegmentKinds>& at(int layer,
                                                         int head) const {
    return shares[static_cast<std::size_t>(layer) * heads + head];
  }

  // arithmetic mean over all heads and layers
  double global_share(prompt::SegmentKind kind) const {
    double s = 0.0;
    for (const auto& row : shares) s += row[static_cast<int>(kind)];
    return s / shares.size();
  }

  double global_demo_share(int demo, bool audio_side) const {
    double s = 0.0;
    for (const auto& row : demo_shares)
      s += audio_side ? row[demo].first : row[demo].second;
    return s / demo_shares.size();
  }
};

inline AttentionReport attribute(
    const model::ForwardTrace& trace,
    const std::vector<prompt::SegmentSpan>& spans,
    Normalization normalization = Normalization::kOverAllSegments,
    OutputMassHandling output_mass = OutputMassHandling::kRenormalizePerQuery) {
  if (!trace.captured())
    throw std::invalid_argument(
        "attribute: trace was captured without attention");
  if (trace.total_len <= trace.prompt_len)
    throw std::invalid_argument("attribute: no output positions to query");
  int covered = 0;
  for (const auto& s : spans) covered += s.end - s.begin;
  if (covered != trace.prompt_len)
    throw std::invalid_argument(
        "attribute: spans must partition the prompt prefix");

  const int layers = static_cast<int>(trace.attention.size());
  const int heads = static_cast<int>(trace.attention[0].size());
  const int n = trace.total_len;
  const int p = trace.prompt_len;

  AttentionReport report;
  report.layers = layers;
  report.heads = heads;
  report.normalization = normalization;
  for (const auto& s : spans)
    if (s.demo_index >= 0) report.n_demos = std::max(report.n_demos,
                                                     s.demo_index + 1);

  // position -> (kind, demo)
  std::vector<int> kind_of(p, -1);
  std::vector<int> demo_of(p, -1);
  for (const auto& s : spans)
    for (int i = s.begin; i < s.end; ++i) {
      kind_of[i] = static_cast<int>(s.kind);
      demo_of[i] = s.demo_index;
    }

  for (int li = 0; li < layers; ++li)
    for (int hi = 0; hi < heads; ++hi) {
      const auto& att = trace.attention[li][hi];
      std::array<double, prompt::kNumSegmentKinds> acc{};
      std::vector<std::pair<double, double>> demo_acc(
          std::max(report.n_demos, 1), {0.0, 0.0});
      int queries = 0;
      for (int q = p; q < n; ++q, ++queries) {
        const double* row = att->data.data() + static_cast<std::size_t>(q) * n;
        double prefix_mass = 0.0;
        for (int j = 0; j < p; ++j) prefix_mass += row[j];
        double scale = 1.0;
        if (output_mass == OutputMassHandling::kRenormalizePerQuery)
          scale = prefix_mass > 0.0 ? 1.0 / prefix_mass : 0.0;
        for (int j = 0; j < p; ++j) {
          double w = row[j] * scale;
          acc[kind_of[j]] += w;
          if (demo_of[j] >= 0) {
            if (kind_of[j] == static_cast<int>(prompt::SegmentKind::kDemoAudio))
              demo_acc[demo_of[j]].first += w;
            else
              demo_acc[demo_of[j]].second += w;
          }
        }
      }
      for (double& v : acc) v /= queries;
      for (auto& d : demo_acc) {
        d.first /= queries;
        d.second /= queries;
      }
      if (output_mass == OutputMassHandling::kRenormalizeAfterAverage) {
        double total = 0.0;
        for (double v : acc) total += v;
        if (total > 0.0) {
          for (double& v : acc) v /= total;
          for (auto& d : demo_acc) {
            d.first /= total;
            d.second /= total;
          }
        }
      }
      if (normalization == Normalization::kWithinDemos) {
        double demo_total =
            acc[static_cast<int>(prompt::SegmentKind::kDemoAudio)] +
            acc[static_cast<int>(prompt::SegmentKind::kDemoText)];
        if (demo_total <= 0.0)
          throw std::invalid_argument(
              "attribute: within-demo normalization on a layout without "
              "demonstrations");
        for (double& v : acc) v /= demo_total;
        for (auto& d : demo_acc) {
          d.first /= demo_total;
          d.second /= demo_total;
        }
      }
      report.shares.push_back(acc);
      report.demo_shares.push_back(std::move(demo_acc));
    }
  return report;
}

// Per-layer head-averaged (audio share, text share) within demonstrations;
// each pair sums to one.
inline std::vector<std::pair<double, double>> layer_profile(
    const AttentionReport& report) {
  if (report.normalization != Normalization::kWithinDemos)
    throw std::invalid_argument(
        "layer_profile: report must use within-demo normalization");
  std::vector<std::pair<double, double>> out(report.layers, {0.0, 0.0});
  for (int li = 0; li < report.layers; ++li) {
    for (int hi = 0; hi < report.heads; ++hi) {
      const auto& row = report.at(li, hi);
      out[li].first += row[static_cast<int>(prompt::SegmentKind::kDemoAudio)];
      out[li].second += row[static_cast<int>(prompt::SegmentKind::kDemoText)];
    }
    out[li].first /= report.heads;
    out[li].second /= report.heads;
  }
  return out;
}

// ------------------------------------------------------------- intervention

enum class InterventionMode { kReplaceText, kReplaceAudio, kReplacePair };

inline const char* intervention_name(InterventionMode m) {
  switch (m) {
    case InterventionMode::kReplaceText: return "replace_text";
    case InterventionMode::kReplaceAudio: return "replace_audio";
    case InterventionMode::kReplacePair: return "replace_pair";
  }
  return "?";
}

// Rebuilds the layout with one demonstration's text, audio or both replaced
// by the gold target's content; spans are recomputed by construction.
inline prompt::PromptLayout intervene_gold(const prompt::PromptLayout& layout,
                                           const prompt::ControlVocab& ctrl,
                                           int demo_index, InterventionMode mode,
                                           const synth::Utterance& gold) {
  if (demo_index < 0 || demo_index >= layout.context_size)
    throw std::invalid_argument("intervene_gold: demo index out of range");
  if (layout.task == prompt::TaskType::kAsr)
    throw std::invalid_argument("intervene_gold: ASR layout has no demos");
  const bool wants_audio = mode != InterventionMode::kReplaceText;
  if (wants_audio && layout.task != prompt::TaskType::kMicl)
    throw std::invalid_argument(
        "intervene_gold: audio replacement requires demonstration audio");

  std::vector<synth::Utterance> demos = layout.demos;
  synth::Utterance& d = demos[demo_index];
  if (mode == InterventionMode::kReplaceText ||
      mode == InterventionMode::kReplacePair)
    d.tokens = gold.tokens;
  if (mode == InterventionMode::kReplaceAudio ||
      mode == InterventionMode::kReplacePair) {
    d.audio = gold.audio;
    d.frame_dim = gold.frame_dim;
  }
  return prompt::build_prompt(layout.task, ctrl, demos, layout.target_audio,
                              layout.frame_dim);
}

// ----------------------------------------------------------------- reports

inline nlohmann::json report_to_json(const AttentionReport& r) {
  nlohmann::json j;
  j["layers"] = r.layers;
  j["heads"] = r.heads;
  j["n_demos"] = r.n_demos;
  j["normalization"] = r.normalization == Normalization::kWithinDemos
                           ? "within_demos"
                           : "over_all_segments";
  nlohmann::json global;
  for (int k = 0; k < prompt::kNumSegmentKinds; ++k) {
    auto kind = static_cast<prompt::SegmentKind>(k);
    if (kind == prompt::SegmentKind::kOutput) continue;
    global[prompt::segment_name(kind)] = r.global_share(kind);
  }
  j["global"] = std::move(global);
  return j;
}

// Long-form rows: layer, head, segment, share.
inline void write_report_csv(const AttentionReport& r,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_report_csv: cannot open " + path);
  out << "layer,head,segment,share\n";
  char buf[64];
  for (int li = 0; li < r.layers; ++li)
    for (int hi = 0; hi < r.heads; ++hi)
      for (int k = 0; k < prompt::kNumSegmentKinds; ++k) {
        auto kind = static_cast<prompt::SegmentKind>(k);
        if (kind == prompt::SegmentKind::kOutput) continue;
        std::snprintf(buf, sizeof(buf), "%.9g", r.at(li, hi)[k]);
        out << li << ',' << hi << ',' << prompt::segment_name(kind) << ','
            << buf << "\n";
      }
}

// Figure-style series: one row per layer with within-demo audio/text shares.
inline void write_layer_profile_csv(
    const std::vector<std::pair<double, double>>& profile,
    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("write_layer_profile_csv: cannot open " + path);
  out << "layer,audio_share,text_share\n";
  char buf[80];
  for (std::size_t li = 0; li < profile.size(); ++li) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", li, profile[li].first,
                  profile[li].second);
    out << buf;
  }
}

}  // namespace miclab::attn

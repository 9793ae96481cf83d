#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "miclab/gradcheck.hpp"
#include "miclab/model.hpp"
#include "miclab/prompt.hpp"
#include "miclab/synthlang.hpp"

using namespace miclab;
using namespace miclab::model;
using miclab::prompt::TaskType;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.model_dim = 8;
  c.ff_dim = 16;
  c.language_vocab = 6;
  c.frame_dim = 3;
  c.max_seq_len = 64;
  c.dropout = 0.0;
  return c;
}

synth::LanguageSpec tiny_lang() {
  synth::LanguageParams p;
  p.vocab_size = 6;
  p.frame_dim = 3;
  p.frames_per_token = 2;
  p.noise_sigma = 0.0;
  return synth::make_language(3, p);
}

struct Scene {
  synth::LanguageSpec spec = tiny_lang();
  prompt::ControlVocab ctrl{6};
  std::vector<synth::Utterance> demos;
  synth::Utterance target;
  prompt::PromptLayout layout;

  explicit Scene(TaskType task = TaskType::kMicl, int n_demos = 2) {
    Rng rng(11);
    for (int i = 0; i < n_demos; ++i)
      demos.push_back(synth::sample_utterance(spec, rng, 2, 4,
                                              "d" + std::to_string(i)));
    target = synth::sample_utterance(spec, rng, 3, 3, "t");
    layout = prompt::build_prompt(
        task, ctrl, task == TaskType::kAsr ? std::vector<synth::Utterance>{}
                                           : demos,
        task == TaskType::kTIcl ? std::vector<double>{} : target.audio,
        task == TaskType::kTIcl ? 0 : spec.frame_dim());
  }
};

}  // namespace

TEST_CASE("zero weights except embeddings give uniform logits") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(1), 0.05);
  // zero everything that is not an embedding table
  for (auto& [name, t] : params.named_tensors()) {
    if (name == "tok_emb" || name == "pos_emb") continue;
    if (name.find("ln") != std::string::npos && name.back() == 'g') continue;
    std::fill(t->data.begin(), t->data.end(), 0.0);
  }
  Scene s;
  auto trace = forward(params, s.layout, &s.target.tokens);
  const int v = config.total_vocab();
  for (int r = 0; r < trace.total_len; ++r)
    for (int j = 0; j < v; ++j)
      CHECK(trace.logits->data[r * v + j] == 0.0);

  std::vector<int> targets(trace.total_len, 0);
  std::vector<bool> mask(trace.total_len, false);
  mask[trace.prompt_len - 1] = true;
  targets[trace.prompt_len - 1] = s.target.tokens[0];
  auto loss = nk::cross_entropy(trace.logits, targets, mask);
  CHECK(loss->scalar() == doctest::Approx(std::log(v)).epsilon(1e-12));
}

TEST_CASE("attention rows are causal probability distributions") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(5), 0.3);
  Scene s;
  auto trace = forward(params, s.layout, &s.target.tokens, true);
  REQUIRE(trace.captured());
  const int n = trace.total_len;
  for (int li = 0; li < config.layers; ++li)
    for (int hi = 0; hi < config.heads; ++hi) {
      const auto& att = trace.attention[li][hi];
      REQUIRE(att->shape == std::vector<int>{n, n});
      for (int i = 0; i < n; ++i) {
        double total = 0.0;
        for (int j = 0; j < n; ++j) {
          double p = att->data[i * n + j];
          CHECK(p >= 0.0);
          if (j > i) CHECK(p == 0.0);
          total += p;
        }
        CHECK(std::fabs(total - 1.0) < 1e-6);
      }
    }
}

TEST_CASE("projector output is linear in the frames") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(5), 0.3);
  Rng rng(2);
  auto frames = nk::Tensor::randn({4, config.frame_dim}, rng, 1.0);
  auto doubled = nk::Tensor::zeros({4, config.frame_dim});
  for (std::size_t i = 0; i < frames->size(); ++i)
    doubled->data[i] = 2.0 * frames->data[i];
  auto y = nk::matmul(frames, params.w_proj);
  auto y2 = nk::matmul(doubled, params.w_proj);
  for (std::size_t i = 0; i < y->size(); ++i)
    CHECK(y2->data[i] == doctest::Approx(2.0 * y->data[i]).epsilon(1e-12));
}

TEST_CASE("logprob_of sums to the negated cross entropy") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(7), 0.3);
  Scene s;
  auto lp = logprob_of(params, s.layout, s.target.tokens);
  REQUIRE(lp.size() == s.target.tokens.size());

  auto trace = forward(params, s.layout, &s.target.tokens);
  std::vector<int> targets(trace.total_len, 0);
  std::vector<bool> mask(trace.total_len, false);
  for (std::size_t j = 0; j < s.target.tokens.size(); ++j) {
    targets[trace.prompt_len - 1 + j] = s.target.tokens[j];
    mask[trace.prompt_len - 1 + j] = true;
  }
  double ce = nk::cross_entropy(trace.logits, targets, mask)->scalar();
  double total = 0.0;
  for (double v : lp) total += v;
  CHECK(total ==
        doctest::Approx(-ce * static_cast<double>(lp.size())).epsilon(1e-9));
}

TEST_CASE("causality: later items never change earlier scores") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(9), 0.3);
  Scene s;
  std::vector<int> full = s.target.tokens;
  std::vector<int> prefix(full.begin(), full.begin() + 2);
  auto lp_full = logprob_of(params, s.layout, full);
  auto lp_prefix = logprob_of(params, s.layout, prefix);
  for (std::size_t j = 0; j < prefix.size(); ++j)
    CHECK(lp_full[j] == doctest::Approx(lp_prefix[j]).epsilon(1e-12));
}

TEST_CASE("single token sequence scores finitely") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(9), 0.3);
  Scene s;
  auto lp = logprob_of(params, s.layout, {3});
  REQUIRE(lp.size() == 1);
  CHECK(std::isfinite(lp[0]));
  CHECK_THROWS_AS(logprob_of(params, s.layout, {}), std::invalid_argument);
}

TEST_CASE("token and length validation") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(9), 0.3);
  Scene s;
  CHECK_THROWS_AS(logprob_of(params, s.layout, {config.total_vocab()}),
                  std::invalid_argument);
  std::vector<int> too_long(config.max_seq_len + 1, 0);
  CHECK_THROWS_WITH_AS(
      forward(params, s.layout, &too_long),
      doctest::Contains(std::to_string(config.max_seq_len).c_str()),
      std::invalid_argument);
}

TEST_CASE("swapping an audio block with a text block changes the logits") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(13), 0.3);
  Scene s(TaskType::kMicl, 1);
  auto spans = prompt::segment_spans(s.layout);
  const prompt::SegmentSpan* audio = nullptr;
  const prompt::SegmentSpan* text = nullptr;
  for (const auto& sp : spans) {
    if (sp.kind == prompt::SegmentKind::kDemoAudio) audio = &sp;
    if (sp.kind == prompt::SegmentKind::kDemoText) text = &sp;
  }
  REQUIRE(audio != nullptr);
  REQUIRE(text != nullptr);
  prompt::PromptLayout swapped = s.layout;
  std::vector<prompt::PromptItem> items;
  for (int i = 0; i < audio->begin; ++i) items.push_back(s.layout.items[i]);
  for (int i = text->begin; i < text->end; ++i)
    items.push_back(s.layout.items[i]);
  for (int i = audio->begin; i < audio->end; ++i)
    items.push_back(s.layout.items[i]);
  for (int i = text->end; i < s.layout.size(); ++i)
    items.push_back(s.layout.items[i]);
  swapped.items = std::move(items);

  auto a = logprob_of(params, s.layout, s.target.tokens);
  auto b = logprob_of(params, swapped, s.target.tokens);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::fabs(a[i] - b[i]);
  CHECK(diff > 1e-8);
}

TEST_CASE("full model loss gradient matches finite differences") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(17), 0.3);
  Scene s;
  auto loss_fn = [&](const nk::TensorPtr&) {
    auto trace = forward(params, s.layout, &s.target.tokens);
    std::vector<int> targets(trace.total_len, 0);
    std::vector<bool> mask(trace.total_len, false);
    for (std::size_t j = 0; j < s.target.tokens.size(); ++j) {
      targets[trace.prompt_len - 1 + j] = s.target.tokens[j];
      mask[trace.prompt_len - 1 + j] = true;
    }
    return nk::cross_entropy(trace.logits, targets, mask);
  };
  // representative parameters across all embedding and block paths
  for (auto& t : {params.w_proj, params.layers[0].wq, params.layers[0].w2,
                  params.tok_emb, params.w_out, params.layers[0].ln1_g}) {
    for (auto& [name, tensor] : params.named_tensors()) tensor->zero_grad();
    CHECK(nk::grad_check(loss_fn, t, 1e-5) < 1e-4);
  }
}

TEST_CASE("adapters attach as a no-op and expose only low-rank tensors") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(19), 0.3);
  Scene s;
  auto before = logprob_of(params, s.layout, s.target.tokens);
  std::size_t dense_count = params.trainable_count();
  CHECK(dense_count > 0);

  const int rank = 2;
  apply_adapters(params, AdapterSet::kDecoderOnly, rank, Rng(23));
  auto after = logprob_of(params, s.layout, s.target.tokens);
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(std::fabs(after[i] - before[i]) < 1e-12);

  // 4 attention hosts per layer, each dim x dim: 2 * r * dim each
  std::size_t expected = static_cast<std::size_t>(config.layers) * 4 * 2 *
                         rank * config.model_dim;
  CHECK(params.trainable_count() == expected);
  for (auto& [name, t] : params.named_tensors()) {
    bool is_adapter = name.rfind("adapter.", 0) == 0;
    CHECK(t->requires_grad == is_adapter);
  }

  CHECK_THROWS_AS(apply_adapters(params, AdapterSet::kDecoderOnly, 2, Rng(1)),
                  std::invalid_argument);
  ModelParams fresh = init_params(config, Rng(19), 0.3);
  CHECK_THROWS_AS(apply_adapters(fresh, AdapterSet::kDecoderOnly, 0, Rng(1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(adapter_set_from_name("everything"), std::invalid_argument);
}

TEST_CASE("adapter sets widen the host list") {
  auto config = tiny_config();
  auto only = adapter_hosts(config, AdapterSet::kDecoderOnly);
  auto proj = adapter_hosts(config, AdapterSet::kDecoderProjector);
  auto all = adapter_hosts(config, AdapterSet::kDecoderProjectorAll);
  CHECK(only.size() == static_cast<std::size_t>(4 * config.layers));
  CHECK(proj.size() == only.size() + 1);
  CHECK(all.size() > proj.size());
}

TEST_CASE("checkpoint round trip preserves values, flags and adapters") {
  auto config = tiny_config();
  ModelParams params = init_params(config, Rng(29), 0.3);
  apply_adapters(params, AdapterSet::kDecoderProjector, 2, Rng(31));
  // nudge an adapter so the round trip carries nonzero values
  params.adapters.begin()->second.b->data[0] = 0.125;

  auto prefix =
      (std::filesystem::temp_directory_path() / "miclab_ckpt_test").string();
  save_checkpoint(params, prefix);
  ModelParams loaded = load_checkpoint(prefix);

  auto a = params.named_tensors();
  auto b = loaded.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->shape == b[i].second->shape);
    CHECK(a[i].second->data == b[i].second->data);
    CHECK(a[i].second->requires_grad == b[i].second->requires_grad);
  }
  Scene s;
  auto lp1 = logprob_of(params, s.layout, s.target.tokens);
  auto lp2 = logprob_of(loaded, s.layout, s.target.tokens);
  for (std::size_t i = 0; i < lp1.size(); ++i)
    CHECK(lp1[i] == doctest::Approx(lp2[i]).epsilon(1e-15));
  std::filesystem::remove(prefix + ".json");
  std::filesystem::remove(prefix + ".bin");
}

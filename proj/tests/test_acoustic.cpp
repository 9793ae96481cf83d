#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "miclab/acoustic.hpp"
#include "miclab/eval.hpp"
#include "miclab/synthlang.hpp"

using namespace miclab;
using namespace miclab::acoustic;

namespace {

synth::Corpus corpus_with_sigma(double sigma, std::uint64_t seed = 5,
                                int n_train = 200, int n_test = 50) {
  synth::LanguageParams p;
  p.noise_sigma = sigma;
  auto spec = synth::make_language(seed, p);
  return synth::build_corpus(spec, Rng(seed).split("corpus"), n_train, 0,
                             n_test, 4, 10);
}

double token_accuracy(const AcousticModel& am, const synth::Corpus& c) {
  int correct = 0, total = 0;
  for (const auto& u : c.test) {
    auto decoded = am.greedy_decode(u.audio);
    for (std::size_t i = 0; i < u.tokens.size(); ++i) {
      correct += decoded[i] == u.tokens[i];
      ++total;
    }
  }
  return static_cast<double>(correct) / total;
}

// exhaustive oracle over all vocab^slots sequences
std::vector<ScoredHypothesis> enumerate_all(const std::vector<double>& slot_lp,
                                            int vocab) {
  int n_slots = static_cast<int>(slot_lp.size()) / vocab;
  std::vector<ScoredHypothesis> all;
  std::vector<int> seq(n_slots, 0);
  while (true) {
    double lp = 0.0;
    for (int s = 0; s < n_slots; ++s)
      lp += slot_lp[static_cast<std::size_t>(s) * vocab + seq[s]];
    all.push_back({seq, lp});
    int pos = n_slots - 1;
    while (pos >= 0 && ++seq[pos] == vocab) seq[pos--] = 0;
    if (pos < 0) break;
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.acoustic_logprob != b.acoustic_logprob)
      return a.acoustic_logprob > b.acoustic_logprob;
    return a.tokens < b.tokens;
  });
  return all;
}

std::vector<double> random_slot_logprobs(Rng& rng, int slots, int vocab) {
  std::vector<double> lp(static_cast<std::size_t>(slots) * vocab);
  for (int s = 0; s < slots; ++s) {
    double mx = -1e300;
    for (int v = 0; v < vocab; ++v) {
      lp[static_cast<std::size_t>(s) * vocab + v] = 2.0 * rng.next_gaussian();
      mx = std::max(mx, lp[static_cast<std::size_t>(s) * vocab + v]);
    }
    double z = 0.0;
    for (int v = 0; v < vocab; ++v)
      z += std::exp(lp[static_cast<std::size_t>(s) * vocab + v] - mx);
    double log_z = mx + std::log(z);
    for (int v = 0; v < vocab; ++v)
      lp[static_cast<std::size_t>(s) * vocab + v] -= log_z;
  }
  return lp;
}

}  // namespace

TEST_CASE("noise-free corpus trains to near-perfect token accuracy") {
  auto c = corpus_with_sigma(0.0);
  auto am = train_acoustic(c, Rng(9));
  CHECK(token_accuracy(am, c) > 0.99);
}

TEST_CASE("untrained model sits at chance accuracy") {
  auto c = corpus_with_sigma(0.1);
  auto am = train_acoustic(c, Rng(9), /*steps=*/0);
  double acc = token_accuracy(am, c);
  CHECK(std::fabs(acc - 1.0 / c.spec.vocab_size()) < 0.05);
}

TEST_CASE("training is bit-for-bit reproducible") {
  auto c = corpus_with_sigma(0.3);
  auto a = train_acoustic(c, Rng(4), 100);
  auto b = train_acoustic(c, Rng(4), 100);
  CHECK(a.w1->data == b.w1->data);
  CHECK(a.w2->data == b.w2->data);
  CHECK(a.b1->data == b.b1->data);
  CHECK(a.b2->data == b.b2->data);
}

TEST_CASE("frame dim mismatch is rejected") {
  auto c = corpus_with_sigma(0.1);
  c.train[0].frame_dim = 5;
  CHECK_THROWS_AS(train_acoustic(c, Rng(1), 10), std::invalid_argument);
}

TEST_CASE("slot log-probs are normalized distributions") {
  auto c = corpus_with_sigma(0.2);
  auto am = train_acoustic(c, Rng(9), 150);
  const auto& u = c.test[0];
  auto lp = am.slot_log_probs(u.audio);
  int slots = static_cast<int>(lp.size()) / am.vocab;
  CHECK(slots == static_cast<int>(u.tokens.size()));
  for (int s = 0; s < slots; ++s) {
    double total = 0.0;
    for (int v = 0; v < am.vocab; ++v)
      total += std::exp(lp[static_cast<std::size_t>(s) * am.vocab + v]);
    CHECK(std::fabs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("n-best of one equals the greedy decode") {
  auto c = corpus_with_sigma(0.4);
  auto am = train_acoustic(c, Rng(9), 150);
  const auto& u = c.test[1];
  auto list = nbest(am, u.audio, 1);
  REQUIRE(list.size() == 1);
  CHECK(list.top().tokens == am.greedy_decode(u.audio));
}

TEST_CASE("two-slot three-way n-best matches full enumeration") {
  Rng rng(31);
  auto lp = random_slot_logprobs(rng, 2, 3);
  auto list = nbest_from_logprobs(lp, 3, 9);
  auto all = enumerate_all(lp, 3);
  REQUIRE(list.size() == 9);
  for (int i = 0; i < 9; ++i) {
    CHECK(list.hyps[i].tokens == all[i].tokens);
    CHECK(list.hyps[i].acoustic_logprob ==
          doctest::Approx(all[i].acoustic_logprob).epsilon(1e-12));
  }
}

TEST_CASE("n-best equals enumeration whenever the space is enumerable") {
  Rng rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    Rng t = rng.split(trial);
    int vocab = static_cast<int>(t.next_int(3, 8));
    int slots = static_cast<int>(t.next_int(2, 5));
    auto lp = random_slot_logprobs(t, slots, vocab);
    auto list = nbest_from_logprobs(lp, vocab, 10);
    auto all = enumerate_all(lp, vocab);
    int keep = std::min<int>(10, static_cast<int>(all.size()));
    REQUIRE(list.size() == keep);
    for (int i = 0; i < keep; ++i) CHECK(list.hyps[i].tokens == all[i].tokens);
    // hypotheses are distinct and sorted
    for (int i = 1; i < keep; ++i) {
      CHECK(list.hyps[i - 1].acoustic_logprob >= list.hyps[i].acoustic_logprob);
      CHECK(list.hyps[i - 1].tokens != list.hyps[i].tokens);
    }
  }
}

TEST_CASE("hypothesis scores sum slot log-probs; errors are validated") {
  Rng rng(41);
  auto lp = random_slot_logprobs(rng, 3, 4);
  auto list = nbest_from_logprobs(lp, 4, 5);
  for (const auto& h : list.hyps) {
    double total = 0.0;
    for (int s = 0; s < 3; ++s)
      total += lp[static_cast<std::size_t>(s) * 4 + h.tokens[s]];
    CHECK(h.acoustic_logprob == doctest::Approx(total).epsilon(1e-12));
  }
  CHECK_THROWS_AS(nbest_from_logprobs(lp, 4, 0), std::invalid_argument);
  auto c = corpus_with_sigma(0.1);
  auto am = train_acoustic(c, Rng(9), 10);
  std::vector<double> odd_frames(am.frame_dim * 4);  // not a multiple of fpt=3
  CHECK_THROWS_AS(nbest(am, odd_frames, 2), std::invalid_argument);
}

TEST_CASE("ngram conditionals normalize over vocab plus end") {
  NgramLM lm(3, 5, 0.1);
  lm.fit({{0, 1, 2, 3}, {1, 2, 3, 4}, {0, 1, 2}, {2, 2, 2}});
  std::vector<std::vector<int>> contexts = {
      {NgramLM::kBos, NgramLM::kBos},  // sequence start
      {1, 2},                          // seen
      {4, 0},                          // unseen
  };
  for (const auto& ctx : contexts) {
    double total = 0.0;
    for (int e = 0; e <= 5; ++e) total += std::exp(lm.cond_log_prob(ctx, e));
    CHECK(std::fabs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("ngram sequence log-prob is the exact sum of conditionals") {
  NgramLM lm(2, 4, 0.1);
  lm.fit({{0, 1, 2}, {1, 1, 3}});
  std::vector<int> seq{0, 1, 3};
  double manual = lm.cond_log_prob({NgramLM::kBos}, 0) +
                  lm.cond_log_prob({0}, 1) + lm.cond_log_prob({1}, 3) +
                  lm.cond_log_prob({3}, lm.end_symbol());
  CHECK(lm.sequence_log_prob(seq) == doctest::Approx(manual).epsilon(1e-12));
  // higher-probability continuations score higher
  CHECK(lm.sequence_log_prob({0, 1, 2}) > lm.sequence_log_prob({0, 3, 0}));
}

TEST_CASE("hypothesis selection combines scores and breaks ties by rank") {
  NBestList list;
  list.hyps = {{{0, 0}, -1.0}, {{1, 1}, -2.0}, {{2, 2}, -4.0}};
  std::vector<double> lm_scores = {-5.0, -1.0, -2.0};
  auto scorer = [&](const std::vector<int>& tokens) {
    return lm_scores[tokens[0]];
  };
  auto r = select_hypothesis(list, scorer, 1.0);
  // combined: -6, -3, -6 -> hypothesis index 1
  CHECK(r.chosen == 1);
  CHECK(r.scores[0].combined == doctest::Approx(-6.0));
  CHECK(r.scores[1].combined == doctest::Approx(-3.0));
  CHECK(r.scores[2].combined == doctest::Approx(-6.0));

  // lambda 0 returns the acoustic top-1 and never calls the scorer
  auto top = select_hypothesis(
      list, [](const std::vector<int>&) -> double {
        throw std::runtime_error("scorer must not run at lambda 0");
      },
      0.0);
  CHECK(top.chosen == 0);

  // large lambda approaches the pure-LM argmax
  auto lmy = select_hypothesis(list, scorer, 1e6);
  CHECK(lmy.chosen == 1);

  // exact tie goes to the better acoustic rank
  std::vector<double> tie = {-1.0, 0.0, -3.0};
  auto tied = select_hypothesis(
      list, [&](const std::vector<int>& t) { return tie[t[0]]; }, 1.0);
  CHECK(r.scores.size() == 3);
  CHECK(tied.scores[0].combined == doctest::Approx(-2.0));
  CHECK(tied.scores[1].combined == doctest::Approx(-2.0));
  CHECK(tied.chosen == 0);
}

TEST_CASE("oracle selection is a lower bound for every selector") {
  Rng rng(47);
  for (int trial = 0; trial < 50; ++trial) {
    Rng t = rng.split(trial);
    int vocab = 5, slots = 4;
    auto lp = random_slot_logprobs(t, slots, vocab);
    auto list = nbest_from_logprobs(lp, vocab, 8);
    std::vector<int> reference(slots);
    for (int& x : reference) x = static_cast<int>(t.next_below(vocab));

    auto oracle = oracle_select(list, reference);
    double oracle_wer = eval::wer(reference, oracle.hypothesis(list).tokens).wer;

    Rng noise = t.split("lm");
    std::vector<double> lm_scores(list.hyps.size());
    for (double& v : lm_scores) v = noise.next_gaussian();
    auto combined = select_hypothesis(
        list,
        [&](const std::vector<int>& tokens) {
          for (std::size_t i = 0; i < list.hyps.size(); ++i)
            if (list.hyps[i].tokens == tokens) return lm_scores[i];
          return 0.0;
        },
        1.0);
    double selected_wer =
        eval::wer(reference, combined.hypothesis(list).tokens).wer;
    double max_wer = 0.0;
    for (const auto& h : list.hyps)
      max_wer = std::max(max_wer, eval::wer(reference, h.tokens).wer);
    CHECK(oracle_wer <= selected_wer);
    CHECK(selected_wer <= max_wer);
  }
}

TEST_CASE("oracle handles gold members and singleton lists") {
  NBestList list;
  list.hyps = {{{1, 2, 3}, -2.0}, {{1, 2, 4}, -1.0}};
  auto r = oracle_select(list, {1, 2, 3});
  CHECK(r.chosen == 0);
  CHECK(eval::wer({1, 2, 3}, r.hypothesis(list).tokens).wer == 0.0);

  NBestList single;
  single.hyps = {{{7, 7}, -1.0}};
  CHECK(oracle_select(single, {1, 2}).chosen == 0);
  CHECK_THROWS_AS(oracle_select(NBestList{}, {1}), std::invalid_argument);
}

TEST_CASE("joint decoding with weight zero is the acoustic decode") {
  Rng rng(53);
  auto lp = random_slot_logprobs(rng, 4, 5);
  NgramLM lm(2, 5, 0.1);
  lm.fit({{0, 1, 2, 3}});
  auto fused0 = joint_decode_from_logprobs(lp, 5, lm, 0.0, 8);
  auto top = nbest_from_logprobs(lp, 5, 1);
  CHECK(fused0 == top.top().tokens);
}

TEST_CASE("joint decoding matches the exhaustive joint argmax on toys") {
  Rng rng(59);
  for (int trial = 0; trial < 10; ++trial) {
    Rng t = rng.split(trial);
    int vocab = 3, slots = 2;
    auto lp = random_slot_logprobs(t, slots, vocab);
    NgramLM lm(2, vocab, 0.1);
    lm.fit({{0, 1}, {1, 2}, {2, 0}, {0, 1}});
    double weight = 0.7;
    // wide beam makes the search exhaustive on this toy
    auto fused = joint_decode_from_logprobs(lp, vocab, lm, weight, 64);

    std::vector<int> best;
    double best_score = -1e300;
    for (int a = 0; a < vocab; ++a)
      for (int b = 0; b < vocab; ++b) {
        std::vector<int> seq{a, b};
        double score = lp[a] + lp[static_cast<std::size_t>(1) * vocab + b] +
                       weight * lm.sequence_log_prob(seq);
        if (score > best_score) {
          best_score = score;
          best = seq;
        }
      }
    CHECK(fused == best);
  }
  // determinism
  Rng t2(61);
  auto lp = random_slot_logprobs(t2, 3, 4);
  NgramLM lm(2, 4, 0.1);
  lm.fit({{0, 1, 2}});
  CHECK(joint_decode_from_logprobs(lp, 4, lm, 0.5) ==
        joint_decode_from_logprobs(lp, 4, lm, 0.5));
}

TEST_CASE("nbest jsonl round trip") {
  NBestList a;
  a.utt_id = "lang5-test-0001";
  a.hyps = {{{1, 2, 3}, -4.25}, {{1, 2, 4}, -5.5}};
  NBestList b;
  b.utt_id = "lang5-test-0002";
  b.hyps = {{{0}, -0.125}};
  auto path = std::filesystem::temp_directory_path() / "miclab_nbest.jsonl";
  write_nbest_jsonl({a, b}, path.string());
  auto back = read_nbest_jsonl(path.string());
  REQUIRE(back.size() == 2);
  CHECK(back[0].utt_id == a.utt_id);
  CHECK(back[0].hyps[0].tokens == a.hyps[0].tokens);
  CHECK(back[0].hyps[0].acoustic_logprob == doctest::Approx(-4.25));
  CHECK(back[1].hyps[0].tokens == b.hyps[0].tokens);
  std::filesystem::remove(path);
}

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mhim/recommender.hpp"
#include "test_util.hpp"

using namespace mhim;

namespace {

SyntheticData tiny_world() {
  SyntheticParams params;
  params.n_users = 6;
  params.n_items = 8;
  params.n_entities = 16;
  params.sessions_per_user = 3;
  params.n_topics = 2;
  params.preferred_items_per_user = 2;
  params.seed = 11;
  return generate_synthetic(params);
}

std::vector<std::string> all_session_ids(const DialogueCorpus& corpus) {
  std::vector<std::string> out;
  for (const auto& s : corpus.sessions) out.push_back(s.session_id);
  return out;
}

}  // namespace

TEST(FuseInterest, EmptyHistoryFallsBackToCurrentOnly) {
  Rng rng(101);
  Tensor n_c = Tensor::randn({2, 4}, rng);
  Tensor n_sk = fuse_interest(n_c, Tensor{}, Tensor{}, identity_mha_params(4), 2);
  EXPECT_FALSE(n_sk.defined());
  Tensor u = user_repr(n_sk, n_c);
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(u.at(0, j), (n_c.at(0, j) + n_c.at(1, j)) / 2.0, 1e-12);
  }
}

TEST(FuseInterest, SingleHistoricalRowProjectsToEveryOutput) {
  Rng rng(102);
  Tensor n_c = Tensor::randn({3, 4}, rng);
  Tensor n_s = Tensor::from_vector({1, 4}, {1.0, 2.0, -1.0, 0.5});
  Tensor n_sk = fuse_interest(n_c, n_s, Tensor{}, identity_mha_params(4), 2);
  ASSERT_EQ(n_sk.shape, (std::vector<int>{3, 4}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(n_sk.at(i, j), n_s.at(0, j), 1e-12);
}

TEST(FuseInterest, MatchesNumericModuleAttention) {
  Rng rng(103);
  const int d = 4;
  Tensor n_c = Tensor::randn({2, d}, rng);
  Tensor n_s = Tensor::randn({3, d}, rng);
  Tensor n_k = Tensor::randn({3, d}, rng);
  MhaParams p;
  p.wq = Tensor::randn({d, d}, rng, 0.5);
  p.wk = Tensor::randn({d, d}, rng, 0.5);
  p.wv = Tensor::randn({d, d}, rng, 0.5);
  p.wo = Tensor::randn({d, d}, rng, 0.5);
  Tensor fused = fuse_interest(n_c, n_s, n_k, p, 2);
  Tensor keys = concat_rows(n_s, n_k);
  Tensor expected = multi_head_attention(n_c, keys, keys, 2, p);
  for (size_t i = 0; i < fused.numel(); ++i) {
    EXPECT_NEAR((*fused.data)[i], (*expected.data)[i], 1e-12);
  }
}

TEST(FuseInterest, EmptyQueryIsAnError) {
  Tensor n_s = Tensor::from_vector({1, 2}, {1.0, 2.0});
  EXPECT_THROW(fuse_interest(Tensor{}, n_s, Tensor{}, identity_mha_params(2), 1),
               std::invalid_argument);
}

TEST(UserRepr, EmptyHistorySingleRowPassesThrough) {
  Tensor n_c = Tensor::from_vector({1, 3}, {0.5, -1.0, 2.0});
  Tensor u = user_repr(Tensor{}, n_c);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(u.at(0, j), n_c.at(0, j));
}

TEST(UserRepr, AllEqualRowsMapToThatVector) {
  Tensor v = Tensor::from_vector({1, 3}, {1.0, 2.0, 3.0});
  Tensor n_sk = concat_rows(v, v);  // all rows equal v
  Tensor u = user_repr(n_sk, v);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(u.at(0, j), v.at(0, j), 1e-12);
}

TEST(UserRepr, MatchesTwoStageMeanOracle) {
  Rng rng(104);
  Tensor n_sk = Tensor::randn({4, 3}, rng);
  Tensor n_c = Tensor::randn({2, 3}, rng);
  Tensor u = user_repr(n_sk, n_c);
  for (int j = 0; j < 3; ++j) {
    Real pooled = 0;
    for (int i = 0; i < 4; ++i) pooled += n_sk.at(i, j);
    pooled /= 4.0;
    const Real expected = (pooled + n_c.at(0, j) + n_c.at(1, j)) / 3.0;
    EXPECT_NEAR(u.at(0, j), expected, 1e-12);
  }
  EXPECT_THROW(user_repr(Tensor{}, Tensor{}), std::invalid_argument);
}

TEST(ScoreItems, IdenticalRowsGiveUniformDistribution) {
  Tensor u = Tensor::from_vector({1, 3}, {1.0, 0.0, -1.0});
  Tensor items({4, 3});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) items.at(i, j) = j + 1.0;
  Tensor p = score_items(u, items);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(p.at(0, i), 0.25, 1e-12);
}

TEST(ScoreItems, AlignedItemTakesAllMassInTheLimit) {
  Tensor items = Tensor::from_vector({3, 2}, {1.0, 0.0, 0.0, 1.0, -1.0, 0.0});
  Tensor u = Tensor::from_vector({1, 2}, {50.0, 0.0});  // aligned with item 0, large scale
  Tensor p = score_items(u, items);
  EXPECT_GT(p.at(0, 0), 1.0 - 1e-12);
}

TEST(ScoreItems, MatchesSoftmaxOfDotsOracle) {
  Rng rng(105);
  Tensor u = Tensor::randn({1, 4}, rng);
  Tensor items = Tensor::randn({5, 4}, rng);
  Tensor p = score_items(u, items);
  std::vector<Real> dots(5);
  Real mx = -1e300;
  for (int i = 0; i < 5; ++i) {
    Real s = 0;
    for (int j = 0; j < 4; ++j) s += u.at(0, j) * items.at(i, j);
    dots[static_cast<size_t>(i)] = s;
    mx = std::max(mx, s);
  }
  Real denom = 0;
  for (Real s : dots) denom += std::exp(s - mx);
  Real total = 0;
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(p.at(0, i), std::exp(dots[static_cast<size_t>(i)] - mx) / denom, 1e-12);
    EXPECT_GT(p.at(0, i), 0.0);
    total += p.at(0, i);
  }
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_THROW(score_items(u, Tensor{}), std::invalid_argument);
}

TEST(RecLoss, PerfectPredictionGivesZero) {
  Tensor p = Tensor::from_vector({1, 3}, {0.0, 1.0, 0.0});
  Tensor loss = rec_loss({p}, {1});
  EXPECT_DOUBLE_EQ(loss.value(), 0.0);
}

TEST(RecLoss, UniformOverFourGivesLogFour) {
  Tensor p = Tensor::from_vector({1, 4}, {0.25, 0.25, 0.25, 0.25});
  Tensor loss = rec_loss({p}, {2});
  EXPECT_NEAR(loss.value(), std::log(4.0), 1e-12);
}

TEST(RecLoss, BatchMatchesDirectOracle) {
  Rng rng(106);
  std::vector<Tensor> probs;
  std::vector<int> targets;
  Real expected = 0;
  for (int b = 0; b < 3; ++b) {
    Tensor logits = Tensor::randn({1, 5}, rng);
    Tensor p = softmax(logits, 1);
    const int t = rng.uniform_int(5);
    probs.push_back(p);
    targets.push_back(t);
    expected += -std::log(p.at(0, t));
  }
  expected /= 3.0;
  Tensor loss = rec_loss(probs, targets);
  EXPECT_NEAR(loss.value(), expected, 1e-12);
  EXPECT_THROW(rec_loss(probs, {0, 1, 99}), std::out_of_range);
}

TEST(ExtractExamples, OneExamplePerTargetItemWithContext) {
  SyntheticData data = tiny_world();
  int skipped = 0;
  auto examples = extract_rec_examples(data.corpus, all_session_ids(data.corpus), &skipped);
  ASSERT_FALSE(examples.empty());
  for (const auto& ex : examples) {
    EXPECT_FALSE(ex.context_entities.empty());
    EXPECT_TRUE(data.kg.is_item(ex.target));
    const Session& s = data.corpus.session_by_id(ex.session_id);
    EXPECT_EQ(s.utterances[static_cast<size_t>(ex.turn)].speaker, Speaker::system);
    // The context excludes the target turn itself.
    for (int e : ex.context_entities) {
      bool found = false;
      for (int t = 0; t < ex.turn; ++t) {
        const auto& ents = s.utterances[static_cast<size_t>(t)].entities;
        if (std::find(ents.begin(), ents.end(), e) != ents.end()) found = true;
      }
      EXPECT_TRUE(found);
    }
  }
  EXPECT_EQ(skipped, 0);  // synthetic sessions always open with a seeker turn
}

TEST(RecForward, EmptyHistoryusesCurrentOnlyAndScoresSumToOne) {
  SyntheticData data = tiny_world();
  RecConfig config;
  config.dim = 8;
  config.heads = 2;
  Rng rng(107);
  std::vector<int> critical(static_cast<size_t>(data.kg.entity_count()));
  for (int e = 0; e < data.kg.entity_count(); ++e) critical[static_cast<size_t>(e)] = e;
  RecModel model = make_rec_model(data.kg, data.corpus, config, critical, rng);
  auto examples = extract_rec_examples(data.corpus, all_session_ids(data.corpus));
  // order-0 sessions have no history.
  const RecExample* first = nullptr;
  for (const auto& ex : examples) {
    if (ex.session_order == 0) first = &ex;
  }
  ASSERT_NE(first, nullptr);
  EncodedKg enc = encode_entities(model);
  RecForward fwd = rec_forward(model, data.corpus, data.kg, *first, enc);
  EXPECT_FALSE(fwd.n_sk.defined());
  Real total = 0;
  for (size_t i = 0; i < fwd.p_rec.numel(); ++i) total += (*fwd.p_rec.data)[i];
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(RecForward, GradientsFlowThroughFullStack) {
  SyntheticData data = tiny_world();
  RecConfig config;
  config.dim = 4;
  config.heads = 2;
  Rng rng(108);
  std::vector<int> critical(static_cast<size_t>(data.kg.entity_count()));
  for (int e = 0; e < data.kg.entity_count(); ++e) critical[static_cast<size_t>(e)] = e;
  RecModel model = make_rec_model(data.kg, data.corpus, config, critical, rng);
  auto examples = extract_rec_examples(data.corpus, all_session_ids(data.corpus));
  // Pick an example with history so both hypergraph paths are active.
  const RecExample* ex = nullptr;
  for (const auto& e : examples) {
    if (e.session_order >= 2) ex = &e;
  }
  ASSERT_NE(ex, nullptr);
  HyperedgeCollection collection =
      collect_session_hyperedges(data.corpus, all_session_ids(data.corpus));
  auto item_index = [&](int item) {
    return static_cast<int>(std::lower_bound(model.items.begin(), model.items.end(), item) -
                            model.items.begin());
  };
  auto loss_fn = [&]() {
    EncodedKg enc = encode_entities(model);
    RecForward fwd = rec_forward(model, data.corpus, data.kg, *ex, enc, &collection);
    return rec_loss({fwd.p_rec}, {item_index(ex->target)});
  };
  std::vector<Tensor> wrt;
  for (auto& [name, t] : model.store) wrt.push_back(t);
  EXPECT_LT(testutil::gradient_check(loss_fn, wrt, 1e-5, 6), 1e-4);
}

TEST(Trainer, SingleExampleOverfitsTowardZeroLoss) {
  // One user, one session, one target: the model must memorize it.
  SyntheticParams params;
  params.n_users = 1;
  params.n_items = 6;
  params.n_entities = 12;
  params.sessions_per_user = 2;
  params.n_topics = 1;
  params.preferred_items_per_user = 1;
  params.seed = 3;
  SyntheticData data = generate_synthetic(params);
  RecConfig config;
  config.dim = 8;
  config.heads = 2;
  Rng rng(109);
  std::vector<int> critical(static_cast<size_t>(data.kg.entity_count()));
  for (int e = 0; e < data.kg.entity_count(); ++e) critical[static_cast<size_t>(e)] = e;
  RecModel model = make_rec_model(data.kg, data.corpus, config, critical, rng);
  RecTrainConfig tc;
  tc.lr = 0.01;
  tc.batch_size = 4;
  RecTrainer trainer(model, data.corpus, data.kg, tc, all_session_ids(data.corpus));
  ASSERT_GE(trainer.train_examples().size(), 1u);
  Rng train_rng(110);
  std::vector<Real> losses;
  for (int epoch = 0; epoch < 60; ++epoch) {
    losses.push_back(trainer.train_epoch(train_rng).mean_loss);
  }
  EXPECT_LT(losses.back(), 0.02);
  // Monotone decrease after warm-up.
  for (size_t e = 10; e + 1 < losses.size(); ++e) {
    EXPECT_LE(losses[e + 1], losses[e] + 1e-6) << "epoch " << e;
  }
}

TEST(Trainer, ZeroEpochsLeaveMetricsAtInitialization) {
  SyntheticData data = tiny_world();
  RecConfig config;
  config.dim = 8;
  config.heads = 2;
  Rng rng(111);
  std::vector<int> critical(static_cast<size_t>(data.kg.entity_count()));
  for (int e = 0; e < data.kg.entity_count(); ++e) critical[static_cast<size_t>(e)] = e;
  RecModel model = make_rec_model(data.kg, data.corpus, config, critical, rng);
  RecTrainConfig tc;
  RecTrainer trainer(model, data.corpus, data.kg, tc, all_session_ids(data.corpus));
  auto before = trainer.evaluate(all_session_ids(data.corpus), {10});
  auto after = trainer.evaluate(all_session_ids(data.corpus), {10});
  EXPECT_DOUBLE_EQ(before[10].recall, after[10].recall);
  EXPECT_DOUBLE_EQ(before[10].mrr, after[10].mrr);
  EXPECT_DOUBLE_EQ(before[10].ndcg, after[10].ndcg);
}

TEST(Trainer, EvaluationIgnoresGradState) {
  SyntheticData data = tiny_world();
  RecConfig config;
  config.dim = 8;
  config.heads = 2;
  Rng rng(112);
  std::vector<int> critical(static_cast<size_t>(data.kg.entity_count()));
  for (int e = 0; e < data.kg.entity_count(); ++e) critical[static_cast<size_t>(e)] = e;
  RecModel model = make_rec_model(data.kg, data.corpus, config, critical, rng);
  RecTrainConfig tc;
  RecTrainer trainer(model, data.corpus, data.kg, tc, all_session_ids(data.corpus));
  trainer.evaluate(all_session_ids(data.corpus), {10, 50});
  for (auto& [name, t] : model.store) {
    for (Real g : *t.grad) EXPECT_EQ(g, 0.0);
  }
}

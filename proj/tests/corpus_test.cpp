#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <string>

#include "mhim/corpus.hpp"
#include "test_util.hpp"

using namespace mhim;

namespace {

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream os(path);
  os << contents;
}

// Small corpus with a known shape, built programmatically.
DialogueCorpus make_corpus(int n_users, int sessions_per_user, int items_per_session = 1) {
  DialogueCorpus corpus;
  int next_item = 0;
  for (int u = 0; u < n_users; ++u) {
    for (int s = 0; s < sessions_per_user; ++s) {
      Session sess;
      sess.session_id = "u" + std::to_string(u) + "_s" + std::to_string(s);
      sess.user_id = "u" + std::to_string(u);
      sess.order = s;
      Utterance seeker{Speaker::user, {10, 11}, {}, {}};
      Utterance reply{Speaker::system, {12}, {}, {}};
      for (int k = 0; k < items_per_session; ++k) {
        const int item = next_item++ % 50;
        reply.entities.push_back(item);
        reply.items.push_back(item);
      }
      sess.utterances = {seeker, reply};
      corpus.sessions.push_back(sess);
    }
  }
  corpus.rebuild_index();
  return corpus;
}

}  // namespace

TEST(LoadCorpus, EmptyFileGivesEmptyCorpus) {
  const std::string dir = testutil::scratch_dir("corpus_empty");
  write_file(dir + "/c.jsonl", "");
  DialogueCorpus corpus = load_corpus(dir + "/c.jsonl");
  EXPECT_TRUE(corpus.sessions.empty());
  EXPECT_EQ(corpus.user_count(), 0u);
}

TEST(LoadCorpus, SingleSessionSingleUser) {
  const std::string dir = testutil::scratch_dir("corpus_single");
  write_file(dir + "/c.jsonl",
             R"({"session_id":"s1","user_id":"alice","order":0,"utterances":[)"
             R"({"speaker":"user","tokens":[5,6],"entities":[2],"items":[]},)"
             R"({"speaker":"system","tokens":[7],"entities":[3],"items":[3]}]})"
             "\n");
  DialogueCorpus corpus = load_corpus(dir + "/c.jsonl");
  EXPECT_EQ(corpus.user_count(), 1u);
  ASSERT_EQ(corpus.sessions.size(), 1u);
  EXPECT_EQ(corpus.sessions[0].utterances.size(), 2u);
  // The one session is current, so the user's history is empty.
  UserHistory h = user_history(corpus, "alice", 0, 10);
  EXPECT_TRUE(h.empty());
  EXPECT_TRUE(h.historical_items.empty());
}

TEST(LoadCorpus, FixtureCountsMatchHandCount) {
  // 3 users x 4 sessions = 12 sessions, 2 utterances each.
  const std::string dir = testutil::scratch_dir("corpus_fixture");
  DialogueCorpus original = make_corpus(3, 4, 2);
  save_corpus(original, dir + "/c.jsonl");
  DialogueCorpus corpus = load_corpus(dir + "/c.jsonl");
  EXPECT_EQ(corpus.sessions.size(), 12u);
  EXPECT_EQ(corpus.user_count(), 3u);
  int utterances = 0, item_mentions = 0;
  for (const auto& s : corpus.sessions) {
    utterances += static_cast<int>(s.utterances.size());
    for (const auto& u : s.utterances) item_mentions += static_cast<int>(u.items.size());
  }
  EXPECT_EQ(utterances, 24);
  EXPECT_EQ(item_mentions, 24);
}

TEST(LoadCorpus, MalformedLineReportsLineNumber) {
  const std::string dir = testutil::scratch_dir("corpus_malformed");
  write_file(dir + "/c.jsonl",
             R"({"session_id":"s1","user_id":"a","order":0,"utterances":[)"
             R"({"speaker":"user","tokens":[1],"entities":[],"items":[]}]})"
             "\nnot json at all\n");
  try {
    load_corpus(dir + "/c.jsonl");
    FAIL() << "expected malformed-line error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadCorpus, UnknownEntityAndEmptySessionAreErrors) {
  const std::string dir = testutil::scratch_dir("corpus_invalid");
  write_file(dir + "/bad_entity.jsonl",
             R"({"session_id":"s1","user_id":"a","order":0,"utterances":[)"
             R"({"speaker":"user","tokens":[1],"entities":[99],"items":[]}]})"
             "\n");
  EXPECT_THROW(load_corpus(dir + "/bad_entity.jsonl", /*entity_count=*/10), std::runtime_error);
  write_file(dir + "/empty_session.jsonl",
             R"({"session_id":"s1","user_id":"a","order":0,"utterances":[]})"
             "\n");
  EXPECT_THROW(load_corpus(dir + "/empty_session.jsonl"), std::runtime_error);
  write_file(dir + "/item_not_entity.jsonl",
             R"({"session_id":"s1","user_id":"a","order":0,"utterances":[)"
             R"({"speaker":"system","tokens":[1],"entities":[2],"items":[3]}]})"
             "\n");
  EXPECT_THROW(load_corpus(dir + "/item_not_entity.jsonl"), std::runtime_error);
}

TEST(SaveCorpus, RoundTripPreservesEverything) {
  const std::string dir = testutil::scratch_dir("corpus_roundtrip");
  SyntheticParams params;
  params.n_users = 6;
  params.n_items = 10;
  params.n_entities = 20;
  params.sessions_per_user = 3;
  params.n_topics = 2;
  SyntheticData data = generate_synthetic(params);
  save_corpus(data.corpus, dir + "/c.jsonl");
  DialogueCorpus reloaded = load_corpus(dir + "/c.jsonl");
  EXPECT_EQ(reloaded, data.corpus);
}

TEST(SplitByUser, TenUsersSplitEightOneOne) {
  DialogueCorpus corpus = make_corpus(10, 2);
  Split split = split_by_user(corpus, {0.8, 0.1, 0.1}, 13);
  std::set<std::string> train_users, valid_users, test_users;
  for (const auto& id : split.train) train_users.insert(corpus.session_by_id(id).user_id);
  for (const auto& id : split.valid) valid_users.insert(corpus.session_by_id(id).user_id);
  for (const auto& id : split.test) test_users.insert(corpus.session_by_id(id).user_id);
  EXPECT_EQ(train_users.size(), 8u);
  EXPECT_EQ(valid_users.size(), 1u);
  EXPECT_EQ(test_users.size(), 1u);
}

TEST(SplitByUser, DeterministicUnderSeed) {
  DialogueCorpus corpus = make_corpus(10, 2);
  Split a = split_by_user(corpus, {0.8, 0.1, 0.1}, 99);
  Split b = split_by_user(corpus, {0.8, 0.1, 0.1}, 99);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.valid, b.valid);
  EXPECT_EQ(a.test, b.test);
}

TEST(SplitByUser, RoundingRuleAt956Users) {
  DialogueCorpus corpus = make_corpus(956, 1);
  Split split = split_by_user(corpus, {0.8, 0.1, 0.1}, 7);
  std::set<std::string> train_users, valid_users, test_users;
  for (const auto& id : split.train) train_users.insert(corpus.session_by_id(id).user_id);
  for (const auto& id : split.valid) valid_users.insert(corpus.session_by_id(id).user_id);
  for (const auto& id : split.test) test_users.insert(corpus.session_by_id(id).user_id);
  EXPECT_EQ(train_users.size(), 765u);
  EXPECT_EQ(valid_users.size(), 95u);
  EXPECT_EQ(test_users.size(), 96u);
}

TEST(SplitByUser, UserDisjointnessIsAbsolute) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int users = 3 + rng.uniform_int(40);
    DialogueCorpus corpus = make_corpus(users, 1 + rng.uniform_int(3));
    Split split = split_by_user(corpus, {0.8, 0.1, 0.1}, rng.next_u64());
    std::set<std::string> train_users, other_users;
    for (const auto& id : split.train) train_users.insert(corpus.session_by_id(id).user_id);
    for (const auto& id : split.valid) other_users.insert(corpus.session_by_id(id).user_id);
    for (const auto& id : split.test) other_users.insert(corpus.session_by_id(id).user_id);
    for (const auto& u : other_users) EXPECT_EQ(train_users.count(u), 0u);
    EXPECT_EQ(split.train.size() + split.valid.size() + split.test.size(),
              corpus.sessions.size());
  }
}

TEST(SplitByUser, ErrorsOnBadInput) {
  DialogueCorpus corpus = make_corpus(2, 1);
  EXPECT_THROW(split_by_user(corpus, {0.8, 0.1, 0.1}, 1), std::invalid_argument);
  DialogueCorpus ok = make_corpus(5, 1);
  EXPECT_THROW(split_by_user(ok, {0.8, 0.3, 0.1}, 1), std::invalid_argument);
}

TEST(TruncateContext, ShortCurrentUnchanged) {
  DialogueCorpus corpus = make_corpus(1, 1);
  UserHistory empty = user_history(corpus, "u0", 0, 10);
  ContextTokens ctx = truncate_context(corpus.sessions[0], empty);
  EXPECT_EQ(ctx.current.size(), 3u);  // 2 + 1 tokens from the fixture
  EXPECT_TRUE(ctx.history.empty());
}

TEST(TruncateContext, LongCurrentKeepsLastTokens) {
  Session s;
  s.session_id = "s";
  s.user_id = "u";
  Utterance u;
  u.speaker = Speaker::user;
  for (int i = 0; i < 300; ++i) u.tokens.push_back(i);
  s.utterances.push_back(u);
  UserHistory empty;
  ContextTokens ctx = truncate_context(s, empty, 256, 1024);
  ASSERT_EQ(ctx.current.size(), 256u);
  EXPECT_EQ(ctx.current.front(), 44);  // 300 - 256
  EXPECT_EQ(ctx.current.back(), 299);
}

TEST(TruncateContext, HistoryKeepsLastTokensWithSeparators) {
  // Three history sessions of 500 tokens each -> 1502 tokens with separators,
  // truncated to the trailing 1024 with boundaries preserved.
  std::vector<Session> hist_sessions(3);
  for (int s = 0; s < 3; ++s) {
    hist_sessions[static_cast<size_t>(s)].session_id = "h" + std::to_string(s);
    hist_sessions[static_cast<size_t>(s)].user_id = "u";
    hist_sessions[static_cast<size_t>(s)].order = s;
    Utterance u;
    u.speaker = Speaker::user;
    for (int i = 0; i < 500; ++i) u.tokens.push_back(1000 * (s + 1) + i);
    hist_sessions[static_cast<size_t>(s)].utterances.push_back(u);
  }
  UserHistory h;
  for (auto& s : hist_sessions) h.sessions.push_back(&s);
  Session cur;
  cur.session_id = "c";
  cur.user_id = "u";
  Utterance cu;
  cu.speaker = Speaker::user;
  cu.tokens = {1, 2, 3};
  cur.utterances.push_back(cu);

  ContextTokens ctx = truncate_context(cur, h, 256, 1024);
  ASSERT_EQ(ctx.history.size(), 1024u);
  // Expected tail: hand-built concatenation with <sep> markers.
  std::vector<int> full;
  for (int s = 0; s < 3; ++s) {
    if (s > 0) full.push_back(kSepToken);
    for (int i = 0; i < 500; ++i) full.push_back(1000 * (s + 1) + i);
  }
  const std::vector<int> expected(full.end() - 1024, full.end());
  EXPECT_EQ(ctx.history, expected);
  // Session boundary separator survives inside the window.
  EXPECT_NE(std::find(ctx.history.begin(), ctx.history.end(), kSepToken), ctx.history.end());
  EXPECT_THROW(truncate_context(cur, h, 0, 10), std::invalid_argument);
}

TEST(UserHistory, ItemSetIsExactlyPriorUnion) {
  SyntheticParams params;
  params.n_users = 8;
  params.n_items = 12;
  params.n_entities = 24;
  params.sessions_per_user = 4;
  params.n_topics = 3;
  SyntheticData data = generate_synthetic(params);
  for (const auto& [user, idx] : data.corpus.sessions_by_user()) {
    for (size_t k = 0; k < idx.size(); ++k) {
      const Session& cur = data.corpus.sessions[idx[k]];
      for (int cap : {10, 2, 1}) {
        UserHistory h = user_history(data.corpus, user, cur.order, cap);
        std::set<int> expected;
        const size_t start = idx.size() > 0 && k > static_cast<size_t>(cap)
                                 ? k - static_cast<size_t>(cap)
                                 : 0;
        for (size_t j = start; j < k; ++j) {
          const auto items = session_item_mentions(data.corpus.sessions[idx[j]]);
          expected.insert(items.begin(), items.end());
        }
        EXPECT_EQ(std::set<int>(h.historical_items.begin(), h.historical_items.end()), expected);
        EXPECT_LE(h.sessions.size(), static_cast<size_t>(cap));
      }
    }
  }
}

TEST(Synthetic, SingleUserSingleSessionHasEmptyHistory) {
  SyntheticParams params;
  params.n_users = 1;
  params.n_items = 5;
  params.n_entities = 10;
  params.sessions_per_user = 1;
  params.n_topics = 1;
  SyntheticData data = generate_synthetic(params);
  ASSERT_EQ(data.corpus.sessions.size(), 1u);
  UserHistory h = user_history(data.corpus, data.corpus.sessions[0].user_id, 0, 10);
  EXPECT_TRUE(h.empty());
}

TEST(Synthetic, ByteIdenticalUnderFixedSeed) {
  const std::string dir = testutil::scratch_dir("synthetic_determinism");
  SyntheticParams params;
  params.n_users = 10;
  params.n_items = 20;
  params.n_entities = 40;
  params.sessions_per_user = 2;
  SyntheticData a = generate_synthetic(params);
  SyntheticData b = generate_synthetic(params);
  save_corpus(a.corpus, dir + "/a.jsonl");
  save_corpus(b.corpus, dir + "/b.jsonl");
  EXPECT_EQ(testutil::read_file_bytes(dir + "/a.jsonl"), testutil::read_file_bytes(dir + "/b.jsonl"));
  save_kg(a.kg, dir + "/akg.jsonl", dir + "/aitems.txt");
  save_kg(b.kg, dir + "/bkg.jsonl", dir + "/bitems.txt");
  EXPECT_EQ(testutil::read_file_bytes(dir + "/akg.jsonl"),
            testutil::read_file_bytes(dir + "/bkg.jsonl"));
}

TEST(Synthetic, WithinTopicCoOccurrenceExceedsCrossTopic) {
  SyntheticParams params;  // 50 users / 5 topics default
  SyntheticData data = generate_synthetic(params);
  auto topic_of_item = [&](int i) { return i * params.n_topics / params.n_items; };
  long within = 0, cross = 0;
  for (const auto& s : data.corpus.sessions) {
    const auto items = session_item_mentions(s);
    for (size_t a = 0; a < items.size(); ++a) {
      for (size_t b = a + 1; b < items.size(); ++b) {
        if (topic_of_item(items[a]) == topic_of_item(items[b])) {
          ++within;
        } else {
          ++cross;
        }
      }
    }
  }
  // Rates normalized by the number of possible pairs in each bucket.
  const double items_per_topic = static_cast<double>(params.n_items) / params.n_topics;
  const double within_pairs = params.n_topics * items_per_topic * (items_per_topic - 1) / 2;
  const double cross_pairs =
      static_cast<double>(params.n_items) * (params.n_items - 1) / 2 - within_pairs;
  EXPECT_GT(static_cast<double>(within) / within_pairs, static_cast<double>(cross) / cross_pairs);
  EXPECT_GT(within, 0);
}

TEST(Synthetic, RejectsFewerItemsThanTopics) {
  SyntheticParams params;
  params.n_items = 3;
  params.n_topics = 5;
  EXPECT_THROW(generate_synthetic(params), std::invalid_argument);
}

TEST(Vocab, RoundTripWithItemFlags) {
  const std::string dir = testutil::scratch_dir("vocab_roundtrip");
  SyntheticParams params;
  params.n_users = 2;
  params.n_items = 4;
  params.n_entities = 8;
  params.sessions_per_user = 1;
  params.n_topics = 2;
  SyntheticData data = generate_synthetic(params);
  save_vocab(data.vocab, dir + "/v.jsonl");
  Vocabulary reloaded = load_vocab(dir + "/v.jsonl");
  EXPECT_EQ(reloaded.tokens, data.vocab.tokens);
  EXPECT_EQ(reloaded.item_entity_of_token, data.vocab.item_entity_of_token);
  EXPECT_EQ(reloaded.item_token_ids().size(), 4u);
}

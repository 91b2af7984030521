#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mhim/kg.hpp"
#include "mhim/rng.hpp"

namespace mhim {

// Reserved vocabulary IDs. Corpus files use dense nonnegative token IDs with
// these four at the bottom.
constexpr int kPadToken = 0;
constexpr int kBosToken = 1;
constexpr int kEosToken = 2;
constexpr int kSepToken = 3;
constexpr int kFirstFreeToken = 4;

enum class Speaker { user, system };

inline std::string to_string(Speaker s) { return s == Speaker::user ? "user" : "system"; }

inline Speaker speaker_from_string(const std::string& s) {
  if (s == "user") return Speaker::user;
  if (s == "system") return Speaker::system;
  throw std::invalid_argument("speaker must be 'user' or 'system', got '" + s + "'");
}

struct Utterance {
  Speaker speaker = Speaker::user;
  std::vector<int> tokens;
  std::vector<int> entities;  // entity mentions, KG entity IDs
  std::vector<int> items;     // item mentions; a subset of entities as ID sets

  bool operator==(const Utterance&) const = default;
};

struct Session {
  std::string session_id;
  std::string user_id;
  int order = 0;  // timestamp order within the user's sessions
  std::vector<Utterance> utterances;

  bool operator==(const Session&) const = default;
};

// Token vocabulary. Entries flagged with an item entity form the item
// sub-vocabulary the copy mechanism may route probability mass to.
struct Vocabulary {
  std::vector<std::string> tokens;              // index = token id
  std::map<int, int> item_entity_of_token;      // token id -> item entity id
  std::unordered_map<std::string, int> id_of;

  int size() const { return static_cast<int>(tokens.size()); }

  int add(const std::string& token, int item_entity = -1) {
    const int id = size();
    tokens.push_back(token);
    id_of[token] = id;
    if (item_entity >= 0) item_entity_of_token[id] = item_entity;
    return id;
  }

  std::vector<int> item_token_ids() const {
    std::vector<int> out;
    for (const auto& [tok, ent] : item_entity_of_token) out.push_back(tok);
    return out;
  }
};

class DialogueCorpus {
 public:
  std::vector<Session> sessions;

  void rebuild_index() {
    by_user_.clear();
    std::set<std::string> seen_ids;
    for (size_t i = 0; i < sessions.size(); ++i) {
      const auto& s = sessions[i];
      if (!seen_ids.insert(s.session_id).second) {
        throw std::invalid_argument("corpus: duplicate session_id " + s.session_id);
      }
      by_user_[s.user_id].push_back(i);
    }
    for (auto& [user, idx] : by_user_) {
      std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return sessions[a].order < sessions[b].order;
      });
      for (size_t k = 1; k < idx.size(); ++k) {
        if (sessions[idx[k]].order == sessions[idx[k - 1]].order) {
          throw std::invalid_argument("corpus: duplicate order for user " + user);
        }
      }
    }
  }

  const std::map<std::string, std::vector<size_t>>& sessions_by_user() const { return by_user_; }

  std::vector<std::string> users() const {
    std::vector<std::string> out;
    for (const auto& [u, _] : by_user_) out.push_back(u);
    return out;
  }

  size_t user_count() const { return by_user_.size(); }

  const Session& session_by_id(const std::string& id) const {
    for (const auto& s : sessions) {
      if (s.session_id == id) return s;
    }
    throw std::out_of_range("corpus: unknown session " + id);
  }

  bool operator==(const DialogueCorpus& other) const { return sessions == other.sessions; }

 private:
  std::map<std::string, std::vector<size_t>> by_user_;
};

// ---------------------------------------------------------------------------
// Corpus IO (JSON-lines)
// ---------------------------------------------------------------------------

namespace detail {

inline void validate_utterance(const Utterance& u, int entity_count, int vocab_size,
                               const std::string& where) {
  if (u.tokens.empty()) throw std::invalid_argument(where + ": empty token list");
  std::set<int> entity_set(u.entities.begin(), u.entities.end());
  for (int it : u.items) {
    if (!entity_set.count(it)) {
      throw std::invalid_argument(where + ": item mention " + std::to_string(it) +
                                  " missing from entity mentions");
    }
  }
  for (int t : u.tokens) {
    if (t < 0 || (vocab_size >= 0 && t >= vocab_size)) {
      throw std::invalid_argument(where + ": token id " + std::to_string(t) + " out of range");
    }
  }
  for (int e : u.entities) {
    if (e < 0 || (entity_count >= 0 && e >= entity_count)) {
      throw std::invalid_argument(where + ": unknown entity id " + std::to_string(e));
    }
  }
}

}  // namespace detail

// Loads a JSON-lines corpus. Entity/vocab ranges are validated when the
// corresponding counts are nonnegative.
inline DialogueCorpus load_corpus(const std::string& path, int entity_count = -1,
                                  int vocab_size = -1) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_corpus: cannot open " + path);
  DialogueCorpus corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + " line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + ": malformed JSON: " + e.what());
    }
    try {
      Session s;
      s.session_id = j.at("session_id").get<std::string>();
      s.user_id = j.at("user_id").get<std::string>();
      s.order = j.at("order").get<int>();
      for (const auto& ju : j.at("utterances")) {
        Utterance u;
        u.speaker = speaker_from_string(ju.at("speaker").get<std::string>());
        u.tokens = ju.at("tokens").get<std::vector<int>>();
        u.entities = ju.at("entities").get<std::vector<int>>();
        u.items = ju.at("items").get<std::vector<int>>();
        detail::validate_utterance(u, entity_count, vocab_size, where);
        s.utterances.push_back(std::move(u));
      }
      if (s.utterances.empty()) throw std::invalid_argument("empty session");
      corpus.sessions.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  corpus.rebuild_index();
  return corpus;
}

inline void save_corpus(const DialogueCorpus& corpus, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const auto& s : corpus.sessions) {
    nlohmann::ordered_json j;
    j["session_id"] = s.session_id;
    j["user_id"] = s.user_id;
    j["order"] = s.order;
    auto& arr = j["utterances"] = nlohmann::ordered_json::array();
    for (const auto& u : s.utterances) {
      arr.push_back(nlohmann::ordered_json{{"speaker", to_string(u.speaker)},
                                           {"tokens", u.tokens},
                                           {"entities", u.entities},
                                           {"items", u.items}});
    }
    os << j.dump() << "\n";
  }
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_vocab: cannot open " + path);
  std::map<int, std::pair<std::string, int>> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const int id = j.at("id").get<int>();
      if (entries.count(id)) throw std::invalid_argument("duplicate token id");
      entries[id] = {j.at("token").get<std::string>(),
                     j.contains("item") ? j.at("item").get<int>() : -1};
    } catch (const std::exception& e) {
      throw std::runtime_error("load_vocab: " + path + " line " + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  Vocabulary vocab;
  int expect = 0;
  for (const auto& [id, entry] : entries) {
    if (id != expect++) {
      throw std::runtime_error("load_vocab: token ids must be dense starting at 0");
    }
    vocab.add(entry.first, entry.second);
  }
  return vocab;
}

inline void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_vocab: cannot open " + path);
  for (int id = 0; id < vocab.size(); ++id) {
    nlohmann::ordered_json j{{"id", id}, {"token", vocab.tokens[static_cast<size_t>(id)]}};
    auto it = vocab.item_entity_of_token.find(id);
    if (it != vocab.item_entity_of_token.end()) j["item"] = it->second;
    os << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// User history
// ---------------------------------------------------------------------------

struct UserHistory {
  std::string user_id;
  std::vector<const Session*> sessions;  // chronological, oldest first
  std::vector<int> historical_items;     // I_H: ascending, deduplicated

  bool empty() const { return sessions.empty(); }
};

inline std::vector<int> session_item_mentions(const Session& s) {
  std::set<int> items;
  for (const auto& u : s.utterances) items.insert(u.items.begin(), u.items.end());
  return {items.begin(), items.end()};
}

// Sessions of `user_id` strictly before `current_order`, capped to the most
// recent `max_sessions`. I_H is exactly the union of their item mentions.
inline UserHistory user_history(const DialogueCorpus& corpus, const std::string& user_id,
                                int current_order, int max_sessions) {
  UserHistory h;
  h.user_id = user_id;
  auto it = corpus.sessions_by_user().find(user_id);
  if (it != corpus.sessions_by_user().end()) {
    std::vector<const Session*> prior;
    for (size_t idx : it->second) {
      const Session& s = corpus.sessions[idx];
      if (s.order < current_order) prior.push_back(&s);
    }
    const size_t cap = max_sessions < 0 ? prior.size() : static_cast<size_t>(max_sessions);
    const size_t start = prior.size() > cap ? prior.size() - cap : 0;
    h.sessions.assign(prior.begin() + static_cast<long>(start), prior.end());
  }
  std::set<int> items;
  for (const Session* s : h.sessions) {
    const auto si = session_item_mentions(*s);
    items.insert(si.begin(), si.end());
  }
  h.historical_items.assign(items.begin(), items.end());
  return h;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct Split {
  std::vector<std::string> train, valid, test;
};

// User-disjoint split. Users are shuffled deterministically under the seed and
// cut at cumulative-rounded boundaries, so 956 users at 8:1:1 give 765/95/96.
inline Split split_by_user(const DialogueCorpus& corpus, const std::array<double, 3>& ratios,
                           uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::fabs(sum - 1.0) > 1e-9) throw std::invalid_argument("split_by_user: ratios must sum to 1");
  std::vector<std::string> users = corpus.users();
  if (users.size() < 3) throw std::invalid_argument("split_by_user: fewer users than splits");
  Rng rng = Rng(seed).substream("split");
  rng.shuffle(users);
  const auto n = static_cast<double>(users.size());
  const auto b1 = static_cast<size_t>(std::llround(n * ratios[0]));
  const auto b2 = static_cast<size_t>(std::llround(n * (ratios[0] + ratios[1])));
  std::unordered_map<std::string, int> split_of;
  for (size_t i = 0; i < users.size(); ++i) {
    split_of[users[i]] = i < b1 ? 0 : (i < b2 ? 1 : 2);
  }
  Split out;
  for (const auto& s : corpus.sessions) {
    switch (split_of.at(s.user_id)) {
      case 0: out.train.push_back(s.session_id); break;
      case 1: out.valid.push_back(s.session_id); break;
      default: out.test.push_back(s.session_id); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Context truncation
// ---------------------------------------------------------------------------

inline std::vector<int> keep_last(std::vector<int> tokens, size_t limit) {
  if (tokens.size() > limit) {
    tokens.erase(tokens.begin(), tokens.end() - static_cast<long>(limit));
  }
  return tokens;
}

// Concatenated tokens of a session's first `upto_turn` utterances (all when
// negative), separator-free.
inline std::vector<int> session_tokens(const Session& s, int upto_turn = -1) {
  std::vector<int> out;
  const size_t end = upto_turn < 0 ? s.utterances.size()
                                   : std::min(s.utterances.size(), static_cast<size_t>(upto_turn));
  for (size_t i = 0; i < end; ++i) {
    out.insert(out.end(), s.utterances[i].tokens.begin(), s.utterances[i].tokens.end());
  }
  return out;
}

struct ContextTokens {
  std::vector<int> current;
  std::vector<int> history;
};

// Keeps the most recent tokens of the current session and of the history
// concatenation (oldest session first, separator tokens between sessions).
inline ContextTokens truncate_context(const Session& current, const UserHistory& history,
                                      int max_current = 256, int max_history = 1024,
                                      int current_upto_turn = -1) {
  if (max_current <= 0 || max_history <= 0) {
    throw std::invalid_argument("truncate_context: limits must be positive");
  }
  ContextTokens out;
  out.current = keep_last(session_tokens(current, current_upto_turn),
                          static_cast<size_t>(max_current));
  std::vector<int> hist;
  for (size_t i = 0; i < history.sessions.size(); ++i) {
    if (i > 0) hist.push_back(kSepToken);
    const auto st = session_tokens(*history.sessions[i]);
    hist.insert(hist.end(), st.begin(), st.end());
  }
  out.history = keep_last(std::move(hist), static_cast<size_t>(max_history));
  return out;
}

// ---------------------------------------------------------------------------
// Task-KG helpers over a corpus
// ---------------------------------------------------------------------------

inline std::vector<int> mentioned_entities(const DialogueCorpus& corpus) {
  std::set<int> ents;
  for (const auto& s : corpus.sessions) {
    for (const auto& u : s.utterances) ents.insert(u.entities.begin(), u.entities.end());
  }
  return {ents.begin(), ents.end()};
}

inline KgSubset build_task_kg(const KnowledgeGraph& kg, const DialogueCorpus& corpus,
                              int hops = 2) {
  return build_task_kg(kg, mentioned_entities(corpus), hops);
}

// Relations incident to the task-related subgraph; the whitelist that spans
// the extended KG.
inline std::set<int> corpus_relation_whitelist(const KnowledgeGraph& kg,
                                               const DialogueCorpus& corpus) {
  const KgSubset task = build_task_kg(kg, corpus);
  std::set<int> rels;
  for (const auto& t : task.graph.triples()) rels.insert(t.rel);
  return rels;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SyntheticParams {
  int n_users = 50;
  int n_items = 150;
  int n_entities = 300;
  int sessions_per_user = 4;
  int n_topics = 5;
  int preferred_items_per_user = 3;
  int attrs_per_item = 3;
  uint64_t seed = 7;
};

struct SyntheticData {
  DialogueCorpus corpus;
  KnowledgeGraph kg;
  Vocabulary vocab;
};

// Topic-clustered synthetic world: users carry a latent topic, sessions
// mention the user's preferred items, and the KG links items to topic
// attributes. Deterministic under the seed.
inline SyntheticData generate_synthetic(const SyntheticParams& p) {
  if (p.n_users <= 0 || p.n_items <= 0 || p.n_entities <= 0 || p.sessions_per_user <= 0 ||
      p.n_topics <= 0) {
    throw std::invalid_argument("generate_synthetic: parameters must be positive");
  }
  if (p.n_items < p.n_topics) {
    throw std::invalid_argument("generate_synthetic: need at least one item per topic");
  }
  if (p.n_entities < p.n_items + p.n_topics) {
    throw std::invalid_argument("generate_synthetic: need at least one attribute per topic");
  }
  const int n_attrs = p.n_entities - p.n_items;
  auto topic_of_item = [&](int i) {
    return static_cast<int>(static_cast<long>(i) * p.n_topics / p.n_items);
  };
  auto topic_of_attr = [&](int a) {
    return static_cast<int>(static_cast<long>(a) * p.n_topics / n_attrs);
  };

  std::vector<std::vector<int>> topic_items(static_cast<size_t>(p.n_topics));
  for (int i = 0; i < p.n_items; ++i) topic_items[static_cast<size_t>(topic_of_item(i))].push_back(i);
  std::vector<std::vector<int>> topic_attrs(static_cast<size_t>(p.n_topics));
  for (int a = 0; a < n_attrs; ++a) {
    topic_attrs[static_cast<size_t>(topic_of_attr(a))].push_back(p.n_items + a);
  }

  SyntheticData out;

  // Knowledge graph: relation 0 item->attribute, relation 1 attribute chain.
  Rng kg_rng = Rng(p.seed).substream("synthetic.kg");
  out.kg = KnowledgeGraph(p.n_entities, 2);
  for (int i = 0; i < p.n_items; ++i) out.kg.mark_item(i);
  for (int i = 0; i < p.n_items; ++i) {
    const auto& attrs = topic_attrs[static_cast<size_t>(topic_of_item(i))];
    const int k = std::min<int>(p.attrs_per_item, static_cast<int>(attrs.size()));
    for (int pick : kg_rng.sample_without_replacement(static_cast<int>(attrs.size()), k)) {
      out.kg.add_triple(i, 0, attrs[static_cast<size_t>(pick)]);
    }
  }
  for (int t = 0; t < p.n_topics; ++t) {
    const auto& attrs = topic_attrs[static_cast<size_t>(t)];
    for (size_t a = 0; a + 1 < attrs.size(); ++a) out.kg.add_triple(attrs[a], 1, attrs[a + 1]);
  }

  // Vocabulary: specials, per-topic words, common words, one token per item.
  out.vocab.add("<pad>");
  out.vocab.add("<bos>");
  out.vocab.add("<eos>");
  out.vocab.add("<sep>");
  const int words_per_topic = 8;
  std::vector<std::vector<int>> topic_words(static_cast<size_t>(p.n_topics));
  for (int t = 0; t < p.n_topics; ++t) {
    for (int w = 0; w < words_per_topic; ++w) {
      topic_words[static_cast<size_t>(t)].push_back(
          out.vocab.add("topic" + std::to_string(t) + "_w" + std::to_string(w)));
    }
  }
  std::vector<int> common_words;
  for (int w = 0; w < 8; ++w) common_words.push_back(out.vocab.add("common_w" + std::to_string(w)));
  std::vector<int> item_tokens(static_cast<size_t>(p.n_items));
  for (int i = 0; i < p.n_items; ++i) {
    item_tokens[static_cast<size_t>(i)] = out.vocab.add("item_" + std::to_string(i), i);
  }

  // Users and sessions.
  Rng user_rng = Rng(p.seed).substream("synthetic.users");
  for (int u = 0; u < p.n_users; ++u) {
    const int topic = u % p.n_topics;
    const auto& items = topic_items[static_cast<size_t>(topic)];
    const auto& attrs = topic_attrs[static_cast<size_t>(topic)];
    const auto& words = topic_words[static_cast<size_t>(topic)];
    const int n_pref = std::min<int>(p.preferred_items_per_user, static_cast<int>(items.size()));
    std::vector<int> preferred;
    for (int pick : user_rng.sample_without_replacement(static_cast<int>(items.size()), n_pref)) {
      preferred.push_back(items[static_cast<size_t>(pick)]);
    }

    for (int s = 0; s < p.sessions_per_user; ++s) {
      Session sess;
      sess.session_id = "u" + std::to_string(u) + "_s" + std::to_string(s);
      sess.user_id = "u" + std::to_string(u);
      sess.order = s;

      // Two seeker/reply rounds; each reply recommends exactly one preferred
      // item, so recommendation targets are never ambiguous within a turn
      // while sessions still gather co-occurring items.
      for (int round = 0; round < 2; ++round) {
        Utterance seeker;
        seeker.speaker = Speaker::user;
        const int n_tok = 3 + user_rng.uniform_int(4);
        for (int k = 0; k < n_tok; ++k) {
          seeker.tokens.push_back(user_rng.bernoulli(0.7)
                                      ? words[static_cast<size_t>(user_rng.uniform_int(
                                            static_cast<int>(words.size())))]
                                      : common_words[static_cast<size_t>(user_rng.uniform_int(
                                            static_cast<int>(common_words.size())))]);
        }
        const int n_mention = std::min<int>(2, static_cast<int>(attrs.size()));
        for (int pick :
             user_rng.sample_without_replacement(static_cast<int>(attrs.size()), n_mention)) {
          seeker.entities.push_back(attrs[static_cast<size_t>(pick)]);
        }
        std::sort(seeker.entities.begin(), seeker.entities.end());
        sess.utterances.push_back(std::move(seeker));

        Utterance reply;
        reply.speaker = Speaker::system;
        const int item = preferred[static_cast<size_t>(user_rng.uniform_int(n_pref))];
        const int n_words = 2 + user_rng.uniform_int(3);
        for (int k = 0; k < n_words; ++k) {
          reply.tokens.push_back(
              words[static_cast<size_t>(user_rng.uniform_int(static_cast<int>(words.size())))]);
        }
        reply.tokens.push_back(item_tokens[static_cast<size_t>(item)]);
        reply.entities.push_back(item);
        reply.items.push_back(item);
        reply.tokens.push_back(kEosToken);
        sess.utterances.push_back(std::move(reply));
      }

      out.corpus.sessions.push_back(std::move(sess));
    }
  }
  out.corpus.rebuild_index();
  return out;
}

}  // namespace mhim

#pragma once
// Corpus data model, JSON-lines IO, preprocessing and dataset splits.
//
// Corpus line schema:
//   {"id": str, "event": str, "platform": str, "label": int,
//    "source": {"id": str, "text": str, "time": int},
//    "comments": [{"id": str, "text": str, "time": int}, ...]}

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/core/errors.hpp"
#include "msuf/core/random.hpp"

namespace msuf {

enum class Verdict : int { False = 0, True = 1, Unverified = 2, NonRumor = 3 };

inline constexpr std::size_t kMaxClasses = 4;

inline const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::False: return "false";
    case Verdict::True: return "true";
    case Verdict::Unverified: return "unverified";
    case Verdict::NonRumor: return "nonrumor";
  }
  return "?";
}

inline std::size_t label_index(Verdict v) { return static_cast<std::size_t>(v); }

struct Message {
  std::string id;
  std::string text;
  std::int64_t time = 0;  // seconds since epoch
  std::optional<bool> author_visible;

  bool operator==(const Message&) const = default;
};

struct Thread {
  std::string id;
  Message source;
  std::vector<Message> comments;
  Verdict label = Verdict::False;
  std::string event;
  std::string platform;

  bool operator==(const Thread&) const = default;

  // Seconds between the source and comment k (never negative after parsing).
  std::int64_t offset(std::size_t k) const { return comments[k].time - source.time; }
};

// 4 when any thread carries the non-rumor label, else 3.
inline std::size_t class_count(const std::vector<Thread>& threads) {
  const bool nonrumor =
      std::any_of(threads.begin(), threads.end(), [](const Thread& t) { return t.label == Verdict::NonRumor; });
  return nonrumor ? 4 : 3;
}

struct ParseReport {
  std::vector<Thread> threads;
  std::size_t clamped_comments = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

inline Message parse_message(const nlohmann::json& j, const std::string& where, std::size_t line) {
  auto fail = [&](const std::string& field, const std::string& why) -> DataError {
    return DataError("line " + std::to_string(line) + ": field '" + where + field + "' " + why);
  };
  if (!j.is_object()) throw fail("", "must be an object");
  Message m;
  for (const char* key : {"id", "text", "time"})
    if (!j.contains(key)) throw fail(key, "is missing");
  if (!j["id"].is_string()) throw fail("id", "must be a string");
  if (!j["text"].is_string()) throw fail("text", "must be a string");
  if (!j["time"].is_number_integer()) throw fail("time", "must be an integer");
  m.id = j["id"].get<std::string>();
  m.text = j["text"].get<std::string>();
  m.time = j["time"].get<std::int64_t>();
  if (blank(m.text)) throw fail("text", "is empty");
  if (m.time < 0) throw fail("time", "is negative");
  if (j.contains("author_visible")) {
    if (!j["author_visible"].is_boolean()) throw fail("author_visible", "must be a boolean");
    m.author_visible = j["author_visible"].get<bool>();
  }
  return m;
}

inline nlohmann::json message_json(const Message& m) {
  nlohmann::json j{{"id", m.id}, {"text", m.text}, {"time", m.time}};
  if (m.author_visible) j["author_visible"] = *m.author_visible;
  return j;
}

}  // namespace detail

// Parse one corpus line. Comments timestamped before their source are
// clamped to the source time and counted in `clamped`.
inline Thread parse_thread_line(const std::string& text, std::size_t line, std::size_t& clamped) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("line " + std::to_string(line) + ": invalid JSON (" + e.what() + ")");
  }
  auto fail = [&](const std::string& field, const std::string& why) {
    return DataError("line " + std::to_string(line) + ": field '" + field + "' " + why);
  };
  if (!j.is_object()) throw fail("", "record must be an object");
  for (const char* key : {"id", "label", "source", "comments"})
    if (!j.contains(key)) throw fail(key, "is missing");
  if (!j["id"].is_string()) throw fail("id", "must be a string");
  if (!j["label"].is_number_integer()) throw fail("label", "must be an integer");
  const auto label = j["label"].get<int>();
  if (label < 0 || label > 3) throw fail("label", "must be in 0..3, got " + std::to_string(label));
  if (!j["comments"].is_array()) throw fail("comments", "must be an array");

  Thread t;
  t.id = j["id"].get<std::string>();
  t.label = static_cast<Verdict>(label);
  t.event = j.value("event", "");
  t.platform = j.value("platform", "");
  t.source = detail::parse_message(j["source"], "source.", line);
  std::size_t k = 0;
  for (const auto& c : j["comments"]) {
    Message m = detail::parse_message(c, "comments[" + std::to_string(k++) + "].", line);
    if (m.time < t.source.time) {
      m.time = t.source.time;
      ++clamped;
    }
    t.comments.push_back(std::move(m));
  }
  return t;
}

inline ParseReport parse_corpus_stream(std::istream& in) {
  ParseReport report;
  std::unordered_set<std::string> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (detail::blank(text)) continue;
    const std::size_t before = report.clamped_comments;
    Thread t = parse_thread_line(text, line, report.clamped_comments);
    if (!ids.insert(t.id).second) throw DataError("line " + std::to_string(line) + ": duplicate thread id '" + t.id + "'");
    if (report.clamped_comments != before) {
      report.warnings.push_back("line " + std::to_string(line) + ": " +
                                std::to_string(report.clamped_comments - before) +
                                " comment time(s) before source clamped to offset 0");
    }
    report.threads.push_back(std::move(t));
  }
  return report;
}

inline ParseReport parse_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  return parse_corpus_stream(in);
}

inline nlohmann::json thread_json(const Thread& t) {
  nlohmann::json comments = nlohmann::json::array();
  for (const auto& c : t.comments) comments.push_back(detail::message_json(c));
  return {{"id", t.id},
          {"event", t.event},
          {"platform", t.platform},
          {"label", static_cast<int>(t.label)},
          {"source", detail::message_json(t.source)},
          {"comments", std::move(comments)}};
}

inline std::string to_jsonl(const std::vector<Thread>& threads) {
  std::string out;
  for (const auto& t : threads) {
    out += thread_json(t).dump();
    out += '\n';
  }
  return out;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<Thread>& threads) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write corpus " + path.string());
  out << to_jsonl(threads);
}

// Drops threads without comments and repeated ids (first occurrence wins).
inline std::vector<Thread> preprocess(const std::vector<Thread>& threads) {
  std::vector<Thread> out;
  std::unordered_set<std::string> seen;
  for (const auto& t : threads) {
    if (t.comments.empty()) continue;
    if (!seen.insert(t.id).second) continue;
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitStrategy { Random2020, EventHoldout, PlatformHoldout, CrossCorpus, TimeOrdered };

inline const char* strategy_name(SplitStrategy s) {
  switch (s) {
    case SplitStrategy::Random2020: return "random2020";
    case SplitStrategy::EventHoldout: return "event_holdout";
    case SplitStrategy::PlatformHoldout: return "platform_holdout";
    case SplitStrategy::CrossCorpus: return "cross_corpus";
    case SplitStrategy::TimeOrdered: return "time_ordered";
  }
  return "?";
}

inline SplitStrategy parse_strategy(const std::string& s) {
  for (auto v : {SplitStrategy::Random2020, SplitStrategy::EventHoldout, SplitStrategy::PlatformHoldout,
                 SplitStrategy::CrossCorpus, SplitStrategy::TimeOrdered})
    if (s == strategy_name(v)) return v;
  throw DataError("unknown split strategy '" + s + "'");
}

struct CorpusSplit {
  SplitStrategy strategy = SplitStrategy::Random2020;
  std::uint64_t seed = 0;
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  bool operator==(const CorpusSplit&) const = default;
};

struct SplitOptions {
  SplitStrategy strategy = SplitStrategy::Random2020;
  std::uint64_t seed = 2020;
  std::vector<std::string> test_events{"ferguson", "prince", "ebola"};
  std::vector<std::string> validation_events{"ottawashooting", "putinmissing", "gurlitt"};
  std::string test_platform = "reddit";
  std::size_t time_k = 300;
};

namespace detail {

inline bool event_matches(const std::string& tag, const std::vector<std::string>& names) {
  return std::any_of(names.begin(), names.end(), [&](const std::string& n) {
    return tag == n || (tag.size() > n.size() && tag.compare(0, n.size(), n) == 0 && tag[n.size()] == '-');
  });
}

// Seeded shuffle, then |test| = round(0.2 N), |val| = round(0.2 (N - test)).
inline void random_partition(std::vector<std::string> ids, std::uint64_t seed, bool with_test, CorpusSplit& out) {
  Rng rng(seed);
  rng.shuffle(ids);
  const auto n = static_cast<double>(ids.size());
  const std::size_t n_test = with_test ? static_cast<std::size_t>(std::lround(0.2 * n)) : 0;
  const std::size_t n_val = static_cast<std::size_t>(std::lround(0.2 * (n - static_cast<double>(n_test))));
  out.test.insert(out.test.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.validation.insert(out.validation.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_test),
                        ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  out.train.insert(out.train.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), ids.end());
}

}  // namespace detail

inline CorpusSplit split(const std::vector<Thread>& threads, const SplitOptions& opts) {
  if (threads.empty()) throw DataError("split: empty corpus");
  CorpusSplit out;
  out.strategy = opts.strategy;
  out.seed = opts.seed;
  std::vector<std::string> ids;
  for (const auto& t : threads) ids.push_back(t.id);

  switch (opts.strategy) {
    case SplitStrategy::Random2020:
      detail::random_partition(ids, opts.seed, true, out);
      break;
    case SplitStrategy::EventHoldout:
      for (const auto& t : threads) {
        if (t.event.empty()) throw DataError("split: event_holdout needs an event tag on thread '" + t.id + "'");
        if (detail::event_matches(t.event, opts.test_events))
          out.test.push_back(t.id);
        else if (detail::event_matches(t.event, opts.validation_events))
          out.validation.push_back(t.id);
        else
          out.train.push_back(t.id);
      }
      if (out.test.empty()) throw DataError("split: no thread belongs to the test events");
      break;
    case SplitStrategy::PlatformHoldout: {
      std::vector<std::string> rest;
      for (const auto& t : threads) {
        if (t.platform.empty()) throw DataError("split: platform_holdout needs a platform tag on thread '" + t.id + "'");
        (t.platform == opts.test_platform ? out.test : rest).push_back(t.id);
      }
      if (out.test.empty()) throw DataError("split: no thread on platform '" + opts.test_platform + "'");
      detail::random_partition(rest, opts.seed, false, out);
      break;
    }
    case SplitStrategy::TimeOrdered: {
      if (threads.size() < 2 * opts.time_k + 1) {
        throw DataError("split: time_ordered with K=" + std::to_string(opts.time_k) + " needs more than " +
                        std::to_string(2 * opts.time_k) + " threads, got " + std::to_string(threads.size()));
      }
      std::vector<const Thread*> order;
      for (const auto& t : threads) order.push_back(&t);
      std::stable_sort(order.begin(), order.end(), [](const Thread* a, const Thread* b) {
        return a->source.time != b->source.time ? a->source.time < b->source.time : a->id < b->id;
      });
      const std::size_t n = order.size();
      for (std::size_t k = 0; k < n; ++k) {
        auto& bucket = k >= n - opts.time_k ? out.test : (k >= n - 2 * opts.time_k ? out.validation : out.train);
        bucket.push_back(order[k]->id);
      }
      break;
    }
    case SplitStrategy::CrossCorpus:
      throw DataError("split: cross_corpus needs separate train and test corpora; use split_cross_corpus");
  }
  return out;
}

// Train/validation from one corpus (80/20 seeded), test from another.
inline CorpusSplit split_cross_corpus(const std::vector<Thread>& train_corpus, const std::vector<Thread>& test_corpus,
                                      std::uint64_t seed) {
  if (train_corpus.empty() || test_corpus.empty()) throw DataError("split: cross_corpus needs two non-empty corpora");
  std::unordered_set<std::string> train_ids;
  std::vector<std::string> ids;
  for (const auto& t : train_corpus) {
    train_ids.insert(t.id);
    ids.push_back(t.id);
  }
  CorpusSplit out;
  out.strategy = SplitStrategy::CrossCorpus;
  out.seed = seed;
  for (const auto& t : test_corpus) {
    if (train_ids.count(t.id)) throw DataError("split: thread id '" + t.id + "' appears in both corpora");
    out.test.push_back(t.id);
  }
  detail::random_partition(ids, seed, false, out);
  return out;
}

inline nlohmann::json split_json(const CorpusSplit& s) {
  return {{"strategy", strategy_name(s.strategy)},
          {"seed", s.seed},
          {"train", s.train},
          {"validation", s.validation},
          {"test", s.test}};
}

inline CorpusSplit split_from_json(const nlohmann::json& j) {
  try {
    CorpusSplit s;
    s.strategy = parse_strategy(j.at("strategy").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train = j.at("train").get<std::vector<std::string>>();
    s.validation = j.at("validation").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("split file: ") + e.what());
  }
}

// Threads listed in `ids`, in that order.
inline std::vector<Thread> select(const std::vector<Thread>& threads, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const Thread*> by_id;
  for (const auto& t : threads) by_id.emplace(t.id, &t);
  std::vector<Thread> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("unknown thread id '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace msuf

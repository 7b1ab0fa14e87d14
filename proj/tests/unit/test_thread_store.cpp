#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "msuf/thread_store.hpp"

using namespace msuf;

namespace {

const std::string kFixtures = MSUF_FIXTURE_DIR;

Thread make_thread(const std::string& id, std::size_t comments, std::int64_t t0 = 0) {
  Thread t;
  t.id = id;
  t.source = {id + "s", "source " + id, t0, std::nullopt};
  for (std::size_t k = 0; k < comments; ++k)
    t.comments.push_back({id + "c" + std::to_string(k), "reply", t0 + 60 * static_cast<std::int64_t>(k), std::nullopt});
  return t;
}

std::vector<Thread> corpus(std::size_t n, Rng& rng) {
  static const char* events[] = {"ferguson", "prince-toronto", "ebola-essien", "ottawashooting", "putinmissing",
                                 "gurlitt", "sydneysiege", "charliehebdo", "germanwings-crash"};
  std::vector<Thread> out;
  for (std::size_t k = 0; k < n; ++k) {
    Thread t = make_thread("t" + std::to_string(k), 1 + rng.below(3), static_cast<std::int64_t>(rng.below(1000000)));
    t.event = events[rng.below(9)];
    t.platform = rng.uniform() < 0.3 ? "reddit" : "twitter";
    t.label = static_cast<Verdict>(rng.below(4));
    out.push_back(std::move(t));
  }
  return out;
}

void expect_partition(const std::vector<Thread>& threads, const CorpusSplit& s) {
  std::multiset<std::string> all;
  for (const auto* part : {&s.train, &s.validation, &s.test}) all.insert(part->begin(), part->end());
  ASSERT_EQ(all.size(), threads.size());
  for (const auto& t : threads) EXPECT_EQ(all.count(t.id), 1u) << t.id;
}

}  // namespace

TEST(ParseCorpus, ThreeRecordsInFileOrder) {
  const auto r = parse_corpus(kFixtures + "/corpus_three.jsonl");
  ASSERT_EQ(r.threads.size(), 3u);
  EXPECT_EQ(r.threads[0].id, "t1");
  EXPECT_EQ(r.threads[1].id, "t2");
  EXPECT_EQ(r.threads[2].id, "t3");
  EXPECT_EQ(r.threads[0].comments.size(), 2u);
  EXPECT_EQ(r.threads[2].label, Verdict::Unverified);
  EXPECT_EQ(r.threads[2].source.author_visible, std::optional<bool>(true));
  EXPECT_EQ(r.clamped_comments, 0u);
}

TEST(ParseCorpus, MissingCommentsNamesLineAndField) {
  try {
    parse_corpus(kFixtures + "/corpus_missing_comments.jsonl");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("comments"), std::string::npos) << msg;
  }
}

TEST(ParseCorpus, EarlyCommentClampedWithWarning) {
  const auto r = parse_corpus(kFixtures + "/corpus_clamp.jsonl");
  ASSERT_EQ(r.threads.size(), 1u);
  const auto& t = r.threads[0];
  EXPECT_EQ(t.offset(0), 0);
  EXPECT_EQ(t.offset(1), 60);
  EXPECT_EQ(r.clamped_comments, 1u);
  ASSERT_EQ(r.warnings.size(), 1u);
}

TEST(ParseCorpus, DuplicateIdRejected) {
  EXPECT_THROW(parse_corpus(kFixtures + "/corpus_duplicate.jsonl"), DataError);
}

TEST(ParseCorpus, SchemaViolations) {
  auto parse = [](const std::string& line) {
    std::istringstream in(line);
    return parse_corpus_stream(in);
  };
  EXPECT_THROW(parse("{not json"), DataError);
  EXPECT_THROW(parse(R"({"id":"x","label":7,"source":{"id":"s","text":"a","time":1},"comments":[]})"), DataError);
  EXPECT_THROW(parse(R"({"id":"x","label":0,"source":{"id":"s","text":"  ","time":1},"comments":[]})"), DataError);
  EXPECT_THROW(parse(R"({"id":"x","label":0,"source":{"id":"s","text":"a","time":-4},"comments":[]})"), DataError);
  EXPECT_THROW(parse(R"({"id":"x","label":0,"source":{"id":"s","text":"a","time":1},"comments":[{"id":"c","text":"b"}]})"),
               DataError);
  EXPECT_THROW(parse("{}"), DataError);
  EXPECT_NO_THROW(parse(R"({"id":"x","label":0,"source":{"id":"s","text":"a","time":1},"comments":[]})"));
}

TEST(ParseCorpus, RoundTripThroughJsonl) {
  Rng rng(5);
  auto threads = corpus(40, rng);
  threads[3].source.author_visible = false;
  std::istringstream in(to_jsonl(threads));
  const auto back = parse_corpus_stream(in);
  EXPECT_EQ(back.threads, threads);
}

TEST(Preprocess, DropsThreadsWithoutComments) {
  const auto out = preprocess({make_thread("a", 0), make_thread("b", 2)});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].id, "b");
}

TEST(Preprocess, EmptyInput) { EXPECT_TRUE(preprocess({}).empty()); }

TEST(Preprocess, FirstDuplicateWins) {
  Thread first = make_thread("x", 1);
  Thread second = make_thread("x", 3);
  const auto out = preprocess({first, second});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].comments.size(), 1u);
}

TEST(Preprocess, Idempotent) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Thread> threads;
    for (int k = 0; k < 30; ++k) threads.push_back(make_thread("t" + std::to_string(rng.below(15)), rng.below(3)));
    const auto once = preprocess(threads);
    EXPECT_EQ(preprocess(once), once);
  }
}

TEST(Split, Random2020Sizes) {
  Rng rng(1);
  const auto threads = corpus(100, rng);
  const auto s = split(threads, {.strategy = SplitStrategy::Random2020, .seed = 7});
  EXPECT_EQ(s.test.size(), 20u);
  EXPECT_EQ(s.validation.size(), 16u);
  EXPECT_EQ(s.train.size(), 64u);
  expect_partition(threads, s);
}

TEST(Split, Random2020SizesForAllN) {
  Rng rng(2);
  for (std::size_t n = 5; n <= 200; ++n) {
    const auto threads = corpus(n, rng);
    const auto s = split(threads, {.strategy = SplitStrategy::Random2020, .seed = n});
    const auto test = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n)));
    EXPECT_EQ(s.test.size(), test) << n;
    EXPECT_EQ(s.validation.size(), static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n - test)))) << n;
    expect_partition(threads, s);
  }
}

TEST(Split, DeterministicForSeed) {
  Rng rng(3);
  const auto threads = corpus(50, rng);
  const SplitOptions opts{.strategy = SplitStrategy::Random2020, .seed = 11};
  EXPECT_EQ(split(threads, opts), split(threads, opts));
  auto other = opts;
  other.seed = 12;
  EXPECT_NE(split(threads, opts), split(threads, other));
}

TEST(Split, TimeOrderedTakesLatestK) {
  Rng rng(4);
  const auto threads = corpus(1461, rng);
  const auto s = split(threads, {.strategy = SplitStrategy::TimeOrdered, .time_k = 300});
  ASSERT_EQ(s.test.size(), 300u);
  ASSERT_EQ(s.validation.size(), 300u);
  EXPECT_EQ(s.train.size(), 861u);
  std::vector<std::int64_t> times;
  for (const auto& t : threads) times.push_back(t.source.time);
  std::sort(times.begin(), times.end());
  const auto test = select(threads, s.test);
  const auto train = select(threads, s.train);
  std::int64_t min_test = INT64_MAX, max_train = 0;
  for (const auto& t : test) min_test = std::min(min_test, t.source.time);
  for (const auto& t : train) max_train = std::max(max_train, t.source.time);
  EXPECT_GE(min_test, times[1461 - 300 - 1]);
  EXPECT_LE(max_train, min_test);
  expect_partition(threads, s);
}

TEST(Split, EventHoldoutUsesEventLists) {
  Rng rng(5);
  const auto threads = corpus(300, rng);
  const auto s = split(threads, {.strategy = SplitStrategy::EventHoldout});
  expect_partition(threads, s);
  for (const auto& t : select(threads, s.test))
    EXPECT_TRUE(t.event == "ferguson" || t.event == "prince-toronto" || t.event == "ebola-essien") << t.event;
  for (const auto& t : select(threads, s.validation))
    EXPECT_TRUE(t.event == "ottawashooting" || t.event == "putinmissing" || t.event == "gurlitt") << t.event;
}

TEST(Split, PlatformHoldoutTestIsReddit) {
  Rng rng(6);
  const auto threads = corpus(200, rng);
  const auto s = split(threads, {.strategy = SplitStrategy::PlatformHoldout, .seed = 3});
  expect_partition(threads, s);
  for (const auto& t : select(threads, s.test)) EXPECT_EQ(t.platform, "reddit");
  for (const auto& t : select(threads, s.train)) EXPECT_EQ(t.platform, "twitter");
}

TEST(Split, MissingTagsRejected) {
  std::vector<Thread> threads{make_thread("a", 1), make_thread("b", 1)};
  EXPECT_THROW(split(threads, {.strategy = SplitStrategy::EventHoldout}), DataError);
  EXPECT_THROW(split(threads, {.strategy = SplitStrategy::PlatformHoldout}), DataError);
  EXPECT_THROW(split(threads, {.strategy = SplitStrategy::TimeOrdered, .time_k = 300}), DataError);
  EXPECT_THROW(split({}, {}), DataError);
}

TEST(Split, CrossCorpusKeepsCorporaApart) {
  Rng rng(7);
  const auto a = corpus(60, rng);
  auto b = corpus(30, rng);
  for (auto& t : b) t.id = "other-" + t.id;
  const auto s = split_cross_corpus(a, b, 9);
  EXPECT_EQ(s.test.size(), 30u);
  EXPECT_EQ(s.validation.size(), 12u);
  EXPECT_EQ(s.train.size(), 48u);
  for (const auto& id : s.test) EXPECT_EQ(id.rfind("other-", 0), 0u);
  EXPECT_THROW(split_cross_corpus(a, a, 1), DataError);
}

TEST(Split, PartitionPropertyAllStrategies) {
  Rng rng(10);
  for (int trial = 0; trial < 25; ++trial) {
    const auto threads = corpus(20 + rng.below(300), rng);
    expect_partition(threads, split(threads, {.strategy = SplitStrategy::Random2020, .seed = rng.next_u64()}));
    expect_partition(threads, split(threads, {.strategy = SplitStrategy::EventHoldout}));
    expect_partition(threads, split(threads, {.strategy = SplitStrategy::PlatformHoldout, .seed = 2}));
    expect_partition(threads, split(threads, {.strategy = SplitStrategy::TimeOrdered, .time_k = threads.size() / 4}));
  }
}

TEST(Split, JsonRoundTrip) {
  Rng rng(12);
  const auto threads = corpus(30, rng);
  const auto s = split(threads, {.strategy = SplitStrategy::Random2020, .seed = 5});
  EXPECT_EQ(split_from_json(nlohmann::json::parse(split_json(s).dump())), s);
  EXPECT_THROW(split_from_json(nlohmann::json{{"strategy", "nope"}}), DataError);
}

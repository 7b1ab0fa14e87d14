#pragma once
// Synthetic rumor corpora whose labels are carried by the temporal shape of
// comment-minus-source sentiment.
//
// Per thread a source SI is drawn from U(0.35, 0.65). Each comment at
// relative time tau in [0, 1] targets SI_s + profile(label, tau) + N(0, noise)
// and its text is assembled from lexicon words so that the lexicon scorer
// lands near that target. Profiles (amplitude a):
//   false       a (2 tau - 1)          rising
//   true       -a (2 tau - 1)          falling
//   unverified  a (1 - 2|2 tau - 1|)   hump
//   non-rumour  0                      flat
// Under uniform timing every profile averages to zero, so the label lives in
// the ordering, not in the mean. Control corpora use the flat profile for
// every label.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/affect_encoder.hpp"
#include "msuf/core/errors.hpp"
#include "msuf/core/random.hpp"
#include "msuf/thread_store.hpp"

namespace msuf {

enum class SynthTiming { Uniform, Early };

struct SynthSpec {
  std::size_t n_threads = 600;
  std::uint64_t seed = 1;
  double noise = 0.1;
  double amplitude = 0.25;
  bool has_nonrumor = false;
  bool control = false;
  SynthTiming timing = SynthTiming::Uniform;
  double horizon_hours = 24.0;  // comment window under uniform timing
  double early_fraction = 0.9;  // share inside the first hour under early timing
  std::size_t comments_min = 8;
  std::size_t comments_max = 20;
  std::size_t comment_words_min = 8;
  std::size_t comment_words_max = 16;
  double reddit_fraction = 0.2;
  std::int64_t start_time = 1420070400;  // 2015-01-01
  double span_days = 365.0;

  void validate() const {
    auto bad = [](const std::string& m) { throw DataError("synth spec: " + m); };
    if (n_threads == 0) bad("n_threads must be positive");
    if (!(noise >= 0.0)) bad("noise must be >= 0");
    if (!(amplitude >= 0.0 && amplitude <= 0.5)) bad("amplitude must lie in [0, 0.5]");
    if (!(horizon_hours > 0.0)) bad("horizon_hours must be positive");
    if (!(early_fraction >= 0.0 && early_fraction <= 1.0)) bad("early_fraction must lie in [0, 1]");
    if (comments_min == 0 || comments_max < comments_min) bad("need 1 <= comments_min <= comments_max");
    if (comment_words_min < 2 || comment_words_max < comment_words_min) bad("need 2 <= comment_words_min <= comment_words_max");
    if (!(reddit_fraction >= 0.0 && reddit_fraction <= 1.0)) bad("reddit_fraction must lie in [0, 1]");
    if (!(span_days >= 0.0)) bad("span_days must be >= 0");
    if (timing == SynthTiming::Uniform && horizon_hours * 3600.0 < 1.0) bad("horizon too short");
  }
};

inline nlohmann::json synth_spec_json(const SynthSpec& s) {
  return {{"n_threads", s.n_threads},
          {"seed", s.seed},
          {"noise", s.noise},
          {"amplitude", s.amplitude},
          {"has_nonrumor", s.has_nonrumor},
          {"control", s.control},
          {"timing", s.timing == SynthTiming::Uniform ? "uniform" : "early"},
          {"horizon_hours", s.horizon_hours},
          {"early_fraction", s.early_fraction},
          {"comments_min", s.comments_min},
          {"comments_max", s.comments_max},
          {"comment_words_min", s.comment_words_min},
          {"comment_words_max", s.comment_words_max},
          {"reddit_fraction", s.reddit_fraction},
          {"start_time", s.start_time},
          {"span_days", s.span_days}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("synth spec: expected a JSON object");
  static const std::vector<std::string> known{"n_threads",     "seed",          "noise",           "amplitude",
                                              "has_nonrumor",  "control",       "timing",          "horizon_hours",
                                              "early_fraction", "comments_min", "comments_max",    "comment_words_min",
                                              "comment_words_max", "reddit_fraction", "start_time", "span_days"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw DataError("synth spec: unknown field '" + k + "'");
  SynthSpec s;
  try {
    s.n_threads = j.value("n_threads", s.n_threads);
    s.seed = j.value("seed", s.seed);
    s.noise = j.value("noise", s.noise);
    s.amplitude = j.value("amplitude", s.amplitude);
    s.has_nonrumor = j.value("has_nonrumor", s.has_nonrumor);
    s.control = j.value("control", s.control);
    const auto timing = j.value("timing", std::string("uniform"));
    if (timing != "uniform" && timing != "early") throw DataError("synth spec: timing must be uniform or early");
    s.timing = timing == "uniform" ? SynthTiming::Uniform : SynthTiming::Early;
    s.horizon_hours = j.value("horizon_hours", s.horizon_hours);
    s.early_fraction = j.value("early_fraction", s.early_fraction);
    s.comments_min = j.value("comments_min", s.comments_min);
    s.comments_max = j.value("comments_max", s.comments_max);
    s.comment_words_min = j.value("comment_words_min", s.comment_words_min);
    s.comment_words_max = j.value("comment_words_max", s.comment_words_max);
    s.reddit_fraction = j.value("reddit_fraction", s.reddit_fraction);
    s.start_time = j.value("start_time", s.start_time);
    s.span_days = j.value("span_days", s.span_days);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline double synth_profile(Verdict label, double tau, double a) {
  switch (label) {
    case Verdict::False: return a * (2.0 * tau - 1.0);
    case Verdict::True: return -a * (2.0 * tau - 1.0);
    case Verdict::Unverified: return a * (1.0 - 2.0 * std::abs(2.0 * tau - 1.0));
    case Verdict::NonRumor: return 0.0;
  }
  return 0.0;
}

namespace detail {

inline const std::vector<std::string>& neutral_words() {
  static const std::vector<std::string> words{
      "the",     "a",        "this",     "that",    "just",     "now",      "people",  "report",   "says",
      "police",  "city",     "video",    "photo",   "update",   "news",     "here",    "there",    "today",
      "tonight", "morning",  "street",   "official", "source",  "claims",   "story",   "media",    "twitter",
      "post",    "read",     "watch",    "see",     "think",    "know",     "really",  "still",    "more",
      "about",   "after",    "before",   "from",    "with",     "into",     "over",    "near",     "area",
      "local",   "group",    "team",     "account", "statement", "minister", "station", "building", "road",
      "car",     "train",    "plane",    "flight",  "crowd",    "square",   "office",  "paper",    "radio",
      "channel", "live",     "feed",     "thread",  "link",     "page",     "site",    "week",     "hour",
      "minute",  "second",   "time",     "day",     "night",    "year",     "number",  "list",     "name",
      "man",     "woman",    "child",    "family",  "friend",   "witness",  "reporter", "camera",  "phone",
      "message", "question", "answer",   "point",   "part",     "side",     "way",     "thing",    "place"};
  return words;
}

inline const std::vector<std::string>& event_names() {
  static const std::vector<std::string> names{"charliehebdo", "ferguson",     "germanwings-crash", "ottawashooting",
                                              "sydneysiege",  "putinmissing", "prince-toronto",    "gurlitt",
                                              "ebola-essien"};
  return names;
}

// Lexicon words chosen greedily (with random ties among close candidates) so
// that their valence sum approaches `target_sum`; at most `max_words`.
inline std::vector<std::string> pick_sentiment_words(double target_sum, std::size_t max_words, Rng& rng) {
  static const auto entries = [] {
    std::vector<std::pair<std::string, double>> e(default_lexicon().begin(), default_lexicon().end());
    std::sort(e.begin(), e.end());
    return e;
  }();
  std::vector<std::string> out;
  double sum = 0.0;
  while (out.size() < max_words) {
    const double gap = target_sum - sum;
    if (std::abs(gap) < 0.15) break;
    std::vector<std::size_t> fits;
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const double v = entries[k].second;
      if ((v > 0) == (gap > 0) && std::abs(v) <= std::abs(gap) + 0.15) fits.push_back(k);
    }
    if (fits.empty()) break;
    const auto& pick = entries[fits[rng.below(fits.size())]];
    out.push_back(pick.first);
    sum += pick.second;
  }
  return out;
}

// Text of `n_words` tokens whose lexicon score is close to `target`.
inline std::string text_for_score(double target, std::size_t n_words, Rng& rng, const std::string& lead = "") {
  const double clipped = std::clamp(target, 0.02, 0.98);
  std::size_t n_total = n_words + (lead.empty() ? 0 : word_tokens(lead).size());
  const double target_sum = std::atanh(2.0 * clipped - 1.0) * std::sqrt(1.0 + static_cast<double>(n_total));
  auto words = pick_sentiment_words(target_sum, n_words, rng);
  const auto& fill = neutral_words();
  while (words.size() < n_words) words.push_back(fill[rng.below(fill.size())]);
  rng.shuffle(words);
  std::string text = lead;
  for (const auto& w : words) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  return text;
}

}  // namespace detail

inline std::vector<Thread> generate_corpus(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t classes = spec.has_nonrumor ? 4 : 3;
  const double horizon = spec.timing == SynthTiming::Uniform ? spec.horizon_hours * 3600.0 : 3600.0;
  const double tail_end = std::max(spec.horizon_hours * 3600.0, 3601.0);
  std::vector<Thread> out;
  out.reserve(spec.n_threads);
  for (std::size_t k = 0; k < spec.n_threads; ++k) {
    Thread t;
    t.id = "syn" + std::to_string(spec.seed) + "-" + std::to_string(k);
    t.label = static_cast<Verdict>(k % classes);
    const auto& events = detail::event_names();
    t.event = events[rng.below(events.size())];
    t.platform = rng.uniform() < spec.reddit_fraction ? "reddit" : "twitter";
    const auto t0 = spec.start_time + static_cast<std::int64_t>(rng.uniform() * spec.span_days * 86400.0);
    const double si_source = rng.uniform(0.35, 0.65);
    const std::size_t n_src = 10 + rng.below(6);
    t.source = {t.id + "-s", detail::text_for_score(si_source, n_src, rng, "breaking :"), t0, std::nullopt};

    const std::size_t n_comments = spec.comments_min + rng.below(spec.comments_max - spec.comments_min + 1);
    std::vector<double> offsets(n_comments);
    for (double& dt : offsets) {
      if (spec.timing == SynthTiming::Uniform || rng.uniform() < spec.early_fraction)
        dt = rng.uniform() * horizon;
      else
        dt = 3600.0 + rng.uniform() * (tail_end - 3600.0);
    }
    std::sort(offsets.begin(), offsets.end());
    const Verdict shape = spec.control ? Verdict::NonRumor : t.label;
    for (std::size_t j = 0; j < n_comments; ++j) {
      const double tau = std::min(offsets[j] / horizon, 1.0);
      const double target = si_source + synth_profile(shape, tau, spec.amplitude) + spec.noise * rng.normal();
      const std::size_t n_words =
          spec.comment_words_min + rng.below(spec.comment_words_max - spec.comment_words_min + 1);
      t.comments.push_back({t.id + "-c" + std::to_string(j), detail::text_for_score(target, n_words, rng),
                            t0 + static_cast<std::int64_t>(offsets[j]), std::nullopt});
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace msuf

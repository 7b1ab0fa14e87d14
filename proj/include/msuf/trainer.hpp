#pragma once
// Training protocol, metrics, ablations, early-detection sweep and the
// generalization harness.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/affect_encoder.hpp"
#include "msuf/backbone.hpp"
#include "msuf/dual_stream.hpp"
#include "msuf/model.hpp"
#include "msuf/tensor/adamw.hpp"
#include "msuf/thread_store.hpp"

namespace msuf {

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> precision, recall, f1;
  std::vector<std::vector<std::size_t>> confusion;  // truth x prediction
};

// Class terms with a zero denominator count as 0 and stay in the mean.
inline Metrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& cm) {
  Metrics m;
  m.confusion = cm;
  const std::size_t k = cm.size();
  std::size_t total = 0, hit = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (cm[i].size() != k) throw ShapeError("metrics: confusion matrix must be square");
    for (std::size_t j = 0; j < k; ++j) total += cm[i][j];
    hit += cm[i][i];
  }
  m.accuracy = total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t i = 0; i < k; ++i) {
      predicted += cm[i][c];
      actual += cm[c][i];
    }
    const double p = predicted ? static_cast<double>(cm[c][c]) / static_cast<double>(predicted) : 0.0;
    const double r = actual ? static_cast<double>(cm[c][c]) / static_cast<double>(actual) : 0.0;
    m.precision.push_back(p);
    m.recall.push_back(r);
    m.f1.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    m.macro_precision += p / static_cast<double>(k);
    m.macro_recall += r / static_cast<double>(k);
    m.macro_f1 += m.f1.back() / static_cast<double>(k);
  }
  return m;
}

inline Metrics compute_metrics(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                               std::size_t classes) {
  if (truth.size() != pred.size()) throw ShapeError("metrics: truth and prediction lengths differ");
  std::vector<std::vector<std::size_t>> cm(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t n = 0; n < truth.size(); ++n) {
    if (truth[n] >= classes || pred[n] >= classes) throw ShapeError("metrics: label outside class range");
    ++cm[truth[n]][pred[n]];
  }
  return metrics_from_confusion(cm);
}

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},   {"macro_precision", m.macro_precision},
          {"macro_recall", m.macro_recall}, {"macro_f1", m.macro_f1},
          {"precision", m.precision}, {"recall", m.recall},
          {"f1", m.f1},               {"confusion", m.confusion}};
}

// ---------------------------------------------------------------------------
// Early stopping

// Stops once the score has failed to beat the best for `tolerance`
// consecutive epochs. Epochs count from 1.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t tolerance) : tolerance_(tolerance) {
    if (tolerance == 0) throw std::invalid_argument("early stopping: tolerance must be >= 1");
  }

  // Returns true when training should stop after this epoch.
  bool update(double score) {
    ++epoch_;
    if (score > best_) {
      best_ = score;
      best_epoch_ = epoch_;
      bad_ = 0;
      improved_ = true;
    } else {
      ++bad_;
      improved_ = false;
    }
    return bad_ >= tolerance_;
  }

  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t tolerance_;
  std::size_t epoch_ = 0, best_epoch_ = 0, bad_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

// ---------------------------------------------------------------------------
// Configuration

struct AblationFlags {
  bool no_semantic = false;
  bool no_sentiment = false;
  bool no_source_sentiment = false;
  bool comment_sentiment_only = false;
  bool no_time = false;
  bool no_align = false;
  bool align_first = false;
  bool align_only = false;
  bool no_aux = false;
  bool no_residual = false;
  bool full_unfrozen = false;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"no_semantic", "no_sentiment", "no_source_sentiment", "comment_sentiment_only",
                                            "no_time",     "no_align",     "align_first",         "align_only",
                                            "no_aux",      "no_residual",  "full_unfrozen"};
    return n;
  }

  bool& flag(const std::string& name) {
    static const std::vector<bool AblationFlags::*> members{
        &AblationFlags::no_semantic, &AblationFlags::no_sentiment, &AblationFlags::no_source_sentiment,
        &AblationFlags::comment_sentiment_only, &AblationFlags::no_time, &AblationFlags::no_align,
        &AblationFlags::align_first, &AblationFlags::align_only, &AblationFlags::no_aux,
        &AblationFlags::no_residual, &AblationFlags::full_unfrozen};
    const auto& n = names();
    const auto it = std::find(n.begin(), n.end(), name);
    if (it == n.end()) throw std::invalid_argument("unknown ablation flag '" + name + "'");
    return this->*members[static_cast<std::size_t>(it - n.begin())];
  }
  bool get(const std::string& name) const { return const_cast<AblationFlags*>(this)->flag(name); }

  std::vector<std::string> active() const {
    std::vector<std::string> out;
    for (const auto& n : names())
      if (get(n)) out.push_back(n);
    return out;
  }

  static AblationFlags from_names(const std::vector<std::string>& list) {
    AblationFlags f;
    for (const auto& n : list) f.flag(n) = true;
    f.validate();
    return f;
  }

  void validate() const {
    const int fusion = no_semantic + no_sentiment + no_source_sentiment + comment_sentiment_only;
    if (fusion > 1) throw std::invalid_argument("ablation: at most one of the feature-fusion flags may be set");
    variant().validate();
  }

  FusionMode fusion() const {
    if (no_semantic) return FusionMode::NoSemantic;
    if (no_sentiment) return FusionMode::NoSentiment;
    if (no_source_sentiment) return FusionMode::NoSourceSentiment;
    if (comment_sentiment_only) return FusionMode::CommentSentimentOnly;
    return FusionMode::Full;
  }

  ModelVariant variant() const { return {no_align, align_first, align_only, no_residual, full_unfrozen}; }

  bool operator==(const AblationFlags&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t early_stop_tolerance = 3;
  std::vector<double> lr_grid{1e-2, 1e-3, 1e-4};
  std::vector<std::size_t> batch_grid{4, 8, 16, 32};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  double lambda = 0.5;
  double weight_decay = 0.01;
  std::uint64_t shuffle_seed = 2024;  // no_time bucket permutation
  AblationFlags ablation;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("train config: epochs must be >= 1");
    if (early_stop_tolerance == 0) throw std::invalid_argument("train config: early_stop_tolerance must be >= 1");
    if (lr_grid.empty() || batch_grid.empty()) throw std::invalid_argument("train config: grids must be non-empty");
    for (double lr : lr_grid)
      if (!(lr > 0)) throw std::invalid_argument("train config: learning rates must be positive");
    for (auto bs : batch_grid)
      if (bs == 0) throw std::invalid_argument("train config: batch sizes must be positive");
    if (seeds.empty()) throw std::invalid_argument("train config: need at least one seed");
    if (!(lambda >= 0)) throw std::invalid_argument("train config: lambda must be >= 0");
    if (!(weight_decay >= 0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
    ablation.validate();
  }

  double effective_lambda() const { return ablation.no_aux ? 0.0 : lambda; }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"early_stop_tolerance", c.early_stop_tolerance},
          {"lr_grid", c.lr_grid},
          {"batch_grid", c.batch_grid},
          {"seeds", c.seeds},
          {"lambda", c.lambda},
          {"weight_decay", c.weight_decay},
          {"shuffle_seed", c.shuffle_seed},
          {"ablation", c.ablation.active()}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.early_stop_tolerance = j.value("early_stop_tolerance", c.early_stop_tolerance);
    c.lr_grid = j.value("lr_grid", c.lr_grid);
    c.batch_grid = j.value("batch_grid", c.batch_grid);
    c.seeds = j.value("seeds", c.seeds);
    c.lambda = j.value("lambda", c.lambda);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
    c.ablation = AblationFlags::from_names(j.value("ablation", std::vector<std::string>{}));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

inline const char* encoder_kind_name(EncoderKind k) {
  return k == EncoderKind::LexiconReference ? "lexicon" : "imported";
}

inline nlohmann::json encoder_config_json(const EncoderConfig& c) {
  nlohmann::json j{{"d_si", c.d_si}, {"d_sem", c.d_sem}, {"kind", encoder_kind_name(c.kind)}, {"seed", c.seed}};
  if (c.lexicon_path) j["lexicon_path"] = c.lexicon_path->string();
  if (c.import_path) j["import_path"] = c.import_path->string();
  return j;
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.d_si = j.value("d_si", c.d_si);
    c.d_sem = j.value("d_sem", c.d_sem);
    const auto kind = j.value("kind", std::string("lexicon"));
    if (kind != "lexicon" && kind != "imported") throw DataError("encoder config: kind must be lexicon or imported");
    c.kind = kind == "lexicon" ? EncoderKind::LexiconReference : EncoderKind::ImportedVectors;
    c.seed = j.value("seed", c.seed);
    if (j.contains("lexicon_path")) c.lexicon_path = j.at("lexicon_path").get<std::string>();
    if (j.contains("import_path")) c.import_path = j.at("import_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json binning_json(const BinningConfig& b) {
  return {{"interval_seconds", b.interval_seconds}, {"intervals", b.intervals}, {"d_dual", b.d_dual}};
}

inline BinningConfig binning_from_json(const nlohmann::json& j) {
  BinningConfig b;
  try {
    b.interval_seconds = j.value("interval_seconds", b.interval_seconds);
    b.intervals = j.value("intervals", b.intervals);
    b.d_dual = j.value("d_dual", b.d_dual);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("binning config: ") + e.what());
  }
  return b;
}

inline const char* fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::Full: return "full";
    case FusionMode::NoSemantic: return "no_semantic";
    case FusionMode::NoSentiment: return "no_sentiment";
    case FusionMode::NoSourceSentiment: return "no_source_sentiment";
    case FusionMode::CommentSentimentOnly: return "comment_sentiment_only";
  }
  return "?";
}

inline FusionMode parse_fusion(const std::string& s) {
  for (auto m : {FusionMode::Full, FusionMode::NoSemantic, FusionMode::NoSentiment, FusionMode::NoSourceSentiment,
                 FusionMode::CommentSentimentOnly})
    if (s == fusion_name(m)) return m;
  throw DataError("unknown fusion mode '" + s + "'");
}

// Everything a training job needs besides the corpus and the backbone.
struct PipelineConfig {
  EncoderConfig encoder;
  BinningConfig binning;
  ModelConfig model;  // intervals, d_dual, classes and variant are filled from the job
  TrainConfig train;
  std::optional<std::int64_t> cutoff_seconds;  // early detection; comments after it are dropped
  bool truncate_source = false;
};

// ---------------------------------------------------------------------------
// Data preparation

struct EncodedCorpus {
  std::vector<Thread> threads;
  std::vector<ThreadRecords> records;
  std::unordered_map<std::string, std::size_t> index;

  const Thread& thread(const std::string& id) const { return threads[at(id)]; }
  std::size_t at(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) throw DataError("unknown thread id '" + id + "'");
    return it->second;
  }
};

inline EncodedCorpus encode_corpus(const std::vector<Thread>& threads, const AffectEncoder& encoder) {
  EncodedCorpus c;
  c.threads = threads;
  c.records.reserve(threads.size());
  for (std::size_t k = 0; k < threads.size(); ++k) {
    if (!c.index.emplace(threads[k].id, k).second) throw DataError("encode: duplicate thread id '" + threads[k].id + "'");
    c.records.push_back(encoder.embed_messages(threads[k]));
  }
  return c;
}

struct FeatureOptions {
  FusionMode fusion = FusionMode::Full;
  std::optional<std::uint64_t> shuffle_seed;
  std::optional<std::int64_t> cutoff_seconds;
};

// Comments after the cutoff removed from the thread and its records.
inline std::pair<Thread, ThreadRecords> apply_cutoff(const Thread& t, const ThreadRecords& r,
                                                     std::optional<std::int64_t> cutoff) {
  if (!cutoff) return {t, r};
  Thread out = t;
  ThreadRecords rec;
  rec.source = r.source;
  out.comments.clear();
  for (std::size_t k = 0; k < t.comments.size(); ++k) {
    if (t.offset(k) > *cutoff) continue;
    out.comments.push_back(t.comments[k]);
    rec.comments.push_back(r.comments[k]);
  }
  return {out, rec};
}

inline IntervalAverage thread_average(const Thread& t, const ThreadRecords& r, const BinningConfig& cfg,
                                      const FeatureOptions& opts) {
  const auto [cut, rec] = apply_cutoff(t, r, opts.cutoff_seconds);
  const Matrix fused = fuse_rows(rec.source, rec.comments, opts.fusion);
  const std::size_t width = fused_width(r.source.e_si.size(), r.source.e_sem.size(), opts.fusion);
  if (cut.comments.empty()) return {Matrix(cfg.intervals, width), std::vector<std::size_t>(cfg.intervals, 0)};
  return average_intervals(fused, assign_intervals(cut, cfg, opts.shuffle_seed), cfg);
}

// PCA over the occupied interval rows of the training threads.
inline PcaModel fit_stream_pca(const std::vector<IntervalAverage>& train, std::size_t d_dual) {
  std::size_t n = 0, width = train.empty() ? 0 : train.front().e_ave.cols;
  for (const auto& a : train)
    for (auto o : a.occupancy) n += o > 0;
  Matrix rows(n, width);
  std::size_t at = 0;
  for (const auto& a : train)
    for (std::size_t k = 0; k < a.occupancy.size(); ++k)
      if (a.occupancy[k] > 0) {
        std::copy(a.e_ave.row(k).begin(), a.e_ave.row(k).end(), rows.row(at).begin());
        ++at;
      }
  return fit_pca(rows, d_dual);
}

// Source token ids, cut to fit the sequence budget when allowed.
inline std::vector<std::size_t> source_tokens(const Thread& t, const FrozenBackbone& backbone, std::size_t budget,
                                              bool truncate) {
  auto ids = backbone.tokenize(t.source.text);
  if (ids.empty()) ids.push_back(kEmptyToken);
  if (ids.size() > budget) {
    if (!truncate)
      throw ShapeError("thread '" + t.id + "': source has " + std::to_string(ids.size()) + " tokens but only " +
                       std::to_string(budget) + " fit after the prompt; rerun with --truncate");
    ids.resize(budget);
  }
  return ids;
}

inline Example make_example(const Thread& t, const ThreadRecords& r, const IntervalAverage& avg, const PcaModel& pca,
                            const FrozenBackbone& backbone, std::size_t budget, bool truncate) {
  Example ex;
  ex.id = t.id;
  ex.e_dual = build_stream(t, avg, pca).e_dual;
  ex.source_ids = source_tokens(t, backbone, budget, truncate);
  ex.e_word = backbone.embed_ids(ex.source_ids);
  ex.label = label_index(t.label);
  ex.si_target = r.source.si_score;
  return ex;
}

struct Dataset {
  PcaModel pca;
  std::vector<Example> train, validation, test;
};

// Longest source the model accepts: the whole window for align variants,
// the room left after the prompt for no_align.
inline std::size_t source_budget(const FrozenBackbone& backbone, const ModelConfig& mc) {
  const std::size_t max_seq = backbone.config().max_seq;
  if (!mc.variant.no_align) return max_seq;
  const auto main = backbone.tokenize(mc.main_prompt_text.value_or(main_prompt(mc.num_classes))).size();
  const auto aux = backbone.tokenize(mc.aux_prompt_text.value_or(kAuxPromptTemplate)).size();
  const std::size_t used = std::max(main, aux);
  return used >= max_seq ? 0 : max_seq - used;
}

inline Dataset prepare_dataset(const EncodedCorpus& corpus, const CorpusSplit& split, const BinningConfig& cfg,
                               const FeatureOptions& opts, const FrozenBackbone& backbone, const ModelConfig& mc,
                               bool truncate_source) {
  if (split.train.empty() || split.validation.empty() || split.test.empty())
    throw DataError("train: split has an empty train, validation or test part");
  auto averages = [&](const std::vector<std::string>& ids) {
    std::vector<IntervalAverage> out;
    for (const auto& id : ids) {
      const auto k = corpus.at(id);
      out.push_back(thread_average(corpus.threads[k], corpus.records[k], cfg, opts));
    }
    return out;
  };
  const auto train_avg = averages(split.train);
  Dataset d;
  d.pca = fit_stream_pca(train_avg, cfg.d_dual);
  const std::size_t budget = source_budget(backbone, mc);
  auto build = [&](const std::vector<std::string>& ids, const std::vector<IntervalAverage>& avg) {
    std::vector<Example> out;
    for (std::size_t n = 0; n < ids.size(); ++n) {
      const auto k = corpus.at(ids[n]);
      out.push_back(make_example(corpus.threads[k], corpus.records[k], avg[n], d.pca, backbone, budget, truncate_source));
    }
    return out;
  };
  d.train = build(split.train, train_avg);
  d.validation = build(split.validation, averages(split.validation));
  d.test = build(split.test, averages(split.test));
  return d;
}

// ---------------------------------------------------------------------------
// Fitting

inline std::size_t predict(const MsufModel& model, const Example& ex) {
  const auto out = model.forward(ex);
  const auto v = out.logits.data();
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline Metrics evaluate_examples(const MsufModel& model, const std::vector<Example>& examples) {
  std::vector<std::size_t> truth, pred;
  for (const auto& ex : examples) {
    truth.push_back(ex.label);
    pred.push_back(predict(model, ex));
  }
  return compute_metrics(truth, pred, model.config().num_classes);
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean loss_total over training threads
  double aux_loss = 0.0;    // mean lambda-weighted auxiliary term
  double validation_macro_f1 = 0.0;
};

struct FitResult {
  double lr = 0.0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<EpochLog> history;
  Metrics validation;
};

// One (lr, batch size, seed) cell: AdamW over the mean per-thread loss of
// each batch, validation after each epoch, best epoch restored at the end.
inline FitResult fit(MsufModel& model, const Dataset& data, double lr, std::size_t batch_size, std::uint64_t seed,
                     const TrainConfig& cfg) {
  if (data.train.empty()) throw DataError("train: empty training split");
  const double lambda = cfg.effective_lambda();
  tensor::AdamW opt(model.trainable_parameters(), {lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  EarlyStopper stopper(cfg.early_stop_tolerance);
  FitResult res{lr, batch_size, seed, 0, 0, {}, {}};
  std::vector<Matrix> best = model.snapshot();
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  Rng rng(mix64(seed ^ 0x5EEDF00Dull));
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const auto& ex = data.train[order[b]];
        const auto out = model.forward(ex);
        const auto loss = loss_total(out.logits, ex.label, out.score_aux, ex.si_target, lambda);
        const double d = out.score_aux.item() - ex.si_target;
        log.train_loss += loss.item();
        log.aux_loss += lambda * d * d;
        tensor::backward(tensor::scale(loss, inv));
      }
      opt.step();
    }
    log.train_loss /= static_cast<double>(order.size());
    log.aux_loss /= static_cast<double>(order.size());
    log.validation_macro_f1 = evaluate_examples(model, data.validation).macro_f1;
    res.history.push_back(log);
    const bool stop = stopper.update(log.validation_macro_f1);
    if (stopper.improved()) best = model.snapshot();
    res.epochs_run = epoch;
    if (stop) break;
  }
  model.restore(best);
  res.best_epoch = stopper.best_epoch();
  res.validation = evaluate_examples(model, data.validation);
  return res;
}

// ---------------------------------------------------------------------------
// Reports

struct GridCell {
  double lr = 0.0;
  std::size_t batch_size = 0;
  double validation_macro_f1 = 0.0;
  std::size_t best_epoch = 0;
};

struct SeedRun {
  FitResult fit;
  Metrics test;
  std::string backbone_hash_before;
  std::string backbone_hash_after;
  std::size_t sequence_length = 0;
};

struct AveragedMetrics {
  double accuracy = 0.0, macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
};

struct RunReport {
  std::string label;
  AblationFlags ablation;
  double lambda = 0.0;
  std::optional<std::int64_t> cutoff_seconds;
  std::vector<GridCell> grid;
  double best_lr = 0.0;
  std::size_t best_batch_size = 0;
  std::vector<SeedRun> seeds;
  AveragedMetrics average;
};

inline AveragedMetrics average_metrics(const std::vector<Metrics>& runs) {
  AveragedMetrics a;
  if (runs.empty()) return a;
  for (const auto& m : runs) {
    a.accuracy += m.accuracy;
    a.macro_precision += m.macro_precision;
    a.macro_recall += m.macro_recall;
    a.macro_f1 += m.macro_f1;
  }
  const double n = static_cast<double>(runs.size());
  a.accuracy /= n;
  a.macro_precision /= n;
  a.macro_recall /= n;
  a.macro_f1 /= n;
  return a;
}

inline nlohmann::json averaged_json(const AveragedMetrics& a) {
  return {{"accuracy", a.accuracy}, {"macro_precision", a.macro_precision}, {"macro_recall", a.macro_recall}, {"macro_f1", a.macro_f1}};
}

inline nlohmann::json report_json(const RunReport& r) {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& g : r.grid)
    grid.push_back({{"lr", g.lr}, {"batch_size", g.batch_size}, {"validation_macro_f1", g.validation_macro_f1}, {"best_epoch", g.best_epoch}});
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.seeds) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : s.fit.history)
      hist.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"aux_loss", h.aux_loss}, {"validation_macro_f1", h.validation_macro_f1}});
    seeds.push_back({{"seed", s.fit.seed},
                     {"best_epoch", s.fit.best_epoch},
                     {"epochs_run", s.fit.epochs_run},
                     {"history", hist},
                     {"validation", metrics_json(s.fit.validation)},
                     {"test", metrics_json(s.test)},
                     {"backbone_hash_before", s.backbone_hash_before},
                     {"backbone_hash_after", s.backbone_hash_after},
                     {"sequence_length", s.sequence_length}});
  }
  nlohmann::json j{{"label", r.label},
                   {"ablation", r.ablation.active()},
                   {"lambda", r.lambda},
                   {"grid", grid},
                   {"best_lr", r.best_lr},
                   {"best_batch_size", r.best_batch_size},
                   {"grid_search_seed", r.seeds.empty() ? 0 : r.seeds.front().fit.seed},
                   {"seeds", seeds},
                   {"average", averaged_json(r.average)}};
  j["cutoff_seconds"] = r.cutoff_seconds ? nlohmann::json(*r.cutoff_seconds) : nlohmann::json(nullptr);
  return j;
}

struct RunOutcome {
  RunReport report;
  std::vector<tensor::Checkpoint> checkpoints;  // one per seed
};

// Feature options implied by a pipeline configuration.
inline FeatureOptions feature_options(const PipelineConfig& p) {
  FeatureOptions f;
  f.fusion = p.train.ablation.fusion();
  if (p.train.ablation.no_time) f.shuffle_seed = p.train.shuffle_seed;
  f.cutoff_seconds = p.cutoff_seconds;
  return f;
}

inline nlohmann::json pipeline_meta(const PipelineConfig& p, const FeatureOptions& f, const PcaModel& pca) {
  nlohmann::json j{{"encoder", encoder_config_json(p.encoder)},
                   {"binning", binning_json(p.binning)},
                   {"fusion", fusion_name(f.fusion)},
                   {"truncate_source", p.truncate_source},
                   {"pca", pca_json(pca)},
                   {"train", train_config_json(p.train)}};
  j["shuffle_seed"] = f.shuffle_seed ? nlohmann::json(*f.shuffle_seed) : nlohmann::json(nullptr);
  j["cutoff_seconds"] = f.cutoff_seconds ? nlohmann::json(*f.cutoff_seconds) : nlohmann::json(nullptr);
  return j;
}

// Model configuration for a job: shapes from binning and corpus, graph
// variant from the ablation flags.
inline ModelConfig job_model_config(const PipelineConfig& p, std::size_t classes) {
  ModelConfig mc = p.model;
  mc.intervals = p.binning.intervals;
  mc.d_dual = p.binning.d_dual;
  mc.num_classes = classes;
  mc.variant = p.train.ablation.variant();
  return mc;
}

// Index of the cell with the highest validation macro-F1. Ties go to the
// lower lr, then the smaller batch.
inline std::size_t select_cell(const std::vector<GridCell>& grid) {
  if (grid.empty()) throw std::invalid_argument("select_cell: empty grid");
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const auto &a = grid[k], &b = grid[best];
    if (a.validation_macro_f1 != b.validation_macro_f1) {
      if (a.validation_macro_f1 > b.validation_macro_f1) best = k;
    } else if (a.lr != b.lr ? a.lr < b.lr : a.batch_size < b.batch_size) {
      best = k;
    }
  }
  return best;
}

// Grid search on the first seed, then every seed with the chosen cell.
inline RunOutcome train(const EncodedCorpus& corpus, const CorpusSplit& split, const PipelineConfig& p,
                        const FrozenBackbone& backbone, const std::string& label = "") {
  p.train.validate();
  const FeatureOptions feats = feature_options(p);
  std::size_t classes = 3;
  for (const auto& part : {&split.train, &split.validation, &split.test})
    for (const auto& id : *part)
      if (corpus.thread(id).label == Verdict::NonRumor) classes = 4;
  ModelConfig mc = job_model_config(p, classes);
  p.binning.validate(fused_width(p.encoder.d_si, p.encoder.d_sem, feats.fusion));
  const Dataset data = prepare_dataset(corpus, split, p.binning, feats, backbone, mc, p.truncate_source);

  RunOutcome out;
  RunReport& r = out.report;
  r.label = label;
  r.ablation = p.train.ablation;
  r.lambda = p.train.effective_lambda();
  r.cutoff_seconds = p.cutoff_seconds;
  auto make_model = [&](std::uint64_t seed) {
    ModelConfig c = mc;
    c.init_seed = seed;
    return std::make_unique<MsufModel>(backbone, c);
  };

  const std::uint64_t search_seed = p.train.seeds.front();
  std::vector<std::pair<std::unique_ptr<MsufModel>, FitResult>> cells;
  for (double lr : p.train.lr_grid)
    for (std::size_t bs : p.train.batch_grid) {
      auto model = make_model(search_seed);
      auto res = fit(*model, data, lr, bs, search_seed, p.train);
      r.grid.push_back({lr, bs, res.validation.macro_f1, res.best_epoch});
      cells.emplace_back(std::move(model), std::move(res));
    }
  auto& chosen = cells[select_cell(r.grid)];
  for (auto& c : cells)
    if (&c != &chosen) c.first.reset();
  r.best_lr = chosen.second.lr;
  r.best_batch_size = chosen.second.batch_size;

  std::vector<Metrics> tests;
  for (std::uint64_t seed : p.train.seeds) {
    SeedRun run;
    std::unique_ptr<MsufModel> model;
    if (seed == search_seed && chosen.first) {
      model = std::move(chosen.first);
      run.fit = chosen.second;
    } else {
      model = make_model(seed);
      run.fit = fit(*model, data, r.best_lr, r.best_batch_size, seed, p.train);
    }
    run.backbone_hash_before = backbone.weights_hash();
    run.backbone_hash_after = model->backbone().weights_hash();
    run.test = evaluate_examples(*model, data.test);
    run.sequence_length = model->forward(data.test.front()).sequence_length;
    tests.push_back(run.test);
    nlohmann::json meta{{"pipeline", pipeline_meta(p, feats, data.pca)},
                        {"seed", seed},
                        {"lr", r.best_lr},
                        {"batch_size", r.best_batch_size}};
    out.checkpoints.push_back(model->to_checkpoint(meta));
    r.seeds.push_back(std::move(run));
  }
  r.average = average_metrics(tests);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation from a checkpoint

struct LoadedModel {
  std::unique_ptr<MsufModel> model;
  PipelineConfig pipeline;
  FeatureOptions features;
  PcaModel pca;
};

inline LoadedModel load_model(const tensor::Checkpoint& ckpt) {
  try {
    const auto& meta = ckpt.meta;
    if (!meta.contains("model_config") || !meta.contains("backbone_config") || !meta.contains("pipeline"))
      throw DataError("checkpoint is not a trained model");
    FrozenBackbone backbone(backbone_config_from_json(meta.at("backbone_config")));
    backbone.load_arrays(ckpt);
    LoadedModel m;
    const auto& pj = meta.at("pipeline");
    m.pipeline.encoder = encoder_config_from_json(pj.at("encoder"));
    m.pipeline.binning = binning_from_json(pj.at("binning"));
    m.pipeline.truncate_source = pj.value("truncate_source", false);
    m.pipeline.train = train_config_from_json(pj.at("train"));
    m.features.fusion = parse_fusion(pj.at("fusion").get<std::string>());
    if (!pj.at("shuffle_seed").is_null()) m.features.shuffle_seed = pj.at("shuffle_seed").get<std::uint64_t>();
    if (!pj.at("cutoff_seconds").is_null()) m.features.cutoff_seconds = pj.at("cutoff_seconds").get<std::int64_t>();
    m.pipeline.cutoff_seconds = m.features.cutoff_seconds;
    m.pca = pca_from_json(pj.at("pca"));
    auto mc = model_config_from_json(meta.at("model_config"));
    mc.main_prompt_text = meta.at("main_prompt").get<std::string>();
    mc.aux_prompt_text = meta.at("aux_prompt").get<std::string>();
    m.pipeline.model = mc;
    m.model = std::make_unique<MsufModel>(backbone, mc);
    m.model->load_parameters(ckpt);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint meta: ") + e.what());
  }
}

inline Metrics evaluate(const LoadedModel& m, const std::vector<Thread>& threads, const AffectEncoder& encoder) {
  if (threads.empty()) throw DataError("evaluate: no threads");
  const auto classes = m.model->config().num_classes;
  for (const auto& t : threads)
    if (label_index(t.label) >= classes)
      throw DataError("evaluate: thread '" + t.id + "' has label " + std::to_string(label_index(t.label)) +
                      " but the checkpoint has " + std::to_string(classes) + " classes");
  const std::size_t budget = source_budget(m.model->backbone(), m.model->config());
  std::vector<Example> examples;
  for (const auto& t : threads) {
    const auto rec = encoder.embed_messages(t);
    const auto avg = thread_average(t, rec, m.pipeline.binning, m.features);
    examples.push_back(make_example(t, rec, avg, m.pca, m.model->backbone(), budget, m.pipeline.truncate_source));
  }
  return evaluate_examples(*m.model, examples);
}

// ---------------------------------------------------------------------------
// Ablation, early detection, lambda sweep

inline RunOutcome ablate(const EncodedCorpus& corpus, const CorpusSplit& split, PipelineConfig p,
                         const std::vector<std::string>& flags, const FrozenBackbone& backbone) {
  p.train.ablation = AblationFlags::from_names(flags);
  std::string label;
  for (const auto& f : flags) label += (label.empty() ? "" : "+") + f;
  return train(corpus, split, p, backbone, label.empty() ? "full" : label);
}

inline std::vector<std::optional<std::int64_t>> default_cutoffs() {
  return {0, 3600, 6 * 3600, 12 * 3600, 18 * 3600, 24 * 3600, std::nullopt};
}

struct CutoffResult {
  std::optional<std::int64_t> cutoff_seconds;
  RunReport report;
};

// Cutoff 0 is the no_align variant: no comment information at all.
inline PipelineConfig cutoff_pipeline(PipelineConfig p, std::optional<std::int64_t> cutoff) {
  if (cutoff && *cutoff < 0) throw std::invalid_argument("early detection: cutoff must be >= 0");
  if (cutoff && *cutoff == 0) {
    p.train.ablation.no_align = true;
    p.train.ablation.align_first = p.train.ablation.align_only = false;
    p.cutoff_seconds.reset();
  } else {
    p.cutoff_seconds = cutoff;
  }
  return p;
}

inline std::vector<CutoffResult> early_detection_sweep(const EncodedCorpus& corpus, const CorpusSplit& split,
                                                       const PipelineConfig& p, const FrozenBackbone& backbone,
                                                       const std::vector<std::optional<std::int64_t>>& cutoffs) {
  std::vector<CutoffResult> out;
  for (const auto& c : cutoffs) {
    const auto label = c ? "cutoff_" + std::to_string(*c) : std::string("cutoff_inf");
    auto run = train(corpus, split, cutoff_pipeline(p, c), backbone, label);
    run.report.cutoff_seconds = c;
    out.push_back({c, std::move(run.report)});
  }
  return out;
}

inline std::string cutoff_csv(const std::vector<CutoffResult>& results) {
  std::ostringstream out;
  out.precision(17);
  out << "cutoff_seconds,accuracy,macro_f1\n";
  for (const auto& r : results) {
    if (r.cutoff_seconds)
      out << *r.cutoff_seconds;
    else
      out << "inf";
    out << ',' << r.report.average.accuracy << ',' << r.report.average.macro_f1 << '\n';
  }
  return out.str();
}

struct LambdaResult {
  double lambda = 0.0;
  RunReport report;
};

inline std::vector<double> default_lambdas() { return {0.0, 0.2, 0.5, 0.8, 1.0}; }

inline std::vector<LambdaResult> lambda_sweep(const EncodedCorpus& corpus, const CorpusSplit& split, PipelineConfig p,
                                              const FrozenBackbone& backbone, const std::vector<double>& lambdas) {
  std::vector<LambdaResult> out;
  p.train.ablation.no_aux = false;
  for (double l : lambdas) {
    p.train.lambda = l;
    std::ostringstream name;
    name << "lambda_" << l;
    out.push_back({l, train(corpus, split, p, backbone, name.str()).report});
  }
  return out;
}

inline std::string lambda_csv(const std::vector<LambdaResult>& results) {
  std::ostringstream out;
  out.precision(17);
  out << "lambda,accuracy,macro_precision,macro_recall,macro_f1\n";
  for (const auto& r : results) {
    const auto& a = r.report.average;
    out << r.lambda << ',' << a.accuracy << ',' << a.macro_precision << ',' << a.macro_recall << ',' << a.macro_f1 << '\n';
  }
  return out.str();
}

// Largest absolute difference between the metric fields of two reports'
// seed runs; infinity when their shapes differ.
inline double report_distance(const RunReport& a, const RunReport& b) {
  if (a.seeds.size() != b.seeds.size()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  auto cmp = [&](double x, double y) { d = std::max(d, std::abs(x - y)); };
  for (std::size_t s = 0; s < a.seeds.size(); ++s) {
    const auto &x = a.seeds[s], &y = b.seeds[s];
    if (x.fit.history.size() != y.fit.history.size()) return std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < x.fit.history.size(); ++e) {
      cmp(x.fit.history[e].train_loss, y.fit.history[e].train_loss);
      cmp(x.fit.history[e].validation_macro_f1, y.fit.history[e].validation_macro_f1);
    }
    cmp(x.test.accuracy, y.test.accuracy);
    cmp(x.test.macro_precision, y.test.macro_precision);
    cmp(x.test.macro_recall, y.test.macro_recall);
    cmp(x.test.macro_f1, y.test.macro_f1);
  }
  cmp(a.average.macro_f1, b.average.macro_f1);
  cmp(a.average.accuracy, b.average.accuracy);
  return d;
}

// ---------------------------------------------------------------------------
// Generalization

struct NamedCorpus {
  std::string id;
  std::vector<Thread> threads;
};

struct GeneralizationResult {
  std::string setting;
  CorpusSplit split;
  std::optional<RunReport> report;
  std::string skipped;  // reason when the setting could not run
};

// DifEvents, DifPlats and TimeSplit on the primary corpus; CrossDatas
// trains on the primary corpus and tests on the second one when given.
inline std::vector<GeneralizationResult> generalization_suite(const NamedCorpus& primary, const NamedCorpus* secondary,
                                                              const PipelineConfig& p, const FrozenBackbone& backbone,
                                                              const AffectEncoder& encoder, SplitOptions opts) {
  std::vector<GeneralizationResult> out;
  const auto main_enc = encode_corpus(primary.threads, encoder);
  const std::pair<const char*, SplitStrategy> settings[] = {{"DifEvents", SplitStrategy::EventHoldout},
                                                            {"DifPlats", SplitStrategy::PlatformHoldout},
                                                            {"TimeSplit", SplitStrategy::TimeOrdered}};
  for (const auto& [name, strategy] : settings) {
    opts.strategy = strategy;
    GeneralizationResult g;
    g.setting = name;
    g.split = split(primary.threads, opts);
    if (g.split.validation.empty()) throw DataError(std::string(name) + ": validation part is empty");
    g.report = train(main_enc, g.split, p, backbone, name).report;
    out.push_back(std::move(g));
  }
  GeneralizationResult cross;
  cross.setting = "CrossDatas";
  if (!secondary) {
    cross.skipped = "no second corpus";
  } else {
    if (secondary->id == primary.id) throw DataError("CrossDatas: train and test corpora share the id '" + primary.id + "'");
    cross.split = split_cross_corpus(primary.threads, secondary->threads, opts.seed);
    auto all = primary.threads;
    all.insert(all.end(), secondary->threads.begin(), secondary->threads.end());
    cross.report = train(encode_corpus(all, encoder), cross.split, p, backbone, "CrossDatas").report;
  }
  out.push_back(std::move(cross));
  return out;
}

inline std::string generalization_csv(const std::vector<GeneralizationResult>& results) {
  std::ostringstream out;
  out.precision(17);
  out << "setting,train,validation,test,accuracy,macro_precision,macro_recall,macro_f1\n";
  for (const auto& g : results) {
    out << g.setting << ',' << g.split.train.size() << ',' << g.split.validation.size() << ',' << g.split.test.size();
    if (g.report) {
      const auto& a = g.report->average;
      out << ',' << a.accuracy << ',' << a.macro_precision << ',' << a.macro_recall << ',' << a.macro_f1 << '\n';
    } else {
      out << ",,,,\n";
    }
  }
  return out.str();
}

}  // namespace msuf

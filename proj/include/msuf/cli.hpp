#pragma once
// Command-line jobs. Every job reads a JSON config (all fields optional),
// applies flag overrides, writes its outputs under one run directory and
// finishes with manifest.json, which is enough to replay the job.
//
//   msuf ingest        --corpus c.jsonl --out dir
//   msuf analyze all   --corpus c.jsonl --out dir
//   msuf train         --config cfg.json --corpus c.jsonl --out dir
//   msuf eval          --checkpoint dir/model_seed1.ckpt --corpus c.jsonl --out dir
//   msuf ablate        --variants full,no_time,no_sentiment+no_aux ...
//   msuf early-detect  --cutoffs 0,3600,inf ...
//   msuf generalize    --corpus a.jsonl --corpus b.jsonl ...
//   msuf lambda-sweep  --lambdas 0,0.2,0.5 ...
//   msuf gen-synth     --threads 600 --noise 0.1 --out dir
//   msuf replay        --manifest dir/manifest.json --out dir2
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error.

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "msuf/affect_encoder.hpp"
#include "msuf/backbone.hpp"
#include "msuf/core/hash.hpp"
#include "msuf/stats.hpp"
#include "msuf/synth.hpp"
#include "msuf/thread_store.hpp"
#include "msuf/trainer.hpp"

namespace msuf::cli {

inline constexpr const char* kToolName = "msuf";
inline constexpr const char* kToolVersion = "1.0.0";

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Job configuration

struct SplitConfig {
  SplitOptions options;
  bool seed_set = false;                       // otherwise the job seed is used
  std::optional<std::array<std::size_t, 3>> sizes;  // train/validation/test counts
  std::optional<fs::path> file;
};

struct JobConfig {
  std::string command;
  std::vector<fs::path> corpora;
  fs::path out = "run";
  std::uint64_t seed = 2020;
  SplitConfig split;
  EncoderConfig encoder;
  BinningConfig binning;
  BackboneConfig backbone;
  std::optional<fs::path> backbone_checkpoint;
  ModelConfig model;
  TrainConfig train;
  std::optional<std::int64_t> cutoff_seconds;
  bool truncate_source = false;
  std::vector<std::optional<std::int64_t>> cutoffs = default_cutoffs();
  std::vector<double> lambdas = default_lambdas();
  std::vector<std::vector<std::string>> variants{{}, {"no_sentiment"}, {"no_time"}, {"no_align"}};
  SynthSpec synth;
  bool synth_seed_set = false;
  std::string analysis = "all";
  std::optional<fs::path> checkpoint;
};

namespace detail {

inline json opt_path(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); }

inline std::optional<fs::path> path_or_null(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return fs::path(j.at(key).get<std::string>());
}

inline json cutoff_json(const std::optional<std::int64_t>& c) { return c ? json(*c) : json("inf"); }

inline std::optional<std::int64_t> cutoff_from(const json& j) {
  if (j.is_null() || (j.is_string() && j.get<std::string>() == "inf")) return std::nullopt;
  if (j.is_number_integer()) return j.get<std::int64_t>();
  throw DataError("config: cutoffs must be integers (seconds) or \"inf\"");
}

inline std::optional<std::int64_t> parse_cutoff(const std::string& s) {
  if (s == "inf" || s == "infinity") return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoll(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("cutoff '" + s + "' is neither a non-negative integer nor inf");
  }
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

inline void check_keys(const json& j, const std::vector<std::string>& known, const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw DataError(where + ": unknown field '" + k + "'");
}

}  // namespace detail

// The seed written is the one in effect, so a reloaded config is self-contained.
inline json split_config_json(const SplitConfig& s, std::uint64_t job_seed) {
  json j{{"strategy", strategy_name(s.options.strategy)},
         {"seed", s.seed_set ? s.options.seed : job_seed},
         {"test_events", s.options.test_events},
         {"validation_events", s.options.validation_events},
         {"test_platform", s.options.test_platform},
         {"time_k", s.options.time_k}};
  j["sizes"] = s.sizes ? json(std::vector<std::size_t>(s.sizes->begin(), s.sizes->end())) : json(nullptr);
  j["file"] = detail::opt_path(s.file);
  return j;
}

inline json job_config_json(const JobConfig& c) {
  json variants = json::array();
  for (const auto& v : c.variants) variants.push_back(v);
  json cutoffs = json::array();
  for (const auto& x : c.cutoffs) cutoffs.push_back(detail::cutoff_json(x));
  std::vector<std::string> corpora;
  for (const auto& p : c.corpora) corpora.push_back(p.string());
  SynthSpec synth = c.synth;
  if (!c.synth_seed_set) synth.seed = c.seed;
  json j{{"command", c.command},
         {"corpus", corpora},
         {"out", c.out.string()},
         {"seed", c.seed},
         {"split", split_config_json(c.split, c.seed)},
         {"encoder", encoder_config_json(c.encoder)},
         {"binning", binning_json(c.binning)},
         {"backbone", backbone_config_json(c.backbone)},
         {"backbone_checkpoint", detail::opt_path(c.backbone_checkpoint)},
         {"model", model_config_json(c.model)},
         {"train", train_config_json(c.train)},
         {"truncate_source", c.truncate_source},
         {"cutoffs", cutoffs},
         {"lambdas", c.lambdas},
         {"variants", variants},
         {"synth", synth_spec_json(synth)},
         {"analysis", c.analysis},
         {"checkpoint", detail::opt_path(c.checkpoint)}};
  j["cutoff_seconds"] = c.cutoff_seconds ? json(*c.cutoff_seconds) : json(nullptr);
  return j;
}

// Missing fields keep their defaults.
inline JobConfig job_config_from_json(const json& j) {
  if (!j.is_object()) throw DataError("config: expected a JSON object");
  detail::check_keys(j,
                     {"command", "corpus", "out", "seed", "split", "encoder", "binning", "backbone", "backbone_checkpoint",
                      "model", "train", "truncate_source", "cutoffs", "lambdas", "variants", "synth", "analysis",
                      "checkpoint", "cutoff_seconds"},
                     "config");
  JobConfig c;
  try {
    c.command = j.value("command", c.command);
    if (j.contains("corpus")) {
      const auto& v = j.at("corpus");
      if (v.is_string())
        c.corpora = {v.get<std::string>()};
      else
        for (const auto& p : v) c.corpora.push_back(p.get<std::string>());
    }
    c.out = j.value("out", c.out.string());
    c.seed = j.value("seed", c.seed);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      detail::check_keys(s, {"strategy", "seed", "test_events", "validation_events", "test_platform", "time_k", "sizes", "file"},
                         "config.split");
      auto& o = c.split.options;
      if (s.contains("strategy")) o.strategy = parse_strategy(s.at("strategy").get<std::string>());
      if (s.contains("seed")) {
        o.seed = s.at("seed").get<std::uint64_t>();
        c.split.seed_set = true;
      }
      o.test_events = s.value("test_events", o.test_events);
      o.validation_events = s.value("validation_events", o.validation_events);
      o.test_platform = s.value("test_platform", o.test_platform);
      o.time_k = s.value("time_k", o.time_k);
      if (s.contains("sizes") && !s.at("sizes").is_null()) {
        const auto v = s.at("sizes").get<std::vector<std::size_t>>();
        if (v.size() != 3) throw DataError("config.split.sizes: expected [train, validation, test]");
        c.split.sizes = std::array<std::size_t, 3>{v[0], v[1], v[2]};
      }
      c.split.file = detail::path_or_null(s, "file");
    }
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("binning")) c.binning = binning_from_json(j.at("binning"));
    if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
    c.backbone_checkpoint = detail::path_or_null(j, "backbone_checkpoint");
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    c.truncate_source = j.value("truncate_source", c.truncate_source);
    if (j.contains("cutoff_seconds") && !j.at("cutoff_seconds").is_null()) c.cutoff_seconds = j.at("cutoff_seconds").get<std::int64_t>();
    if (j.contains("cutoffs")) {
      c.cutoffs.clear();
      for (const auto& x : j.at("cutoffs")) c.cutoffs.push_back(detail::cutoff_from(x));
    }
    c.lambdas = j.value("lambdas", c.lambdas);
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(v.get<std::vector<std::string>>());
    }
    if (j.contains("synth")) {
      c.synth = synth_spec_from_json(j.at("synth"));
      c.synth_seed_set = j.at("synth").contains("seed");
    }
    c.analysis = j.value("analysis", c.analysis);
    c.checkpoint = detail::path_or_null(j, "checkpoint");
  } catch (const json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Output plumbing

inline void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << bytes;
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void log_line(const std::string& msg) { std::cerr << "[" << kToolName << "] " << msg << '\n'; }

class RunDir {
 public:
  explicit RunDir(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw DataError("cannot create output directory " + dir_.string());
  }

  const fs::path& path() const { return dir_; }

  void write(const std::string& name, const std::string& bytes) {
    write_atomic(dir_ / name, bytes);
    outputs_[name] = sha256_hex(bytes);
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
  void write_checkpoint(const std::string& name, const tensor::Checkpoint& c) { write(name, tensor::serialize_checkpoint(c)); }

  const std::map<std::string, std::string>& outputs() const { return outputs_; }

 private:
  fs::path dir_;
  std::map<std::string, std::string> outputs_;
};

// Inputs read by a job, with their hashes at job start.
class InputLog {
 public:
  std::string read(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw DataError(what + " not found: " + p.string());
    auto bytes = read_file_bytes(p);
    hashes_[fs::absolute(p).lexically_normal().string()] = sha256_hex(bytes);
    return bytes;
  }
  void note(const fs::path& p, const std::string& what) { read(p, what); }
  const std::map<std::string, std::string>& hashes() const { return hashes_; }

 private:
  std::map<std::string, std::string> hashes_;
};

// ---------------------------------------------------------------------------
// Shared job steps

inline std::vector<Thread> load_corpus(const fs::path& p, InputLog& inputs) {
  std::istringstream in(inputs.read(p, "corpus"));
  auto report = parse_corpus_stream(in);
  for (const auto& w : report.warnings) log_line(p.filename().string() + ": " + w);
  auto threads = preprocess(report.threads);
  if (threads.empty()) throw DataError("corpus " + p.string() + " has no thread with comments");
  return threads;
}

inline std::vector<Thread> primary_corpus(const JobConfig& c, InputLog& inputs) {
  if (c.corpora.empty()) throw std::invalid_argument(c.command + ": --corpus is required");
  return load_corpus(c.corpora.front(), inputs);
}

inline AffectEncoder make_encoder(const JobConfig& c, InputLog& inputs) {
  if (c.encoder.lexicon_path) inputs.note(*c.encoder.lexicon_path, "lexicon");
  if (c.encoder.import_path) inputs.note(*c.encoder.import_path, "imported vectors");
  AffectEncoder enc(c.encoder);
  for (const auto& w : enc.warnings()) log_line("lexicon: " + w);
  return enc;
}

inline FrozenBackbone make_backbone(const JobConfig& c, InputLog& inputs) {
  if (c.backbone_checkpoint) {
    inputs.note(*c.backbone_checkpoint, "backbone checkpoint");
    return FrozenBackbone::load(*c.backbone_checkpoint);
  }
  return FrozenBackbone(c.backbone);
}

// Seeded shuffle, then the first n_train / n_val / n_test ids.
inline CorpusSplit sized_split(const std::vector<Thread>& threads, std::uint64_t seed, const std::array<std::size_t, 3>& n) {
  if (n[0] + n[1] + n[2] > threads.size())
    throw DataError("split sizes " + std::to_string(n[0]) + "/" + std::to_string(n[1]) + "/" + std::to_string(n[2]) +
                    " exceed the corpus of " + std::to_string(threads.size()) + " threads");
  std::vector<std::string> ids;
  for (const auto& t : threads) ids.push_back(t.id);
  Rng rng(seed);
  rng.shuffle(ids);
  CorpusSplit s;
  s.strategy = SplitStrategy::Random2020;
  s.seed = seed;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n[0]));
  s.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n[0]), ids.begin() + static_cast<std::ptrdiff_t>(n[0] + n[1]));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n[0] + n[1]),
                ids.begin() + static_cast<std::ptrdiff_t>(n[0] + n[1] + n[2]));
  return s;
}

inline SplitOptions effective_split_options(const JobConfig& c) {
  SplitOptions o = c.split.options;
  if (!c.split.seed_set) o.seed = c.seed;
  return o;
}

inline CorpusSplit make_split(const JobConfig& c, const std::vector<Thread>& threads, InputLog& inputs) {
  if (c.split.file) return split_from_json(json::parse(inputs.read(*c.split.file, "split file"), nullptr, true, true));
  const auto opts = effective_split_options(c);
  if (c.split.sizes) return sized_split(threads, opts.seed, *c.split.sizes);
  return split(threads, opts);
}

inline PipelineConfig pipeline_of(const JobConfig& c) {
  PipelineConfig p;
  p.encoder = c.encoder;
  p.binning = c.binning;
  p.model = c.model;
  p.train = c.train;
  p.cutoff_seconds = c.cutoff_seconds;
  p.truncate_source = c.truncate_source;
  return p;
}

inline std::string metrics_row(const std::string& name, double acc, double p, double r, double f1) {
  std::ostringstream out;
  out.precision(17);
  out << name << ',' << acc << ',' << p << ',' << r << ',' << f1 << '\n';
  return out.str();
}

inline std::string report_metrics_csv(const RunReport& r) {
  std::string out = "run,accuracy,macro_precision,macro_recall,macro_f1\n";
  for (const auto& s : r.seeds)
    out += metrics_row("seed" + std::to_string(s.fit.seed), s.test.accuracy, s.test.macro_precision, s.test.macro_recall, s.test.macro_f1);
  const auto& a = r.average;
  out += metrics_row("mean", a.accuracy, a.macro_precision, a.macro_recall, a.macro_f1);
  return out;
}

inline std::string variant_name(const std::vector<std::string>& flags) {
  std::string s;
  for (const auto& f : flags) s += (s.empty() ? "" : "+") + f;
  return s.empty() ? "full" : s;
}

// ---------------------------------------------------------------------------
// Jobs

inline void job_ingest(const JobConfig& c, RunDir& out, InputLog& inputs) {
  if (c.corpora.empty()) throw std::invalid_argument("ingest: --corpus is required");
  std::istringstream in(inputs.read(c.corpora.front(), "corpus"));
  const auto parsed = parse_corpus_stream(in);
  const auto threads = preprocess(parsed.threads);
  std::map<std::string, std::size_t> labels, events, platforms;
  std::size_t comments = 0;
  for (const auto& t : threads) {
    ++labels[verdict_name(t.label)];
    ++events[t.event.empty() ? "(none)" : t.event];
    ++platforms[t.platform.empty() ? "(none)" : t.platform];
    comments += t.comments.size();
  }
  json report{{"threads_read", parsed.threads.size()},
              {"threads_kept", threads.size()},
              {"comments", comments},
              {"clamped_comments", parsed.clamped_comments},
              {"warnings", parsed.warnings},
              {"classes", threads.empty() ? 0 : class_count(threads)},
              {"labels", labels},
              {"events", events},
              {"platforms", platforms}};
  out.write("corpus.jsonl", to_jsonl(threads));
  if (!threads.empty()) {
    try {
      out.write_json("split.json", split_json(make_split(c, threads, inputs)));
    } catch (const DataError& e) {
      report["split_error"] = e.what();
    }
  }
  out.write_json("report.json", report);
}

inline json chi_json(const ContingencyTable& t) {
  json j{{"rows", t.row_labels.size()}, {"cols", t.col_labels.size()}, {"total", t.total()}, {"testable", t.testable()}};
  if (!t.testable()) return j;
  const auto r = chi_squared(t);
  j.update({{"statistic", r.statistic},
            {"dof", r.dof},
            {"p_value", r.p_value},
            {"log10_p", r.log10_p},
            {"underflow", r.underflow},
            {"dropped_rows", r.dropped_rows},
            {"dropped_cols", r.dropped_cols}});
  return j;
}

inline void job_analyze(const JobConfig& c, RunDir& out, InputLog& inputs) {
  const auto kind = c.analysis;
  if (kind != "all" && kind != "chi2" && kind != "trend" && kind != "histogram")
    throw std::invalid_argument("analyze: kind must be chi2, trend, histogram or all");
  const auto threads = primary_corpus(c, inputs);
  const auto enc = make_encoder(c, inputs);
  std::vector<ThreadRecords> records;
  for (const auto& t : threads) records.push_back(enc.embed_messages(t));
  const auto signals = sign_signals(threads, records, c.binning);
  json report{{"threads", threads.size()}, {"binning", binning_json(c.binning)}};
  if (kind == "all" || kind == "chi2") {
    const auto full = build_contingency(threads, signals, c.binning.intervals, ContingencyLayout::IntervalSign);
    const auto collapsed = build_contingency(threads, signals, c.binning.intervals, ContingencyLayout::Collapsed);
    out.write("contingency_interval_sign.csv", contingency_csv(full));
    out.write("contingency_collapsed.csv", contingency_csv(collapsed));
    report["chi2"] = {{"interval_sign", chi_json(full)}, {"collapsed", chi_json(collapsed)}};
    if (!full.testable()) log_line("analyze: contingency table is untestable (fewer than two non-empty rows or columns)");
  }
  if (kind == "all" || kind == "trend") out.write("trend.csv", trend_csv(trend_series(threads, signals, c.binning)));
  if (kind == "all" || kind == "histogram") out.write("histogram.csv", histogram_csv(interval_histogram(threads, c.binning)));
  out.write_json("report.json", report);
}

inline void job_train(const JobConfig& c, RunDir& out, InputLog& inputs) {
  const auto threads = primary_corpus(c, inputs);
  const auto enc = make_encoder(c, inputs);
  const auto backbone = make_backbone(c, inputs);
  const auto split = make_split(c, threads, inputs);
  const auto corpus = encode_corpus(threads, enc);
  const auto hash_before = backbone.weights_hash();
  log_line("train: " + std::to_string(split.train.size()) + "/" + std::to_string(split.validation.size()) + "/" +
           std::to_string(split.test.size()) + " threads, " + std::to_string(c.train.lr_grid.size() * c.train.batch_grid.size()) +
           " grid cells, " + std::to_string(c.train.seeds.size()) + " seeds");
  const auto run = train(corpus, split, pipeline_of(c), backbone, variant_name(c.train.ablation.active()));
  if (backbone.weights_hash() != hash_before) throw std::logic_error("train: backbone weights changed");
  out.write_json("split.json", split_json(split));
  out.write_checkpoint("backbone.ckpt", backbone.to_checkpoint());
  for (std::size_t k = 0; k < run.checkpoints.size(); ++k)
    out.write_checkpoint("model_seed" + std::to_string(run.report.seeds[k].fit.seed) + ".ckpt", run.checkpoints[k]);
  auto report = report_json(run.report);
  report["backbone_hash"] = hash_before;
  out.write_json("report.json", report);
  out.write("metrics.csv", report_metrics_csv(run.report));
  log_line("train: mean test macro-F1 " + std::to_string(run.report.average.macro_f1));
}

inline void job_eval(const JobConfig& c, RunDir& out, InputLog& inputs) {
  if (!c.checkpoint) throw std::invalid_argument("eval: --checkpoint is required");
  const auto threads = primary_corpus(c, inputs);
  const auto ckpt = tensor::deserialize_checkpoint(inputs.read(*c.checkpoint, "checkpoint"));
  const auto loaded = load_model(ckpt);
  JobConfig enc_cfg = c;
  enc_cfg.encoder = loaded.pipeline.encoder;
  const auto enc = make_encoder(enc_cfg, inputs);
  const auto m = evaluate(loaded, threads, enc);
  out.write_json("report.json", {{"threads", threads.size()}, {"metrics", metrics_json(m)}});
  out.write("metrics.csv", "run,accuracy,macro_precision,macro_recall,macro_f1\n" +
                               metrics_row("eval", m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1));
}

inline void job_ablate(const JobConfig& c, RunDir& out, InputLog& inputs) {
  if (c.variants.empty()) throw std::invalid_argument("ablate: no variants given");
  for (const auto& v : c.variants) AblationFlags::from_names(v);
  const auto threads = primary_corpus(c, inputs);
  const auto enc = make_encoder(c, inputs);
  const auto backbone = make_backbone(c, inputs);
  const auto split = make_split(c, threads, inputs);
  const auto corpus = encode_corpus(threads, enc);
  json reports = json::array();
  std::string csv = "variant,accuracy,macro_precision,macro_recall,macro_f1\n";
  for (const auto& v : c.variants) {
    log_line("ablate: " + variant_name(v));
    const auto run = ablate(corpus, split, pipeline_of(c), v, backbone);
    reports.push_back(report_json(run.report));
    const auto& a = run.report.average;
    csv += metrics_row(variant_name(v), a.accuracy, a.macro_precision, a.macro_recall, a.macro_f1);
  }
  out.write_json("split.json", split_json(split));
  out.write_json("report.json", {{"variants", reports}});
  out.write("metrics.csv", csv);
}

inline void job_early_detect(const JobConfig& c, RunDir& out, InputLog& inputs) {
  if (c.cutoffs.empty()) throw std::invalid_argument("early-detect: no cutoffs given");
  const auto threads = primary_corpus(c, inputs);
  const auto enc = make_encoder(c, inputs);
  const auto backbone = make_backbone(c, inputs);
  const auto split = make_split(c, threads, inputs);
  const auto corpus = encode_corpus(threads, enc);
  const auto results = early_detection_sweep(corpus, split, pipeline_of(c), backbone, c.cutoffs);
  json reports = json::array();
  for (const auto& r : results) reports.push_back(report_json(r.report));
  out.write_json("split.json", split_json(split));
  out.write_json("report.json", {{"cutoffs", reports}});
  out.write("early_detection.csv", cutoff_csv(results));
  out.write("metrics.csv", cutoff_csv(results));
}

inline void job_lambda_sweep(const JobConfig& c, RunDir& out, InputLog& inputs) {
  if (c.lambdas.empty()) throw std::invalid_argument("lambda-sweep: no lambdas given");
  const auto threads = primary_corpus(c, inputs);
  const auto enc = make_encoder(c, inputs);
  const auto backbone = make_backbone(c, inputs);
  const auto split = make_split(c, threads, inputs);
  const auto corpus = encode_corpus(threads, enc);
  const auto p = pipeline_of(c);
  const auto results = lambda_sweep(corpus, split, p, backbone, c.lambdas);
  json reports = json::array();
  for (const auto& r : results) reports.push_back(report_json(r.report));
  json report{{"lambdas", reports}};
  // The lambda = 0 run against the no_aux ablation.
  for (const auto& r : results)
    if (r.lambda == 0.0) {
      const auto no_aux = ablate(corpus, split, p, {"no_aux"}, backbone);
      report["no_aux"] = report_json(no_aux.report);
      report["no_aux_max_difference"] = report_distance(r.report, no_aux.report);
      break;
    }
  out.write_json("split.json", split_json(split));
  out.write_json("report.json", report);
  out.write("lambda.csv", lambda_csv(results));
  out.write("metrics.csv", lambda_csv(results));
}

inline void job_generalize(const JobConfig& c, RunDir& out, InputLog& inputs) {
  const auto threads = primary_corpus(c, inputs);
  const auto enc = make_encoder(c, inputs);
  const auto backbone = make_backbone(c, inputs);
  const NamedCorpus primary{c.corpora.front().string(), threads};
  std::optional<NamedCorpus> second;
  if (c.corpora.size() > 1) second = NamedCorpus{c.corpora[1].string(), load_corpus(c.corpora[1], inputs)};
  const auto results = generalization_suite(primary, second ? &*second : nullptr, pipeline_of(c), backbone, enc,
                                            effective_split_options(c));
  json reports = json::array();
  for (const auto& g : results) {
    json j{{"setting", g.setting}, {"split", split_json(g.split)}};
    if (g.report) j["report"] = report_json(*g.report);
    if (!g.skipped.empty()) j["skipped"] = g.skipped;
    reports.push_back(j);
  }
  out.write_json("report.json", {{"settings", reports}});
  out.write("generalization.csv", generalization_csv(results));
  out.write("metrics.csv", generalization_csv(results));
}

inline void job_gen_synth(const JobConfig& c, RunDir& out, InputLog&) {
  SynthSpec s = c.synth;
  if (!c.synth_seed_set) s.seed = c.seed;
  const auto threads = generate_corpus(s);
  out.write("corpus.jsonl", to_jsonl(threads));
  out.write_json("report.json", {{"spec", synth_spec_json(s)}, {"threads", threads.size()}});
}

using JobFn = void (*)(const JobConfig&, RunDir&, InputLog&);

inline const std::map<std::string, JobFn>& jobs() {
  static const std::map<std::string, JobFn> table{{"ingest", job_ingest},         {"analyze", job_analyze},
                                                  {"train", job_train},           {"eval", job_eval},
                                                  {"ablate", job_ablate},         {"early-detect", job_early_detect},
                                                  {"generalize", job_generalize}, {"lambda-sweep", job_lambda_sweep},
                                                  {"gen-synth", job_gen_synth}};
  return table;
}

// Runs one job and writes manifest.json last.
inline json execute(const JobConfig& c) {
  const auto it = jobs().find(c.command);
  if (it == jobs().end()) throw std::invalid_argument("unknown command '" + c.command + "'");
  c.train.validate();
  const auto start = std::chrono::steady_clock::now();
  RunDir out(c.out);
  InputLog inputs;
  it->second(c, out, inputs);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json manifest{{"tool", kToolName},
                {"version", kToolVersion},
                {"command", c.command},
                {"config", job_config_json(c)},
                {"inputs", inputs.hashes()},
                {"outputs", out.outputs()},
                {"wall_time_seconds", wall}};
  write_atomic(out.path() / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

// Re-runs a manifest's job into `out_dir` and compares every output hash.
inline json replay(const fs::path& manifest_path, const fs::path& out_dir) {
  if (!fs::exists(manifest_path)) throw DataError("manifest not found: " + manifest_path.string());
  json old;
  try {
    old = json::parse(read_file_bytes(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!old.contains("config") || !old.contains("outputs")) throw DataError("manifest " + manifest_path.string() + " is incomplete");
  const json old_inputs = old.value("inputs", json::object());
  for (const auto& [path, hash] : old_inputs.items()) {
    if (!fs::exists(path)) throw DataError("replay: input " + path + " no longer exists");
    if (sha256_file(path) != hash.get<std::string>()) throw DataError("replay: input " + path + " changed since the original run");
  }
  auto cfg = job_config_from_json(old.at("config"));
  cfg.out = out_dir;
  const auto fresh = execute(cfg);
  json diff = json::array();
  for (const auto& [name, hash] : old.at("outputs").items()) {
    const auto& now = fresh.at("outputs");
    if (!now.contains(name))
      diff.push_back({{"file", name}, {"reason", "missing"}});
    else if (now.at(name) != hash)
      diff.push_back({{"file", name}, {"reason", "hash differs"}});
  }
  for (const auto& [name, hash] : fresh.at("outputs").items())
    if (!old.at("outputs").contains(name)) diff.push_back({{"file", name}, {"reason", "extra"}});
  json result{{"manifest", manifest_path.string()}, {"identical", diff.empty()}, {"differences", diff},
              {"outputs", fresh.at("outputs")}};
  write_atomic(out_dir / "replay.json", result.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Argument parsing

struct Overrides {
  std::string config;
  std::vector<std::string> corpora;
  std::string out, split_file, checkpoint, manifest, spec, backbone_checkpoint, lexicon;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, tolerance, threads;
  std::optional<double> lambda, noise, amplitude;
  std::vector<double> lr, lambdas;
  std::vector<std::size_t> batch, split_sizes;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> ablation, variants, cutoffs;
  std::optional<std::int64_t> cutoff;
  std::string strategy, timing, kind;
  bool truncate = false, nonrumor = false, control = false;
};

inline void add_common(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config, "JSON job configuration");
  app.add_option("--corpus", o.corpora, "JSON-lines corpus (repeatable)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--seed", o.seed, "job seed (split and generator)");
  app.add_option("--split-file", o.split_file, "explicit split JSON");
  app.add_option("--split-strategy", o.strategy, "random2020|event_holdout|platform_holdout|time_ordered");
  app.add_option("--split-sizes", o.split_sizes, "train validation test counts")->expected(3);
  app.add_option("--lexicon", o.lexicon, "lexicon TSV for the sentiment scorer");
  app.add_option("--backbone", o.backbone_checkpoint, "frozen backbone checkpoint");
}

inline void add_training(CLI::App& app, Overrides& o) {
  app.add_option("--epochs", o.epochs);
  app.add_option("--tolerance", o.tolerance, "early-stopping tolerance");
  app.add_option("--lambda", o.lambda, "auxiliary loss weight");
  app.add_option("--lr", o.lr, "learning-rate grid")->delimiter(',');
  app.add_option("--batch", o.batch, "batch-size grid")->delimiter(',');
  app.add_option("--seeds", o.seeds, "training seeds")->delimiter(',');
  app.add_option("--ablation", o.ablation, "ablation flags")->delimiter(',');
  app.add_option("--cutoff", o.cutoff, "drop comments later than this many seconds");
  app.add_flag("--truncate", o.truncate, "cut over-long sources to fit the sequence window");
}

inline JobConfig resolve(const std::string& command, const Overrides& o) {
  JobConfig c;
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw DataError("config not found: " + o.config);
    json j;
    try {
      j = json::parse(read_file_bytes(o.config), nullptr, true, true);
    } catch (const json::exception& e) {
      throw DataError("config " + o.config + ": " + e.what());
    }
    c = job_config_from_json(j);
  }
  c.command = command;
  auto abs = [](const std::string& p) { return fs::absolute(p).lexically_normal(); };
  if (!o.corpora.empty()) {
    c.corpora.clear();
    for (const auto& p : o.corpora) c.corpora.push_back(abs(p));
  } else {
    for (auto& p : c.corpora) p = abs(p.string());
  }
  if (!o.out.empty()) c.out = o.out;
  if (o.seed) c.seed = *o.seed;
  if (!o.split_file.empty()) c.split.file = abs(o.split_file);
  if (!o.strategy.empty()) c.split.options.strategy = parse_strategy(o.strategy);
  if (!o.split_sizes.empty()) c.split.sizes = std::array<std::size_t, 3>{o.split_sizes[0], o.split_sizes[1], o.split_sizes[2]};
  if (!o.lexicon.empty()) c.encoder.lexicon_path = abs(o.lexicon);
  if (!o.backbone_checkpoint.empty()) c.backbone_checkpoint = abs(o.backbone_checkpoint);
  if (!o.checkpoint.empty()) c.checkpoint = abs(o.checkpoint);
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.tolerance) c.train.early_stop_tolerance = *o.tolerance;
  if (o.lambda) c.train.lambda = *o.lambda;
  if (!o.lr.empty()) c.train.lr_grid = o.lr;
  if (!o.batch.empty()) c.train.batch_grid = o.batch;
  if (!o.seeds.empty()) c.train.seeds = o.seeds;
  if (!o.ablation.empty()) c.train.ablation = AblationFlags::from_names(o.ablation);
  if (o.cutoff) c.cutoff_seconds = *o.cutoff;
  if (o.truncate) c.truncate_source = true;
  if (!o.lambdas.empty()) c.lambdas = o.lambdas;
  if (!o.variants.empty()) {
    c.variants.clear();
    for (const auto& v : o.variants) c.variants.push_back(v == "full" ? std::vector<std::string>{} : detail::split_on(v, '+'));
  }
  if (!o.cutoffs.empty()) {
    c.cutoffs.clear();
    for (const auto& s : o.cutoffs) c.cutoffs.push_back(detail::parse_cutoff(s));
  }
  if (!o.spec.empty()) {
    if (!fs::exists(o.spec)) throw DataError("synth spec not found: " + o.spec);
    try {
      const auto j = json::parse(read_file_bytes(o.spec));
      c.synth = synth_spec_from_json(j);
      c.synth_seed_set = j.contains("seed");
    } catch (const json::exception& e) {
      throw DataError("synth spec " + o.spec + ": " + e.what());
    }
  }
  if (o.threads) c.synth.n_threads = *o.threads;
  if (o.noise) c.synth.noise = *o.noise;
  if (o.amplitude) c.synth.amplitude = *o.amplitude;
  if (o.nonrumor) c.synth.has_nonrumor = true;
  if (o.control) c.synth.control = true;
  if (!o.timing.empty()) {
    if (o.timing != "uniform" && o.timing != "early") throw std::invalid_argument("--timing must be uniform or early");
    c.synth.timing = o.timing == "uniform" ? SynthTiming::Uniform : SynthTiming::Early;
  }
  if (!o.kind.empty()) c.analysis = o.kind;
  c.encoder.validate();
  c.backbone.validate();
  c.train.validate();
  if (command == "gen-synth") c.synth.validate();
  return c;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Rumor detection from temporal dual sentiment with suffix learning around a frozen backbone", kToolName};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  Overrides o;
  std::map<std::string, CLI::App*> subs;
  auto sub = [&](const std::string& name, const std::string& help) {
    auto* s = app.add_subcommand(name, help);
    add_common(*s, o);
    subs[name] = s;
    return s;
  };
  sub("ingest", "parse, clean and split a corpus");
  auto* analyze = sub("analyze", "chi-squared test, trend series and comment histogram");
  analyze->add_option("kind", o.kind, "chi2|trend|histogram|all");
  for (const char* name : {"train", "ablate", "early-detect", "generalize", "lambda-sweep"}) add_training(*sub(name, ""), o);
  subs["train"]->description("grid search, early stopping, seed-averaged report and checkpoints");
  subs["ablate"]->description("train each ablation variant");
  subs["ablate"]->add_option("--variants", o.variants, "variants: full or '+'-joined flags")->delimiter(',');
  subs["early-detect"]->description("train at each comment cutoff");
  subs["early-detect"]->add_option("--cutoffs", o.cutoffs, "seconds, or inf")->delimiter(',');
  subs["generalize"]->description("cross-event, cross-platform, cross-corpus and time-ordered settings");
  subs["lambda-sweep"]->description("train at each auxiliary loss weight");
  subs["lambda-sweep"]->add_option("--lambdas", o.lambdas)->delimiter(',');
  auto* eval = sub("eval", "score a checkpoint on a corpus");
  eval->add_option("--checkpoint", o.checkpoint)->required();
  auto* gen = sub("gen-synth", "write a synthetic corpus");
  gen->add_option("--spec", o.spec, "generator spec JSON");
  gen->add_option("--threads", o.threads);
  gen->add_option("--noise", o.noise);
  gen->add_option("--amplitude", o.amplitude);
  gen->add_option("--timing", o.timing, "uniform|early");
  gen->add_flag("--nonrumor", o.nonrumor, "include the non-rumour category");
  gen->add_flag("--control", o.control, "sign distribution independent of category");
  auto* rep = app.add_subcommand("replay", "re-run a job from its manifest and compare output hashes");
  rep->add_option("--manifest", o.manifest)->required();
  rep->add_option("--out", o.out)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << kToolName << ": " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (rep->parsed()) {
      const auto r = replay(o.manifest, o.out);
      out << (r.at("identical").get<bool>() ? "identical" : "DIFFERENT") << '\n';
      return r.at("identical").get<bool>() ? 0 : 2;
    }
    std::string command;
    for (const auto& [name, s] : subs)
      if (s->parsed()) command = name;
    const auto manifest = execute(resolve(command, o));
    out << (fs::path(manifest.at("config").at("out").get<std::string>()) / "manifest.json").string() << '\n';
    return 0;
  } catch (const DataError& e) {
    err << kToolName << ": " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    err << kToolName << ": " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    err << kToolName << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << kToolName << ": " << e.what() << '\n';
    return 2;
  }
}

inline int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace msuf::cli

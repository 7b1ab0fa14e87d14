#pragma once
// Per-message sentiment intensity (SI) and embeddings.
//
// Two encoders sit behind one interface:
//  - LexiconReference: a deterministic lexicon scorer plus seeded feature maps.
//  - ImportedVectors: precomputed vectors keyed by message id, the bridge for
//    outputs of external sentiment/semantic models.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/core/errors.hpp"
#include "msuf/core/hash.hpp"
#include "msuf/core/matrix.hpp"
#include "msuf/core/random.hpp"
#include "msuf/core/text.hpp"
#include "msuf/thread_store.hpp"

namespace msuf {

using Lexicon = std::unordered_map<std::string, double>;

// Small built-in valence table, used when no lexicon file is given.
inline const Lexicon& default_lexicon() {
  static const Lexicon lex = {
      {"good", 0.6},       {"great", 0.8},     {"love", 0.8},     {"happy", 0.7},   {"hope", 0.5},
      {"safe", 0.5},       {"glad", 0.6},      {"thanks", 0.4},   {"relief", 0.6},  {"wonderful", 0.9},
      {"excellent", 0.9},  {"brave", 0.5},     {"support", 0.4},  {"calm", 0.3},    {"nice", 0.5},
      {"awesome", 0.8},    {"proud", 0.6},     {"amazing", 0.8},  {"best", 0.7},    {"beautiful", 0.7},
      {"bad", -0.6},       {"terrible", -0.9}, {"hate", -0.8},    {"sad", -0.6},    {"fear", -0.6},
      {"awful", -0.8},     {"angry", -0.7},    {"wrong", -0.5},   {"worst", -0.9},  {"horrible", -0.9},
      {"scary", -0.6},     {"shame", -0.6},    {"tragic", -0.8},  {"disgusting", -0.9},
      {"fake", -0.5},      {"lie", -0.6},      {"panic", -0.7},   {"worried", -0.5}, {"sick", -0.5},
      {"dead", -0.7},
  };
  return lex;
}

struct LexiconLoad {
  Lexicon lexicon;
  std::vector<std::string> warnings;
};

// TSV `token<TAB>valence`, valence in [-1, 1]. Tokens are lowercased; a
// repeated token keeps the last value and records a warning.
inline LexiconLoad load_lexicon_stream(std::istream& in) {
  LexiconLoad out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("lexicon line " + std::to_string(n) + ": expected token<TAB>valence");
    const std::string token = lowercase(line.substr(0, tab));
    const std::string value = line.substr(tab + 1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size() || token.empty())
      throw DataError("lexicon line " + std::to_string(n) + ": non-numeric valence '" + value + "'");
    if (!(v >= -1.0 && v <= 1.0))
      throw DataError("lexicon line " + std::to_string(n) + ": valence " + value + " outside [-1, 1]");
    if (out.lexicon.count(token)) out.warnings.push_back("lexicon line " + std::to_string(n) + ": duplicate token '" + token + "'");
    out.lexicon[token] = v;
  }
  return out;
}

inline LexiconLoad load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open lexicon " + path.string());
  return load_lexicon_stream(in);
}

// 0.5 + 0.5 tanh(sum of valences / sqrt(1 + token count)), clipped to [0, 1].
inline double score_si(std::string_view text, const Lexicon& lexicon) {
  const auto tokens = word_tokens(text);
  double total = 0.0;
  for (const auto& t : tokens)
    if (auto it = lexicon.find(t); it != lexicon.end()) total += it->second;
  const double s = 0.5 + 0.5 * std::tanh(total / std::sqrt(1.0 + static_cast<double>(tokens.size())));
  return std::clamp(s, 0.0, 1.0);
}

enum class EncoderKind { LexiconReference, ImportedVectors };

struct EncoderConfig {
  std::size_t d_si = 32;
  std::size_t d_sem = 16;
  EncoderKind kind = EncoderKind::LexiconReference;
  std::optional<std::filesystem::path> lexicon_path;
  std::optional<std::filesystem::path> import_path;
  std::uint64_t seed = 17;

  void validate() const {
    if (d_si < 1 || d_sem < 1) throw ShapeError("encoder: d_si and d_sem must be >= 1");
    if (kind == EncoderKind::ImportedVectors && !import_path)
      throw DataError("encoder: imported-vectors mode needs an import path");
  }
};

struct SentimentRecord {
  std::string message_id;
  double si_score = 0.5;
  std::vector<double> e_si;
  std::vector<double> e_sem;

  bool operator==(const SentimentRecord&) const = default;
};

struct ThreadRecords {
  SentimentRecord source;
  std::vector<SentimentRecord> comments;
};

// Number of scalar features behind e_si.
inline constexpr std::size_t kSiFeatures = 5;

class AffectEncoder {
 public:
  explicit AffectEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.kind == EncoderKind::LexiconReference) {
      if (cfg_.lexicon_path) {
        auto loaded = load_lexicon(*cfg_.lexicon_path);
        lexicon_ = std::move(loaded.lexicon);
        warnings_ = std::move(loaded.warnings);
      } else {
        lexicon_ = default_lexicon();
      }
      Rng rng(cfg_.seed);
      projection_ = Matrix(cfg_.d_si, kSiFeatures);
      for (double& v : projection_.data) v = rng.normal();
    } else {
      load_imports(*cfg_.import_path);
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  const Lexicon& lexicon() const { return lexicon_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  double score(std::string_view text) const { return score_si(text, lexicon_); }

  SentimentRecord encode(const Message& m) const {
    if (cfg_.kind == EncoderKind::ImportedVectors) {
      auto it = imported_.find(m.id);
      if (it == imported_.end()) throw DataError("imported vectors: no entry for message id '" + m.id + "'");
      return it->second;
    }
    return encode_text(m.id, m.text);
  }

  // (si_score, mean valence, max valence, min valence, hit rate); valence
  // statistics are 0 when no token is in the lexicon.
  std::array<double, kSiFeatures> si_features(std::string_view text) const {
    const auto tokens = word_tokens(text);
    double sum = 0.0, mx = -1.0, mn = 1.0;
    std::size_t hits = 0;
    for (const auto& t : tokens) {
      if (auto it = lexicon_.find(t); it != lexicon_.end()) {
        sum += it->second;
        mx = std::max(mx, it->second);
        mn = std::min(mn, it->second);
        ++hits;
      }
    }
    if (hits == 0) mx = mn = 0.0;
    const double rate = tokens.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(tokens.size());
    return {score_si(text, lexicon_), hits ? sum / static_cast<double>(hits) : 0.0, mx, mn, rate};
  }

  SentimentRecord encode_text(const std::string& id, std::string_view text) const {
    SentimentRecord r;
    r.message_id = id;
    const auto f = si_features(text);
    r.si_score = f[0];
    r.e_si.assign(cfg_.d_si, 0.0);
    for (std::size_t i = 0; i < cfg_.d_si; ++i)
      for (std::size_t j = 0; j < kSiFeatures; ++j) r.e_si[i] += projection_(i, j) * f[j];

    // Signed feature hashing of token frequencies.
    r.e_sem.assign(cfg_.d_sem, 0.0);
    const auto tokens = word_tokens(text);
    for (const auto& t : tokens) {
      const std::uint64_t h = mix64(fnv1a64(t, cfg_.seed));
      const double sign = (h >> 63) ? -1.0 : 1.0;
      r.e_sem[(h & 0xFFFFFFFFu) % cfg_.d_sem] += sign;
    }
    if (!tokens.empty())
      for (double& v : r.e_sem) v /= static_cast<double>(tokens.size());
    return r;
  }

  ThreadRecords embed_messages(const Thread& t) const {
    ThreadRecords out;
    out.source = encode(t.source);
    out.comments.reserve(t.comments.size());
    for (const auto& c : t.comments) out.comments.push_back(encode(c));
    return out;
  }

 private:
  void load_imports(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open imported vectors " + path.string());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      SentimentRecord r;
      try {
        const auto j = nlohmann::json::parse(line);
        r.message_id = j.at("id").get<std::string>();
        r.si_score = j.at("si").get<double>();
        r.e_si = j.at("e_si").get<std::vector<double>>();
        r.e_sem = j.at("e_sem").get<std::vector<double>>();
      } catch (const nlohmann::json::exception& e) {
        throw DataError("imported vectors line " + std::to_string(n) + ": " + e.what());
      }
      const auto where = "imported vectors line " + std::to_string(n) + ": ";
      if (!(r.si_score >= 0.0 && r.si_score <= 1.0)) throw DataError(where + "si outside [0, 1]");
      if (r.e_si.size() != cfg_.d_si || r.e_sem.size() != cfg_.d_sem)
        throw DataError(where + "vector widths " + std::to_string(r.e_si.size()) + "/" + std::to_string(r.e_sem.size()) +
                        " do not match d_si/d_sem " + std::to_string(cfg_.d_si) + "/" + std::to_string(cfg_.d_sem));
      if (!all_finite(r.e_si) || !all_finite(r.e_sem)) throw DataError(where + "non-finite vector entry");
      imported_[r.message_id] = std::move(r);
    }
  }

  EncoderConfig cfg_;
  Lexicon lexicon_;
  Matrix projection_;
  std::vector<std::string> warnings_;
  std::unordered_map<std::string, SentimentRecord> imported_;
};

// JSON-lines `{"id", "si", "e_si", "e_sem"}`, readable by ImportedVectors mode.
inline void export_vectors(const std::filesystem::path& path, const std::vector<SentimentRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write vectors " + path.string());
  for (const auto& r : records) {
    out << nlohmann::json{{"id", r.message_id}, {"si", r.si_score}, {"e_si", r.e_si}, {"e_sem", r.e_sem}}.dump() << '\n';
  }
}

}  // namespace msuf

#pragma once
// The frozen language model: hash-bucket tokenizer, token and absolute
// position tables, and a pre-norm causal transformer whose weights never
// receive updates. Gradients still flow through it to its input.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/core/errors.hpp"
#include "msuf/core/hash.hpp"
#include "msuf/core/random.hpp"
#include "msuf/core/text.hpp"
#include "msuf/tensor/checkpoint.hpp"
#include "msuf/tensor/ops.hpp"

namespace msuf {

struct BackboneConfig {
  std::size_t vocab_size = 512;
  std::size_t d_llm = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq = 256;
  std::uint64_t init_seed = 7;
  double embed_std = 1.0;
  double position_std = 0.1;
  double weight_std = 0.02;

  void validate() const {
    if (vocab_size < 2) throw ShapeError("backbone: vocab_size must be >= 2");
    if (d_llm == 0 || n_heads == 0 || d_llm % n_heads != 0)
      throw ShapeError("backbone: d_llm " + std::to_string(d_llm) + " not divisible by n_heads " + std::to_string(n_heads));
    if (n_layers == 0) throw ShapeError("backbone: need at least one layer");
    if (max_seq == 0) throw ShapeError("backbone: max_seq must be positive");
  }

  bool operator==(const BackboneConfig&) const = default;
};

inline nlohmann::json backbone_config_json(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_llm", c.d_llm},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"max_seq", c.max_seq},     {"init_seed", c.init_seed},
          {"embed_std", c.embed_std},   {"position_std", c.position_std}, {"weight_std", c.weight_std}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_llm = j.value("d_llm", c.d_llm);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.embed_std = j.value("embed_std", c.embed_std);
  c.position_std = j.value("position_std", c.position_std);
  c.weight_std = j.value("weight_std", c.weight_std);
  c.validate();
  return c;
}

inline constexpr std::size_t kEmptyToken = 0;

class FrozenBackbone {
 public:
  using Tensor = tensor::Tensor;

  // Keys and values of a fixed leading block, per layer, plus its final
  // outputs. Lets a forward over [prefix; suffix] process only the suffix.
  struct PrefixState {
    std::size_t length = 0;
    std::vector<Tensor> keys;    // per layer, length x d_llm
    std::vector<Tensor> values;  // per layer, length x d_llm
    Tensor output;               // length x d_llm
  };

  explicit FrozenBackbone(BackboneConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const std::size_t d = cfg_.d_llm;
    wte_ = make("wte", cfg_.vocab_size, d, rng, cfg_.embed_std);
    wpe_ = make("wpe", cfg_.max_seq, d, rng, cfg_.position_std);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      Layer L;
      L.ln1_g = fill(p + "ln1.g", 1, d, 1.0);
      L.ln1_b = fill(p + "ln1.b", 1, d, 0.0);
      L.wq = make(p + "attn.wq", d, d, rng, cfg_.weight_std);
      L.wk = make(p + "attn.wk", d, d, rng, cfg_.weight_std);
      L.wv = make(p + "attn.wv", d, d, rng, cfg_.weight_std);
      L.bq = fill(p + "attn.bq", 1, d, 0.0);
      L.bk = fill(p + "attn.bk", 1, d, 0.0);
      L.bv = fill(p + "attn.bv", 1, d, 0.0);
      L.wo = make(p + "attn.wo", d, d, rng, cfg_.weight_std);
      L.bo = fill(p + "attn.bo", 1, d, 0.0);
      L.ln2_g = fill(p + "ln2.g", 1, d, 1.0);
      L.ln2_b = fill(p + "ln2.b", 1, d, 0.0);
      L.w1 = make(p + "mlp.w1", d, 4 * d, rng, cfg_.weight_std);
      L.b1 = fill(p + "mlp.b1", 1, 4 * d, 0.0);
      L.w2 = make(p + "mlp.w2", 4 * d, d, rng, cfg_.weight_std);
      L.b2 = fill(p + "mlp.b2", 1, d, 0.0);
      layers_.push_back(L);
    }
    lnf_g_ = fill("ln_f.g", 1, d, 1.0);
    lnf_b_ = fill("ln_f.b", 1, d, 0.0);
  }

  const BackboneConfig& config() const { return cfg_; }

  // Lowercased word/punctuation tokens hashed into ids 1..vocab-1; id 0 is
  // the [EMPTY] token emitted for text without tokens.
  std::vector<std::size_t> tokenize(std::string_view text) const {
    std::vector<std::size_t> ids;
    for (const auto& t : word_punct_tokens(text)) ids.push_back(1 + fnv1a64(t) % (cfg_.vocab_size - 1));
    if (ids.empty()) ids.push_back(kEmptyToken);
    return ids;
  }

  // Token rows plus absolute positions start_pos, start_pos+1, ...
  Tensor embed_ids(const std::vector<std::size_t>& ids, std::size_t start_pos = 0) const {
    if (ids.empty()) throw ShapeError("embed: empty id list");
    if (start_pos + ids.size() > cfg_.max_seq)
      throw ShapeError("embed: " + std::to_string(start_pos + ids.size()) + " positions exceed max_seq " +
                       std::to_string(cfg_.max_seq) + "; shorten the text or enable --truncate");
    std::vector<std::size_t> pos(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) pos[k] = start_pos + k;
    return tensor::add(tensor::embedding_lookup(wte_, ids), tensor::embedding_lookup(wpe_, pos));
  }

  Tensor embed(std::string_view text, std::size_t start_pos = 0) const { return embed_ids(tokenize(text), start_pos); }

  // Full causal forward: L x d_llm -> L x d_llm.
  Tensor forward(const Tensor& x) const {
    check_input(x, 0);
    Tensor h = x;
    for (const auto& L : layers_) {
      const Tensor a = tensor::layer_norm(h, L.ln1_g, L.ln1_b);
      const Tensor q = linear(a, L.wq, L.bq);
      const Tensor k = linear(a, L.wk, L.bk);
      const Tensor v = linear(a, L.wv, L.bv);
      h = tensor::add(h, attend(q, k, v, L, 0));
      h = tensor::add(h, mlp(h, L));
    }
    return tensor::layer_norm(h, lnf_g_, lnf_b_);
  }

  // Run a constant block through the stack once and keep what later rows
  // attend to. The prefix must not require gradients.
  PrefixState encode_prefix(const Tensor& prefix) const {
    if (prefix.requires_grad() || trainable_) throw std::logic_error("encode_prefix: prefix and weights must be constant");
    check_input(prefix, 0);
    PrefixState s;
    s.length = prefix.rows();
    Tensor h = prefix;
    for (const auto& L : layers_) {
      const Tensor a = tensor::layer_norm(h, L.ln1_g, L.ln1_b);
      const Tensor q = linear(a, L.wq, L.bq);
      const Tensor k = linear(a, L.wk, L.bk);
      const Tensor v = linear(a, L.wv, L.bv);
      s.keys.push_back(k);
      s.values.push_back(v);
      h = tensor::add(h, attend(q, k, v, L, 0));
      h = tensor::add(h, mlp(h, L));
    }
    s.output = tensor::layer_norm(h, lnf_g_, lnf_b_);
    return s;
  }

  // Same result as forward(concat_rows({prefix, suffix})), computing only
  // the suffix rows.
  Tensor forward_after(const PrefixState& prefix, const Tensor& suffix) const {
    if (prefix.keys.size() != layers_.size()) throw ShapeError("forward_after: prefix state from another backbone");
    check_input(suffix, prefix.length);
    if (trainable_)
      throw std::logic_error("forward_after: backbone weights are trainable; cached prefix would be stale");
    Tensor h = suffix;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const Tensor a = tensor::layer_norm(h, L.ln1_g, L.ln1_b);
      const Tensor q = linear(a, L.wq, L.bq);
      const Tensor k = tensor::concat_rows({prefix.keys[l], linear(a, L.wk, L.bk)});
      const Tensor v = tensor::concat_rows({prefix.values[l], linear(a, L.wv, L.bv)});
      h = tensor::add(h, attend(q, k, v, L, prefix.length));
      h = tensor::add(h, mlp(h, L));
    }
    return tensor::concat_rows({prefix.output, tensor::layer_norm(h, lnf_g_, lnf_b_)});
  }

  // Every weight with its qualified name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& t : all()) out.emplace_back(t.name(), t);
    return out;
  }

  // Off by default. Unfreezing turns every weight into a trainable leaf.
  void set_trainable(bool on) {
    for (auto t : all()) t.set_requires_grad(on);
    trainable_ = on;
  }
  bool trainable() const { return trainable_; }

  tensor::Checkpoint to_checkpoint() const {
    tensor::Checkpoint c;
    c.frozen = true;
    c.meta = {{"kind", "frozen_backbone"}, {"config", backbone_config_json(cfg_)}};
    for (const auto& t : all()) c.arrays.push_back({t.name(), t.value(), true});
    return c;
  }

  std::string weights_hash() const { return tensor::checkpoint_hash(to_checkpoint()); }

  void save(const std::filesystem::path& path) const { tensor::save_checkpoint(path, to_checkpoint()); }

  // Overwrite weights from arrays named as in named_parameters().
  void load_arrays(const tensor::Checkpoint& c) {
    for (auto t : all()) {
      const auto& a = c.at(t.name());
      if (a.rows != t.rows() || a.cols != t.cols())
        throw DataError("backbone checkpoint: " + t.name() + " has shape " + shape_str(a.rows, a.cols) + ", expected " +
                        shape_str(t.rows(), t.cols()));
      std::copy(a.data.begin(), a.data.end(), t.mutable_data().begin());
    }
  }

  // Independent weights with equal values.
  FrozenBackbone clone() const {
    FrozenBackbone b(cfg_);
    b.load_arrays(to_checkpoint());
    return b;
  }

  static FrozenBackbone load(const std::filesystem::path& path) {
    const auto c = tensor::load_checkpoint(path);
    if (!c.meta.contains("config")) throw DataError("backbone checkpoint " + path.string() + " has no config");
    FrozenBackbone b(backbone_config_from_json(c.meta.at("config")));
    b.load_arrays(c);
    return b;
  }

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, wq, wk, wv, bq, bk, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  static Tensor make(const std::string& name, std::size_t r, std::size_t c, Rng& rng, double sd) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal(0.0, sd);
    Tensor t = Tensor::parameter(m, "backbone." + name);
    t.set_requires_grad(false);
    return t;
  }

  static Tensor fill(const std::string& name, std::size_t r, std::size_t c, double v) {
    Tensor t = Tensor::parameter(Matrix(r, c, v), "backbone." + name);
    t.set_requires_grad(false);
    return t;
  }

  std::vector<Tensor> all() const {
    std::vector<Tensor> out{wte_, wpe_};
    for (const auto& L : layers_)
      out.insert(out.end(), {L.ln1_g, L.ln1_b, L.wq, L.wk, L.wv, L.bq, L.bk, L.bv, L.wo, L.bo, L.ln2_g, L.ln2_b, L.w1,
                             L.b1, L.w2, L.b2});
    out.insert(out.end(), {lnf_g_, lnf_b_});
    return out;
  }

  void check_input(const Tensor& x, std::size_t offset) const {
    if (x.cols() != cfg_.d_llm)
      throw ShapeError("backbone: input width " + std::to_string(x.cols()) + " != d_llm " + std::to_string(cfg_.d_llm));
    if (x.rows() == 0 || offset + x.rows() > cfg_.max_seq)
      throw ShapeError("backbone: sequence length " + std::to_string(offset + x.rows()) + " exceeds max_seq " +
                       std::to_string(cfg_.max_seq));
  }

  static Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return tensor::add(tensor::matmul(x, w), b); }

  // Multi-head attention of query rows positioned at offset, offset+1, ...
  // over key rows 0..; row r sees keys up to offset + r.
  Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const Layer& L, std::size_t offset) const {
    const std::size_t dh = cfg_.d_llm / cfg_.n_heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      const Tensor qh = tensor::slice_cols(q, h * dh, (h + 1) * dh);
      const Tensor kh = tensor::slice_cols(k, h * dh, (h + 1) * dh);
      const Tensor vh = tensor::slice_cols(v, h * dh, (h + 1) * dh);
      const Tensor w = tensor::softmax_rows(tensor::scale(tensor::matmul_bt(qh, kh), inv), offset);
      heads.push_back(tensor::matmul(w, vh));
    }
    return linear(tensor::concat_cols(heads), L.wo, L.bo);
  }

  Tensor mlp(const Tensor& h, const Layer& L) const {
    const Tensor a = tensor::layer_norm(h, L.ln2_g, L.ln2_b);
    return linear(tensor::gelu(linear(a, L.w1, L.b1)), L.w2, L.b2);
  }

  BackboneConfig cfg_;
  Tensor wte_, wpe_, lnf_g_, lnf_b_;
  std::vector<Layer> layers_;
  bool trainable_ = false;
};

}  // namespace msuf

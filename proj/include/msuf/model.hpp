#pragma once
// The trainable suffix around the frozen backbone:
//   e_time  = MHSA(MAP(e_dual^T))                 d_dual x d_llm
//   e_align = softmax(Q K^T / sqrt(num_w)) V      Q from e_time, K/V from source words
//   H       = backbone([prompt; e_align]) + [prompt; e_align]
//   output  = head(pool(H))
// Two prompts share everything but their head: the main head classifies
// veracity, the auxiliary head regresses the source's SI.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/backbone.hpp"
#include "msuf/core/errors.hpp"
#include "msuf/core/random.hpp"
#include "msuf/tensor/checkpoint.hpp"
#include "msuf/tensor/ops.hpp"

namespace msuf {

inline const std::string kMainPromptTemplate =
    "Task description: This is a rumor detection task, you need to judge the source text based on the source text "
    "information and corresponding comments (0. false rumour, 1. true rumour,  2. unverified rumour, 3. non-rumours.) "
    "The following content is fusion information, including the emotional information and content information of the "
    "comments, and the content of the source text information. Please give your answer (0. false rumour, 1. true "
    "rumour,  2. unverified rumour, 3. non-rumours.) according to all information.";

inline const std::string kAuxPromptTemplate =
    "Task description: Calculate the sentiment intensity or valence score of the source text, which should be a real "
    "number between 0 (extremely negative) and 1 (extremely positive). The following content is fusion information, "
    "including the emotional information and content information of the comments, and the content of the source text "
    "information.";

// Three-class corpora drop the non-rumour option from both enumerations.
inline std::string main_prompt(std::size_t num_classes) {
  if (num_classes == 4) return kMainPromptTemplate;
  if (num_classes != 3) throw ShapeError("main_prompt: class count must be 3 or 4");
  std::string s = kMainPromptTemplate;
  const std::string drop = ", 3. non-rumours.)";
  for (auto at = s.find(drop); at != std::string::npos; at = s.find(drop)) s.replace(at, drop.size(), ".)");
  return s;
}

enum class AlignScale { SqrtWords, SqrtDim };
enum class Pooling { Mean, Last };

// Graph variants. Feature-level ablations live in the data pipeline.
struct ModelVariant {
  bool no_align = false;      // prompt + source tokens, heads only
  bool align_first = false;   // [e_align; prompt]
  bool align_only = false;    // e_align without prompt
  bool no_residual = false;   // H = backbone(E)
  bool full_unfrozen = false; // backbone weights train too

  void validate() const {
    if (align_first && align_only) throw std::invalid_argument("variant: align_first and align_only are exclusive");
    if (no_align && (align_first || align_only))
      throw std::invalid_argument("variant: no_align cannot be combined with align_first/align_only");
  }
  bool operator==(const ModelVariant&) const = default;
};

struct ModelConfig {
  std::size_t intervals = 25;
  std::size_t d_dual = 8;
  std::size_t num_classes = 3;
  std::size_t mhsa_heads = 4;
  AlignScale align_scale = AlignScale::SqrtWords;
  Pooling pooling = Pooling::Mean;
  ModelVariant variant;
  std::uint64_t init_seed = 1;
  std::optional<std::string> main_prompt_text;
  std::optional<std::string> aux_prompt_text;

  void validate(const BackboneConfig& b) const {
    variant.validate();
    if (intervals < 2 || d_dual < 1) throw ShapeError("model: need intervals >= 2 and d_dual >= 1");
    if (num_classes != 3 && num_classes != 4) throw ShapeError("model: class count must be 3 or 4");
    if (mhsa_heads == 0 || b.d_llm % mhsa_heads != 0)
      throw ShapeError("model: d_llm " + std::to_string(b.d_llm) + " not divisible by mhsa_heads " + std::to_string(mhsa_heads));
    if (main_prompt_text && main_prompt_text->find_first_not_of(" \t\r\n") == std::string::npos)
      throw std::invalid_argument("model: main prompt is empty");
    if (aux_prompt_text && aux_prompt_text->find_first_not_of(" \t\r\n") == std::string::npos)
      throw std::invalid_argument("model: aux prompt is empty");
  }
};

inline nlohmann::json model_config_json(const ModelConfig& c) {
  const auto& v = c.variant;
  return {{"intervals", c.intervals},
          {"d_dual", c.d_dual},
          {"num_classes", c.num_classes},
          {"mhsa_heads", c.mhsa_heads},
          {"align_scale", c.align_scale == AlignScale::SqrtWords ? "sqrt_words" : "sqrt_dim"},
          {"pooling", c.pooling == Pooling::Mean ? "mean" : "last"},
          {"variant",
           {{"no_align", v.no_align},
            {"align_first", v.align_first},
            {"align_only", v.align_only},
            {"no_residual", v.no_residual},
            {"full_unfrozen", v.full_unfrozen}}},
          {"init_seed", c.init_seed},
          {"main_prompt", c.main_prompt_text ? nlohmann::json(*c.main_prompt_text) : nlohmann::json(nullptr)},
          {"aux_prompt", c.aux_prompt_text ? nlohmann::json(*c.aux_prompt_text) : nlohmann::json(nullptr)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.intervals = j.value("intervals", c.intervals);
  c.d_dual = j.value("d_dual", c.d_dual);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.mhsa_heads = j.value("mhsa_heads", c.mhsa_heads);
  const auto scale = j.value("align_scale", std::string("sqrt_words"));
  if (scale != "sqrt_words" && scale != "sqrt_dim") throw DataError("model config: align_scale must be sqrt_words or sqrt_dim");
  c.align_scale = scale == "sqrt_words" ? AlignScale::SqrtWords : AlignScale::SqrtDim;
  const auto pool = j.value("pooling", std::string("mean"));
  if (pool != "mean" && pool != "last") throw DataError("model config: pooling must be mean or last");
  c.pooling = pool == "mean" ? Pooling::Mean : Pooling::Last;
  if (j.contains("variant")) {
    const auto& v = j.at("variant");
    c.variant.no_align = v.value("no_align", false);
    c.variant.align_first = v.value("align_first", false);
    c.variant.align_only = v.value("align_only", false);
    c.variant.no_residual = v.value("no_residual", false);
    c.variant.full_unfrozen = v.value("full_unfrozen", false);
  }
  c.init_seed = j.value("init_seed", c.init_seed);
  if (j.contains("main_prompt") && j.at("main_prompt").is_string()) c.main_prompt_text = j.at("main_prompt").get<std::string>();
  if (j.contains("aux_prompt") && j.at("aux_prompt").is_string()) c.aux_prompt_text = j.at("aux_prompt").get<std::string>();
  return c;
}

// One thread, ready for the model.
struct Example {
  std::string id;
  Matrix e_dual;                        // intervals x d_dual
  std::vector<std::size_t> source_ids;  // backbone tokens of the source
  tensor::Tensor e_word;                // num_w x d_llm; embedded on demand when undefined
  std::size_t label = 0;
  double si_target = 0.5;     // source SI
};

struct ForwardOutputs {
  tensor::Tensor logits;     // 1 x num_classes
  tensor::Tensor score_aux;  // 1 x 1
  tensor::Tensor e_align;    // d_dual x d_llm (undefined under no_align)
  tensor::Tensor e_time;     // d_dual x d_llm (undefined under no_align)
  std::size_t sequence_length = 0;
};

// CE(logits, label) + lambda * (score_aux - si_target)^2
inline tensor::Tensor loss_total(const tensor::Tensor& logits, std::size_t label, const tensor::Tensor& score_aux,
                                 double si_target, double lambda) {
  if (lambda < 0) throw std::invalid_argument("loss_total: lambda must be >= 0");
  if (!(si_target >= 0.0 && si_target <= 1.0)) throw std::invalid_argument("loss_total: si target outside [0, 1]");
  const auto ce = tensor::cross_entropy(logits, label);
  return tensor::add(ce, tensor::scale(tensor::square(tensor::add_scalar(score_aux, -si_target)), lambda));
}

class MsufModel {
 public:
  using Tensor = tensor::Tensor;
  using BackboneFn = std::function<Tensor(const Tensor&)>;

  // The model holds its own copy of the backbone weights.
  MsufModel(const FrozenBackbone& backbone, ModelConfig cfg) : backbone_(backbone.clone()), cfg_(std::move(cfg)) {
    cfg_.validate(backbone_.config());
    if (cfg_.variant.full_unfrozen) backbone_.set_trainable(true);
    const std::size_t d = backbone_.config().d_llm;
    Rng rng(cfg_.init_seed);
    auto w = [&](const std::string& name, std::size_t r, std::size_t c) {
      Matrix m(r, c);
      const double sd = 1.0 / std::sqrt(static_cast<double>(r));
      for (double& v : m.data) v = rng.normal(0.0, sd);
      return Tensor::parameter(m, "msuf." + name);
    };
    auto zeros = [&](const std::string& name, std::size_t c) { return Tensor::parameter(Matrix(1, c), "msuf." + name); };
    map_w_ = w("map.w", cfg_.intervals, d);
    map_b_ = zeros("map.b", d);
    for (const char* n : {"q", "k", "v", "o"}) {
      mhsa_w_.push_back(w(std::string("mhsa.w") + n, d, d));
      mhsa_b_.push_back(zeros(std::string("mhsa.b") + n, d));
    }
    cross_q_ = w("cross.wq", d, d);
    cross_k_ = w("cross.wk", d, d);
    cross_v_ = w("cross.wv", d, d);
    head_main_w_ = w("head_main.w", d, cfg_.num_classes);
    head_main_b_ = zeros("head_main.b", cfg_.num_classes);
    head_aux_w_ = w("head_aux.w", d, 1);
    head_aux_b_ = zeros("head_aux.b", 1);

    main_text_ = cfg_.main_prompt_text.value_or(main_prompt(cfg_.num_classes));
    aux_text_ = cfg_.aux_prompt_text.value_or(kAuxPromptTemplate);
    main_prompt_ = backbone_.embed(main_text_);
    aux_prompt_ = backbone_.embed(aux_text_);
    refresh_prefix_cache();
  }

  MsufModel(const MsufModel&) = delete;
  MsufModel& operator=(const MsufModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const FrozenBackbone& backbone() const { return backbone_; }
  const std::string& main_prompt_text() const { return main_text_; }
  const std::string& aux_prompt_text() const { return aux_text_; }
  const Tensor& main_prompt_embedding() const { return main_prompt_; }
  const Tensor& aux_prompt_embedding() const { return aux_prompt_; }

  // Replaces the backbone for tests; disables the prefix cache.
  void set_backbone_override(BackboneFn fn) {
    override_ = std::move(fn);
    refresh_prefix_cache();
  }

  bool uses_prefix_cache() const { return main_state_.has_value(); }

  // Every trainable tensor of this model, including unused ones.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<Tensor> all{map_w_, map_b_};
    for (std::size_t k = 0; k < 4; ++k) {
      all.push_back(mhsa_w_[k]);
      all.push_back(mhsa_b_[k]);
    }
    all.insert(all.end(), {cross_q_, cross_k_, cross_v_, head_main_w_, head_main_b_, head_aux_w_, head_aux_b_});
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& t : all) out.emplace_back(t.name(), t);
    return out;
  }

  // Tensors that receive gradients under the configured variant: the
  // optimizer's parameter list.
  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_parameters()) {
      if (cfg_.variant.no_align && name.rfind("msuf.head_", 0) != 0) continue;
      out.push_back(t);
    }
    if (cfg_.variant.full_unfrozen)
      for (const auto& [name, t] : backbone_.named_parameters()) out.push_back(t);
    return out;
  }

  // MAP over the interval axis, then multi-head self-attention across the
  // d_dual channel tokens.
  Tensor project_time(const Tensor& e_dual) const {
    if (e_dual.rows() != cfg_.intervals || e_dual.cols() != cfg_.d_dual)
      throw ShapeError("project_time: e_dual is " + shape_str(e_dual.rows(), e_dual.cols()) + ", expected " +
                       shape_str(cfg_.intervals, cfg_.d_dual));
    const Tensor x = tensor::add(tensor::matmul(tensor::transpose(e_dual), map_w_), map_b_);
    return mhsa(x);
  }

  // Temporal tokens query the source words.
  Tensor align(const Tensor& e_time, const Tensor& e_word, Tensor* weights = nullptr) const {
    const std::size_t d = backbone_.config().d_llm;
    if (e_time.cols() != d || e_word.cols() != d || e_word.rows() == 0)
      throw ShapeError("align: e_time " + shape_str(e_time.rows(), e_time.cols()) + ", e_word " +
                       shape_str(e_word.rows(), e_word.cols()));
    const Tensor q = tensor::matmul(e_time, cross_q_);
    const Tensor k = tensor::matmul(e_word, cross_k_);
    const Tensor v = tensor::matmul(e_word, cross_v_);
    const double denom = cfg_.align_scale == AlignScale::SqrtWords ? static_cast<double>(e_word.rows()) : static_cast<double>(d);
    const Tensor a = tensor::softmax_rows(tensor::scale(tensor::matmul_bt(q, k), 1.0 / std::sqrt(denom)));
    if (weights) *weights = a;
    return tensor::matmul(a, v);
  }

  enum class Task { Main, Aux };

  // Source word embeddings. Re-embedded when the tables train.
  Tensor word_embedding(const Example& ex) const {
    if (ex.e_word.defined() && !cfg_.variant.full_unfrozen) return ex.e_word;
    if (ex.source_ids.empty()) throw ShapeError("forward: example '" + ex.id + "' has no source tokens");
    return backbone_.embed_ids(ex.source_ids);
  }

  // Pooled hidden state of one task sequence.
  Tensor pooled(Task task, const Tensor& block) const {
    const bool fresh = cfg_.variant.full_unfrozen;
    const Tensor prompt = task == Task::Main ? (fresh ? backbone_.embed(main_text_) : main_prompt_)
                                             : (fresh ? backbone_.embed(aux_text_) : aux_prompt_);
    const auto& v = cfg_.variant;
    Tensor e, h;
    if (v.align_only) {
      e = block;
    } else if (v.align_first) {
      e = tensor::concat_rows({block, prompt});
    } else {
      e = tensor::concat_rows({prompt, block});
    }
    if (e.rows() > backbone_.config().max_seq)
      throw ShapeError("forward_task: sequence of " + std::to_string(e.rows()) + " exceeds max_seq " +
                       std::to_string(backbone_.config().max_seq));
    const auto& state = task == Task::Main ? main_state_ : aux_state_;
    if (override_)
      h = override_(e);
    else if (state)
      h = backbone_.forward_after(*state, block);
    else
      h = backbone_.forward(e);
    if (!v.no_residual) h = tensor::add(h, e);
    return cfg_.pooling == Pooling::Mean ? tensor::mean_rows(h) : tensor::slice_rows(h, h.rows() - 1, h.rows());
  }

  Tensor head_main(const Tensor& pooled_row) const { return tensor::add(tensor::matmul(pooled_row, head_main_w_), head_main_b_); }
  Tensor head_aux(const Tensor& pooled_row) const { return tensor::add(tensor::matmul(pooled_row, head_aux_w_), head_aux_b_); }

  ForwardOutputs forward(const Example& ex) const {
    ForwardOutputs out;
    Tensor block;
    const Tensor e_word = word_embedding(ex);
    if (cfg_.variant.no_align) {
      block = e_word;
    } else {
      out.e_time = project_time(Tensor::constant(ex.e_dual));
      out.e_align = align(out.e_time, e_word);
      block = out.e_align;
    }
    out.sequence_length = block.rows() + (cfg_.variant.align_only ? 0 : main_prompt_.rows());
    out.logits = head_main(pooled(Task::Main, block));
    out.score_aux = head_aux(pooled(Task::Aux, block));
    return out;
  }

  tensor::Checkpoint to_checkpoint(const nlohmann::json& extra_meta = nlohmann::json::object()) const {
    tensor::Checkpoint c;
    c.meta = extra_meta;
    c.meta["model_config"] = model_config_json(cfg_);
    c.meta["backbone_config"] = backbone_config_json(backbone_.config());
    c.meta["main_prompt"] = main_text_;
    c.meta["aux_prompt"] = aux_text_;
    for (const auto& [name, t] : named_parameters()) c.arrays.push_back({name, t.value(), false});
    for (const auto& [name, t] : backbone_.named_parameters()) c.arrays.push_back({name, t.value(), !cfg_.variant.full_unfrozen});
    return c;
  }

  // Copy trainable values (and backbone values when unfrozen) from a checkpoint.
  void load_parameters(const tensor::Checkpoint& c) {
    for (auto& [name, t] : named_parameters()) copy_into(t, c.at(name), name);
    if (cfg_.variant.full_unfrozen)
      for (auto& [name, t] : backbone_.named_parameters()) copy_into(t, c.at(name), name);
  }

  std::vector<Matrix> snapshot() const {
    std::vector<Matrix> out;
    for (const auto& t : trainable_parameters()) out.push_back(t.value());
    return out;
  }

  void restore(const std::vector<Matrix>& values) {
    auto params = trainable_parameters();
    if (values.size() != params.size()) throw std::logic_error("restore: snapshot from another model");
    for (std::size_t k = 0; k < params.size(); ++k) std::copy(values[k].data.begin(), values[k].data.end(), params[k].mutable_data().begin());
  }

 private:
  static void copy_into(Tensor t, const Matrix& m, const std::string& name) {
    if (m.rows != t.rows() || m.cols != t.cols())
      throw DataError("checkpoint: " + name + " has shape " + shape_str(m.rows, m.cols) + ", expected " + shape_str(t.rows(), t.cols()));
    std::copy(m.data.begin(), m.data.end(), t.mutable_data().begin());
  }

  void refresh_prefix_cache() {
    main_state_.reset();
    aux_state_.reset();
    const auto& v = cfg_.variant;
    if (override_ || v.full_unfrozen || v.align_first || v.align_only) return;
    main_state_ = backbone_.encode_prefix(main_prompt_);
    aux_state_ = backbone_.encode_prefix(aux_prompt_);
  }

  Tensor mhsa(const Tensor& x) const {
    const std::size_t d = backbone_.config().d_llm, dh = d / cfg_.mhsa_heads;
    auto lin = [](const Tensor& a, const Tensor& w, const Tensor& b) { return tensor::add(tensor::matmul(a, w), b); };
    const Tensor q = lin(x, mhsa_w_[0], mhsa_b_[0]);
    const Tensor k = lin(x, mhsa_w_[1], mhsa_b_[1]);
    const Tensor v = lin(x, mhsa_w_[2], mhsa_b_[2]);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg_.mhsa_heads; ++h) {
      const Tensor qh = tensor::slice_cols(q, h * dh, (h + 1) * dh);
      const Tensor kh = tensor::slice_cols(k, h * dh, (h + 1) * dh);
      const Tensor vh = tensor::slice_cols(v, h * dh, (h + 1) * dh);
      heads.push_back(tensor::matmul(tensor::softmax_rows(tensor::scale(tensor::matmul_bt(qh, kh), inv)), vh));
    }
    return lin(tensor::concat_cols(heads), mhsa_w_[3], mhsa_b_[3]);
  }

  FrozenBackbone backbone_;
  ModelConfig cfg_;
  BackboneFn override_;
  Tensor map_w_, map_b_, cross_q_, cross_k_, cross_v_, head_main_w_, head_main_b_, head_aux_w_, head_aux_b_;
  std::vector<Tensor> mhsa_w_, mhsa_b_;
  std::string main_text_, aux_text_;
  Tensor main_prompt_, aux_prompt_;
  std::optional<FrozenBackbone::PrefixState> main_state_, aux_state_;
};

}  // namespace msuf

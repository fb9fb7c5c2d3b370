#pragma once

// Decoder-only transformer over a SequencePlan: pre-norm blocks with RoPE
// attention at each slot's position index, one shared head producing F x 17
// speech logits per loss-target slot, speech-only cross-entropy, and the
// AdamW training step.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "visatronic/encoders.hpp"
#include "visatronic/error.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/optim.hpp"
#include "visatronic/seqlayout.hpp"
#include "visatronic/tensor.hpp"
#include "visatronic/tokenizers.hpp"

namespace visatronic {

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t channels = 80;
  std::size_t speech_embed_dim = 24;
  std::size_t mlp_ratio = 4;
  int video_codebook = 32;
  std::size_t video_grid_h = 4;
  std::size_t video_grid_w = 4;
  int text_vocab = 40;
  Aggregation aggregation = Aggregation::kSum;
  double rope_base = 10000.0;
  double dropout = 0.0;

  static constexpr int speech_classes = kSpeechClasses;

  std::size_t head_dim() const { return heads == 0 ? 0 : dim / heads; }

  void validate() const {
    require(dim > 0 && heads > 0 && layers > 0, ErrorKind::kConfig, "model dim, heads and layers must be positive");
    require(dim % heads == 0, ErrorKind::kConfig, "model dim must be divisible by the head count");
    require(head_dim() % 2 == 0, ErrorKind::kConfig, "head dim must be even for RoPE");
    require(channels > 0 && speech_embed_dim > 0 && mlp_ratio > 0, ErrorKind::kConfig,
            "channels, speech embed dim and MLP ratio must be positive");
    require(video_codebook > 0 && text_vocab > 0, ErrorKind::kConfig, "vocabulary sizes must be positive");
    require(video_grid_h > 0 && video_grid_w > 0, ErrorKind::kConfig, "video grid must be non-empty");
    require(rope_base > 1.0, ErrorKind::kConfig, "rope_base must exceed 1");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::kConfig, "dropout must be in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct DecoderBlock {
  tc::Tensor<T> ln1_gain, ln1_bias;
  tc::Tensor<T> wqkv;  // [D, 3D], no bias
  tc::Tensor<T> wo, bo;
  tc::Tensor<T> ln2_gain, ln2_bias;
  tc::Tensor<T> w1, b1;  // [D, rD]
  tc::Tensor<T> w2, b2;  // [rD, D]
};

// Conditioning for one sequence. Text ids live in the plan itself.
struct DecoderInputs {
  const SpeakerVector* speaker = nullptr;
  const VideoTokenGrid* video = nullptr;
  const DMelSeq* speech = nullptr;  // at least plan.n_speech frames
};

template <class T>
struct SpeechLogits {
  tc::Tensor<T> values;            // [n_targets, F * 17]
  std::vector<std::size_t> slots;  // plan slot of each row
};

template <class T>
struct Model {
  ModelConfig cfg;
  ModalityEncoders<T> enc;
  std::vector<DecoderBlock<T>> blocks;
  tc::Tensor<T> lnf_gain, lnf_bias;
  tc::Tensor<T> head_weight;  // [D, F * 17]; rows f*17 .. f*17+16 of the output belong to channel f
  tc::Tensor<T> head_bias;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const std::size_t d = cfg.dim;
    m.enc.video = VideoEmbedder<T>(cfg.aggregation, cfg.video_grid_h, cfg.video_grid_w, d, cfg.video_codebook);
    m.enc.speech = SpeechEmbedder<T>(cfg.channels, cfg.speech_embed_dim, d);
    m.enc.text = TextEmbedder<T>(static_cast<std::size_t>(cfg.text_vocab), d);
    m.enc.speaker = SpeakerProjector<T>(d);
    m.enc.markers = MarkerEmbeddings<T>(d);

    std::mt19937_64 rng(seed);
    norm_matched_init(m.enc, rng);

    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = in_std / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    const std::size_t hidden = cfg.mlp_ratio * d;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      DecoderBlock<T> b;
      b.ln1_gain = tc::Tensor<T>::full({d}, T(1), true);
      b.ln1_bias = init::param<T>({d});
      b.wqkv = init::param<T>({d, 3 * d});
      b.wo = init::param<T>({d, d});
      b.bo = init::param<T>({d});
      b.ln2_gain = tc::Tensor<T>::full({d}, T(1), true);
      b.ln2_bias = init::param<T>({d});
      b.w1 = init::param<T>({d, hidden});
      b.b1 = init::param<T>({hidden});
      b.w2 = init::param<T>({hidden, d});
      b.b2 = init::param<T>({d});
      init::normal_fill(b.wqkv, in_std, rng);
      init::normal_fill(b.wo, out_std, rng);
      init::normal_fill(b.w1, in_std, rng);
      init::normal_fill(b.w2, out_std / 2.0, rng);
      m.blocks.push_back(std::move(b));
    }
    m.lnf_gain = tc::Tensor<T>::full({d}, T(1), true);
    m.lnf_bias = init::param<T>({d});
    const std::size_t out = cfg.channels * static_cast<std::size_t>(kSpeechClasses);
    m.head_weight = init::param<T>({d, out});
    m.head_bias = init::param<T>({out});
    init::normal_fill(m.head_weight, in_std, rng);
    return m;
  }

  // Fixed order; checkpoints rely on it.
  std::vector<std::pair<std::string, tc::Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, tc::Tensor<T>>> out;
    out.emplace_back("video.table", enc.video.table);
    if (enc.video.aggregation == Aggregation::kAttention) {
      out.emplace_back("video.query", enc.video.query);
      out.emplace_back("video.key", enc.video.key);
      out.emplace_back("video.value", enc.video.value);
    }
    if (enc.video.aggregation == Aggregation::kStack) out.emplace_back("video.stack_proj", enc.video.stack_proj);
    out.emplace_back("speech.table", enc.speech.table);
    out.emplace_back("speech.projection", enc.speech.projection);
    out.emplace_back("text.table", enc.text.table);
    out.emplace_back("speaker.weight", enc.speaker.weight);
    out.emplace_back("markers.table", enc.markers.table);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gain", b.ln1_gain);
      out.emplace_back(p + "ln1.bias", b.ln1_bias);
      out.emplace_back(p + "attn.wqkv", b.wqkv);
      out.emplace_back(p + "attn.wo", b.wo);
      out.emplace_back(p + "attn.bo", b.bo);
      out.emplace_back(p + "ln2.gain", b.ln2_gain);
      out.emplace_back(p + "ln2.bias", b.ln2_bias);
      out.emplace_back(p + "mlp.w1", b.w1);
      out.emplace_back(p + "mlp.b1", b.b1);
      out.emplace_back(p + "mlp.w2", b.w2);
      out.emplace_back(p + "mlp.b2", b.b2);
    }
    out.emplace_back("final_ln.gain", lnf_gain);
    out.emplace_back("final_ln.bias", lnf_bias);
    out.emplace_back("head.weight", head_weight);
    out.emplace_back("head.bias", head_bias);
    return out;
  }

  std::vector<tc::Tensor<T>> parameters() const {
    std::vector<tc::Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Weight decay applies to projection matrices only.
  std::vector<bool> decay_mask() const {
    std::vector<bool> out;
    for (auto& [name, t] : named_parameters()) {
      out.push_back(t.rank() == 2 && name.find("table") == std::string::npos);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  // Independent copy of every parameter value.
  Model clone() const {
    Model m = *this;
    auto copy = [](const tc::Tensor<T>& t) { return tc::Tensor<T>::from_data(t.shape(), t.data(), true); };
    m.enc.video.table = copy(enc.video.table);
    if (enc.video.query.defined()) m.enc.video.query = copy(enc.video.query);
    if (enc.video.key.defined()) m.enc.video.key = copy(enc.video.key);
    if (enc.video.value.defined()) m.enc.video.value = copy(enc.video.value);
    if (enc.video.stack_proj.defined()) m.enc.video.stack_proj = copy(enc.video.stack_proj);
    m.enc.speech.table = copy(enc.speech.table);
    m.enc.speech.projection = copy(enc.speech.projection);
    m.enc.text.table = copy(enc.text.table);
    m.enc.speaker.weight = copy(enc.speaker.weight);
    m.enc.markers.table = copy(enc.markers.table);
    for (auto& b : m.blocks) {
      for (tc::Tensor<T>* t : {&b.ln1_gain, &b.ln1_bias, &b.wqkv, &b.wo, &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                               &b.b1, &b.w2, &b.b2}) {
        *t = copy(*t);
      }
    }
    m.lnf_gain = copy(lnf_gain);
    m.lnf_bias = copy(lnf_bias);
    m.head_weight = copy(head_weight);
    m.head_bias = copy(head_bias);
    return m;
  }
};

namespace decoder_detail {

inline void check_inputs(const ModelConfig& cfg, const SequencePlan& plan, const DecoderInputs& in) {
  require(in.speaker != nullptr, ErrorKind::kConfig, "decoder needs a speaker vector");
  if (plan.n_video > 0) {
    require(in.video != nullptr && in.video->n_frames >= plan.n_video, ErrorKind::kConfig,
            "plan references more video frames than supplied");
    require(in.video->height == cfg.video_grid_h && in.video->width == cfg.video_grid_w, ErrorKind::kConfig,
            "video grid shape does not match the model");
  }
  if (plan.n_speech > 0) {
    require(in.speech != nullptr && in.speech->n_frames() >= plan.n_speech, ErrorKind::kConfig,
            "plan references more speech frames than supplied");
    require(in.speech->n_channels() == cfg.channels, ErrorKind::kConfig,
            "speech channel count does not match the model");
  }
}

}  // namespace decoder_detail

// Decoder input rows [n_slots, D]: every slot embedded by its modality,
// BOS/EOS by marker vectors, masked slots by their stream's mask vector.
template <class T>
tc::Tensor<T> embed_plan(const Model<T>& model, const SequencePlan& plan, const DecoderInputs& in) {
  decoder_detail::check_inputs(model.cfg, plan, in);
  const auto& enc = model.enc;
  std::vector<tc::Tensor<T>> parts{enc.markers.table, enc.speaker.embed(*in.speaker)};
  const int speaker_row = 9;
  int next = 10;

  std::vector<int> text_ids;
  for (const Slot& s : plan.slots) {
    if (s.kind == SlotKind::kText && !s.masked) text_ids.push_back(s.payload);
  }
  const int text_base = next;
  if (!text_ids.empty()) {
    parts.push_back(enc.text.embed(text_ids));
    next += static_cast<int>(text_ids.size());
  }
  const int video_base = next;
  if (plan.n_video > 0) {
    const auto& g = *in.video;
    parts.push_back(enc.video.embed_tokens(
        std::span<const int>(g.tokens.data(), plan.n_video * g.cells_per_frame())));
    next += static_cast<int>(plan.n_video);
  }
  const int speech_base = next;
  if (plan.n_speech > 0) parts.push_back(enc.speech.embed_frames(*in.speech, plan.n_speech));

  std::vector<int> rows;
  rows.reserve(plan.slots.size());
  int text_k = 0;
  for (const Slot& s : plan.slots) {
    if (s.masked) {
      rows.push_back(MarkerEmbeddings<T>::mask_row(s.stream));
      continue;
    }
    switch (s.kind) {
      case SlotKind::kSpeaker: rows.push_back(speaker_row); break;
      case SlotKind::kBos: rows.push_back(MarkerEmbeddings<T>::bos_row(s.stream)); break;
      case SlotKind::kEos: rows.push_back(MarkerEmbeddings<T>::eos_row(s.stream)); break;
      case SlotKind::kText: rows.push_back(text_base + text_k++); break;
      case SlotKind::kVideo: rows.push_back(video_base + s.payload); break;
      case SlotKind::kSpeech: rows.push_back(speech_base + s.payload); break;
    }
  }
  return tc::embedding_lookup(tc::concat(parts, 0), rows);
}

// Final layer-normed hidden states [n_slots, D]. `dropout_rng` enables
// dropout when the config asks for it.
template <class T>
tc::Tensor<T> decoder_trunk(const Model<T>& model, const SequencePlan& plan, const DecoderInputs& in,
                            std::mt19937_64* dropout_rng = nullptr) {
  const ModelConfig& cfg = model.cfg;
  auto x = embed_plan(model, plan, in);
  const auto positions = plan.position_indices();
  const auto mask = causal_reachability(plan);
  const std::size_t d = cfg.dim;
  auto maybe_dropout = [&](const tc::Tensor<T>& t) {
    if (dropout_rng == nullptr || cfg.dropout <= 0.0) return t;
    return tc::dropout(t, cfg.dropout, *dropout_rng);
  };
  for (const auto& b : model.blocks) {
    const auto h = tc::layer_norm(x, b.ln1_gain, b.ln1_bias);
    const auto qkv = tc::matmul(h, b.wqkv);
    const auto q = tc::rope(tc::slice(qkv, 1, 0, d), positions, cfg.heads, cfg.rope_base);
    const auto k = tc::rope(tc::slice(qkv, 1, d, d), positions, cfg.heads, cfg.rope_base);
    const auto v = tc::slice(qkv, 1, 2 * d, d);
    const auto a = tc::attention(q, k, v, cfg.heads, mask);
    x = tc::add(x, maybe_dropout(tc::linear(a, b.wo, b.bo)));
    const auto h2 = tc::layer_norm(x, b.ln2_gain, b.ln2_bias);
    const auto mlp = tc::linear(tc::gelu(tc::linear(h2, b.w1, b.b1)), b.w2, b.b2);
    x = tc::add(x, maybe_dropout(mlp));
  }
  return tc::layer_norm(x, model.lnf_gain, model.lnf_bias);
}

// Head output [rows.size(), F * 17] at the given slots.
template <class T>
tc::Tensor<T> logits_at(const Model<T>& model, const tc::Tensor<T>& hidden, std::span<const int> rows) {
  return tc::linear(tc::embedding_lookup(hidden, rows), model.head_weight, model.head_bias);
}

template <class T>
SpeechLogits<T> forward(const Model<T>& model, const SequencePlan& plan, const DecoderInputs& in,
                        std::mt19937_64* dropout_rng = nullptr) {
  const auto hidden = decoder_trunk(model, plan, in, dropout_rng);
  SpeechLogits<T> out;
  std::vector<int> rows;
  for (std::size_t i = 0; i < plan.slots.size(); ++i) {
    if (plan.slots[i].is_loss_target) {
      rows.push_back(static_cast<int>(i));
      out.slots.push_back(i);
    }
  }
  out.values = logits_at(model, hidden, rows);
  return out;
}

// Target class of every (loss-target slot, channel), in logits row order.
inline std::vector<int> speech_targets(const SequencePlan& plan, const DMelSeq* speech, std::size_t channels,
                                       std::span<const std::size_t> slots) {
  std::vector<int> out;
  out.reserve(slots.size() * channels);
  for (std::size_t i : slots) {
    const Slot& s = plan.slots[i];
    require(s.target_frame.has_value(), ErrorKind::kContract, "loss-target slot without a target frame");
    const int f = *s.target_frame;
    for (std::size_t c = 0; c < channels; ++c) {
      if (f == kEosFrame) {
        out.push_back(kSpeechEosClass);
      } else {
        require(speech != nullptr && static_cast<std::size_t>(f) < speech->n_frames(), ErrorKind::kContract,
                "target frame outside the speech sequence");
        out.push_back(speech->indices(static_cast<std::size_t>(f), c));
      }
    }
  }
  return out;
}

// Sum of -log softmax at the targets; count of terms in `n_terms`.
template <class T>
tc::Tensor<T> speech_nll_sum(const SpeechLogits<T>& logits, const SequencePlan& plan, const DMelSeq* speech,
                             std::size_t channels, std::size_t& n_terms) {
  n_terms = logits.slots.size() * channels;
  if (n_terms == 0) return tc::Tensor<T>::scalar(T(0));
  const auto targets = speech_targets(plan, speech, channels, logits.slots);
  const auto flat = tc::reshape(logits.values, {n_terms, static_cast<std::size_t>(kSpeechClasses)});
  return tc::scale(tc::sum(tc::gather(tc::log_softmax(flat), targets)), T(-1));
}

template <class T>
tc::Tensor<T> speech_ce_loss(const SpeechLogits<T>& logits, const SequencePlan& plan, const DMelSeq* speech,
                             std::size_t channels) {
  std::size_t n = 0;
  auto total = speech_nll_sum(logits, plan, speech, channels, n);
  require(n > 0, ErrorKind::kEmptyLoss, "no active speech loss targets");
  return tc::scale(total, T(1) / static_cast<T>(n));
}

struct TrainExample {
  SequencePlan plan;
  DecoderInputs inputs;
};

struct OptimConfig {
  double lr = 4e-4;
  std::int64_t warmup = 5000;
  std::int64_t total_steps = 100000;
  double clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    require(lr > 0.0 && std::isfinite(lr), ErrorKind::kConfig, "lr must be positive");
    require(warmup >= 0 && total_steps >= 1, ErrorKind::kConfig, "warmup must be >= 0 and total_steps >= 1");
    require(clip > 0.0, ErrorKind::kConfig, "clip must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::kConfig,
            "betas must be in [0, 1)");
    require(eps > 0.0 && weight_decay >= 0.0, ErrorKind::kConfig, "eps must be positive, weight decay >= 0");
  }

  tc::AdamWOptions adamw() const { return {beta1, beta2, eps, weight_decay}; }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// One update at 1-based `step`: pooled mean CE over every target of every
// example, backward, global-norm clip, AdamW at lr_schedule(step).
template <class T>
StepStats train_step(Model<T>& model, tc::AdamWState<T>& opt, std::span<const TrainExample> batch,
                     const OptimConfig& oc, std::int64_t step, std::mt19937_64* dropout_rng = nullptr) {
  require(!batch.empty(), ErrorKind::kEmptyInput, "empty training batch");
  auto params = model.parameters();
  for (auto& p : params) p.zero_grad();
  std::vector<tc::Tensor<T>> sums;
  std::size_t n_total = 0;
  for (const auto& ex : batch) {
    const auto logits = forward(model, ex.plan, ex.inputs, dropout_rng);
    std::size_t n = 0;
    auto s = speech_nll_sum(logits, ex.plan, ex.inputs.speech, model.cfg.channels, n);
    if (n == 0) continue;
    sums.push_back(s);
    n_total += n;
  }
  require(n_total > 0, ErrorKind::kEmptyLoss, "no active speech loss targets in batch");
  tc::Tensor<T> total = sums.front();
  for (std::size_t i = 1; i < sums.size(); ++i) total = tc::add(total, sums[i]);
  const auto loss = tc::scale(total, T(1) / static_cast<T>(n_total));
  tc::backward(loss);

  StepStats st;
  st.loss = static_cast<double>(loss.item());
  st.grad_norm = tc::clip_grad_norm(params, oc.clip);
  st.lr = tc::lr_schedule(step, oc.lr, oc.warmup, oc.total_steps);
  opt.options = oc.adamw();
  tc::adamw_step(params, opt, st.lr, model.decay_mask());
  return st;
}

// Fraction of (target slot, channel) pairs whose argmax equals the target,
// over non-EOS targets when `skip_eos`.
template <class T>
std::pair<std::size_t, std::size_t> channel_hits(const SpeechLogits<T>& logits, const SequencePlan& plan,
                                                 const DMelSeq* speech, std::size_t channels, bool skip_eos) {
  const auto targets = speech_targets(plan, speech, channels, logits.slots);
  std::size_t hits = 0, total = 0;
  const auto& v = logits.values.data();
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (skip_eos && targets[r] == kSpeechEosClass) continue;
    const T* row = v.data() + r * kSpeechClasses;
    int best = 0;
    for (int c = 1; c < kSpeechClasses; ++c) {
      if (row[c] > row[best]) best = c;
    }
    hits += best == targets[r];
    ++total;
  }
  return {hits, total};
}

}  // namespace visatronic

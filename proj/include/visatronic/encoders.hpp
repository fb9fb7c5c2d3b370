#pragma once

// Per-modality embedders mapping discrete inputs to decoder-width vectors,
// and the norm-matched initialisation that puts them on a common scale.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "visatronic/error.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/tensor.hpp"
#include "visatronic/tokenizers.hpp"

namespace visatronic {

enum class Aggregation { kAttention, kSum, kMean, kMax, kStack };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::kAttention: return "attention";
    case Aggregation::kSum: return "sum";
    case Aggregation::kMean: return "mean";
    case Aggregation::kMax: return "max";
    case Aggregation::kStack: return "stack";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "attention") return Aggregation::kAttention;
  if (s == "sum") return Aggregation::kSum;
  if (s == "mean") return Aggregation::kMean;
  if (s == "max") return Aggregation::kMax;
  if (s == "stack") return Aggregation::kStack;
  fail(ErrorKind::kConfig, "unknown aggregation '" + std::string(s) + "'");
}

namespace init {

template <class T, class Rng>
void normal_fill(tc::Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <class T>
void scale_in_place(tc::Tensor<T>& t, double s) {
  for (T& v : t.mutable_data()) v = static_cast<T>(static_cast<double>(v) * s);
}

template <class T>
tc::Tensor<T> param(tc::Shape shape) {
  return tc::Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
}

}  // namespace init

template <class T>
struct VideoEmbedder {
  Aggregation aggregation = Aggregation::kSum;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::size_t dim = 64;
  int codebook_size = 32;
  tc::Tensor<T> table;       // [K^v, D]
  tc::Tensor<T> query;       // [D, D], attention only
  tc::Tensor<T> key;         // [D, D], attention only
  tc::Tensor<T> value;       // [D, D], attention only
  tc::Tensor<T> stack_proj;  // [H'W'D, D], stack only

  VideoEmbedder() = default;
  VideoEmbedder(Aggregation agg, std::size_t h, std::size_t w, std::size_t d, int k)
      : aggregation(agg), grid_h(h), grid_w(w), dim(d), codebook_size(k) {
    table = init::param<T>({static_cast<std::size_t>(k), d});
    if (agg == Aggregation::kAttention) {
      query = init::param<T>({d, d});
      key = init::param<T>({d, d});
      value = init::param<T>({d, d});
    }
    if (agg == Aggregation::kStack) stack_proj = init::param<T>({h * w * d, d});
  }

  std::size_t cells() const { return grid_h * grid_w; }

  // Frames are given as a flat [n_frames * H' * W'] token list.
  tc::Tensor<T> embed_tokens(std::span<const int> tokens) const {
    require(tokens.size() % cells() == 0, ErrorKind::kShape, "video tokens are not a whole number of frames");
    for (int tok : tokens) {
      require(tok >= 0 && tok < codebook_size, ErrorKind::kCorruptGrid,
              "video token " + std::to_string(tok) + " outside codebook");
    }
    const std::size_t n = tokens.size() / cells();
    const auto e = tc::embedding_lookup(table, tokens);  // [n * HW, D]
    switch (aggregation) {
      case Aggregation::kSum: return tc::group_reduce(e, cells(), tc::Reduce::kSum);
      case Aggregation::kMean: return tc::group_reduce(e, cells(), tc::Reduce::kMean);
      case Aggregation::kMax: return tc::group_reduce(e, cells(), tc::Reduce::kMax);
      case Aggregation::kStack: return tc::matmul(tc::reshape(e, {n, cells() * dim}), stack_proj);
      case Aggregation::kAttention: {
        // Query from the first cell, keys/values from every cell including it.
        std::vector<int> first(n), spread(n * cells());
        for (std::size_t t = 0; t < n; ++t) {
          first[t] = static_cast<int>(t * cells());
          for (std::size_t c = 0; c < cells(); ++c) spread[t * cells() + c] = static_cast<int>(t);
        }
        const auto q = tc::matmul(tc::embedding_lookup(e, first), query);   // [n, D]
        const auto k = tc::matmul(e, key);                                   // [n*HW, D]
        const auto v = tc::matmul(e, value);                                 // [n*HW, D]
        const auto qk = tc::mul(tc::embedding_lookup(q, spread), k);
        const auto ones_d = tc::Tensor<T>::full({dim, 1}, T(1));
        const auto logits = tc::reshape(tc::matmul(qk, ones_d), {n, cells()});
        const auto attn = tc::reshape(tc::softmax(logits), {n * cells(), 1});
        const auto ones_row = tc::Tensor<T>::full({1, dim}, T(1));
        const auto weighted = tc::mul(tc::matmul(attn, ones_row), v);
        return tc::scale(tc::group_reduce(weighted, cells(), tc::Reduce::kSum),
                         T(1) / std::sqrt(static_cast<T>(dim)));
      }
    }
    fail(ErrorKind::kConfig, "unhandled aggregation");
  }

  tc::Tensor<T> embed_grid(const VideoTokenGrid& grid) const {
    require(grid.height == grid_h && grid.width == grid_w, ErrorKind::kShape,
            "video grid size does not match the embedder");
    return embed_tokens(grid.tokens);
  }

  tc::Tensor<T> embed_frame(const VideoTokenGrid& grid, std::size_t frame) const {
    require(frame < grid.n_frames, ErrorKind::kShape, "video frame index out of range");
    return embed_tokens(grid.frame(frame));
  }

  // Attention weights over the H'W' cells of each frame (attention only).
  std::vector<T> attention_weights(std::span<const int> frame_tokens) const {
    require(aggregation == Aggregation::kAttention, ErrorKind::kConfig, "not an attention embedder");
    tc::NoGradGuard no_grad;
    const auto e = tc::embedding_lookup(table, frame_tokens);
    const std::vector<int> first{0};
    const auto q = tc::matmul(tc::embedding_lookup(e, first), query);
    const auto k = tc::matmul(e, key);
    return tc::softmax(tc::matmul(q, tc::transpose(k))).data();
  }

  tc::Tensor<T>& terminal() {
    switch (aggregation) {
      case Aggregation::kAttention: return value;
      case Aggregation::kStack: return stack_proj;
      default: return table;
    }
  }
};

template <class T>
struct SpeechEmbedder {
  std::size_t channels = 80;
  std::size_t embed_dim = 24;
  std::size_t dim = 64;
  tc::Tensor<T> table;       // [16, d']
  tc::Tensor<T> projection;  // [F d', D], bias-free

  SpeechEmbedder() = default;
  SpeechEmbedder(std::size_t f, std::size_t d_small, std::size_t d)
      : channels(f), embed_dim(d_small), dim(d) {
    table = init::param<T>({static_cast<std::size_t>(kDMelLevels), d_small});
    projection = init::param<T>({f * d_small, d});
  }

  // values: [n_frames * F], channel order low -> high mel index.
  tc::Tensor<T> embed_values(std::span<const int> values) const {
    require(values.size() % channels == 0, ErrorKind::kShape, "speech values are not a whole number of frames");
    for (int v : values) {
      require(v >= 0 && v < kDMelLevels, ErrorKind::kCorruptSequence,
              "speech value " + std::to_string(v) + " out of range");
    }
    const std::size_t n = values.size() / channels;
    const auto e = tc::embedding_lookup(table, values);  // [n * F, d']
    return tc::matmul(tc::reshape(e, {n, channels * embed_dim}), projection);
  }

  tc::Tensor<T> embed_frames(const DMelSeq& seq, std::size_t n_frames) const {
    require(seq.n_channels() == channels, ErrorKind::kShape, "speech channel count does not match the embedder");
    require(n_frames <= seq.n_frames(), ErrorKind::kShape, "not enough speech frames");
    return embed_values(std::span<const int>(seq.indices.data().data(), n_frames * channels));
  }
};

template <class T>
struct TextEmbedder {
  tc::Tensor<T> table;  // [K^t, D]

  TextEmbedder() = default;
  TextEmbedder(std::size_t vocab, std::size_t d) : table(init::param<T>({vocab, d})) {}

  std::size_t vocab_size() const { return table.dim(0); }

  tc::Tensor<T> embed(std::span<const int> ids) const {
    for (int id : ids) {
      require(id >= 0 && static_cast<std::size_t>(id) < vocab_size(), ErrorKind::kCorruptSequence,
              "text id " + std::to_string(id) + " outside vocabulary");
    }
    return tc::embedding_lookup(table, ids);
  }
};

template <class T>
struct SpeakerProjector {
  tc::Tensor<T> weight;  // [512, D], bias-free

  SpeakerProjector() = default;
  explicit SpeakerProjector(std::size_t d) : weight(init::param<T>({kSpeakerDim, d})) {}

  tc::Tensor<T> embed(const SpeakerVector& s) const {
    require(s.values.size() == kSpeakerDim, ErrorKind::kShape, "speaker vector must have 512 entries");
    std::vector<T> v(s.values.begin(), s.values.end());
    return tc::matmul(tc::Tensor<T>::from_data({1, kSpeakerDim}, std::move(v)), weight);
  }
};

enum class Stream { kNone = -1, kVideo = 0, kText = 1, kSpeech = 2 };

// Learned vectors: BOS, EOS and mask substitute for each of the three streams.
template <class T>
struct MarkerEmbeddings {
  tc::Tensor<T> table;  // [9, D]: rows 0-2 BOS, 3-5 EOS, 6-8 mask

  MarkerEmbeddings() = default;
  explicit MarkerEmbeddings(std::size_t d) : table(init::param<T>({9, d})) {}

  static int bos_row(Stream s) { return static_cast<int>(s); }
  static int eos_row(Stream s) { return 3 + static_cast<int>(s); }
  static int mask_row(Stream s) { return 6 + static_cast<int>(s); }
};

template <class T>
struct ModalityEncoders {
  VideoEmbedder<T> video;
  SpeechEmbedder<T> speech;
  TextEmbedder<T> text;
  SpeakerProjector<T> speaker;
  MarkerEmbeddings<T> markers;
};

struct ProbeNorms {
  double video = 0.0;
  double text = 0.0;
  double speech = 0.0;
  double speaker = 0.0;
};

// Mean L2 norm of each modality's embedding over `probes` random valid inputs.
template <class T, class Rng>
ProbeNorms probe_embedding_norms(const ModalityEncoders<T>& enc, Rng& rng, std::size_t probes = 256) {
  tc::NoGradGuard no_grad;
  auto mean_row_norm = [](const tc::Tensor<T>& x) {
    const std::size_t d = x.dim(1);
    double total = 0.0;
    for (std::size_t r = 0; r < x.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(x.data()[r * d + c]) * x.data()[r * d + c];
      total += std::sqrt(s);
    }
    return total / static_cast<double>(x.dim(0));
  };
  ProbeNorms out;
  {
    std::uniform_int_distribution<int> tok(0, enc.video.codebook_size - 1);
    std::vector<int> tokens(probes * enc.video.cells());
    for (int& t : tokens) t = tok(rng);
    out.video = mean_row_norm(enc.video.embed_tokens(tokens));
  }
  {
    std::uniform_int_distribution<int> id(0, static_cast<int>(enc.text.vocab_size()) - 1);
    std::vector<int> ids(probes);
    for (int& t : ids) t = id(rng);
    out.text = mean_row_norm(enc.text.embed(ids));
  }
  {
    std::uniform_int_distribution<int> lvl(0, kDMelLevels - 1);
    std::vector<int> values(probes * enc.speech.channels);
    for (int& v : values) v = lvl(rng);
    out.speech = mean_row_norm(enc.speech.embed_values(values));
  }
  {
    double total = 0.0;
    for (std::size_t i = 0; i < probes; ++i) {
      const SpeakerVector s = random_speaker_vector(rng(), static_cast<int>(i));
      total += mean_row_norm(enc.speaker.embed(s));
    }
    out.speaker = total / static_cast<double>(probes);
  }
  return out;
}

// Tables ~ N(0, 1/D'), linear maps ~ N(0, 1/fan_in); then each modality's
// terminal map is rescaled so its mean probe norm equals `target_norm`.
template <class T, class Rng>
ProbeNorms norm_matched_init(ModalityEncoders<T>& enc, Rng& rng, double target_norm = 1.0,
                             std::size_t probes = 256) {
  const std::size_t d = enc.video.dim;
  const double table_std = 1.0 / std::sqrt(static_cast<double>(d));
  init::normal_fill(enc.video.table, table_std, rng);
  if (enc.video.aggregation == Aggregation::kAttention) {
    init::normal_fill(enc.video.query, table_std, rng);
    init::normal_fill(enc.video.key, table_std, rng);
    init::normal_fill(enc.video.value, table_std, rng);
  }
  if (enc.video.aggregation == Aggregation::kStack) {
    init::normal_fill(enc.video.stack_proj, 1.0 / std::sqrt(static_cast<double>(enc.video.stack_proj.dim(0))), rng);
  }
  init::normal_fill(enc.text.table, table_std, rng);
  init::normal_fill(enc.speech.table, 1.0 / std::sqrt(static_cast<double>(enc.speech.embed_dim)), rng);
  init::normal_fill(enc.speech.projection, 1.0 / std::sqrt(static_cast<double>(enc.speech.projection.dim(0))), rng);
  init::normal_fill(enc.speaker.weight, 1.0 / std::sqrt(static_cast<double>(kSpeakerDim)), rng);
  init::normal_fill(enc.markers.table, table_std, rng);

  const ProbeNorms before = probe_embedding_norms(enc, rng, probes);
  init::scale_in_place(enc.video.terminal(), target_norm / before.video);
  init::scale_in_place(enc.text.table, target_norm / before.text);
  init::scale_in_place(enc.speech.projection, target_norm / before.speech);
  init::scale_in_place(enc.speaker.weight, target_norm / before.speaker);
  return probe_embedding_norms(enc, rng, probes);
}

}  // namespace visatronic

#pragma once

// Tiny decoder cases for gradient, causality and RoPE property checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "visatronic/decoder.hpp"

namespace decoder_fixture {

using namespace visatronic;

inline ModelConfig tiny_config(Aggregation agg = Aggregation::kAttention) {
  ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.channels = 3;
  c.speech_embed_dim = 2;
  c.video_codebook = 5;
  c.video_grid_h = 2;
  c.video_grid_w = 2;
  c.text_vocab = 6;
  c.aggregation = agg;
  return c;
}

// Owns every input so DecoderInputs pointers stay valid.
struct Case {
  ModelConfig cfg;
  SpeakerVector speaker;
  VideoTokenGrid video;
  DMelSeq speech;
  SequencePlan plan;

  DecoderInputs inputs() const { return {&speaker, plan.n_video > 0 ? &video : nullptr, &speech}; }
};

inline Case random_case(const ModelConfig& cfg, std::mt19937_64& rng, LayoutKind layout, PositionKind pos,
                        std::size_t max_text = 4, std::size_t max_video = 4, std::size_t max_speech = 6) {
  Case c;
  c.cfg = cfg;
  std::normal_distribution<double> n01(0.0, 1.0);
  for (double& v : c.speaker.values) v = n01(rng) / std::sqrt(static_cast<double>(kSpeakerDim));
  std::uniform_int_distribution<std::size_t> nt(1, max_text), nv(1, max_video), ns(1, max_speech);
  std::uniform_int_distribution<int> tok(0, cfg.text_vocab - 1), vtok(0, cfg.video_codebook - 1),
      level(0, kDMelLevels - 1);
  PlanRequest req;
  req.layout = layout;
  req.positions.kind = pos;
  const std::size_t n_text = nt(rng);
  for (std::size_t i = 0; i < n_text; ++i) req.text_ids.push_back(tok(rng));
  req.n_video = nv(rng);
  req.n_speech = ns(rng);
  c.video = VideoTokenGrid{*req.n_video, cfg.video_grid_h, cfg.video_grid_w, cfg.video_codebook, kVideoFramePeriod, {}};
  for (std::size_t i = 0; i < *req.n_video * c.video.cells_per_frame(); ++i) c.video.tokens.push_back(vtok(rng));
  c.speech.indices = Grid<int>(req.n_speech, cfg.channels, 0);
  for (int& v : c.speech.indices.data()) v = level(rng);
  c.plan = build_plan(req);
  return c;
}

inline tc::Tensor<double> loss_of(const Model<double>& m, const Case& c) {
  return speech_ce_loss(forward(m, c.plan, c.inputs()), c.plan, &c.speech, c.cfg.channels);
}

// Full-decoder finite-difference check on sampled coordinates of every
// parameter tensor.
inline gradcheck::Report decoder_gradcheck(std::uint64_t seed, Aggregation agg, LayoutKind layout,
                                           std::size_t coords_per_param = 6) {
  const ModelConfig cfg = tiny_config(agg);
  auto model = Model<double>::init(cfg, seed);
  // Non-trivial biases and norms so every parameter has a gradient path.
  std::mt19937_64 rng(seed + 1);
  for (auto& [name, t] : model.named_parameters()) {
    if (t.rank() == 1) {
      auto& v = t.mutable_data();
      std::normal_distribution<double> n(0.0, 0.1);
      for (double& x : v) x += n(rng);
    }
  }
  const Case c = random_case(cfg, rng, layout, PositionKind::kTimeAligned);
  gradcheck::Options opt;
  opt.max_coords_per_param = coords_per_param;
  opt.seed = seed;
  return gradcheck::check([&] { return loss_of(model, c); }, model.parameters(), opt);
}

// Head logits for every slot, [n_slots, F * 17].
inline std::vector<double> all_logits(const Model<double>& m, const Case& c) {
  tc::NoGradGuard guard;
  const auto h = decoder_trunk(m, c.plan, c.inputs());
  std::vector<int> rows(c.plan.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return logits_at(m, h, rows).data();
}

struct ProbeResult {
  bool earlier_identical = true;  // every row before the perturbed slot
  bool perturbed_row_changed = false;
};

// Perturbs the content or position of one random non-first slot and
// compares logits row by row.
inline ProbeResult causality_probe(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_layout(0, 4), pick_pos(0, 1);
  const auto layout = static_cast<LayoutKind>(pick_layout(rng));
  const auto pos = pick_pos(rng) == 0 ? PositionKind::kGlobal : PositionKind::kTimeAligned;
  const ModelConfig cfg = tiny_config(static_cast<Aggregation>(seed % 5));
  const auto model = Model<double>::init(cfg, seed);
  Case base = random_case(cfg, rng, layout, pos, 5, 6, 8);
  std::uniform_int_distribution<std::size_t> pick_slot(1, base.plan.size() - 1);
  const std::size_t j = pick_slot(rng);
  Case pert = base;
  Slot& s = pert.plan.slots[j];
  switch (s.kind) {
    case SlotKind::kText: s.payload = (s.payload + 1) % cfg.text_vocab; break;
    case SlotKind::kVideo:
      for (std::size_t k = 0; k < pert.video.cells_per_frame(); ++k) {
        int& t = pert.video.tokens[static_cast<std::size_t>(s.payload) * pert.video.cells_per_frame() + k];
        t = (t + 1) % cfg.video_codebook;
      }
      break;
    case SlotKind::kSpeech:
      for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
        int& v = pert.speech.indices(static_cast<std::size_t>(s.payload), ch);
        v = (v + 7) % kDMelLevels;
      }
      break;
    default: s.masked = !s.masked; break;
  }
  if (rng() % 2 == 0) s.position += 3;

  const auto a = all_logits(model, base), b = all_logits(model, pert);
  const std::size_t w = cfg.channels * static_cast<std::size_t>(kSpeechClasses);
  ProbeResult r;
  r.earlier_identical = std::equal(a.begin(), a.begin() + static_cast<long>(j * w), b.begin());
  r.perturbed_row_changed = !std::equal(a.begin() + static_cast<long>(j * w),
                                        a.begin() + static_cast<long>((j + 1) * w), b.begin() + static_cast<long>(j * w));
  return r;
}

// |<R(m)q, R(n)k> - <R(m+s)q, R(n+s)k>| for one random draw.
inline double rope_shift_error(std::mt19937_64& rng, std::size_t head_dim = 16, double base = 10000.0) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> pos(0, 4000), shift(-2000, 4000);
  std::vector<double> q(head_dim), k(head_dim);
  for (double& x : q) x = n01(rng);
  for (double& x : k) x = n01(rng);
  const std::int64_t m = pos(rng), n = pos(rng);
  const std::int64_t s = std::max<std::int64_t>(shift(rng), -std::min(m, n));
  auto dot = [&](std::int64_t pm, std::int64_t pn) {
    const auto rq = tc::rope_rotate<double>(q, pm, base), rk = tc::rope_rotate<double>(k, pn, base);
    double d = 0.0;
    for (std::size_t i = 0; i < head_dim; ++i) d += rq[i] * rk[i];
    return d;
  };
  return std::abs(dot(m, n) - dot(m + s, n + s));
}

}  // namespace decoder_fixture

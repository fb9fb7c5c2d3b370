#pragma once

// Autoregressive speech generation. Each step rebuilds the plan for the
// frames generated so far, keeps it up to the slot that predicts the next
// frame, and samples F channels independently from that slot's logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "visatronic/decoder.hpp"
#include "visatronic/error.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/seqlayout.hpp"
#include "visatronic/tokenizers.hpp"

namespace visatronic {

struct GenOptions {
  double temperature = 0.0;               // 0 = argmax
  std::optional<std::size_t> max_frames;  // default derived from the video length
  double stop_rule = 0.5;                 // fraction of channels that must emit EOS
  bool drop_video = false;
  bool drop_text = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(temperature >= 0.0 && std::isfinite(temperature), ErrorKind::kConfig, "temperature must be >= 0");
    require(!max_frames || *max_frames >= 1, ErrorKind::kConfig, "max_frames must be >= 1");
    require(stop_rule > 0.0 && stop_rule <= 1.0, ErrorKind::kConfig, "stop_rule must be in (0, 1]");
    require(!(drop_video && drop_text), ErrorKind::kUsage, "cannot drop both video and text");
  }
};

// Cap used without video.
inline constexpr std::size_t kDefaultMaxFramesNoVideo = 1000;

// 1.6 x the video duration in speech frames.
inline std::size_t default_max_frames(std::size_t n_video_frames, double video_period = kVideoFramePeriod,
                                      double speech_period = kSpeechFramePeriod) {
  const double frames = 1.6 * static_cast<double>(n_video_frames) * video_period / speech_period;
  // Guard against representation noise pushing an exact integer up by one.
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frames - 1e-9)));
}

struct GenResult {
  DMelSeq speech;
  bool stopped = false;                      // EOS rule fired before the cap
  std::size_t stray_eos = 0;                 // EOS classes replaced by level 15
  std::vector<std::size_t> attended_length;  // prefix length at each step
};

template <class T>
GenResult generate_detailed(const Model<T>& model, const SpeakerVector& speaker, const VideoTokenGrid* video,
                            const TextTokens* text, LayoutKind layout, PositionScheme pos, const GenOptions& opts) {
  opts.validate();
  const bool wants_video = layout_uses_video(layout);
  const bool wants_text = layout_uses_text(layout);
  require(!wants_video || opts.drop_video || video != nullptr, ErrorKind::kLayout,
          std::string("layout ") + std::string(to_string(layout)) + " requires video");
  require(!wants_text || opts.drop_text || text != nullptr, ErrorKind::kLayout,
          std::string("layout ") + std::string(to_string(layout)) + " requires text");
  const bool has_video = wants_video && !opts.drop_video;
  const bool has_text = wants_text && !opts.drop_text;
  require(has_video || has_text, ErrorKind::kLayout, "conditioning is empty after dropping modalities");

  PlanRequest req;
  req.layout = layout;
  req.positions = pos;
  if (has_text) req.text_ids = text->ids;
  // A dropped modality keeps its BOS/EOS pair with nothing in between.
  if (wants_video) {
    req.n_video = has_video ? video->n_frames : 0;
    if (video) req.video_period = video->frame_period_seconds;
  }

  const std::size_t cap = opts.max_frames.value_or(
      video ? default_max_frames(video->n_frames, video->frame_period_seconds) : kDefaultMaxFramesNoVideo);
  const std::size_t f = model.cfg.channels;
  const std::size_t need_eos =
      static_cast<std::size_t>(std::ceil(opts.stop_rule * static_cast<double>(f) - 1e-9));

  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  tc::NoGradGuard no_grad;

  GenResult out;
  std::vector<int> frames;  // t x F
  DMelSeq so_far{Grid<int>(0, f), kSpeechFramePeriod};
  DecoderInputs in{&speaker, has_video ? video : nullptr, &so_far};

  for (std::size_t t = 0; t < cap; ++t) {
    req.n_speech = t;
    SequencePlan plan = build_plan(req);
    // The slot predicting frame t: bos_s when t == 0, else speech frame t-1.
    std::size_t idx = plan.slots.size();
    for (std::size_t i = 0; i < plan.slots.size(); ++i) {
      const Slot& s = plan.slots[i];
      const bool hit = t == 0 ? (s.kind == SlotKind::kBos && s.stream == Stream::kSpeech)
                              : (s.kind == SlotKind::kSpeech && static_cast<std::size_t>(s.payload) == t - 1);
      if (hit) idx = i;
    }
    require(idx < plan.slots.size(), ErrorKind::kContract, "internal: no predicting slot in plan");
    plan.slots.resize(idx + 1);
    out.attended_length.push_back(plan.slots.size());

    const auto hidden = decoder_trunk(model, plan, in);
    const int row = static_cast<int>(idx);
    const auto logits = logits_at(model, hidden, std::span<const int>(&row, 1));
    const auto& lv = logits.data();

    std::vector<int> frame(f);
    std::size_t n_eos = 0;
    for (std::size_t c = 0; c < f; ++c) {
      const T* l = lv.data() + c * kSpeechClasses;
      int pick = 0;
      if (opts.temperature == 0.0) {
        for (int k = 1; k < kSpeechClasses; ++k) {
          if (l[k] > l[pick]) pick = k;
        }
      } else {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < kSpeechClasses; ++k) mx = std::max(mx, static_cast<double>(l[k]) / opts.temperature);
        double p[kSpeechClasses];
        double z = 0.0;
        for (int k = 0; k < kSpeechClasses; ++k) {
          p[k] = std::exp(static_cast<double>(l[k]) / opts.temperature - mx);
          z += p[k];
        }
        double u = unit(rng) * z;
        pick = kSpeechClasses - 1;
        for (int k = 0; k < kSpeechClasses; ++k) {
          if (u < p[k]) {
            pick = k;
            break;
          }
          u -= p[k];
        }
      }
      frame[c] = pick;
      n_eos += pick == kSpeechEosClass;
    }
    if (n_eos >= need_eos) {
      out.stopped = true;
      break;
    }
    for (int& v : frame) {
      if (v == kSpeechEosClass) {
        v = kDMelLevels - 1;
        ++out.stray_eos;
      }
    }
    frames.insert(frames.end(), frame.begin(), frame.end());
    so_far.indices = Grid<int>(t + 1, f, frames);
  }
  out.speech = so_far;
  return out;
}

template <class T>
DMelSeq generate(const Model<T>& model, const SpeakerVector& speaker, const VideoTokenGrid* video,
                 const TextTokens* text, LayoutKind layout, PositionScheme pos, const GenOptions& opts) {
  return generate_detailed(model, speaker, video, text, layout, pos, opts).speech;
}

// Video frames are interleaved by timestamp into the prefix.
template <class T>
GenResult generate_streaming(const Model<T>& model, const SpeakerVector& speaker, const VideoTokenGrid* video,
                             const TextTokens* text, PositionScheme pos, const GenOptions& opts) {
  return generate_detailed(model, speaker, video, text, LayoutKind::kTVStreaming, pos, opts);
}

}  // namespace visatronic

#pragma once

// Multimodal sequence plans: slot order per layout, position indices,
// next-frame loss targets, span masking and causal reachability.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "visatronic/encoders.hpp"
#include "visatronic/error.hpp"
#include "visatronic/tensor.hpp"
#include "visatronic/tokenizers.hpp"

namespace visatronic {

enum class LayoutKind { kTTS, kTVOrdered, kVTOrdered, kTVStreaming, kVOnly };

inline std::string_view to_string(LayoutKind k) {
  switch (k) {
    case LayoutKind::kTTS: return "TTS";
    case LayoutKind::kTVOrdered: return "TV_ordered";
    case LayoutKind::kVTOrdered: return "VT_ordered";
    case LayoutKind::kTVStreaming: return "TV_streaming";
    case LayoutKind::kVOnly: return "V_only";
  }
  return "?";
}

inline LayoutKind parse_layout(std::string_view s) {
  if (s == "TTS") return LayoutKind::kTTS;
  if (s == "TV_ordered") return LayoutKind::kTVOrdered;
  if (s == "VT_ordered") return LayoutKind::kVTOrdered;
  if (s == "TV_streaming") return LayoutKind::kTVStreaming;
  if (s == "V_only") return LayoutKind::kVOnly;
  fail(ErrorKind::kConfig, "unknown layout '" + std::string(s) + "'");
}

inline bool layout_uses_video(LayoutKind k) { return k != LayoutKind::kTTS; }
inline bool layout_uses_text(LayoutKind k) { return k != LayoutKind::kVOnly; }

enum class PositionKind { kGlobal, kTimeAligned };

struct PositionScheme {
  PositionKind kind = PositionKind::kGlobal;
  double base_unit_seconds = 0.005;
};

inline std::string_view to_string(PositionKind k) {
  return k == PositionKind::kGlobal ? "global" : "time_aligned";
}

inline PositionKind parse_position_kind(std::string_view s) {
  if (s == "global") return PositionKind::kGlobal;
  if (s == "time_aligned") return PositionKind::kTimeAligned;
  fail(ErrorKind::kConfig, "unknown position scheme '" + std::string(s) + "'");
}

inline constexpr double kVideoFramePeriod = 0.040;
inline constexpr double kSpeechFramePeriod = 0.025;

// Number of base units in `period`; the unit must divide it exactly.
inline std::int64_t ticks_per_frame(double period, double unit) {
  require(unit > 0.0, ErrorKind::kConfig, "position base unit must be positive");
  const double ratio = period / unit;
  const double r = std::round(ratio);
  require(r >= 1.0 && std::abs(ratio - r) < 1e-9, ErrorKind::kConfig,
          "position base unit must divide the frame periods exactly");
  return static_cast<std::int64_t>(r);
}

enum class SlotKind { kSpeaker, kVideo, kText, kSpeech, kBos, kEos };

inline std::string_view to_string(SlotKind k) {
  switch (k) {
    case SlotKind::kSpeaker: return "speaker";
    case SlotKind::kVideo: return "video";
    case SlotKind::kText: return "text";
    case SlotKind::kSpeech: return "speech";
    case SlotKind::kBos: return "bos";
    case SlotKind::kEos: return "eos";
  }
  return "?";
}

inline std::string_view to_string(Stream s) {
  switch (s) {
    case Stream::kNone: return "none";
    case Stream::kVideo: return "video";
    case Stream::kText: return "text";
    case Stream::kSpeech: return "speech";
  }
  return "?";
}

// Target frame index meaning "the all-EOS terminal frame".
inline constexpr int kEosFrame = -1;

struct Slot {
  SlotKind kind = SlotKind::kSpeaker;
  Stream stream = Stream::kNone;  // owning stream for content, BOS and EOS slots
  int payload = 0;                // text token id, or video/speech frame index
  std::int64_t position = 0;
  std::optional<double> timestamp;
  bool is_loss_target = false;
  std::optional<int> target_frame;  // next speech frame, or kEosFrame
  bool masked = false;

  friend bool operator==(const Slot&, const Slot&) = default;
};

struct SequencePlan {
  LayoutKind layout = LayoutKind::kTVOrdered;
  PositionScheme positions;
  std::size_t n_text = 0;
  std::size_t n_video = 0;
  std::size_t n_speech = 0;
  std::vector<Slot> slots;

  std::size_t size() const { return slots.size(); }

  std::size_t loss_target_count() const {
    return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const Slot& s) { return s.is_loss_target; }));
  }

  std::vector<std::int64_t> position_indices() const {
    std::vector<std::int64_t> out;
    out.reserve(slots.size());
    for (const auto& s : slots) out.push_back(s.position);
    return out;
  }

  friend bool operator==(const SequencePlan& a, const SequencePlan& b) {
    return a.layout == b.layout && a.n_text == b.n_text && a.n_video == b.n_video && a.n_speech == b.n_speech &&
           a.slots == b.slots;
  }
};

struct PlanRequest {
  std::vector<int> text_ids;             // used unless the layout omits text
  std::optional<std::size_t> n_video;    // required unless the layout omits video
  std::size_t n_speech = 0;
  LayoutKind layout = LayoutKind::kTVOrdered;
  PositionScheme positions;
  double video_period = kVideoFramePeriod;
  double speech_period = kSpeechFramePeriod;
};

namespace layout_detail {

inline Slot make_slot(SlotKind kind, Stream stream, int payload = 0) {
  Slot s;
  s.kind = kind;
  s.stream = stream;
  s.payload = payload;
  return s;
}

inline void push_block_start(std::vector<Slot>& out, Stream s) { out.push_back(make_slot(SlotKind::kBos, s)); }
inline void push_block_end(std::vector<Slot>& out, Stream s) { out.push_back(make_slot(SlotKind::kEos, s)); }

inline void push_text_block(std::vector<Slot>& out, std::span<const int> ids) {
  push_block_start(out, Stream::kText);
  for (int id : ids) out.push_back(make_slot(SlotKind::kText, Stream::kText, id));
  push_block_end(out, Stream::kText);
}

inline void push_video_block(std::vector<Slot>& out, std::size_t n, double period) {
  push_block_start(out, Stream::kVideo);
  for (std::size_t t = 0; t < n; ++t) {
    Slot s = make_slot(SlotKind::kVideo, Stream::kVideo, static_cast<int>(t));
    s.timestamp = static_cast<double>(t) * period;
    out.push_back(s);
  }
  push_block_end(out, Stream::kVideo);
}

inline Slot speech_slot(std::size_t t, double period) {
  Slot s = make_slot(SlotKind::kSpeech, Stream::kSpeech, static_cast<int>(t));
  s.timestamp = static_cast<double>(t) * period;
  return s;
}

}  // namespace layout_detail

inline SequencePlan build_plan(const PlanRequest& req) {
  using namespace layout_detail;
  const bool uses_video = layout_uses_video(req.layout);
  const bool uses_text = layout_uses_text(req.layout);
  require(!uses_video || req.n_video.has_value(), ErrorKind::kLayout,
          std::string("layout ") + std::string(to_string(req.layout)) + " requires video");
  const std::int64_t video_ticks = ticks_per_frame(req.video_period, req.positions.base_unit_seconds);
  const std::int64_t speech_ticks = ticks_per_frame(req.speech_period, req.positions.base_unit_seconds);

  SequencePlan plan;
  plan.layout = req.layout;
  plan.positions = req.positions;
  plan.n_text = uses_text ? req.text_ids.size() : 0;
  plan.n_video = uses_video ? *req.n_video : 0;
  plan.n_speech = req.n_speech;
  auto& out = plan.slots;
  out.reserve(1 + plan.n_text + plan.n_video + plan.n_speech + 6);
  out.push_back(make_slot(SlotKind::kSpeaker, Stream::kNone));

  const std::span<const int> text(req.text_ids);
  switch (req.layout) {
    case LayoutKind::kTTS:
    case LayoutKind::kTVOrdered:
    case LayoutKind::kVTOrdered:
    case LayoutKind::kVOnly: {
      const bool video_first = req.layout == LayoutKind::kVTOrdered || req.layout == LayoutKind::kVOnly;
      if (video_first && uses_video) push_video_block(out, plan.n_video, req.video_period);
      if (uses_text) push_text_block(out, text);
      if (!video_first && uses_video) push_video_block(out, plan.n_video, req.video_period);
      push_block_start(out, Stream::kSpeech);
      for (std::size_t t = 0; t < plan.n_speech; ++t) out.push_back(speech_slot(t, req.speech_period));
      push_block_end(out, Stream::kSpeech);
      break;
    }
    case LayoutKind::kTVStreaming: {
      push_text_block(out, text);
      push_block_start(out, Stream::kVideo);
      push_block_start(out, Stream::kSpeech);
      // Merge by exact tick time; video first on equal timestamps.
      std::size_t v = 0, s = 0;
      while (v < plan.n_video || s < plan.n_speech) {
        const bool take_video =
            v < plan.n_video &&
            (s >= plan.n_speech || static_cast<std::int64_t>(v) * video_ticks <= static_cast<std::int64_t>(s) * speech_ticks);
        if (take_video) {
          Slot slot = make_slot(SlotKind::kVideo, Stream::kVideo, static_cast<int>(v));
          slot.timestamp = static_cast<double>(v) * req.video_period;
          out.push_back(slot);
          ++v;
        } else {
          out.push_back(speech_slot(s, req.speech_period));
          ++s;
        }
      }
      push_block_end(out, Stream::kVideo);
      push_block_end(out, Stream::kSpeech);
      break;
    }
  }

  // Position indices.
  if (req.positions.kind == PositionKind::kGlobal) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i].position = static_cast<std::int64_t>(i);
  } else {
    // Untimed slots count up in plan order; timed slots sit on a shared grid
    // after them. Stream EOS markers are timed at the stream's end.
    std::int64_t next = 0;
    for (auto& s : out) {
      const bool timed = s.kind == SlotKind::kVideo || s.kind == SlotKind::kSpeech ||
                         (s.kind == SlotKind::kEos && (s.stream == Stream::kVideo || s.stream == Stream::kSpeech));
      if (!timed) s.position = next++;
    }
    const std::int64_t base = next;
    for (auto& s : out) {
      if (s.kind == SlotKind::kVideo) s.position = base + video_ticks * s.payload;
      if (s.kind == SlotKind::kSpeech) s.position = base + speech_ticks * s.payload;
      if (s.kind == SlotKind::kEos && s.stream == Stream::kVideo)
        s.position = base + video_ticks * static_cast<std::int64_t>(plan.n_video);
      if (s.kind == SlotKind::kEos && s.stream == Stream::kSpeech)
        s.position = base + speech_ticks * static_cast<std::int64_t>(plan.n_speech);
    }
  }

  // Speech BOS and every speech frame predict the following frame; the last
  // one predicts the EOS frame.
  for (auto& s : out) {
    const bool is_speech_bos = s.kind == SlotKind::kBos && s.stream == Stream::kSpeech;
    if (is_speech_bos || s.kind == SlotKind::kSpeech) {
      const std::size_t next_frame = is_speech_bos ? 0 : static_cast<std::size_t>(s.payload) + 1;
      s.is_loss_target = true;
      s.target_frame = next_frame < plan.n_speech ? static_cast<int>(next_frame) : kEosFrame;
    }
  }
  for (Stream st : {Stream::kVideo, Stream::kSpeech}) {
    double prev = -1.0;
    for (const auto& s : out) {
      if (s.stream == st && s.timestamp) {
        require(*s.timestamp > prev, ErrorKind::kContract, "internal: non-monotone timestamps in plan");
        prev = *s.timestamp;
      }
    }
  }
  return plan;
}

inline SequencePlan build_plan(const TextTokens& text, const VideoTokenGrid* video, std::size_t n_speech,
                               LayoutKind layout, PositionScheme pos) {
  PlanRequest req;
  req.text_ids = text.ids;
  if (video) {
    req.n_video = video->n_frames;
    req.video_period = video->frame_period_seconds;
  }
  req.n_speech = n_speech;
  req.layout = layout;
  req.positions = pos;
  return build_plan(req);
}

struct MaskingOptions {
  double probability = 0.5;
  double mean_span = 3.0;
  double ratio = 0.5;
};

// With probability p, masks spans (uniform start, geometric length with the
// given mean) in each of the video, text and speech streams until
// round(ratio * n) of that stream's content slots are masked. Speech slots
// that are masked, or whose target frame is masked, stop being loss targets.
template <class Rng>
SequencePlan apply_span_masking(SequencePlan plan, const MaskingOptions& opts, Rng& rng) {
  require(opts.probability >= 0.0 && opts.probability <= 1.0, ErrorKind::kConfig,
          "masking probability must be in [0, 1]");
  require(opts.mean_span >= 1.0, ErrorKind::kConfig, "mean span must be >= 1");
  require(opts.ratio >= 0.0 && opts.ratio <= 1.0, ErrorKind::kConfig, "mask ratio must be in [0, 1]");
  std::bernoulli_distribution apply(opts.probability);
  if (!apply(rng)) return plan;

  std::geometric_distribution<int> extra(1.0 / opts.mean_span);
  std::vector<bool> speech_frame_masked(plan.n_speech, false);
  for (SlotKind kind : {SlotKind::kVideo, SlotKind::kText, SlotKind::kSpeech}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < plan.slots.size(); ++i) {
      if (plan.slots[i].kind == kind) members.push_back(i);
    }
    const std::size_t n = members.size();
    if (n == 0) continue;
    const auto target = static_cast<std::size_t>(std::llround(opts.ratio * static_cast<double>(n)));
    std::uniform_int_distribution<std::size_t> start_dist(0, n - 1);
    std::size_t count = 0;
    while (count < target) {
      const std::size_t start = start_dist(rng);
      const std::size_t len = 1 + static_cast<std::size_t>(extra(rng));
      for (std::size_t k = start; k < std::min(n, start + len) && count < target; ++k) {
        Slot& s = plan.slots[members[k]];
        if (!s.masked) {
          s.masked = true;
          ++count;
        }
      }
    }
    if (kind == SlotKind::kSpeech) {
      for (std::size_t idx : members) {
        const Slot& s = plan.slots[idx];
        if (s.masked) speech_frame_masked[static_cast<std::size_t>(s.payload)] = true;
      }
    }
  }
  // A masked region drops out of the loss on both sides: as the predicted
  // frame and as the frame predicting its successor.
  for (Slot& s : plan.slots) {
    if (!s.is_loss_target || !s.target_frame) continue;
    const bool target_masked =
        *s.target_frame != kEosFrame && speech_frame_masked[static_cast<std::size_t>(*s.target_frame)];
    if (target_masked || s.masked) s.is_loss_target = false;
  }
  return plan;
}

// Slot i attends to every slot j <= i in plan order.
inline tc::AttentionMask causal_reachability(const SequencePlan& plan) {
  const std::size_t n = plan.slots.size();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(n * n, std::uint8_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) (*mask)[i * n + j] = 1;
  }
  return mask;
}

// One line per slot: index, kind[/stream], payload, position, timestamp, flags.
inline std::string render_plan(const SequencePlan& plan) {
  std::ostringstream os;
  os << "# layout=" << to_string(plan.layout) << " positions=" << to_string(plan.positions.kind)
     << " slots=" << plan.slots.size() << " text=" << plan.n_text << " video=" << plan.n_video
     << " speech=" << plan.n_speech << "\n";
  for (std::size_t i = 0; i < plan.slots.size(); ++i) {
    const Slot& s = plan.slots[i];
    os << i << '\t' << to_string(s.kind);
    if (s.stream != Stream::kNone && (s.kind == SlotKind::kBos || s.kind == SlotKind::kEos)) {
      os << '/' << to_string(s.stream);
    }
    os << '\t';
    if (s.kind == SlotKind::kText || s.kind == SlotKind::kVideo || s.kind == SlotKind::kSpeech) {
      os << s.payload;
    } else {
      os << '-';
    }
    os << "\tpos=" << s.position << "\tt=";
    if (s.timestamp) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", *s.timestamp);
      os << buf;
    } else {
      os << '-';
    }
    os << "\ttarget=";
    if (s.is_loss_target && s.target_frame) {
      if (*s.target_frame == kEosFrame) os << "eos";
      else os << *s.target_frame;
    } else {
      os << '-';
    }
    if (s.masked) os << "\tmasked";
    os << '\n';
  }
  return os.str();
}

}  // namespace visatronic

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "decoder_fixture.hpp"
#include "visatronic/sampler.hpp"

using namespace visatronic;
using decoder_fixture::Case;
using decoder_fixture::random_case;
using decoder_fixture::tiny_config;

namespace {

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kContract;
}

struct Fixture {
  Case c;
  TextTokens text;
  Model<double> model;

  explicit Fixture(std::uint64_t seed, LayoutKind layout = LayoutKind::kTVOrdered) {
    std::mt19937_64 rng(seed);
    c = random_case(tiny_config(), rng, layout, PositionKind::kTimeAligned);
    for (const auto& s : c.plan.slots) {
      if (s.kind == SlotKind::kText) text.ids.push_back(s.payload);
    }
    model = Model<double>::init(c.cfg, seed);
  }

  GenResult run(LayoutKind layout, const GenOptions& o) const {
    return generate_detailed(model, c.speaker, &c.video, &text, layout, {PositionKind::kTimeAligned, 0.005}, o);
  }

  // Logits become exactly the head bias: zero weight ignores the trunk.
  void set_logits(const std::vector<double>& per_class_bias) {
    auto& w = model.head_weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    auto& b = model.head_bias.mutable_data();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = per_class_bias[i % kSpeechClasses];
  }

  void set_eos_channels(std::size_t n_channels_with_eos) {
    std::vector<double> bias(kSpeechClasses, 0.0);
    bias[3] = 5.0;
    set_logits(bias);
    auto& b = model.head_bias.mutable_data();
    for (std::size_t ch = 0; ch < n_channels_with_eos; ++ch) b[ch * kSpeechClasses + kSpeechEosClass] = 50.0;
  }
};

}  // namespace

TEST(DefaultCap, OneSecondOfVideoGivesSixtyFourFrames) {
  EXPECT_EQ(default_max_frames(25), 64u);
  EXPECT_EQ(default_max_frames(1), 3u);  // ceil(2.56)
  EXPECT_EQ(default_max_frames(0), 1u);
}

TEST(Options, Validation) {
  GenOptions o;
  o.stop_rule = 0.0;
  EXPECT_EQ(kind_of([&] { o.validate(); }), ErrorKind::kConfig);
  o = {};
  o.max_frames = 0;
  EXPECT_EQ(kind_of([&] { o.validate(); }), ErrorKind::kConfig);
  o = {};
  o.temperature = -1.0;
  EXPECT_EQ(kind_of([&] { o.validate(); }), ErrorKind::kConfig);
  o = {};
  o.drop_video = o.drop_text = true;
  EXPECT_EQ(kind_of([&] { o.validate(); }), ErrorKind::kUsage);
}

TEST(Generate, GreedyIsDeterministic) {
  const Fixture f(1);
  GenOptions o;
  o.max_frames = 12;
  const auto a = f.run(LayoutKind::kTVOrdered, o), b = f.run(LayoutKind::kTVOrdered, o);
  EXPECT_EQ(a.speech, b.speech);
  EXPECT_EQ(a.stopped, b.stopped);
}

TEST(Generate, SeededSamplingIsReproducible) {
  const Fixture f(2);
  GenOptions o;
  o.max_frames = 10;
  o.temperature = 1.0;
  o.seed = 5;
  const auto a = f.run(LayoutKind::kVTOrdered, o), b = f.run(LayoutKind::kVTOrdered, o);
  EXPECT_EQ(a.speech, b.speech);
  o.seed = 6;
  EXPECT_NE(f.run(LayoutKind::kVTOrdered, o).speech, a.speech);
}

TEST(Generate, RespectsCapAndNeverEmitsEos) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Fixture f(seed);
    GenOptions o;
    o.max_frames = 7;
    o.temperature = 3.0;  // flat enough that EOS shows up mid-sequence
    o.stop_rule = 1.0;
    o.seed = seed;
    const auto r = f.run(LayoutKind::kTVOrdered, o);
    EXPECT_LE(r.speech.n_frames(), 7u);
    for (int v : r.speech.indices.data()) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, kDMelLevels);
    }
  }
}

TEST(StopRule, AllChannelsEosStopsBeforeAnyFrame) {
  Fixture f(3);
  f.set_eos_channels(3);
  const auto r = f.run(LayoutKind::kTVOrdered, {});
  EXPECT_TRUE(r.stopped);
  EXPECT_EQ(r.speech.n_frames(), 0u);
}

TEST(StopRule, HalfOfThreeChannelsNeedsTwo) {
  Fixture f(4);
  GenOptions o;
  o.max_frames = 6;
  f.set_eos_channels(1);
  auto r = f.run(LayoutKind::kTVOrdered, o);
  EXPECT_FALSE(r.stopped);
  ASSERT_EQ(r.speech.n_frames(), 6u);
  EXPECT_EQ(r.stray_eos, 6u);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_EQ(r.speech.indices(t, 0), kDMelLevels - 1);  // stray EOS -> level 15
    EXPECT_EQ(r.speech.indices(t, 1), 3);
  }
  f.set_eos_channels(2);
  r = f.run(LayoutKind::kTVOrdered, o);
  EXPECT_TRUE(r.stopped);
  EXPECT_EQ(r.speech.n_frames(), 0u);
  o.stop_rule = 1.0;
  r = f.run(LayoutKind::kTVOrdered, o);
  EXPECT_FALSE(r.stopped);
  EXPECT_EQ(r.stray_eos, 12u);
}

TEST(Sampling, GreedyTiesGoToLowestClass) {
  Fixture f(5);
  f.set_logits(std::vector<double>(kSpeechClasses, 0.0));
  GenOptions o;
  o.max_frames = 2;
  const auto r = f.run(LayoutKind::kTVOrdered, o);
  for (int v : r.speech.indices.data()) EXPECT_EQ(v, 0);
}

TEST(Sampling, TemperatureOneMatchesSoftmax) {
  Fixture f(6);
  std::vector<double> bias(kSpeechClasses, -30.0);
  bias[2] = std::log(0.5);
  bias[7] = std::log(0.3);
  bias[11] = std::log(0.2);
  f.set_logits(bias);
  GenOptions o;
  o.max_frames = 200;
  o.temperature = 1.0;
  o.seed = 9;
  const auto r = f.run(LayoutKind::kTVOrdered, o);
  std::vector<double> freq(kSpeechClasses, 0.0);
  for (int v : r.speech.indices.data()) freq[static_cast<std::size_t>(v)] += 1.0 / 600.0;
  EXPECT_NEAR(freq[2], 0.5, 0.06);
  EXPECT_NEAR(freq[7], 0.3, 0.06);
  EXPECT_NEAR(freq[11], 0.2, 0.06);
}

TEST(Sampling, LowTemperatureSharpens) {
  Fixture f(7);
  std::vector<double> bias(kSpeechClasses, -30.0);
  bias[2] = std::log(0.6);
  bias[7] = std::log(0.4);
  f.set_logits(bias);
  GenOptions o;
  o.max_frames = 100;
  o.temperature = 0.1;  // 0.6^10 : 0.4^10 ~ 58 : 1
  o.seed = 1;
  const auto r = f.run(LayoutKind::kTVOrdered, o);
  int twos = 0;
  for (int v : r.speech.indices.data()) twos += v == 2;
  EXPECT_GT(twos, 270);
}

TEST(Drops, BothIsUsageAndEmptyConditioningIsLayout) {
  const Fixture f(8);
  GenOptions o;
  o.drop_video = o.drop_text = true;
  EXPECT_EQ(kind_of([&] { f.run(LayoutKind::kTVOrdered, o); }), ErrorKind::kUsage);
  o = {};
  o.drop_text = true;
  EXPECT_EQ(kind_of([&] { f.run(LayoutKind::kTTS, o); }), ErrorKind::kLayout);
  o = {};
  o.drop_video = true;
  EXPECT_EQ(kind_of([&] { f.run(LayoutKind::kVOnly, o); }), ErrorKind::kLayout);
  EXPECT_EQ(kind_of([&] {
              generate(f.model, f.c.speaker, nullptr, &f.text, LayoutKind::kVTOrdered, PositionScheme{}, GenOptions{});
            }),
            ErrorKind::kLayout);
}

TEST(Drops, DroppedModalityBecomesEmptyBlock) {
  const Fixture f(9);
  const std::size_t n_text = f.text.ids.size(), n_video = f.c.video.n_frames;
  GenOptions o;
  o.max_frames = 1;
  // prefix at step 0: speaker + text block + video block + bos_s
  EXPECT_EQ(f.run(LayoutKind::kTVOrdered, o).attended_length[0], 1 + (n_text + 2) + (n_video + 2) + 1);
  o.drop_video = true;
  EXPECT_EQ(f.run(LayoutKind::kTVOrdered, o).attended_length[0], 1 + (n_text + 2) + 2 + 1);
  o.drop_video = false;
  o.drop_text = true;
  EXPECT_EQ(f.run(LayoutKind::kTVOrdered, o).attended_length[0], 1 + 2 + (n_video + 2) + 1);
}

TEST(Drops, ChangeTheOutput) {
  const Fixture f(10);
  GenOptions o;
  o.max_frames = 8;
  o.stop_rule = 1.0;
  const auto full = f.run(LayoutKind::kTVOrdered, o).speech;
  o.drop_text = true;
  EXPECT_NE(f.run(LayoutKind::kTVOrdered, o).speech, full);
}

TEST(Streaming, MatchesGenerateUnderStreamingLayout) {
  const Fixture f(11, LayoutKind::kTVStreaming);
  GenOptions o;
  o.max_frames = 9;
  o.temperature = 0.7;
  o.seed = 3;
  const PositionScheme pos{PositionKind::kTimeAligned, 0.005};
  const auto a = generate_streaming(f.model, f.c.speaker, &f.c.video, &f.text, pos, o);
  const auto b = f.run(LayoutKind::kTVStreaming, o);
  EXPECT_EQ(a.speech, b.speech);
  EXPECT_EQ(a.attended_length, b.attended_length);
}

TEST(Streaming, PrefixHoldsVideoUpToLatestSpeechFrame) {
  std::mt19937_64 rng(12);
  Case c = random_case(tiny_config(), rng, LayoutKind::kTVStreaming, PositionKind::kGlobal);
  // Longer video so the count grows across steps.
  c.video.n_frames = 10;
  c.video.tokens.assign(10 * c.video.cells_per_frame(), 1);
  const auto m = Model<double>::init(c.cfg, 12);
  const TextTokens text{{1, 2}};
  GenOptions o;
  o.max_frames = 20;
  o.stop_rule = 1.0;
  const auto r = generate_detailed(m, c.speaker, &c.video, &text, LayoutKind::kTVStreaming, PositionScheme{}, o);
  ASSERT_EQ(r.attended_length.size(), r.speech.n_frames() + (r.stopped ? 1 : 0));
  const std::size_t fixed = 1 + (2 + 2) + 2;  // speaker, text block, bos_v, bos_s
  for (std::size_t t = 0; t < r.attended_length.size(); ++t) {
    // Step t reads speech frames 0..t-1; the latest sits at (t-1) * 25 ms.
    const std::size_t videos = t == 0 ? 0 : std::min<std::size_t>(10, (t - 1) * 25 / 40 + 1);
    EXPECT_EQ(r.attended_length[t], fixed + t + videos) << "step " << t;
    const std::size_t ordered = 1 + (2 + 2) + (10 + 2) + 1 + t;
    EXPECT_LT(r.attended_length[t], ordered);
  }
}

TEST(Overfit, GreedyReproducesTheTrainingSample) {
  ModelConfig cfg = tiny_config(Aggregation::kMean);
  cfg.dim = 16;
  std::mt19937_64 rng(13);
  const Case c = random_case(cfg, rng, LayoutKind::kVTOrdered, PositionKind::kTimeAligned, 3, 3, 6);
  auto m = Model<double>::init(cfg, 13);
  const std::vector<TrainExample> batch{{c.plan, c.inputs()}};
  tc::AdamWState<double> opt;
  OptimConfig oc;
  oc.lr = 1e-2;
  oc.warmup = 0;
  oc.total_steps = 2000;
  std::int64_t step = 1;
  for (; step <= 2000; ++step) {
    train_step(m, opt, std::span<const TrainExample>(batch), oc, step);
    if (step % 50 == 0) {
      tc::NoGradGuard g;
      const auto [hits, total] = channel_hits(forward(m, c.plan, c.inputs()), c.plan, &c.speech, cfg.channels, false);
      if (hits == total) break;
    }
  }
  ASSERT_LE(step, 2000) << "model did not fit the sample";
  TextTokens text;
  for (const auto& s : c.plan.slots) {
    if (s.kind == SlotKind::kText) text.ids.push_back(s.payload);
  }
  GenOptions o;
  o.max_frames = 40;
  const auto r = generate_detailed(m, c.speaker, &c.video, &text, LayoutKind::kVTOrdered,
                                   {PositionKind::kTimeAligned, 0.005}, o);
  EXPECT_TRUE(r.stopped);
  EXPECT_EQ(r.speech.indices, c.speech.indices);
}

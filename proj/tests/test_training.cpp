#include <gtest/gtest.h>

#include <filesystem>
#include <functional>

#include "visatronic/training.hpp"

using namespace visatronic;

namespace {

RunConfig tiny_run(std::uint64_t seed = 3) {
  RunConfig rc = toy_run_config();
  rc.model.dim = 16;
  rc.model.heads = 2;
  rc.model.layers = 1;
  rc.model.speech_embed_dim = 4;
  rc.data.n_train = 8;
  rc.data.n_eval = 2;
  rc.data.world.min_video_frames = 20;
  rc.data.world.max_video_frames = 24;
  rc.batch_size = 2;
  rc.optimizer.total_steps = 50;
  rc.optimizer.warmup = 2;
  rc.seed = seed;
  return rc;
}

std::vector<std::vector<float>> weights(const Model<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.push_back(p.data());
  return out;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kUsage;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("visatronic_train_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "samples");
  return dir;
}

}  // namespace

TEST(RunConfig, ToyDefaultsValidate) {
  EXPECT_NO_THROW(toy_run_config().validate());
  EXPECT_NO_THROW(toy_run_config(LayoutKind::kTVStreaming).validate());
  EXPECT_EQ(toy_run_config().positions.kind, PositionKind::kTimeAligned);
}

TEST(RunConfig, JsonRoundTripIsIdentity) {
  RunConfig rc = tiny_run();
  rc.layout = LayoutKind::kTVOrdered;
  rc.model.aggregation = Aggregation::kAttention;
  rc.masking.probability = 0.25;
  const RunConfig back = run_config_from_json(to_json(rc));
  EXPECT_TRUE(back == rc);
  EXPECT_EQ(to_json(back).dump(), to_json(rc).dump());
}

TEST(RunConfig, UnknownKeysAreRejectedAtEveryLevel) {
  const RunConfig base = tiny_run();
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"learning_rate", 1}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"model", {{"width", 8}}}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"optimizer", {{"momentum", 0.9}}}}, base); }),
            ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"data", {{"world", {{"letters", 3}}}}}}, base); }),
            ErrorKind::kConfig);
}

TEST(RunConfig, BadValuesAreConfigErrors) {
  const RunConfig base = tiny_run();
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"batch_size", "eight"}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"batch_size", 0}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"layout", "VTX"}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"masking", {{"p", 1.5}}}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json{{"model", {{"channels", 80}}}}, base); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { run_config_from_json(Json::array(), base); }), ErrorKind::kConfig);
}

TEST(RunConfig, PartialConfigKeepsDefaults) {
  const RunConfig base = tiny_run();
  const RunConfig rc = run_config_from_json(Json{{"seed", 11}, {"optimizer", {{"lr", 0.01}}}}, base);
  EXPECT_EQ(rc.seed, 11u);
  EXPECT_EQ(rc.optimizer.lr, 0.01);
  EXPECT_EQ(rc.model, base.model);
  EXPECT_EQ(rc.batch_size, base.batch_size);
}

TEST(RunConfig, FileRoundTripAndMalformedFile) {
  const auto dir = fresh_dir("cfg");
  const RunConfig rc = tiny_run();
  save_run_config(dir / "run.json", rc);
  EXPECT_TRUE(load_run_config(dir / "run.json") == rc);
  write_file_bytes(dir / "bad.json", "{ not json");
  EXPECT_EQ(kind_of([&] { load_run_config(dir / "bad.json"); }), ErrorKind::kConfig);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, SameSeedIsBitIdenticalAndSeedMatters) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer a(rc, &data), b(rc, &data), c(tiny_run(4), &data);
  for (int i = 0; i < 4; ++i) {
    const auto ra = a.train_one(), rb = b.train_one();
    c.train_one();
    EXPECT_EQ(ra.loss, rb.loss);
    EXPECT_EQ(ra.grad_norm, rb.grad_norm);
  }
  EXPECT_EQ(weights(a.model()), weights(b.model()));
  EXPECT_NE(weights(a.model()), weights(c.model()));
  EXPECT_EQ(a.step(), 4);
}

TEST(Trainer, LossIsFiniteAndLrFollowsWarmup) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer t(rc, &data);
  const auto r1 = t.train_one(), r2 = t.train_one(), r3 = t.train_one();
  for (const auto& r : {r1, r2, r3}) {
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GT(r.loss, 0.0);
  }
  EXPECT_NEAR(r1.lr, rc.optimizer.lr * 0.5, 1e-12);
  EXPECT_NEAR(r2.lr, rc.optimizer.lr, 1e-12);
  EXPECT_LT(r3.lr, rc.optimizer.lr);
}

TEST(Trainer, EmptyTrainingSetIsAnError) {
  TrainData empty;
  EXPECT_EQ(kind_of([&] { Trainer t(tiny_run(), &empty); }), ErrorKind::kEmptyInput);
}

TEST(Trainer, StepRandomnessDependsOnlyOnSeedAndStep) {
  auto a = step_rng(5, 10), b = step_rng(5, 10), c = step_rng(5, 11), d = step_rng(6, 10);
  const auto x = a();
  EXPECT_EQ(x, b());
  EXPECT_NE(x, c());
  EXPECT_NE(x, d());
}

TEST(Checkpoint, EncodeDecodeEncodeIsByteIdentical) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer t(rc, &data);
  for (int i = 0; i < 3; ++i) t.train_one();
  const std::string bytes = encode_checkpoint(rc, t.model(), t.optimizer(), t.step());
  const auto ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.step, 3);
  EXPECT_TRUE(ck.config == rc);
  EXPECT_EQ(weights(ck.model), weights(t.model()));
  EXPECT_EQ(ck.optimizer.step, t.optimizer().step);
  EXPECT_EQ(ck.optimizer.first_moment, t.optimizer().first_moment);
  EXPECT_EQ(ck.optimizer.second_moment, t.optimizer().second_moment);
  EXPECT_EQ(encode_checkpoint(ck.config, ck.model, ck.optimizer, ck.step), bytes);
}

TEST(Checkpoint, ResumeMatchesAnUnbrokenRun) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer straight(rc, &data);
  for (int i = 0; i < 6; ++i) straight.train_one();

  const auto dir = fresh_dir("resume");
  Trainer first(rc, &data);
  for (int i = 0; i < 3; ++i) first.train_one();
  save_checkpoint(dir / "ck.vtck", rc, first.model(), first.optimizer(), first.step());
  Trainer resumed(rc, &data);
  restore(resumed, load_checkpoint(dir / "ck.vtck"));
  EXPECT_EQ(resumed.step(), 3);
  for (int i = 0; i < 3; ++i) resumed.train_one();
  EXPECT_EQ(weights(resumed.model()), weights(straight.model()));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RestoreRejectsADifferentConfig) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer t(rc, &data);
  const auto ck = decode_checkpoint(encode_checkpoint(rc, t.model(), t.optimizer(), 0));
  Trainer other(tiny_run(9), &data);
  EXPECT_EQ(kind_of([&] { restore(other, ck); }), ErrorKind::kConfig);
}

TEST(Checkpoint, CorruptBytesAreFormatErrors) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer t(rc, &data);
  const std::string bytes = encode_checkpoint(rc, t.model(), t.optimizer(), 0);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of([&] { decode_checkpoint(bad_magic); }), ErrorKind::kFormat);
  EXPECT_EQ(kind_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 4)); }), ErrorKind::kFormat);
  EXPECT_EQ(kind_of([&] { decode_checkpoint(bytes + "xxxx"); }), ErrorKind::kFormat);
  EXPECT_EQ(kind_of([&] { decode_checkpoint("VTCK"); }), ErrorKind::kFormat);
}

TEST(Checkpoint, WeightsOnlyCheckpointLoadsWithFreshMoments) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer t(rc, &data);
  tc::AdamWState<float> no_moments;
  const auto ck = decode_checkpoint(encode_checkpoint(rc, t.model(), no_moments, 7));
  EXPECT_EQ(ck.step, 7);
  EXPECT_EQ(weights(ck.model), weights(t.model()));
  for (const auto& m : ck.optimizer.first_moment) {
    for (float x : m) EXPECT_EQ(x, 0.0f);
  }
}

TEST(TrainData, CorpusOnDiskMatchesInMemoryGeneration) {
  const RunConfig rc = tiny_run();
  const TrainData mem = load_train_data(rc.data);
  const auto dir = fresh_dir("corpus");
  write_corpus(dir, mem.world, ToyCorpus{mem.train, mem.eval});
  DataConfig dc = rc.data;
  dc.corpus_dir = dir.string();
  const TrainData disk = load_train_data(dc);
  ASSERT_EQ(disk.train.size(), mem.train.size());
  ASSERT_EQ(disk.eval.size(), mem.eval.size());
  for (std::size_t i = 0; i < mem.train.size(); ++i) {
    EXPECT_EQ(disk.train[i].speech, mem.train[i].speech);
    EXPECT_EQ(disk.train[i].tokens, mem.train[i].tokens);
  }
  std::filesystem::remove_all(dir);
}

TEST(Evaluation, NextFrameAccuracyIsAFraction) {
  const RunConfig rc = tiny_run();
  const TrainData data = load_train_data(rc.data);
  Trainer t(rc, &data);
  const double acc = next_frame_accuracy(t.model(), data.eval, rc.layout, rc.positions);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_THROW(next_frame_accuracy(t.model(), {}, rc.layout, rc.positions), Error);
}

TEST(Metrics, LineIsCompactJson) {
  const auto j = Json::parse(metric_line({12, 1.5, 0.25, 1e-3}));
  EXPECT_EQ(j.at("step").get<int>(), 12);
  EXPECT_EQ(j.at("loss").get<double>(), 1.5);
  EXPECT_EQ(j.size(), 4u);
}

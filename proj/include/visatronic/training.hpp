#pragma once

// Run configuration (strict JSON), the toy-corpus training loop, checkpoints
// and metric records.
//
// Checkpoint layout:
//   offset 0   4 bytes  magic "VTCK"
//   offset 4   u32 LE   format version (1)
//   offset 8   u32 LE   header length H
//   offset 12  H bytes  JSON {"format", "version", "step", "adam_step", "config", "tensors": [{name, dtype, shape}]}
//   then       f32 LE payloads in header order: parameters, then AdamW first and second moments

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "visatronic/decoder.hpp"
#include "visatronic/error.hpp"
#include "visatronic/optim.hpp"
#include "visatronic/seqlayout.hpp"
#include "visatronic/synthdata.hpp"
#include "visatronic/tensorfile.hpp"

namespace visatronic {

struct DataConfig {
  std::string corpus_dir;             // empty: generate the toy corpus in memory
  ToyWorldConfig world;
  std::size_t n_train = 2000;
  std::size_t n_eval = 200;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  LayoutKind layout = LayoutKind::kVTOrdered;
  PositionScheme positions;
  MaskingOptions masking;
  OptimConfig optimizer;
  DataConfig data;
  std::size_t batch_size = 8;
  std::int64_t checkpoint_every = 1000;
  std::int64_t log_every = 100;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    optimizer.validate();
    data.world.validate();
    require(batch_size >= 1, ErrorKind::kConfig, "batch_size must be >= 1");
    require(checkpoint_every >= 0 && log_every >= 1, ErrorKind::kConfig,
            "checkpoint_every must be >= 0 and log_every >= 1");
    require(masking.probability >= 0.0 && masking.probability <= 1.0, ErrorKind::kConfig,
            "masking probability must be in [0, 1]");
    require(masking.mean_span >= 1.0 && masking.ratio >= 0.0 && masking.ratio <= 1.0, ErrorKind::kConfig,
            "masking span must be >= 1 and ratio in [0, 1]");
    ticks_per_frame(kVideoFramePeriod, positions.base_unit_seconds);
    ticks_per_frame(kSpeechFramePeriod, positions.base_unit_seconds);
    require(model.channels == data.world.channels, ErrorKind::kConfig, "model channels must match the corpus");
    require(model.video_codebook == data.world.video_codebook, ErrorKind::kConfig,
            "model video codebook must match the corpus");
    require(model.video_grid_h == data.world.grid_h && model.video_grid_w == data.world.grid_w, ErrorKind::kConfig,
            "model video grid must match the corpus");
  }

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.model == b.model && a.layout == b.layout && a.positions.kind == b.positions.kind &&
           a.positions.base_unit_seconds == b.positions.base_unit_seconds &&
           a.masking.probability == b.masking.probability && a.masking.mean_span == b.masking.mean_span &&
           a.masking.ratio == b.masking.ratio && a.optimizer == b.optimizer && a.data == b.data &&
           a.batch_size == b.batch_size && a.checkpoint_every == b.checkpoint_every &&
           a.log_every == b.log_every && a.seed == b.seed;
  }
};

// Desk-scale toy setup: model sized for the corpus, time-aligned positions.
inline RunConfig toy_run_config(LayoutKind layout = LayoutKind::kVTOrdered) {
  RunConfig rc;
  rc.layout = layout;
  rc.positions.kind = PositionKind::kTimeAligned;
  rc.model.channels = rc.data.world.channels;
  rc.model.video_codebook = rc.data.world.video_codebook;
  rc.model.video_grid_h = rc.data.world.grid_h;
  rc.model.video_grid_w = rc.data.world.grid_w;
  rc.model.text_vocab = rc.data.world.alphabet_size + 1 + 2;  // letters, space, PAD, UNK
  rc.optimizer.lr = 2e-3;
  rc.optimizer.warmup = 500;
  rc.optimizer.total_steps = 20000;
  rc.optimizer.weight_decay = 0.01;
  return rc;
}

namespace config_detail {

template <class F>
void strict_object(const Json& j, const std::string& where, F&& on_key) {
  require(j.is_object(), ErrorKind::kConfig, where + " must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (!on_key(key, v)) fail(ErrorKind::kConfig, "unknown key '" + where + "." + key + "'");
    } catch (const Json::exception& ex) {
      fail(ErrorKind::kConfig, "bad value for '" + where + "." + key + "': " + ex.what());
    }
  }
}

}  // namespace config_detail

inline Json to_json(const ModelConfig& m) {
  return Json{{"dim", m.dim},
              {"heads", m.heads},
              {"layers", m.layers},
              {"channels", m.channels},
              {"speech_embed_dim", m.speech_embed_dim},
              {"mlp_ratio", m.mlp_ratio},
              {"video_codebook", m.video_codebook},
              {"video_grid_h", m.video_grid_h},
              {"video_grid_w", m.video_grid_w},
              {"text_vocab", m.text_vocab},
              {"aggregation", std::string(to_string(m.aggregation))},
              {"rope_base", m.rope_base},
              {"dropout", m.dropout}};
}

inline Json to_json(const RunConfig& rc) {
  Json data{{"corpus_dir", rc.data.corpus_dir},
            {"world", to_json(rc.data.world)},
            {"n_train", rc.data.n_train},
            {"n_eval", rc.data.n_eval}};
  return Json{{"model", to_json(rc.model)},
              {"layout", std::string(to_string(rc.layout))},
              {"positions",
               {{"scheme", std::string(to_string(rc.positions.kind))},
                {"base_unit_seconds", rc.positions.base_unit_seconds}}},
              {"masking",
               {{"p", rc.masking.probability}, {"mean_span", rc.masking.mean_span}, {"ratio", rc.masking.ratio}}},
              {"optimizer",
               {{"lr", rc.optimizer.lr},
                {"warmup", rc.optimizer.warmup},
                {"total_steps", rc.optimizer.total_steps},
                {"clip", rc.optimizer.clip},
                {"beta1", rc.optimizer.beta1},
                {"beta2", rc.optimizer.beta2},
                {"eps", rc.optimizer.eps},
                {"weight_decay", rc.optimizer.weight_decay}}},
              {"data", data},
              {"batch_size", rc.batch_size},
              {"checkpoint_every", rc.checkpoint_every},
              {"log_every", rc.log_every},
              {"seed", rc.seed}};
}

// Keys absent from `j` keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const Json& j, RunConfig rc = RunConfig{}) {
  using config_detail::strict_object;
  strict_object(j, "config", [&](const std::string& k, const Json& v) {
    if (k == "model") {
      strict_object(v, "model", [&](const std::string& mk, const Json& mv) {
        auto& m = rc.model;
        if (mk == "dim") m.dim = mv.get<std::size_t>();
        else if (mk == "heads") m.heads = mv.get<std::size_t>();
        else if (mk == "layers") m.layers = mv.get<std::size_t>();
        else if (mk == "channels") m.channels = mv.get<std::size_t>();
        else if (mk == "speech_embed_dim") m.speech_embed_dim = mv.get<std::size_t>();
        else if (mk == "mlp_ratio") m.mlp_ratio = mv.get<std::size_t>();
        else if (mk == "video_codebook") m.video_codebook = mv.get<int>();
        else if (mk == "video_grid_h") m.video_grid_h = mv.get<std::size_t>();
        else if (mk == "video_grid_w") m.video_grid_w = mv.get<std::size_t>();
        else if (mk == "text_vocab") m.text_vocab = mv.get<int>();
        else if (mk == "aggregation") m.aggregation = parse_aggregation(mv.get<std::string>());
        else if (mk == "rope_base") m.rope_base = mv.get<double>();
        else if (mk == "dropout") m.dropout = mv.get<double>();
        else return false;
        return true;
      });
    } else if (k == "layout") {
      rc.layout = parse_layout(v.get<std::string>());
    } else if (k == "positions") {
      strict_object(v, "positions", [&](const std::string& pk, const Json& pv) {
        if (pk == "scheme") rc.positions.kind = parse_position_kind(pv.get<std::string>());
        else if (pk == "base_unit_seconds") rc.positions.base_unit_seconds = pv.get<double>();
        else return false;
        return true;
      });
    } else if (k == "masking") {
      strict_object(v, "masking", [&](const std::string& mk, const Json& mv) {
        if (mk == "p") rc.masking.probability = mv.get<double>();
        else if (mk == "mean_span") rc.masking.mean_span = mv.get<double>();
        else if (mk == "ratio") rc.masking.ratio = mv.get<double>();
        else return false;
        return true;
      });
    } else if (k == "optimizer") {
      strict_object(v, "optimizer", [&](const std::string& ok, const Json& ov) {
        auto& o = rc.optimizer;
        if (ok == "lr") o.lr = ov.get<double>();
        else if (ok == "warmup") o.warmup = ov.get<std::int64_t>();
        else if (ok == "total_steps") o.total_steps = ov.get<std::int64_t>();
        else if (ok == "clip") o.clip = ov.get<double>();
        else if (ok == "beta1") o.beta1 = ov.get<double>();
        else if (ok == "beta2") o.beta2 = ov.get<double>();
        else if (ok == "eps") o.eps = ov.get<double>();
        else if (ok == "weight_decay") o.weight_decay = ov.get<double>();
        else return false;
        return true;
      });
    } else if (k == "data") {
      strict_object(v, "data", [&](const std::string& dk, const Json& dv) {
        if (dk == "corpus_dir") rc.data.corpus_dir = dv.get<std::string>();
        else if (dk == "world") rc.data.world = toy_config_from_json(dv);
        else if (dk == "n_train") rc.data.n_train = dv.get<std::size_t>();
        else if (dk == "n_eval") rc.data.n_eval = dv.get<std::size_t>();
        else return false;
        return true;
      });
    } else if (k == "batch_size") {
      rc.batch_size = v.get<std::size_t>();
    } else if (k == "checkpoint_every") {
      rc.checkpoint_every = v.get<std::int64_t>();
    } else if (k == "log_every") {
      rc.log_every = v.get<std::int64_t>();
    } else if (k == "seed") {
      rc.seed = v.get<std::uint64_t>();
    } else {
      return false;
    }
    return true;
  });
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig defaults = toy_run_config()) {
  Json j;
  try {
    j = Json::parse(read_file_bytes(path));
  } catch (const Json::exception& ex) {
    fail(ErrorKind::kConfig, path.string() + ": " + ex.what());
  }
  return run_config_from_json(j, defaults);
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& rc) {
  write_file_bytes(path, to_json(rc).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data

struct TrainData {
  ToyWorld world;
  std::vector<ToySample> train;
  std::vector<ToySample> eval;
};

inline TrainData load_train_data(const DataConfig& dc) {
  TrainData d;
  if (dc.corpus_dir.empty()) {
    d.world = make_world(dc.world);
    auto corpus = make_corpus(d.world, dc.n_train, dc.n_eval);
    d.train = std::move(corpus.train);
    d.eval = std::move(corpus.eval);
    return d;
  }
  const std::filesystem::path dir(dc.corpus_dir);
  d.world = load_world(dir / "world.json");
  for (const auto& e : read_manifest(dir / "manifest.jsonl")) {
    auto s = load_sample(dir, e, d.world.vocab);
    (e.split == "train" ? d.train : d.eval).push_back(std::move(s));
  }
  return d;
}

inline SequencePlan plan_for(const ToySample& s, LayoutKind layout, PositionScheme pos) {
  return build_plan(s.tokens, layout_uses_video(layout) ? &s.video : nullptr, s.speech.n_frames(), layout, pos);
}

inline DecoderInputs inputs_for(const ToySample& s) { return {&s.speaker, &s.video, &s.speech}; }

// ---------------------------------------------------------------------------
// Trainer

struct MetricRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

inline std::string metric_line(const MetricRecord& r) {
  return Json{{"step", r.step}, {"loss", r.loss}, {"grad_norm", r.grad_norm}, {"lr", r.lr}}.dump();
}

// Randomness for step k depends only on (seed, k), so a resumed run draws
// the same batches, masks and dropout as an unbroken one.
inline std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                    0x7f4a7c15u};
  return std::mt19937_64(seq);
}

class Trainer {
 public:
  Trainer(RunConfig cfg, const TrainData* data)
      : cfg_(std::move(cfg)), data_(data), model_(Model<float>::init(cfg_.model, cfg_.seed)) {
    cfg_.validate();
    require(data_ != nullptr && !data_->train.empty(), ErrorKind::kEmptyInput, "no training samples");
    opt_.options = cfg_.optimizer.adamw();
    opt_.init_for(model_.parameters());
  }

  const RunConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  tc::AdamWState<float>& optimizer() { return opt_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  MetricRecord train_one() {
    const std::int64_t k = step_ + 1;
    auto rng = step_rng(cfg_.seed, k);
    std::uniform_int_distribution<std::size_t> pick(0, data_->train.size() - 1);
    std::vector<TrainExample> batch;
    batch.reserve(cfg_.batch_size);
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      const ToySample& s = data_->train[pick(rng)];
      SequencePlan plan = plan_for(s, cfg_.layout, cfg_.positions);
      plan = apply_span_masking(std::move(plan), cfg_.masking, rng);
      batch.push_back({std::move(plan), inputs_for(s)});
    }
    // Masking can remove every target; such examples are skipped.
    std::erase_if(batch, [](const TrainExample& ex) { return ex.plan.loss_target_count() == 0; });
    MetricRecord rec;
    rec.step = k;
    if (!batch.empty()) {
      const auto st = train_step<float>(model_, opt_, batch, cfg_.optimizer, k, &rng);
      rec.loss = st.loss;
      rec.grad_norm = st.grad_norm;
      rec.lr = st.lr;
    }
    step_ = k;
    return rec;
  }

 private:
  RunConfig cfg_;
  const TrainData* data_;
  Model<float> model_;
  tc::AdamWState<float> opt_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'V', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const RunConfig& cfg, const Model<float>& model,
                                     const tc::AdamWState<float>& opt, std::int64_t step) {
  const auto named = model.named_parameters();
  Json tensors = Json::array();
  auto describe = [&](const std::string& name, const tc::Shape& shape) {
    tensors.push_back(Json{{"name", name}, {"dtype", "f32"}, {"shape", shape}});
  };
  for (const auto& [name, t] : named) describe(name, t.shape());
  const bool has_moments = opt.first_moment.size() == named.size();
  if (has_moments) {
    for (const auto& [name, t] : named) describe("adam.m." + name, t.shape());
    for (const auto& [name, t] : named) describe("adam.v." + name, t.shape());
  }
  const Json header{{"format", "visatronic-checkpoint"}, {"version", kCheckpointVersion}, {"step", step},
                    {"adam_step", opt.step},            {"config", to_json(cfg)},        {"tensors", tensors}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 4);
  le::put_u32(out, kCheckpointVersion);
  le::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  auto put = [&](const std::vector<float>& v) {
    for (float x : v) le::put_u32(out, std::bit_cast<std::uint32_t>(x));
  };
  for (const auto& [name, t] : named) put(t.data());
  if (has_moments) {
    for (const auto& m : opt.first_moment) put(m);
    for (const auto& v : opt.second_moment) put(v);
  }
  return out;
}

struct LoadedCheckpoint {
  RunConfig config;
  Model<float> model;
  tc::AdamWState<float> optimizer;
  std::int64_t step = 0;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= 12 && std::memcmp(bytes.data(), kCheckpointMagic, 4) == 0, ErrorKind::kFormat,
          what + ": bad magic");
  require(le::get_u32(p + 4) == kCheckpointVersion, ErrorKind::kFormat, what + ": unsupported version");
  const std::size_t hlen = le::get_u32(p + 8);
  require(bytes.size() >= 12 + hlen, ErrorKind::kFormat, what + ": truncated header");
  Json header;
  try {
    header = Json::parse(bytes.substr(12, hlen));
  } catch (const Json::exception& ex) {
    fail(ErrorKind::kFormat, what + ": bad header: " + ex.what());
  }
  LoadedCheckpoint ck;
  std::vector<std::pair<std::string, tc::Shape>> entries;
  std::int64_t adam_step = 0;
  try {
    require(header.at("format").get<std::string>() == "visatronic-checkpoint", ErrorKind::kFormat,
            what + ": not a checkpoint");
    require(header.at("version").get<std::uint32_t>() == kCheckpointVersion, ErrorKind::kFormat,
            what + ": header version mismatch");
    ck.step = header.at("step").get<std::int64_t>();
    adam_step = header.at("adam_step").get<std::int64_t>();
    ck.config = run_config_from_json(header.at("config"));
    for (const auto& t : header.at("tensors")) {
      require(t.at("dtype").get<std::string>() == "f32", ErrorKind::kFormat, what + ": only f32 tensors supported");
      entries.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<tc::Shape>());
    }
  } catch (const Json::exception& ex) {
    fail(ErrorKind::kFormat, what + ": bad header: " + ex.what());
  }
  std::size_t total = 0;
  for (const auto& [name, shape] : entries) total += tc::numel_of(shape);
  require(bytes.size() == 12 + hlen + 4 * total, ErrorKind::kFormat, what + ": payload length does not match header");

  ck.model = Model<float>::init(ck.config.model, 0);
  const auto named = ck.model.named_parameters();
  require(entries.size() == named.size() || entries.size() == 3 * named.size(), ErrorKind::kFormat,
          what + ": tensor count does not match the model");
  const unsigned char* payload = p + 12 + hlen;
  std::size_t offset = 0;
  auto read_into = [&](std::vector<float>& dst, std::size_t n) {
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) dst[i] = std::bit_cast<float>(le::get_u32(payload + 4 * (offset + i)));
    offset += n;
  };
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto [name, t] = named[k];
    require(entries[k].first == name && entries[k].second == t.shape(), ErrorKind::kFormat,
            what + ": tensor '" + entries[k].first + "' does not match the model");
    read_into(t.mutable_data(), t.numel());
  }
  ck.optimizer.options = ck.config.optimizer.adamw();
  ck.optimizer.init_for(ck.model.parameters());
  if (entries.size() == 3 * named.size()) {
    for (auto& m : ck.optimizer.first_moment) read_into(m, m.size());
    for (auto& v : ck.optimizer.second_moment) read_into(v, v.size());
  }
  ck.optimizer.step = adam_step;
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const Model<float>& model,
                            const tc::AdamWState<float>& opt, std::int64_t step) {
  write_file_bytes(path, encode_checkpoint(cfg, model, opt, step));
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

// Restores weights, moments and step from a checkpoint of the same config.
inline void restore(Trainer& trainer, const LoadedCheckpoint& ck) {
  require(ck.config == trainer.config(), ErrorKind::kConfig, "checkpoint config differs from the run config");
  auto dst = trainer.model().parameters();
  auto src = ck.model.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].mutable_data() = src[i].data();
  trainer.optimizer() = ck.optimizer;
  trainer.set_step(ck.step);
}

// ---------------------------------------------------------------------------
// Evaluation

// Teacher-forced next-frame channel accuracy over non-EOS targets.
inline double next_frame_accuracy(const Model<float>& model, std::span<const ToySample> samples, LayoutKind layout,
                                  PositionScheme pos) {
  tc::NoGradGuard no_grad;
  std::size_t hits = 0, total = 0;
  for (const auto& s : samples) {
    const auto plan = plan_for(s, layout, pos);
    const auto logits = forward(model, plan, inputs_for(s));
    const auto [h, t] = channel_hits(logits, plan, &s.speech, model.cfg.channels, /*skip_eos=*/true);
    hits += h;
    total += t;
  }
  require(total > 0, ErrorKind::kEmptyInput, "no evaluation targets");
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace visatronic

// visatronic: experiment runner over the header library.
//
// Exit codes: 0 success, 1 contract violation, 2 usage error. Failures print
// one line to stderr: error: kind=<kind> message="<text>".
//
// Environment: VISATRONIC_RUN_DIR is the default output directory when
// --out is absent; VISATRONIC_THREADS sets the Eigen thread count.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "visatronic/visatronic.hpp"
#include "visatronic/wav.hpp"

namespace fs = std::filesystem;
using namespace visatronic;

namespace {

std::string quote(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  return out;
}

int report(ErrorKind kind, std::string_view message) {
  std::cerr << "error: kind=" << to_string(kind) << " message=\"" << quote(message) << "\"\n";
  return kind == ErrorKind::kUsage ? 2 : 1;
}

fs::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("VISATRONIC_RUN_DIR"); env != nullptr && *env != '\0') return env;
  fail(ErrorKind::kUsage, "no output directory: pass --out or set VISATRONIC_RUN_DIR");
}

void apply_thread_env() {
  const char* env = std::getenv("VISATRONIC_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  require(end != env && *end == '\0' && n >= 1, ErrorKind::kUsage, "VISATRONIC_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
}

void write_text(const fs::path& path, const std::string& text) { write_file_bytes(path, text); }

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

RunConfig config_or_default(const std::string& path) {
  RunConfig rc = path.empty() ? toy_run_config() : load_run_config(path);
  rc.validate();
  return rc;
}

// Corpus directory holding a manifest: world.json and codebook.txt sit next to it.
struct Corpus {
  fs::path dir;
  ToyWorld world;
  DMelCodebook codebook = toy_codebook();
  std::vector<ManifestEntry> entries;
};

Corpus open_corpus(const fs::path& manifest) {
  Corpus c;
  c.dir = manifest.parent_path();
  c.world = load_world(c.dir / "world.json");
  if (fs::exists(c.dir / "codebook.txt")) c.codebook = load_codebook(c.dir / "codebook.txt");
  c.entries = read_manifest(manifest);
  return c;
}

std::vector<ManifestEntry> select(const std::vector<ManifestEntry>& entries, const std::string& split,
                                  std::size_t limit) {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (!split.empty() && split != "all" && e.split != split) continue;
    out.push_back(e);
    if (limit > 0 && out.size() == limit) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// synth-data

struct SynthArgs {
  std::string config, out;
  std::optional<std::size_t> n_train, n_eval;
  std::optional<std::uint64_t> world_seed;
};

int run_synth(const SynthArgs& a) {
  RunConfig rc = config_or_default(a.config);
  if (a.n_train) rc.data.n_train = *a.n_train;
  if (a.n_eval) rc.data.n_eval = *a.n_eval;
  if (a.world_seed) rc.data.world.seed = *a.world_seed;
  const fs::path out = output_dir(a.out);
  rc.data.corpus_dir = fs::absolute(out).lexically_normal().string();
  rc.validate();
  const ToyWorld world = make_world(rc.data.world);
  const ToyCorpus corpus = make_corpus(world, rc.data.n_train, rc.data.n_eval);
  write_corpus(out, world, corpus);
  save_run_config(out / "run_config.json", rc);
  std::cout << Json{{"corpus_dir", rc.data.corpus_dir}, {"n_train", corpus.train.size()}, {"n_eval", corpus.eval.size()}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, out, resume;
  std::optional<std::int64_t> stop_after;
  bool eval_accuracy = false;
};

// Keeps metric records up to and including `step`; later ones are replayed.
void truncate_metrics(const fs::path& path, std::int64_t step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (Json::parse(line).at("step").get<std::int64_t>() <= step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

int run_train(const TrainArgs& a) {
  const fs::path out = output_dir(a.out);
  std::optional<LoadedCheckpoint> ck;
  RunConfig rc;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    rc = a.config.empty() ? ck->config : config_or_default(a.config);
  } else {
    rc = config_or_default(a.config);
  }
  rc.validate();
  fs::create_directories(out / "checkpoints");
  save_run_config(out / "run_config.json", rc);

  const TrainData data = load_train_data(rc.data);
  Trainer trainer(rc, &data);
  const fs::path metrics_path = out / "metrics.jsonl";
  if (ck) {
    restore(trainer, *ck);
    truncate_metrics(metrics_path, ck->step);
  } else {
    write_text(metrics_path, "");
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  require(static_cast<bool>(metrics), ErrorKind::kIo, "cannot open " + metrics_path.string());

  const std::int64_t total = rc.optimizer.total_steps;
  const std::int64_t stop = a.stop_after ? std::min(total, *a.stop_after) : total;
  require(trainer.step() <= stop, ErrorKind::kConfig, "checkpoint is already past the requested step");
  MetricRecord last;
  auto save = [&](const fs::path& path) {
    save_checkpoint(path, rc, trainer.model(), trainer.optimizer(), trainer.step());
  };
  while (trainer.step() < stop) {
    last = trainer.train_one();
    if (last.step % rc.log_every == 0 || last.step == stop) {
      metrics << metric_line(last) << "\n";
      metrics.flush();
    }
    if (rc.checkpoint_every > 0 && last.step % rc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%08lld.vtck", static_cast<long long>(last.step));
      save(out / "checkpoints" / name);
    }
  }
  save(out / "last.vtck");

  Json summary{{"step", trainer.step()}, {"loss", last.loss}};
  if (a.eval_accuracy) {
    summary["eval_next_frame_accuracy"] = next_frame_accuracy(trainer.model(), data.eval, rc.layout, rc.positions);
  }
  write_json(out / "train_summary.json", summary);
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string checkpoint, manifest, out, split = "eval";
  std::size_t limit = 0;
  GenOptions opts;
  std::optional<std::size_t> max_frames;
  bool wav = false;
  int griffin_lim_iters = 32;
};

int run_generate(const GenerateArgs& a) {
  GenOptions opts = a.opts;
  opts.max_frames = a.max_frames;
  opts.validate();  // both drops: usage error before any IO
  const fs::path out = output_dir(a.out);
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const Corpus corpus = open_corpus(a.manifest);
  const auto entries = select(corpus.entries, a.split, a.limit);
  require(!entries.empty(), ErrorKind::kEmptyInput, "no manifest entries selected");
  fs::create_directories(out);

  Json echo{{"checkpoint", a.checkpoint},
            {"manifest", a.manifest},
            {"split", a.split},
            {"limit", a.limit},
            {"temperature", opts.temperature},
            {"max_frames", opts.max_frames ? Json(*opts.max_frames) : Json(nullptr)},
            {"stop_rule", opts.stop_rule},
            {"drop_video", opts.drop_video},
            {"drop_text", opts.drop_text},
            {"seed", opts.seed},
            {"run_config", to_json(ck.config)}};
  write_json(out / "generate_config.json", echo);

  MelConfig mel_cfg;
  mel_cfg.n_mels = ck.config.model.channels;
  std::ofstream log(out / "generation.jsonl");
  double acc_sum = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const ToySample s = load_sample(corpus.dir, entries[i], corpus.world.vocab);
    GenOptions o = opts;
    o.seed = opts.seed + i;
    const GenResult r = generate_detailed(ck.model, s.speaker, &s.video, &s.tokens, ck.config.layout,
                                          ck.config.positions, o);
    const fs::path stem = out / s.id;
    save_dmel(stem.string() + ".dmel.vtns", r.speech);
    const MelSpec mel = invert(r.speech, corpus.codebook);
    save_mel(stem.string() + ".mel.vtns", mel);
    if (a.wav && mel.n_frames() > 0) save_wav(stem.string() + ".wav", griffin_lim(mel, mel_cfg, a.griffin_lim_iters));
    const double acc = content_accuracy(corpus.world, r.speech, s.text);
    acc_sum += acc;
    log << Json{{"id", s.id},
                {"frames", r.speech.n_frames()},
                {"gt_frames", s.speech.n_frames()},
                {"stopped", r.stopped},
                {"stray_eos", r.stray_eos},
                {"content_accuracy", acc}}
               .dump()
        << "\n";
  }
  const Json summary{{"n", entries.size()}, {"mean_content_accuracy", acc_sum / static_cast<double>(entries.size())}};
  write_json(out / "generate_summary.json", summary);
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval-timesync

struct EvalArgs {
  std::string manifest, gen_dir, out, split = "all";
  bool ingest = false;
  double bin_width = 0.04;
  double max_offset = 1.0;
};

int run_eval(const EvalArgs& a) {
  const Corpus corpus = open_corpus(a.manifest);
  const fs::path gen_dir(a.gen_dir);
  const fs::path out = a.out.empty() ? gen_dir : fs::path(a.out);
  fs::create_directories(out);

  std::ofstream per(out / "timesync_per_utterance.jsonl");
  std::vector<double> all_offsets;
  double sum_utt = 0.0, sum_abs = 0.0;
  std::size_t n_utt = 0, n_defined = 0, n_pairs = 0, n_overshoot = 0;
  double gt_frames = 0.0, gen_frames = 0.0;
  for (const auto& e : select(corpus.entries, a.split, 0)) {
    const fs::path stem = gen_dir / e.id;
    const fs::path mel_path = stem.string() + ".mel.vtns", dmel_path = stem.string() + ".dmel.vtns";
    const bool has_mel = fs::exists(mel_path), has_dmel = fs::exists(dmel_path);
    if (!has_mel && !has_dmel) continue;
    ++n_utt;
    const PhonemeAlignment gt = strip_silence(load_alignment(corpus.dir / e.alignment));
    const MelSpec gt_mel = invert(load_dmel(corpus.dir / e.speech), corpus.codebook);
    const MelSpec gen_mel = has_mel ? load_mel(mel_path) : invert(load_dmel(dmel_path), corpus.codebook);
    gt_frames += static_cast<double>(gt_mel.n_frames());
    gen_frames += static_cast<double>(gen_mel.n_frames());
    n_overshoot += gen_mel.n_frames() > gt_mel.n_frames();

    TimeSyncResult r;
    if (a.ingest) {
      const fs::path align_path = stem.string() + ".align.tsv";
      require(fs::exists(align_path), ErrorKind::kIo, "missing alignment " + align_path.string());
      r = timesync(gt, strip_silence(load_alignment(align_path, AlignmentSource::kGenerated)));
    } else {
      r = dtw_timesync(gt, gt_mel, gen_mel);
    }
    Json row{{"id", e.id},
             {"defined", r.defined},
             {"n_pairs", r.n_pairs},
             {"n_gt", r.n_gt},
             {"gt_frames", gt_mel.n_frames()},
             {"gen_frames", gen_mel.n_frames()}};
    if (r.defined) {
      row["timesync_seconds"] = r.seconds;
      row["std_seconds"] = r.std_seconds;
      row["per_gt_seconds"] = r.per_gt_seconds;
      ++n_defined;
      sum_utt += r.seconds;
      n_pairs += r.n_pairs;
      for (double d : r.signed_offsets) sum_abs += std::abs(d);
      all_offsets.insert(all_offsets.end(), r.signed_offsets.begin(), r.signed_offsets.end());
    }
    per << row.dump() << "\n";
  }
  require(n_utt > 0, ErrorKind::kEmptyInput, "no generated outputs found in " + gen_dir.string());
  const double n = static_cast<double>(n_utt);
  Json summary{{"n_utterances", n_utt},
               {"n_defined", n_defined},
               {"n_pairs", n_pairs},
               {"mean_gt_frames", gt_frames / n},
               {"mean_gen_frames", gen_frames / n},
               {"overshoot_fraction", static_cast<double>(n_overshoot) / n}};
  summary["mean_seconds"] = n_defined > 0 ? Json(sum_utt / static_cast<double>(n_defined)) : Json(nullptr);
  summary["pooled_seconds"] = n_pairs > 0 ? Json(sum_abs / static_cast<double>(n_pairs)) : Json(nullptr);
  write_json(out / "timesync_summary.json", summary);
  write_text(out / "timesync_histogram.csv", offset_histogram_csv(all_offsets, a.bin_width, a.max_offset));
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// codec-roundtrip

struct CodecArgs {
  std::string audio_dir, out;
  MelConfig mel;
};

int run_codec(const CodecArgs& a) {
  a.mel.validate();
  require(fs::is_directory(a.audio_dir), ErrorKind::kIo, "not a directory: " + a.audio_dir);
  std::vector<fs::path> files;
  for (const auto& ent : fs::directory_iterator(a.audio_dir)) {
    if (ent.is_regular_file() && ent.path().extension() == ".wav") files.push_back(ent.path());
  }
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorKind::kEmptyInput, "no .wav files in " + a.audio_dir);
  std::vector<MelSpec> specs;
  for (const auto& f : files) {
    const AudioSignal audio = load_wav(f);
    require(audio.sample_rate == a.mel.sample_rate, ErrorKind::kConfig,
            f.string() + ": sample rate " + std::to_string(audio.sample_rate) + " differs from the mel config");
    specs.push_back(compute_logmel(audio, a.mel));
  }
  const DMelCodebook cb = fit_codebook(specs);
  double max_err = 0.0, sum_err = 0.0;
  std::size_t count = 0;
  for (const auto& s : specs) {
    const MelSpec back = invert(discretize(s, cb), cb);
    for (std::size_t i = 0; i < s.values.data().size(); ++i) {
      const double e = std::abs(s.values.data()[i] - back.values.data()[i]);
      max_err = std::max(max_err, e);
      sum_err += e;
      ++count;
    }
  }
  const double bound = (cb.max() - cb.min()) / 30.0;
  const Json summary{{"files", files.size()},     {"values", count},  {"min", cb.min()},
                     {"max", cb.max()},           {"max_error", max_err}, {"mean_error", sum_err / static_cast<double>(count)},
                     {"bound", bound},            {"within_bound", max_err <= bound}};
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "codec_roundtrip.json", summary);
    save_codebook(fs::path(a.out) / "codebook.txt", cb);
  }
  std::cout << summary.dump() << "\n";
  require(max_err <= bound, ErrorKind::kContract, "round-trip error exceeds half a quantization step");
  return 0;
}

// ---------------------------------------------------------------------------
// inspect-plan

struct InspectArgs {
  std::string config, manifest, id, text, layout, positions, out;
  std::optional<std::size_t> video_frames, speech_frames;
  std::optional<std::uint64_t> mask_seed;
};

int run_inspect(const InspectArgs& a) {
  RunConfig rc = config_or_default(a.config);
  if (!a.layout.empty()) rc.layout = parse_layout(a.layout);
  if (!a.positions.empty()) rc.positions.kind = parse_position_kind(a.positions);
  SequencePlan plan;
  if (!a.manifest.empty()) {
    require(!a.id.empty(), ErrorKind::kUsage, "--manifest needs --id");
    const Corpus corpus = open_corpus(a.manifest);
    const auto it = std::find_if(corpus.entries.begin(), corpus.entries.end(),
                                 [&](const ManifestEntry& e) { return e.id == a.id; });
    require(it != corpus.entries.end(), ErrorKind::kUsage, "no sample '" + a.id + "' in the manifest");
    plan = plan_for(load_sample(corpus.dir, *it, corpus.world.vocab), rc.layout, rc.positions);
  } else {
    require(a.speech_frames.has_value(), ErrorKind::kUsage, "pass --manifest/--id or --speech-frames");
    PlanRequest req;
    req.layout = rc.layout;
    req.positions = rc.positions;
    req.n_speech = *a.speech_frames;
    req.n_video = a.video_frames;
    // Token ids are irrelevant to the plan shape; one id per character.
    for (std::size_t i = 0; i < utf8::decode(a.text).size(); ++i) req.text_ids.push_back(static_cast<int>(i % 7) + 2);
    plan = build_plan(req);
  }
  if (a.mask_seed) {
    std::mt19937_64 rng(*a.mask_seed);
    plan = apply_span_masking(std::move(plan), rc.masking, rng);
  }
  const std::string text = render_plan(plan);
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visatronic video-text-to-speech experiment runner", "visatronic"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* sd = app.add_subcommand("synth-data", "Generate the synthetic toy corpus");
  sd->add_option("--config", synth.config, "Run config (JSON); data section is used");
  sd->add_option("--out", synth.out, "Output corpus directory");
  sd->add_option("--n-train", synth.n_train, "Training samples");
  sd->add_option("--n-eval", synth.n_eval, "Held-out samples");
  sd->add_option("--world-seed", synth.world_seed, "Toy world seed");

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "Train a decoder and write checkpoints and metrics");
  tr->add_option("--config", train.config, "Run config (JSON)");
  tr->add_option("--out", train.out, "Run directory");
  tr->add_option("--resume", train.resume, "Checkpoint to resume from");
  tr->add_option("--stop-after", train.stop_after, "Stop at this step (schedule still uses total_steps)");
  tr->add_flag("--eval-accuracy", train.eval_accuracy, "Report held-out next-frame accuracy at the end");

  GenerateArgs gen;
  auto* ge = app.add_subcommand("generate", "Generate speech for manifest entries");
  ge->add_option("--checkpoint", gen.checkpoint, "Checkpoint file")->required();
  ge->add_option("--manifest", gen.manifest, "Corpus manifest.jsonl")->required();
  ge->add_option("--out", gen.out, "Output directory");
  ge->add_option("--split", gen.split, "train, eval or all");
  ge->add_option("--limit", gen.limit, "Maximum entries (0 = all)");
  ge->add_option("--temperature", gen.opts.temperature, "0 selects argmax");
  ge->add_option("--max-frames", gen.max_frames, "Frame cap (default 1.6x video duration)");
  ge->add_option("--stop-rule", gen.opts.stop_rule, "Fraction of channels that must emit EOS");
  ge->add_option("--seed", gen.opts.seed, "Sampling seed");
  ge->add_flag("--drop-video", gen.opts.drop_video, "Generate without video conditioning");
  ge->add_flag("--drop-text", gen.opts.drop_text, "Generate without text conditioning");
  ge->add_flag("--wav", gen.wav, "Also write Griffin-Lim waveforms");
  ge->add_option("--griffin-lim-iters", gen.griffin_lim_iters, "Griffin-Lim iterations");

  EvalArgs ev;
  auto* et = app.add_subcommand("eval-timesync", "TimeSync of generated speech against ground truth");
  et->add_option("--gt-manifest", ev.manifest, "Ground-truth manifest.jsonl")->required();
  et->add_option("--gen-dir", ev.gen_dir, "Directory of generated <id>.mel.vtns / <id>.dmel.vtns")->required();
  et->add_option("--out", ev.out, "Output directory (default: gen-dir)");
  et->add_option("--split", ev.split, "train, eval or all");
  et->add_flag("--ingest-alignments", ev.ingest, "Read <id>.align.tsv instead of aligning with DTW");
  et->add_option("--bin-width", ev.bin_width, "Histogram bin width in seconds");
  et->add_option("--max-offset", ev.max_offset, "Histogram range in seconds");

  CodecArgs codec;
  auto* cr = app.add_subcommand("codec-roundtrip", "Mel round-trip error through the dMel codec");
  cr->add_option("--audio-dir", codec.audio_dir, "Directory of .wav files")->required();
  cr->add_option("--out", codec.out, "Directory for the report and fitted codebook");
  cr->add_option("--sample-rate", codec.mel.sample_rate, "Expected sample rate");
  cr->add_option("--n-mels", codec.mel.n_mels, "Mel channels");
  cr->add_option("--window", codec.mel.window_len, "Window length in samples");
  cr->add_option("--hop", codec.mel.hop_len, "Hop length in samples");
  cr->add_option("--fft", codec.mel.fft_size, "FFT size");
  cr->add_option("--fmax", codec.mel.fmax, "Upper filterbank edge in Hz");

  InspectArgs insp;
  auto* ip = app.add_subcommand("inspect-plan", "Render a sequence plan, one slot per line");
  ip->add_option("--config", insp.config, "Run config (JSON)");
  ip->add_option("--layout", insp.layout, "TTS, TV_ordered, VT_ordered, TV_streaming, V_only");
  ip->add_option("--positions", insp.positions, "global or time_aligned");
  ip->add_option("--manifest", insp.manifest, "Corpus manifest.jsonl");
  ip->add_option("--id", insp.id, "Sample id within the manifest");
  ip->add_option("--text", insp.text, "Transcript (without a manifest)");
  ip->add_option("--video-frames", insp.video_frames, "Video frames (without a manifest)");
  ip->add_option("--speech-frames", insp.speech_frames, "Speech frames (without a manifest)");
  ip->add_option("--mask-seed", insp.mask_seed, "Apply span masking with this seed");
  ip->add_option("--out", insp.out, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(ErrorKind::kUsage, e.what());
  }

  try {
    apply_thread_env();
    if (sd->parsed()) return run_synth(synth);
    if (tr->parsed()) return run_train(train);
    if (ge->parsed()) return run_generate(gen);
    if (et->parsed()) return run_eval(ev);
    if (cr->parsed()) return run_codec(codec);
    if (ip->parsed()) return run_inspect(insp);
  } catch (const Error& e) {
    return report(e.kind(), e.what());
  } catch (const Json::exception& e) {
    return report(ErrorKind::kFormat, e.what());
  } catch (const fs::filesystem_error& e) {
    return report(ErrorKind::kIo, e.what());
  } catch (const std::exception& e) {
    return report(ErrorKind::kContract, e.what());
  }
  return report(ErrorKind::kUsage, "no subcommand");
}

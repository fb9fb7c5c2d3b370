#pragma once

// Toy world where content lives only in text and timing only in video.
//
// Each character owns an L-row dMel template. A word is spoken during one
// active video span; its characters split the span's speech frames evenly
// and each stretches its template over its share. Pause frames are silence.
// Speakers shift every fourth channel by a fixed amount mod 16.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "visatronic/error.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/seqlayout.hpp"
#include "visatronic/tensorfile.hpp"
#include "visatronic/timesync.hpp"
#include "visatronic/tokenizers.hpp"

namespace visatronic {

struct ToyWorldConfig {
  int alphabet_size = 12;      // letters 'a', 'b', ...
  int template_len = 4;        // L: template rows, also the minimum frames per character
  std::size_t channels = 16;   // F
  int video_codebook = 32;     // K^v
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  int n_speakers = 4;
  int pause_threshold = 16;    // speak tokens >= threshold > pause tokens
  std::size_t min_video_frames = 20;
  std::size_t max_video_frames = 60;
  int max_word_len = 4;
  std::uint64_t seed = 1234;

  void validate() const {
    require(alphabet_size >= 1 && alphabet_size <= 26, ErrorKind::kConfig, "alphabet_size must be in [1, 26]");
    require(template_len >= 1, ErrorKind::kConfig, "template_len must be >= 1");
    require(channels >= 4, ErrorKind::kConfig, "toy world needs at least 4 channels");
    require(video_codebook >= 2 && pause_threshold >= 1 && pause_threshold < video_codebook, ErrorKind::kConfig,
            "pause threshold must split the video codebook");
    require(grid_h > 0 && grid_w > 0, ErrorKind::kConfig, "video grid must be non-empty");
    require(n_speakers >= 1 && n_speakers <= 4, ErrorKind::kConfig, "n_speakers must be in [1, 4]");
    require(min_video_frames >= 1 && min_video_frames <= max_video_frames, ErrorKind::kConfig,
            "video length range is empty");
    require(max_word_len >= 1, ErrorKind::kConfig, "max_word_len must be >= 1");
  }

  friend bool operator==(const ToyWorldConfig&, const ToyWorldConfig&) = default;
};

struct ToyWorld {
  ToyWorldConfig cfg;
  std::vector<Grid<int>> templates;  // per character: L x F, speaker 0
  std::vector<int> silence;          // F
  CharVocab vocab;

  static constexpr int kSpeakerStep = 4;

  char32_t letter(int c) const { return static_cast<char32_t>(U'a' + c); }

  // Channels that carry the speaker shift.
  static bool speaker_channel(std::size_t f) { return f % 4 == 3; }

  int speaker_offset(int speaker) const { return (kSpeakerStep * speaker) % kDMelLevels; }

  std::vector<int> frame(int c, int row, int speaker) const {
    std::vector<int> out(cfg.channels);
    for (std::size_t f = 0; f < cfg.channels; ++f) {
      int v = templates[static_cast<std::size_t>(c)](static_cast<std::size_t>(row), f);
      if (speaker_channel(f)) v = (v + speaker_offset(speaker)) % kDMelLevels;
      out[f] = v;
    }
    return out;
  }
};

namespace toy_detail {

inline int hamming(const Grid<int>& a, const Grid<int>& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) d += a.data()[i] != b.data()[i];
  return d;
}

}  // namespace toy_detail

// Templates: each character draws a base level in [2, 12] per channel; row r
// adds r on channels 0 and 1. Redrawn until every pair of templates differs
// in at least L*F/4 entries and no two frames of different characters
// coincide under any pair of speaker shifts.
inline ToyWorld make_world(const ToyWorldConfig& cfg) {
  cfg.validate();
  require(cfg.template_len - 1 + 12 < kDMelLevels, ErrorKind::kConfig, "template_len too large for 16 levels");
  ToyWorld w;
  w.cfg = cfg;
  w.silence.assign(cfg.channels, 0);
  std::vector<char32_t> symbols{U' '};
  for (int c = 0; c < cfg.alphabet_size; ++c) symbols.push_back(w.letter(c));
  w.vocab = CharVocab(symbols);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> base_level(2, 12);
  const std::size_t rows = static_cast<std::size_t>(cfg.template_len);
  const int min_hamming = static_cast<int>(rows * cfg.channels / 4);
  for (int attempt = 0;; ++attempt) {
    require(attempt < 1000, ErrorKind::kConfig, "could not draw distinct toy templates");
    w.templates.clear();
    for (int c = 0; c < cfg.alphabet_size; ++c) {
      Grid<int> t(rows, cfg.channels);
      std::vector<int> base(cfg.channels);
      for (int& b : base) b = base_level(rng);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t f = 0; f < cfg.channels; ++f) t(r, f) = base[f] + (f < 2 ? static_cast<int>(r) : 0);
      }
      w.templates.push_back(std::move(t));
    }
    bool ok = true;
    for (int a = 0; a < cfg.alphabet_size && ok; ++a) {
      for (int b = a + 1; b < cfg.alphabet_size && ok; ++b) {
        ok = toy_detail::hamming(w.templates[static_cast<std::size_t>(a)], w.templates[static_cast<std::size_t>(b)]) >=
             min_hamming;
        for (int sa = 0; sa < cfg.n_speakers && ok; ++sa) {
          for (int sb = 0; sb < cfg.n_speakers && ok; ++sb) {
            for (int ra = 0; ra < cfg.template_len && ok; ++ra) {
              for (int rb = 0; rb < cfg.template_len && ok; ++rb) ok = w.frame(a, ra, sa) != w.frame(b, rb, sb);
            }
          }
        }
      }
    }
    if (ok) return w;
  }
}

// Speech frames covered by video frames [a, b]: the frames whose start time
// falls inside the span.
inline std::pair<std::size_t, std::size_t> span_to_speech_frames(std::size_t a, std::size_t b) {
  const auto ceil_div = [](std::size_t x, std::size_t y) { return (x + y - 1) / y; };
  return {ceil_div(8 * a, 5), ceil_div(8 * (b + 1), 5)};  // half-open
}

inline std::size_t speech_frames_for_video(std::size_t n_video) { return (8 * n_video + 4) / 5; }

struct ToySample {
  std::string id;
  std::string text;
  TextTokens tokens;
  VideoTokenGrid video;
  DMelSeq speech;
  int speaker_id = 0;
  SpeakerVector speaker;
  PhonemeAlignment alignment;
};

// Video frames speak where `speaking[t]` is true. Words of `text` (split on
// spaces) are assigned in order to the maximal speaking runs.
inline ToySample make_sample(const ToyWorld& world, const std::string& text, const std::vector<bool>& speaking,
                             int speaker_id, std::uint64_t video_seed) {
  const auto& cfg = world.cfg;
  require(speaker_id >= 0 && speaker_id < cfg.n_speakers, ErrorKind::kConfig, "speaker id out of range");
  std::vector<std::string> words;
  {
    std::string cur;
    for (char ch : text) {
      if (ch == ' ') {
        if (!cur.empty()) words.push_back(cur);
        cur.clear();
      } else {
        require(ch >= 'a' && ch < 'a' + cfg.alphabet_size, ErrorKind::kConfig,
                std::string("character '") + ch + "' outside the toy alphabet");
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) words.push_back(cur);
  }
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // inclusive video frames
  for (std::size_t t = 0; t < speaking.size(); ++t) {
    if (speaking[t] && (t == 0 || !speaking[t - 1])) spans.emplace_back(t, t);
    if (speaking[t]) spans.back().second = t;
  }
  require(spans.size() == words.size(), ErrorKind::kInfeasibleTiming,
          "text has " + std::to_string(words.size()) + " words but video has " + std::to_string(spans.size()) +
              " active spans");

  ToySample s;
  s.text = text;
  s.tokens = tokenize(text, world.vocab);
  s.speaker_id = speaker_id;
  s.speaker = random_speaker_vector(cfg.seed, speaker_id);

  const std::size_t n_video = speaking.size();
  s.video = VideoTokenGrid{n_video, cfg.grid_h, cfg.grid_w, cfg.video_codebook, kVideoFramePeriod, {}};
  std::mt19937_64 rng(video_seed);
  std::uniform_int_distribution<int> speak_tok(cfg.pause_threshold, cfg.video_codebook - 1);
  std::uniform_int_distribution<int> pause_tok(0, cfg.pause_threshold - 1);
  for (std::size_t t = 0; t < n_video; ++t) {
    for (std::size_t c = 0; c < cfg.grid_h * cfg.grid_w; ++c) {
      s.video.tokens.push_back(speaking[t] ? speak_tok(rng) : pause_tok(rng));
    }
  }

  const std::size_t n_speech = speech_frames_for_video(n_video);
  Grid<int> speech(n_speech, cfg.channels, 0);
  s.alignment.source = AlignmentSource::kGroundTruth;
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto [lo, hi] = span_to_speech_frames(spans[w].first, spans[w].second);
    const std::size_t total = hi - lo, k = words[w].size();
    require(total >= k * static_cast<std::size_t>(cfg.template_len), ErrorKind::kInfeasibleTiming,
            "word '" + words[w] + "' needs " + std::to_string(k * static_cast<std::size_t>(cfg.template_len)) +
                " speech frames but its span has " + std::to_string(total));
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t a = lo + i * total / k, b = lo + (i + 1) * total / k;
      const std::size_t d = b - a;
      const int c = words[w][i] - 'a';
      for (std::size_t j = 0; j < d; ++j) {
        const int row = static_cast<int>(j * static_cast<std::size_t>(cfg.template_len) / d);
        const auto fr = world.frame(c, row, speaker_id);
        std::copy(fr.begin(), fr.end(), speech.row(a + j).begin());
      }
      s.alignment.segments.push_back({std::string(1, words[w][i]), static_cast<double>(a) * kSpeechFramePeriod,
                                      static_cast<double>(b) * kSpeechFramePeriod});
    }
  }
  s.speech = DMelSeq{std::move(speech), kSpeechFramePeriod};
  return s;
}

// Minimum video frames for a word of k characters starting at video frame a.
inline std::size_t min_span_video_frames(std::size_t a, std::size_t k, int template_len) {
  std::size_t w = 1;
  while (true) {
    const auto [lo, hi] = span_to_speech_frames(a, a + w - 1);
    if (hi - lo >= k * static_cast<std::size_t>(template_len)) return w;
    ++w;
  }
}

// Random sample: video length in [min, max], short pauses around words of
// 1..max_word_len letters, each span a little longer than its minimum.
inline ToySample random_sample(const ToyWorld& world, std::uint64_t seed) {
  const auto& cfg = world.cfg;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_video_frames, cfg.max_video_frames);
  std::uniform_int_distribution<int> word_len(1, cfg.max_word_len);
  std::uniform_int_distribution<int> letter(0, cfg.alphabet_size - 1);
  std::uniform_int_distribution<std::size_t> lead(1, 3), gap(2, 5), slack(0, 4);
  std::uniform_int_distribution<int> spk(0, cfg.n_speakers - 1);

  const std::size_t n_video = len_dist(rng);
  std::vector<bool> speaking(n_video, false);
  std::string text;
  std::size_t pos = lead(rng);
  while (true) {
    const int k = word_len(rng);
    const std::size_t w = min_span_video_frames(pos, static_cast<std::size_t>(k), cfg.template_len) + slack(rng);
    if (pos + w + 1 > n_video) {
      // Always keep at least one (single-letter, minimal) word.
      if (text.empty()) {
        const std::size_t w1 = min_span_video_frames(pos, 1, cfg.template_len);
        require(pos + w1 <= n_video, ErrorKind::kInfeasibleTiming, "video too short for one character");
        for (std::size_t t = pos; t < pos + w1; ++t) speaking[t] = true;
        text.push_back(static_cast<char>('a' + letter(rng)));
      }
      break;
    }
    if (!text.empty()) text.push_back(' ');
    for (int i = 0; i < k; ++i) text.push_back(static_cast<char>('a' + letter(rng)));
    for (std::size_t t = pos; t < pos + w; ++t) speaking[t] = true;
    pos += w + gap(rng);
  }
  return make_sample(world, text, speaking, spk(rng), rng());
}

struct ToyCorpus {
  std::vector<ToySample> train;
  std::vector<ToySample> eval;
};

inline std::uint64_t sample_seed(std::uint64_t world_seed, std::uint64_t index, bool eval) {
  std::seed_seq seq{static_cast<std::uint32_t>(world_seed), static_cast<std::uint32_t>(world_seed >> 32),
                    static_cast<std::uint32_t>(index), eval ? 1u : 0u};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline ToyCorpus make_corpus(const ToyWorld& world, std::size_t n_train, std::size_t n_eval) {
  ToyCorpus c;
  for (std::size_t i = 0; i < n_train; ++i) {
    c.train.push_back(random_sample(world, sample_seed(world.cfg.seed, i, false)));
    c.train.back().id = "train_" + std::to_string(i);
  }
  for (std::size_t i = 0; i < n_eval; ++i) {
    c.eval.push_back(random_sample(world, sample_seed(world.cfg.seed, i, true)));
    c.eval.back().id = "eval_" + std::to_string(i);
  }
  return c;
}

// Log-mel range used to invert toy dMel indices: level 0 is the log floor.
inline DMelCodebook toy_codebook() { return DMelCodebook(std::log(1e-5), 1.5); }

// ---------------------------------------------------------------------------
// Content decoding

// Each frame is labeled by its nearest (character, row, speaker) frame or
// silence (L1 distance, first best wins). A new character starts when the
// label changes or the row goes down; silence ends a character.
inline std::string decode_content(const ToyWorld& world, const DMelSeq& speech) {
  const auto& cfg = world.cfg;
  require(speech.n_channels() == cfg.channels, ErrorKind::kShape, "speech channel count does not match the world");
  std::vector<std::pair<std::vector<int>, std::pair<int, int>>> bank;  // frame, (char, row); char -1 = silence
  bank.push_back({world.silence, {-1, 0}});
  for (int c = 0; c < cfg.alphabet_size; ++c) {
    for (int r = 0; r < cfg.template_len; ++r) {
      for (int s = 0; s < cfg.n_speakers; ++s) bank.push_back({world.frame(c, r, s), {c, r}});
    }
  }
  std::string out;
  int prev_char = -1, prev_row = 0;
  for (std::size_t t = 0; t < speech.n_frames(); ++t) {
    const auto row = speech.indices.row(t);
    int best = -1;
    long best_d = 0;
    for (std::size_t k = 0; k < bank.size(); ++k) {
      long d = 0;
      for (std::size_t f = 0; f < cfg.channels; ++f) d += std::abs(row[f] - bank[k].first[f]);
      if (best < 0 || d < best_d) {
        best = static_cast<int>(k);
        best_d = d;
      }
    }
    const auto [c, r] = bank[static_cast<std::size_t>(best)].second;
    if (c >= 0 && (c != prev_char || r < prev_row)) out.push_back(static_cast<char>('a' + c));
    prev_char = c;
    prev_row = r;
  }
  return out;
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// 1 - edit_distance / |reference letters|; negative when the output is
// longer garbage than the reference.
inline double content_accuracy(const ToyWorld& world, const DMelSeq& speech, const std::string& text) {
  std::string ref;
  for (char ch : text) {
    if (ch != ' ') ref.push_back(ch);
  }
  require(!ref.empty(), ErrorKind::kEmptyInput, "reference text has no letters");
  const std::string hyp = decode_content(world, speech);
  return 1.0 - static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Persistence

inline Json to_json(const ToyWorldConfig& c) {
  return Json{{"alphabet_size", c.alphabet_size}, {"template_len", c.template_len},
              {"channels", c.channels},           {"video_codebook", c.video_codebook},
              {"grid_h", c.grid_h},               {"grid_w", c.grid_w},
              {"n_speakers", c.n_speakers},       {"pause_threshold", c.pause_threshold},
              {"min_video_frames", c.min_video_frames}, {"max_video_frames", c.max_video_frames},
              {"max_word_len", c.max_word_len},   {"seed", c.seed}};
}

inline ToyWorldConfig toy_config_from_json(const Json& j) {
  require(j.is_object(), ErrorKind::kConfig, "toy world config must be an object");
  ToyWorldConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "alphabet_size") c.alphabet_size = v.get<int>();
    else if (key == "template_len") c.template_len = v.get<int>();
    else if (key == "channels") c.channels = v.get<std::size_t>();
    else if (key == "video_codebook") c.video_codebook = v.get<int>();
    else if (key == "grid_h") c.grid_h = v.get<std::size_t>();
    else if (key == "grid_w") c.grid_w = v.get<std::size_t>();
    else if (key == "n_speakers") c.n_speakers = v.get<int>();
    else if (key == "pause_threshold") c.pause_threshold = v.get<int>();
    else if (key == "min_video_frames") c.min_video_frames = v.get<std::size_t>();
    else if (key == "max_video_frames") c.max_video_frames = v.get<std::size_t>();
    else if (key == "max_word_len") c.max_word_len = v.get<int>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else fail(ErrorKind::kConfig, "unknown toy world key '" + key + "'");
  }
  c.validate();
  return c;
}

struct ManifestEntry {
  std::string id;
  std::string split;
  std::string text;
  int speaker_id = 0;
  std::string video;      // paths relative to the manifest directory
  std::string speech;
  std::string speaker;
  std::string alignment;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline Json to_json(const ManifestEntry& e) {
  return Json{{"id", e.id},         {"split", e.split},   {"text", e.text},       {"speaker_id", e.speaker_id},
              {"video", e.video},   {"speech", e.speech}, {"speaker", e.speaker}, {"alignment", e.alignment}};
}

inline ManifestEntry manifest_entry_from_json(const Json& j) {
  ManifestEntry e;
  try {
    e.id = j.at("id").get<std::string>();
    e.split = j.value("split", std::string("eval"));
    e.text = j.at("text").get<std::string>();
    e.speaker_id = j.value("speaker_id", 0);
    e.video = j.value("video", std::string());
    e.speech = j.value("speech", std::string());
    e.speaker = j.at("speaker").get<std::string>();
    e.alignment = j.value("alignment", std::string());
  } catch (const Json::exception& ex) {
    fail(ErrorKind::kFormat, std::string("bad manifest record: ") + ex.what());
  }
  return e;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  std::vector<ManifestEntry> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& ex) {
      fail(ErrorKind::kFormat, "manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
    out.push_back(manifest_entry_from_json(j));
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::string text;
  for (const auto& e : entries) text += to_json(e).dump() + "\n";
  write_file_bytes(path, text);
}

// Writes world.json, codebook.txt, manifest.jsonl and per-sample files
// under `dir`.
inline void write_corpus(const std::filesystem::path& dir, const ToyWorld& world, const ToyCorpus& corpus) {
  const std::string world_text = Json{{"toy_world", to_json(world.cfg)}}.dump(2) + "\n";
  write_file_bytes(dir / "world.json", world_text);
  save_codebook(dir / "codebook.txt", toy_codebook());
  std::vector<ManifestEntry> entries;
  auto emit = [&](const ToySample& s, const std::string& split) {
    ManifestEntry e{s.id, split, s.text, s.speaker_id, "samples/" + s.id + ".video.vtns",
                    "samples/" + s.id + ".dmel.vtns", "samples/" + s.id + ".speaker.vtns",
                    "samples/" + s.id + ".align.tsv"};
    save_video_tokens(dir / e.video, s.video);
    save_dmel(dir / e.speech, s.speech);
    save_speaker_vector(dir / e.speaker, s.speaker);
    save_alignment(dir / e.alignment, s.alignment);
    entries.push_back(e);
  };
  for (const auto& s : corpus.train) emit(s, "train");
  for (const auto& s : corpus.eval) emit(s, "eval");
  write_manifest(dir / "manifest.jsonl", entries);
}

inline ToyWorld load_world(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_file_bytes(path));
  } catch (const Json::exception& ex) {
    fail(ErrorKind::kFormat, std::string("world file: ") + ex.what());
  }
  require(j.is_object() && j.contains("toy_world"), ErrorKind::kFormat, "world file lacks 'toy_world'");
  return make_world(toy_config_from_json(j.at("toy_world")));
}

inline ToySample load_sample(const std::filesystem::path& dir, const ManifestEntry& e, const CharVocab& vocab) {
  ToySample s;
  s.id = e.id;
  s.text = e.text;
  s.tokens = tokenize(e.text, vocab);
  s.speaker_id = e.speaker_id;
  s.speaker = load_speaker_vector(dir / e.speaker);
  if (!e.video.empty()) s.video = load_video_tokens(dir / e.video);
  if (!e.speech.empty()) s.speech = load_dmel(dir / e.speech);
  if (!e.alignment.empty()) s.alignment = load_alignment(dir / e.alignment);
  return s;
}

}  // namespace visatronic

#pragma once

// Character text tokens, video token grids and speaker vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "visatronic/error.hpp"
#include "visatronic/tensorfile.hpp"

namespace visatronic {

namespace utf8 {

inline std::u32string decode(std::string_view s) {
  std::u32string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    char32_t cp = 0;
    std::size_t len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1F;
      len = 2;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0F;
      len = 3;
    } else if ((c >> 3) == 0x1E) {
      cp = c & 0x07;
      len = 4;
    } else {
      fail(ErrorKind::kFormat, "invalid UTF-8 lead byte");
    }
    require(i + len <= s.size(), ErrorKind::kFormat, "truncated UTF-8 sequence");
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      require((cc >> 6) == 0x2, ErrorKind::kFormat, "invalid UTF-8 continuation byte");
      cp = (cp << 6) | (cc & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline std::string encode(std::u32string_view s) {
  std::string out;
  for (char32_t cp : s) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

}  // namespace utf8

// Characters get ids 0..n-1 in codepoint order; PAD = n, UNK = n + 1.
class CharVocab {
 public:
  CharVocab() = default;
  explicit CharVocab(std::vector<char32_t> symbols) : symbols_(std::move(symbols)) {
    std::sort(symbols_.begin(), symbols_.end());
    symbols_.erase(std::unique(symbols_.begin(), symbols_.end()), symbols_.end());
    for (std::size_t i = 0; i < symbols_.size(); ++i) ids_[symbols_[i]] = static_cast<int>(i);
  }

  int size() const noexcept { return static_cast<int>(symbols_.size()) + 2; }
  int pad_id() const noexcept { return static_cast<int>(symbols_.size()); }
  int unk_id() const noexcept { return static_cast<int>(symbols_.size()) + 1; }
  const std::vector<char32_t>& symbols() const noexcept { return symbols_; }

  int id(char32_t c) const {
    auto it = ids_.find(c);
    return it == ids_.end() ? unk_id() : it->second;
  }
  bool contains(char32_t c) const { return ids_.count(c) != 0; }

  friend bool operator==(const CharVocab& a, const CharVocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<char32_t> symbols_;
  std::map<char32_t, int> ids_;
};

struct TextTokens {
  std::vector<int> ids;

  std::size_t size() const noexcept { return ids.size(); }
  friend bool operator==(const TextTokens&, const TextTokens&) = default;
};

inline CharVocab build_char_vocab(std::span<const std::string> corpus) {
  require(!corpus.empty(), ErrorKind::kEmptyInput, "vocabulary corpus is empty");
  std::set<char32_t> chars;
  for (const auto& line : corpus) {
    for (char32_t c : utf8::decode(line)) chars.insert(c);
  }
  return CharVocab(std::vector<char32_t>(chars.begin(), chars.end()));
}

inline TextTokens tokenize(std::string_view text, const CharVocab& vocab) {
  TextTokens out;
  for (char32_t c : utf8::decode(text)) out.ids.push_back(vocab.id(c));
  return out;
}

// PAD is dropped and UNK renders as U+FFFD.
inline std::string detokenize(const TextTokens& tokens, const CharVocab& vocab) {
  std::u32string out;
  for (int id : tokens.ids) {
    if (id >= 0 && id < vocab.pad_id()) {
      out.push_back(vocab.symbols()[static_cast<std::size_t>(id)]);
    } else if (id == vocab.unk_id()) {
      out.push_back(U'�');
    }
  }
  return utf8::encode(out);
}

struct VideoTokenGrid {
  std::size_t n_frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int codebook_size = 0;
  double frame_period_seconds = 0.040;
  std::vector<int> tokens;  // n_frames x height x width, row-major

  std::size_t cells_per_frame() const noexcept { return height * width; }
  std::span<const int> frame(std::size_t t) const {
    return {tokens.data() + t * cells_per_frame(), cells_per_frame()};
  }
  int at(std::size_t t, std::size_t h, std::size_t w) const {
    return tokens[(t * height + h) * width + w];
  }

  void validate() const {
    require(codebook_size > 0, ErrorKind::kCorruptGrid, "video codebook size must be positive");
    require(tokens.size() == n_frames * height * width, ErrorKind::kShape,
            "video grid is not rectangular");
    for (int v : tokens) {
      require(v >= 0 && v < codebook_size, ErrorKind::kCorruptGrid,
              "video token " + std::to_string(v) + " outside codebook of size " +
                  std::to_string(codebook_size));
    }
  }

  friend bool operator==(const VideoTokenGrid&, const VideoTokenGrid&) = default;
};

inline constexpr std::size_t kSpeakerDim = 512;

struct SpeakerVector {
  std::vector<double> values = std::vector<double>(kSpeakerDim, 0.0);

  void validate() const {
    require(values.size() == kSpeakerDim, ErrorKind::kShape, "speaker vector must have 512 entries");
    for (double v : values) require(std::isfinite(v), ErrorKind::kNumeric, "speaker vector is not finite");
  }
};

// Seeded random unit vector standing in for an external speaker model.
inline SpeakerVector random_speaker_vector(std::uint64_t seed, int speaker_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(speaker_id), 0x5bd1e995u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  SpeakerVector v;
  double norm = 0.0;
  for (double& x : v.values) {
    x = normal(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v.values) x /= norm;
  return v;
}

// Average-pool each H x W frame to grid_h x grid_w and bin the pooled
// intensity into codebook_size uniform bins.
inline VideoTokenGrid toy_quantize_video(std::span<const double> frames, std::size_t n_frames,
                                         std::size_t height, std::size_t width, std::size_t grid_h,
                                         std::size_t grid_w, int codebook_size) {
  require(grid_h > 0 && grid_w > 0 && height % grid_h == 0 && width % grid_w == 0, ErrorKind::kShape,
          "frame size must be divisible by the token grid");
  require(frames.size() == n_frames * height * width, ErrorKind::kShape, "frame buffer size mismatch");
  require(codebook_size > 0, ErrorKind::kConfig, "codebook size must be positive");
  const std::size_t ph = height / grid_h, pw = width / grid_w;
  VideoTokenGrid grid{n_frames, grid_h, grid_w, codebook_size, 0.040, {}};
  grid.tokens.resize(n_frames * grid_h * grid_w);
  for (std::size_t t = 0; t < n_frames; ++t) {
    const double* frame = frames.data() + t * height * width;
    for (std::size_t gh = 0; gh < grid_h; ++gh) {
      for (std::size_t gw = 0; gw < grid_w; ++gw) {
        double acc = 0.0;
        for (std::size_t y = gh * ph; y < (gh + 1) * ph; ++y) {
          for (std::size_t x = gw * pw; x < (gw + 1) * pw; ++x) acc += frame[y * width + x];
        }
        const double pooled = acc / static_cast<double>(ph * pw);
        const auto bin = static_cast<long long>(std::floor(pooled * codebook_size));
        grid.tokens[(t * grid_h + gh) * grid_w + gw] =
            static_cast<int>(std::clamp<long long>(bin, 0, codebook_size - 1));
      }
    }
  }
  return grid;
}

inline TensorFile to_tensor_file(const VideoTokenGrid& grid) {
  TensorFile tf;
  tf.dtype = DType::kI32;
  tf.shape = {grid.n_frames, grid.height, grid.width};
  tf.attrs = {{"kind", "video_tokens"},
              {"codebook_size", grid.codebook_size},
              {"frame_period_seconds", grid.frame_period_seconds}};
  tf.values.assign(grid.tokens.begin(), grid.tokens.end());
  return tf;
}

inline VideoTokenGrid video_from_tensor_file(const TensorFile& tf) {
  require(tf.dtype == DType::kI32, ErrorKind::kFormat, "video tokens must have an integer payload");
  require(tf.shape.size() == 3, ErrorKind::kShape, "video tokens must be rank 3 (frames, H', W')");
  require(tf.attrs.contains("codebook_size"), ErrorKind::kFormat, "video tokens must declare codebook_size");
  VideoTokenGrid grid;
  grid.n_frames = tf.shape[0];
  grid.height = tf.shape[1];
  grid.width = tf.shape[2];
  grid.codebook_size = tf.attrs.at("codebook_size").get<int>();
  grid.frame_period_seconds = tf.attrs.value("frame_period_seconds", 0.040);
  grid.tokens.reserve(tf.values.size());
  for (double v : tf.values) grid.tokens.push_back(static_cast<int>(v));
  grid.validate();
  return grid;
}

inline VideoTokenGrid load_video_tokens(const std::filesystem::path& path) {
  return video_from_tensor_file(read_tensor_file(path));
}

inline void save_video_tokens(const std::filesystem::path& path, const VideoTokenGrid& grid) {
  write_tensor_file(path, to_tensor_file(grid));
}

inline void save_speaker_vector(const std::filesystem::path& path, const SpeakerVector& v) {
  TensorFile tf;
  tf.dtype = DType::kF64;
  tf.shape = {kSpeakerDim};
  tf.attrs = {{"kind", "speaker"}};
  tf.values = v.values;
  write_tensor_file(path, tf);
}

inline SpeakerVector load_speaker_vector(const std::filesystem::path& path) {
  const TensorFile tf = read_tensor_file(path);
  require(tf.shape.size() == 1 && tf.shape[0] == kSpeakerDim, ErrorKind::kShape,
          "speaker vector file must hold 512 values");
  SpeakerVector v{tf.values};
  v.validate();
  return v;
}

}  // namespace visatronic

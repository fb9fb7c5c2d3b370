#pragma once

// Waveform <-> log-mel <-> dMel conversions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "visatronic/error.hpp"
#include "visatronic/grid.hpp"
#include "visatronic/tensorfile.hpp"

namespace visatronic {

inline constexpr int kDMelBits = 4;
inline constexpr int kDMelLevels = 1 << kDMelBits;
// Reserved class predicted in every channel of the terminal speech frame.
inline constexpr int kSpeechEosClass = kDMelLevels;
inline constexpr int kSpeechClasses = kDMelLevels + 1;

struct AudioSignal {
  std::vector<double> samples;
  double sample_rate = 16000.0;

  void validate() const {
    require(sample_rate > 0.0, ErrorKind::kConfig, "sample_rate must be positive");
    for (double s : samples) {
      require(std::isfinite(s), ErrorKind::kNumeric, "audio contains non-finite samples");
    }
  }
};

struct MelConfig {
  double sample_rate = 16000.0;
  std::size_t window_len = 400;
  std::size_t hop_len = 400;
  std::size_t fft_size = 512;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  double frame_hop_seconds() const { return static_cast<double>(hop_len) / sample_rate; }
  std::size_t n_bins() const { return fft_size / 2 + 1; }

  void validate() const {
    require(sample_rate > 0.0, ErrorKind::kConfig, "mel: sample_rate must be positive");
    require(hop_len >= 1 && hop_len <= window_len && window_len <= fft_size, ErrorKind::kConfig,
            "mel: need 1 <= hop_len <= window_len <= fft_size");
    require(n_mels >= 1, ErrorKind::kConfig, "mel: n_mels must be >= 1");
    require(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0, ErrorKind::kConfig,
            "mel: need 0 <= fmin < fmax <= sample_rate/2");
    require(log_floor > 0.0, ErrorKind::kConfig, "mel: log_floor must be positive");
  }
};

struct MelSpec {
  Grid<double> values;  // frames x n_mels, natural log
  double frame_hop_seconds = 0.025;

  std::size_t n_frames() const { return values.rows(); }
  std::size_t n_mels() const { return values.cols(); }
};

struct DMelSeq {
  Grid<int> indices;  // frames x channels, each in [0, kDMelLevels)
  double frame_hop_seconds = 0.025;

  std::size_t n_frames() const { return indices.rows(); }
  std::size_t n_channels() const { return indices.cols(); }

  void validate() const {
    for (int v : indices.data()) {
      require(v >= 0 && v < kDMelLevels, ErrorKind::kCorruptSequence,
              "dMel index out of range: " + std::to_string(v));
    }
  }

  friend bool operator==(const DMelSeq&, const DMelSeq&) = default;
};

class DMelCodebook {
 public:
  DMelCodebook(double min_value, double max_value, int bits = kDMelBits)
      : min_(min_value), max_(max_value), bits_(bits) {
    require(bits >= 1 && bits <= 16, ErrorKind::kConfig, "codebook bits must be in [1, 16]");
    require(std::isfinite(min_value) && std::isfinite(max_value), ErrorKind::kNumeric,
            "codebook range must be finite");
    require(min_value < max_value, ErrorKind::kDegenerateRange,
            "codebook range is degenerate (min == max)");
    const int n = n_levels();
    levels_.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) levels_[static_cast<std::size_t>(i)] = min_ + i * step();
    levels_.back() = max_;
  }

  double min() const noexcept { return min_; }
  double max() const noexcept { return max_; }
  int bits() const noexcept { return bits_; }
  int n_levels() const noexcept { return 1 << bits_; }
  double step() const noexcept { return (max_ - min_) / (n_levels() - 1); }
  const std::vector<double>& levels() const noexcept { return levels_; }
  double level(int i) const { return levels_.at(static_cast<std::size_t>(i)); }

  // argmin_i |x - c_i|, lower index on exact ties; out-of-range clamps.
  int nearest(double x) const {
    const int n = n_levels();
    if (!(x > min_)) return 0;
    if (!(x < max_)) return n - 1;
    const int guess = std::clamp(static_cast<int>(std::floor((x - min_) / step())), 0, n - 1);
    int best = std::max(guess - 1, 0);
    double best_dist = std::abs(x - levels_[static_cast<std::size_t>(best)]);
    for (int i = best + 1; i <= std::min(guess + 2, n - 1); ++i) {
      const double d = std::abs(x - levels_[static_cast<std::size_t>(i)]);
      if (d < best_dist) {
        best = i;
        best_dist = d;
      }
    }
    return best;
  }

 private:
  double min_;
  double max_;
  int bits_;
  std::vector<double> levels_;
};

namespace dsp {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Center frequencies of the n_mels triangular filters.
inline std::vector<double> mel_center_frequencies(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin);
  const double hi = hz_to_mel(cfg.fmax);
  std::vector<double> centers(cfg.n_mels);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    centers[m] = mel_to_hz(lo + (hi - lo) * static_cast<double>(m + 1) /
                                    static_cast<double>(cfg.n_mels + 1));
  }
  return centers;
}

// n_mels x n_bins triangular filters, each scaled by 2 / (f_right - f_left).
inline Grid<double> mel_filterbank(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin);
  const double hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) /
                                  static_cast<double>(cfg.n_mels + 1));
  }
  Grid<double> fb(cfg.n_mels, cfg.n_bins());
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double norm = 2.0 / (right - left);
    for (std::size_t k = 0; k < cfg.n_bins(); ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.fft_size);
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      fb(m, k) = std::max(0.0, std::min(up, down)) * norm;
    }
  }
  return fb;
}

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

// In-place complex FFT. Radix-2 for powers of two, direct DFT otherwise.
inline void fft(std::vector<std::complex<double>>& x, bool inverse = false) {
  const std::size_t n = x.size();
  if (n <= 1) return;
  const double sign = inverse ? 1.0 : -1.0;
  if ((n & (n - 1)) != 0) {
    std::vector<std::complex<double>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        acc += x[t] * std::polar(1.0, sign * 2.0 * std::numbers::pi *
                                          static_cast<double>((k * t) % n) / static_cast<double>(n));
      }
      out[k] = acc;
    }
    x = std::move(out);
  } else {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
      std::size_t bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(x[i], x[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::complex<double> wl = std::polar(1.0, sign * 2.0 * std::numbers::pi / static_cast<double>(len));
      for (std::size_t i = 0; i < n; i += len) {
        std::complex<double> w = 1.0;
        for (std::size_t j = 0; j < len / 2; ++j) {
          const auto u = x[i + j];
          const auto v = x[i + j + len / 2] * w;
          x[i + j] = u + v;
          x[i + j + len / 2] = u - v;
          w *= wl;
        }
      }
    }
  }
  if (inverse) {
    for (auto& v : x) v /= static_cast<double>(n);
  }
}

// One-sided spectrum of a windowed, zero-padded frame.
inline std::vector<std::complex<double>> frame_spectrum(std::span<const double> frame,
                                                        std::span<const double> window,
                                                        std::size_t fft_size) {
  std::vector<std::complex<double>> buf(fft_size, 0.0);
  for (std::size_t i = 0; i < frame.size(); ++i) buf[i] = frame[i] * window[i];
  fft(buf);
  buf.resize(fft_size / 2 + 1);
  return buf;
}

inline std::size_t frame_count(std::size_t n_samples, const MelConfig& cfg) {
  if (n_samples < cfg.window_len) return 0;
  return (n_samples - cfg.window_len) / cfg.hop_len + 1;
}

}  // namespace dsp

inline MelSpec compute_logmel(const AudioSignal& audio, const MelConfig& cfg) {
  cfg.validate();
  audio.validate();
  require(audio.sample_rate == cfg.sample_rate, ErrorKind::kConfig,
          "audio sample rate does not match mel config");
  const std::size_t n_frames = dsp::frame_count(audio.samples.size(), cfg);
  require(n_frames > 0, ErrorKind::kEmptyInput, "audio is shorter than one analysis window");

  const Grid<double> fb = dsp::mel_filterbank(cfg);
  const std::vector<double> window = dsp::hann_window(cfg.window_len);
  MelSpec spec{Grid<double>(n_frames, cfg.n_mels), cfg.frame_hop_seconds()};
  std::vector<double> power(cfg.n_bins());
  for (std::size_t t = 0; t < n_frames; ++t) {
    const std::span<const double> frame(audio.samples.data() + t * cfg.hop_len, cfg.window_len);
    const auto spectrum = dsp::frame_spectrum(frame, window, cfg.fft_size);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(spectrum[k]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double energy = 0.0;
      for (std::size_t k = 0; k < power.size(); ++k) energy += fb(m, k) * power[k];
      spec.values(t, m) = std::log(std::max(energy, cfg.log_floor));
    }
  }
  return spec;
}

inline DMelCodebook fit_codebook(std::span<const MelSpec> specs, int bits = kDMelBits) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (const MelSpec& spec : specs) {
    for (double v : spec.values.data()) {
      require(std::isfinite(v), ErrorKind::kNumeric, "mel spec contains non-finite values");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      any = true;
    }
  }
  require(any, ErrorKind::kEmptyInput, "fit_codebook needs at least one non-empty spec");
  return DMelCodebook(lo, hi, bits);
}

inline DMelSeq discretize(const MelSpec& spec, const DMelCodebook& cb) {
  require(cb.n_levels() == kDMelLevels, ErrorKind::kConfig, "dMel sequences use 16 levels");
  DMelSeq seq{Grid<int>(spec.n_frames(), spec.n_mels()), spec.frame_hop_seconds};
  const auto& in = spec.values.data();
  auto& out = seq.indices.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = cb.nearest(in[i]);
  return seq;
}

inline MelSpec invert(const DMelSeq& seq, const DMelCodebook& cb) {
  MelSpec spec{Grid<double>(seq.n_frames(), seq.n_channels()), seq.frame_hop_seconds};
  const auto& in = seq.indices.data();
  auto& out = spec.values.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    require(in[i] >= 0 && in[i] < cb.n_levels(), ErrorKind::kCorruptSequence,
            "dMel index out of range: " + std::to_string(in[i]));
    out[i] = cb.level(in[i]);
  }
  return spec;
}

struct GriffinLimResult {
  AudioSignal audio;
  // Spectral convergence after each iteration.
  std::vector<double> residuals;
};

// ||  |STFT(x)| - target  ||_F / ||target||_F over the frames both cover.
inline double spectral_convergence(const AudioSignal& audio, const Grid<double>& target_mag,
                                   const MelConfig& cfg) {
  const std::vector<double> window = dsp::hann_window(cfg.window_len);
  const std::size_t frames = std::min(dsp::frame_count(audio.samples.size(), cfg), target_mag.rows());
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    const std::span<const double> frame(audio.samples.data() + t * cfg.hop_len, cfg.window_len);
    const auto spectrum = dsp::frame_spectrum(frame, window, cfg.fft_size);
    for (std::size_t k = 0; k < target_mag.cols(); ++k) {
      const double d = std::abs(spectrum[k]) - target_mag(t, k);
      num += d * d;
      den += target_mag(t, k) * target_mag(t, k);
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Linear-frequency magnitudes implied by a log-mel spec: mel energies above
// the floor, mapped through the filterbank pseudo-inverse, clamped at zero.
inline Grid<double> mel_to_linear_magnitude(const MelSpec& spec, const MelConfig& cfg) {
  require(spec.n_mels() == cfg.n_mels, ErrorKind::kShape, "mel spec width does not match config");
  const Grid<double> fb = dsp::mel_filterbank(cfg);
  Eigen::MatrixXd fb_mat(cfg.n_mels, cfg.n_bins());
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    for (std::size_t k = 0; k < cfg.n_bins(); ++k) fb_mat(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) = fb(m, k);
  }
  const Eigen::MatrixXd pinv = fb_mat.completeOrthogonalDecomposition().pseudoInverse();
  Grid<double> mag(spec.n_frames(), cfg.n_bins());
  Eigen::VectorXd energy(static_cast<Eigen::Index>(cfg.n_mels));
  for (std::size_t t = 0; t < spec.n_frames(); ++t) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      energy(static_cast<Eigen::Index>(m)) = std::max(std::exp(spec.values(t, m)) - cfg.log_floor, 0.0);
    }
    const Eigen::VectorXd power = pinv * energy;
    for (std::size_t k = 0; k < cfg.n_bins(); ++k) {
      mag(t, k) = std::sqrt(std::max(power(static_cast<Eigen::Index>(k)), 0.0));
    }
  }
  return mag;
}

inline GriffinLimResult griffin_lim_detailed(const MelSpec& spec, const MelConfig& cfg,
                                             int iterations, std::uint64_t seed = 0) {
  cfg.validate();
  require(iterations >= 1, ErrorKind::kConfig, "griffin_lim needs at least one iteration");
  const Grid<double> target = mel_to_linear_magnitude(spec, cfg);
  const std::size_t n_frames = spec.n_frames();
  const std::size_t n_bins = cfg.n_bins();
  const std::size_t n_samples = n_frames == 0 ? 0 : (n_frames - 1) * cfg.hop_len + cfg.window_len;
  const std::vector<double> window = dsp::hann_window(cfg.window_len);

  // Overlap-add normaliser. Floored so that near-zero window tails do not
  // blow up when frames do not overlap.
  std::vector<double> wsum(n_samples, 0.0);
  for (std::size_t t = 0; t < n_frames; ++t) {
    for (std::size_t i = 0; i < cfg.window_len; ++i) wsum[t * cfg.hop_len + i] += window[i] * window[i];
  }
  for (double& w : wsum) w = std::max(w, 1e-2);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase_dist(-std::numbers::pi, std::numbers::pi);
  Grid<std::complex<double>> stft(n_frames, n_bins);
  for (std::size_t t = 0; t < n_frames; ++t) {
    for (std::size_t k = 0; k < n_bins; ++k) stft(t, k) = std::polar(target(t, k), phase_dist(rng));
  }

  GriffinLimResult result;
  result.audio.sample_rate = cfg.sample_rate;
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> signal(n_samples, 0.0);
    for (std::size_t t = 0; t < n_frames; ++t) {
      for (std::size_t k = 0; k < n_bins; ++k) buf[k] = stft(t, k);
      for (std::size_t k = n_bins; k < cfg.fft_size; ++k) buf[k] = std::conj(buf[cfg.fft_size - k]);
      dsp::fft(buf, /*inverse=*/true);
      for (std::size_t i = 0; i < cfg.window_len; ++i) signal[t * cfg.hop_len + i] += window[i] * buf[i].real();
    }
    for (std::size_t i = 0; i < n_samples; ++i) signal[i] /= wsum[i];
    for (std::size_t t = 0; t < n_frames; ++t) {
      const std::span<const double> frame(signal.data() + t * cfg.hop_len, cfg.window_len);
      const auto spectrum = dsp::frame_spectrum(frame, window, cfg.fft_size);
      for (std::size_t k = 0; k < n_bins; ++k) {
        const double a = std::abs(spectrum[k]);
        stft(t, k) = a > 1e-12 ? spectrum[k] / a * target(t, k) : std::complex<double>(target(t, k), 0.0);
      }
    }
    result.audio.samples = std::move(signal);
    result.residuals.push_back(spectral_convergence(result.audio, target, cfg));
  }
  return result;
}

inline AudioSignal griffin_lim(const MelSpec& spec, const MelConfig& cfg, int iterations) {
  return griffin_lim_detailed(spec, cfg, iterations).audio;
}

inline TensorFile to_tensor_file(const MelSpec& spec) {
  TensorFile tf;
  tf.dtype = DType::kF64;
  tf.shape = {spec.n_frames(), spec.n_mels()};
  tf.attrs = {{"kind", "logmel"}, {"frame_hop_seconds", spec.frame_hop_seconds}};
  tf.values = spec.values.data();
  return tf;
}

inline TensorFile to_tensor_file(const DMelSeq& seq) {
  TensorFile tf;
  tf.dtype = DType::kI32;
  tf.shape = {seq.n_frames(), seq.n_channels()};
  tf.attrs = {{"kind", "dmel"}, {"frame_hop_seconds", seq.frame_hop_seconds}, {"levels", kDMelLevels}};
  tf.values.assign(seq.indices.data().begin(), seq.indices.data().end());
  return tf;
}

inline MelSpec mel_from_tensor_file(const TensorFile& tf) {
  require(tf.shape.size() == 2, ErrorKind::kShape, "log-mel tensor must be rank 2");
  MelSpec spec{Grid<double>(tf.shape[0], tf.shape[1], tf.values), tf.attrs.value("frame_hop_seconds", 0.025)};
  for (double v : spec.values.data()) require(std::isfinite(v), ErrorKind::kNumeric, "log-mel values must be finite");
  return spec;
}

inline DMelSeq dmel_from_tensor_file(const TensorFile& tf) {
  require(tf.dtype == DType::kI32, ErrorKind::kFormat, "dMel tensor must have an integer payload");
  require(tf.shape.size() == 2, ErrorKind::kShape, "dMel tensor must be rank 2");
  std::vector<int> idx(tf.values.begin(), tf.values.end());
  DMelSeq seq{Grid<int>(tf.shape[0], tf.shape[1], std::move(idx)), tf.attrs.value("frame_hop_seconds", 0.025)};
  seq.validate();
  return seq;
}

inline void save_mel(const std::filesystem::path& path, const MelSpec& spec) { write_tensor_file(path, to_tensor_file(spec)); }
inline MelSpec load_mel(const std::filesystem::path& path) { return mel_from_tensor_file(read_tensor_file(path)); }
inline void save_dmel(const std::filesystem::path& path, const DMelSeq& seq) { write_tensor_file(path, to_tensor_file(seq)); }
inline DMelSeq load_dmel(const std::filesystem::path& path) { return dmel_from_tensor_file(read_tensor_file(path)); }

// Codebook text record: "m <value>\nM <value>\nbits <n>\n", values printed
// with 17 significant digits so they round-trip exactly.
inline std::string codebook_to_text(const DMelCodebook& cb) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "m %.17g\nM %.17g\nbits %d\n", cb.min(), cb.max(), cb.bits());
  return buf;
}

inline DMelCodebook codebook_from_text(const std::string& text) {
  double lo = 0.0, hi = 0.0;
  int bits = 0;
  require(std::sscanf(text.c_str(), "m %lf M %lf bits %d", &lo, &hi, &bits) == 3, ErrorKind::kFormat,
          "malformed codebook record");
  return DMelCodebook(lo, hi, bits);
}

inline void save_codebook(const std::filesystem::path& path, const DMelCodebook& cb) {
  write_file_bytes(path, codebook_to_text(cb));
}
inline DMelCodebook load_codebook(const std::filesystem::path& path) {
  return codebook_from_text(read_file_bytes(path));
}

}  // namespace visatronic

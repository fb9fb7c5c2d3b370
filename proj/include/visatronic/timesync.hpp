#pragma once

// Synchronization metric between two phoneme alignments: silence stripping,
// edit-distance pairing of labels, and the mean absolute offset of paired
// segment centers. A DTW aligner maps ground-truth segments onto generated
// speech when no external aligner output is available.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "visatronic/error.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/tensorfile.hpp"

namespace visatronic {

struct PhonemeSegment {
  std::string label;
  double start = 0.0;
  double end = 0.0;

  double center() const { return 0.5 * (start + end); }
  friend bool operator==(const PhonemeSegment&, const PhonemeSegment&) = default;
};

enum class AlignmentSource { kGroundTruth, kGenerated };

struct PhonemeAlignment {
  std::vector<PhonemeSegment> segments;
  AlignmentSource source = AlignmentSource::kGroundTruth;

  std::size_t size() const { return segments.size(); }
  bool empty() const { return segments.empty(); }

  // 0 <= start < end, sorted, non-overlapping.
  void validate() const {
    double prev_end = 0.0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& s = segments[i];
      require(std::isfinite(s.start) && std::isfinite(s.end), ErrorKind::kFormat, "segment times must be finite");
      require(s.start >= 0.0 && s.start < s.end, ErrorKind::kFormat,
              "segment " + std::to_string(i) + " needs 0 <= start < end");
      require(i == 0 || s.start >= prev_end, ErrorKind::kFormat,
              "segment " + std::to_string(i) + " overlaps or precedes its predecessor");
      prev_end = s.end;
    }
  }

  friend bool operator==(const PhonemeAlignment& a, const PhonemeAlignment& b) { return a.segments == b.segments; }
};

namespace align_detail {

inline std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_number(std::string_view s, std::size_t line) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorKind::kFormat,
          "line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  return v;
}

}  // namespace align_detail

// Lines "label<TAB>start<TAB>end"; blank lines are ignored.
inline PhonemeAlignment parse_alignment(std::string_view text, AlignmentSource source = AlignmentSource::kGroundTruth) {
  PhonemeAlignment a;
  a.source = source;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const std::size_t t1 = line.find('\t');
    const std::size_t t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    require(t2 != std::string_view::npos && line.find('\t', t2 + 1) == std::string_view::npos, ErrorKind::kFormat,
            "line " + std::to_string(line_no) + ": expected label<TAB>start<TAB>end");
    require(t1 > 0, ErrorKind::kFormat, "line " + std::to_string(line_no) + ": empty label");
    a.segments.push_back({std::string(line.substr(0, t1)),
                          align_detail::parse_number(line.substr(t1 + 1, t2 - t1 - 1), line_no),
                          align_detail::parse_number(line.substr(t2 + 1), line_no)});
  }
  a.validate();
  return a;
}

inline std::string render_alignment(const PhonemeAlignment& a) {
  std::string out;
  for (const auto& s : a.segments) {
    out += s.label + '\t' + align_detail::shortest(s.start) + '\t' + align_detail::shortest(s.end) + '\n';
  }
  return out;
}

inline PhonemeAlignment load_alignment(const std::filesystem::path& path,
                                       AlignmentSource source = AlignmentSource::kGroundTruth) {
  return parse_alignment(read_file_bytes(path), source);
}

inline void save_alignment(const std::filesystem::path& path, const PhonemeAlignment& a) {
  write_file_bytes(path, render_alignment(a));
}

inline const std::vector<std::string>& default_silence_labels() {
  static const std::vector<std::string> labels{"sp"};
  return labels;
}

// Drops silence segments; the rest keep their times.
inline PhonemeAlignment strip_silence(const PhonemeAlignment& a,
                                      const std::vector<std::string>& silence = default_silence_labels()) {
  PhonemeAlignment out;
  out.source = a.source;
  for (const auto& s : a.segments) {
    if (std::find(silence.begin(), silence.end(), s.label) == silence.end()) out.segments.push_back(s);
  }
  return out;
}

namespace align_detail {

// Pairs (i, j) from a minimum unit-cost edit script. Matches and
// substitutions pair; insertions and deletions do not. Among scripts of equal
// cost: more exact matches, then the smallest sum of weight(i, j) over pairs,
// then the lexicographically smallest pair list.
template <class Weight>
std::vector<std::pair<std::size_t, std::size_t>> pair_labels(const std::vector<std::string>& gt,
                                                             const std::vector<std::string>& gen, Weight weight) {
  const std::size_t n = gt.size(), m = gen.size();
  struct Key {
    int cost = 0;
    int matches = 0;
    double weight = 0.0;
  };
  struct Cell {
    Key key;
    std::size_t first_i = 0, first_j = 0;
    bool has_pair = false;
  };
  auto better = [](const Key& a, const Key& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.matches != b.matches) return a.matches > b.matches;
    return a.weight < b.weight;
  };
  auto same = [](const Key& a, const Key& b) {
    return a.cost == b.cost && a.matches == b.matches && a.weight == b.weight;
  };
  // Suffix table: cell (i, j) aligns gt[i..] with gen[j..].
  std::vector<Cell> dp((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> Cell& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = n + 1; i-- > 0;) {
    for (std::size_t j = m + 1; j-- > 0;) {
      Cell& c = at(i, j);
      if (i == n && j == m) continue;
      std::optional<Key> diag, del, ins;
      if (i < n && j < m) {
        const bool eq = gt[i] == gen[j];
        const Key& k = at(i + 1, j + 1).key;
        diag = Key{k.cost + (eq ? 0 : 1), k.matches + (eq ? 1 : 0), weight(i, j) + k.weight};
      }
      if (i < n) del = Key{at(i + 1, j).key.cost + 1, at(i + 1, j).key.matches, at(i + 1, j).key.weight};
      if (j < m) ins = Key{at(i, j + 1).key.cost + 1, at(i, j + 1).key.matches, at(i, j + 1).key.weight};
      bool init = false;
      for (const auto* k : {&diag, &del, &ins}) {
        if (*k && (!init || better(**k, c.key))) {
          c.key = **k;
          init = true;
        }
      }
      // First pair of the lexicographically smallest optimal continuation.
      if (diag && same(*diag, c.key)) {
        c.has_pair = true;
        c.first_i = i;
        c.first_j = j;
        continue;
      }
      auto offer = [&](const Cell& nb) {
        if (!nb.has_pair) return;
        if (!c.has_pair || std::pair(nb.first_i, nb.first_j) < std::pair(c.first_i, c.first_j)) {
          c.has_pair = true;
          c.first_i = nb.first_i;
          c.first_j = nb.first_j;
        }
      };
      if (del && same(*del, c.key)) offer(at(i + 1, j));
      if (ins && same(*ins, c.key)) offer(at(i, j + 1));
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::size_t i = 0, j = 0;
  while (at(i, j).has_pair) {
    const Cell& c = at(i, j);
    pairs.emplace_back(c.first_i, c.first_j);
    i = c.first_i + 1;
    j = c.first_j + 1;
  }
  return pairs;
}

inline std::vector<std::string> labels_of(const PhonemeAlignment& a) {
  std::vector<std::string> out;
  for (const auto& s : a.segments) out.push_back(s.label);
  return out;
}

}  // namespace align_detail

// Pairs (gt index, gen index) from a minimum unit-cost edit script over the
// label sequences. Matches and substitutions pair; insertions and deletions
// do not. Ties: more exact matches first, then the lexicographically
// smallest pair list.
inline std::vector<std::pair<std::size_t, std::size_t>> match_labels(const std::vector<std::string>& gt,
                                                                     const std::vector<std::string>& gen) {
  return align_detail::pair_labels(gt, gen, [](std::size_t, std::size_t) { return 0.0; });
}

inline std::vector<std::pair<std::size_t, std::size_t>> match_phonemes(const PhonemeAlignment& gt,
                                                                       const PhonemeAlignment& gen) {
  return match_labels(align_detail::labels_of(gt), align_detail::labels_of(gen));
}

// As match_phonemes, but equal-cost, equal-match scripts are first ranked by
// total |center offset|. Index order alone cannot rank them the same way
// after swapping the two sides; the offset sum can.
inline std::vector<std::pair<std::size_t, std::size_t>> match_phonemes_timed(const PhonemeAlignment& gt,
                                                                             const PhonemeAlignment& gen) {
  return align_detail::pair_labels(align_detail::labels_of(gt), align_detail::labels_of(gen),
                                   [&](std::size_t i, std::size_t j) {
                                     return std::abs(gen.segments[j].center() - gt.segments[i].center());
                                   });
}

struct TimeSyncResult {
  double seconds = 0.0;         // mean |center_gen - center_gt| over pairs
  double std_seconds = 0.0;     // population std of the same offsets
  double per_gt_seconds = 0.0;  // sum of offsets / n_gt
  std::size_t n_pairs = 0;
  std::size_t n_gt = 0;
  bool defined = false;                // false when nothing paired
  std::vector<double> signed_offsets;  // center_gen - center_gt per pair
};

// Both alignments are expected to be silence-stripped already.
inline TimeSyncResult timesync(const PhonemeAlignment& gt, const PhonemeAlignment& gen) {
  TimeSyncResult r;
  r.n_gt = gt.size();
  const auto pairs = match_phonemes_timed(gt, gen);
  r.n_pairs = pairs.size();
  if (pairs.empty()) return r;
  r.defined = true;
  double sum = 0.0;
  for (const auto& [i, j] : pairs) {
    const double d = gen.segments[j].center() - gt.segments[i].center();
    r.signed_offsets.push_back(d);
    sum += std::abs(d);
  }
  r.seconds = sum / static_cast<double>(r.n_pairs);
  r.per_gt_seconds = sum / static_cast<double>(r.n_gt);
  double var = 0.0;
  for (double d : r.signed_offsets) var += (std::abs(d) - r.seconds) * (std::abs(d) - r.seconds);
  r.std_seconds = std::sqrt(var / static_cast<double>(r.n_pairs));
  return r;
}

inline PhonemeAlignment shift_alignment(const PhonemeAlignment& a, double delta) {
  PhonemeAlignment out = a;
  for (auto& s : out.segments) {
    s.start += delta;
    s.end += delta;
  }
  return out;
}

// ---------------------------------------------------------------------------
// DTW stand-in aligner

struct DtwPath {
  std::vector<std::pair<std::size_t, std::size_t>> steps;  // (frame in A, frame in B)
  double cost = 0.0;
};

inline double frame_distance(const MelSpec& a, std::size_t i, const MelSpec& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.n_mels(); ++c) {
    const double d = a.values(i, c) - b.values(j, c);
    s += d * d;
  }
  return std::sqrt(s);
}

// Steps (1,0), (0,1), (1,1); cost is the sum of Euclidean frame distances
// along the path. Traceback prefers the diagonal, then a step in A.
inline DtwPath dtw_align(const MelSpec& a, const MelSpec& b) {
  require(a.n_frames() > 0 && b.n_frames() > 0, ErrorKind::kShape, "DTW needs non-empty spectrograms");
  require(a.n_mels() == b.n_mels(), ErrorKind::kShape, "DTW needs matching mel counts");
  const std::size_t n = a.n_frames(), m = b.n_frames();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> acc(n * m, inf);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return acc[i * m + j]; };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double d = frame_distance(a, i, b, j);
      if (i == 0 && j == 0) {
        at(i, j) = d;
        continue;
      }
      double best = inf;
      if (i > 0 && j > 0) best = std::min(best, at(i - 1, j - 1));
      if (i > 0) best = std::min(best, at(i - 1, j));
      if (j > 0) best = std::min(best, at(i, j - 1));
      at(i, j) = d + best;
    }
  }
  DtwPath path;
  path.cost = at(n - 1, m - 1);
  std::size_t i = n - 1, j = m - 1;
  path.steps.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i - 1, j - 1) <= at(i - 1, j) && at(i - 1, j - 1) <= at(i, j - 1)) {
      --i;
      --j;
    } else if (i > 0 && (j == 0 || at(i - 1, j) <= at(i, j - 1))) {
      --i;
    } else {
      --j;
    }
    path.steps.emplace_back(i, j);
  }
  std::reverse(path.steps.begin(), path.steps.end());
  return path;
}

// Maps each segment boundary (as a frame index of A) to the earliest B frame
// paired with it; the end boundary T_A maps to T_B. A segment that collapses
// is given one B frame, pushing later segments right as needed.
inline PhonemeAlignment map_alignment(const DtwPath& path, const PhonemeAlignment& gt, double hop_a, double hop_b) {
  require(!path.steps.empty(), ErrorKind::kShape, "empty DTW path");
  const std::size_t ta = path.steps.back().first + 1, tb = path.steps.back().second + 1;
  std::vector<std::size_t> earliest(ta + 1, std::numeric_limits<std::size_t>::max());
  for (const auto& [i, j] : path.steps) earliest[i] = std::min(earliest[i], j);
  earliest[ta] = tb;
  auto to_frame = [&](double t) {
    const auto f = static_cast<long long>(std::llround(t / hop_a));
    return static_cast<std::size_t>(std::clamp<long long>(f, 0, static_cast<long long>(ta)));
  };
  PhonemeAlignment out;
  out.source = AlignmentSource::kGenerated;
  std::size_t floor_frame = 0;
  for (const auto& s : gt.segments) {
    std::size_t b0 = std::max(earliest[to_frame(s.start)], floor_frame);
    std::size_t b1 = std::max(earliest[to_frame(s.end)], b0 + 1);
    out.segments.push_back({s.label, static_cast<double>(b0) * hop_b, static_cast<double>(b1) * hop_b});
    floor_frame = b1;
  }
  return out;
}

// TimeSync of generated speech whose alignment is unknown: the ground-truth
// segments are carried onto the generated mel frames through DTW. Empty
// generated speech pairs nothing.
inline TimeSyncResult dtw_timesync(const PhonemeAlignment& gt, const MelSpec& gt_mel, const MelSpec& gen_mel) {
  if (gen_mel.n_frames() == 0 || gt_mel.n_frames() == 0) return timesync(gt, PhonemeAlignment{});
  const DtwPath path = dtw_align(gt_mel, gen_mel);
  return timesync(gt, map_alignment(path, gt, gt_mel.frame_hop_seconds, gen_mel.frame_hop_seconds));
}

// Rows "bin_start,bin_end,signed_count,abs_count" over [-max, max].
inline std::string offset_histogram_csv(const std::vector<double>& signed_offsets, double bin_width,
                                        double max_abs) {
  require(bin_width > 0.0 && max_abs > 0.0, ErrorKind::kConfig, "histogram bins must be positive");
  const auto half = static_cast<long long>(std::ceil(max_abs / bin_width - 1e-9));
  const std::size_t n_bins = static_cast<std::size_t>(2 * half);
  std::vector<std::size_t> sgn(n_bins, 0), abs_c(n_bins, 0);
  auto bin_of = [&](double v) {
    const auto b = static_cast<long long>(std::floor(v / bin_width)) + half;
    return static_cast<std::size_t>(std::clamp<long long>(b, 0, static_cast<long long>(n_bins) - 1));
  };
  for (double d : signed_offsets) {
    ++sgn[bin_of(d)];
    ++abs_c[bin_of(std::abs(d))];
  }
  std::ostringstream os;
  os << "bin_start,bin_end,signed_count,abs_count\n";
  for (std::size_t k = 0; k < n_bins; ++k) {
    const double lo = static_cast<double>(static_cast<long long>(k) - half) * bin_width;
    os << align_detail::shortest(lo) << ',' << align_detail::shortest(lo + bin_width) << ',' << sgn[k] << ','
       << abs_c[k] << '\n';
  }
  return os.str();
}

}  // namespace visatronic

#pragma once

// Brute-force references for label pairing and DTW.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "visatronic/timesync.hpp"

namespace timesync_oracle {

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

struct Script {
  int cost = std::numeric_limits<int>::max();
  int matches = 0;
  Pairs pairs;
};

// Order of preference: lower cost, then more exact matches, then the
// lexicographically smallest pair list.
inline bool preferred(const Script& a, const Script& b) {
  if (a.cost != b.cost) return a.cost < b.cost;
  if (a.matches != b.matches) return a.matches > b.matches;
  return a.pairs < b.pairs;
}

// Enumerates every edit script (match, substitute, delete, insert at each
// step) and keeps the preferred one. Branches whose partial cost already
// exceeds the best complete cost are cut; cost never decreases along a
// script, so no optimum is lost.
inline Script best_script(const std::vector<int>& gt, const std::vector<int>& gen) {
  Script best, cur;
  cur.cost = 0;
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t i, std::size_t j) {
    if (cur.cost > best.cost) return;
    if (i == gt.size() && j == gen.size()) {
      if (preferred(cur, best)) best = cur;
      return;
    }
    if (i < gt.size() && j < gen.size()) {
      const bool eq = gt[i] == gen[j];
      cur.cost += eq ? 0 : 1;
      cur.matches += eq ? 1 : 0;
      cur.pairs.emplace_back(i, j);
      walk(i + 1, j + 1);
      cur.pairs.pop_back();
      cur.cost -= eq ? 0 : 1;
      cur.matches -= eq ? 1 : 0;
    }
    if (i < gt.size()) {
      ++cur.cost;
      walk(i + 1, j);
      --cur.cost;
    }
    if (j < gen.size()) {
      ++cur.cost;
      walk(i, j + 1);
      --cur.cost;
    }
  };
  walk(0, 0);
  return best;
}

// Pairing depends on label equality only, so sequences that differ by a
// renaming of symbols share one oracle result. Key: relabel by first
// appearance across gt then gen.
inline std::pair<std::vector<int>, std::vector<int>> canonical(const std::vector<int>& gt, const std::vector<int>& gen) {
  std::map<int, int> rename;
  auto map_seq = [&](const std::vector<int>& s) {
    std::vector<int> out;
    for (int x : s) {
      auto it = rename.find(x);
      if (it == rename.end()) it = rename.emplace(x, static_cast<int>(rename.size())).first;
      out.push_back(it->second);
    }
    return out;
  };
  auto a = map_seq(gt);
  auto b = map_seq(gen);
  return {a, b};
}

inline std::vector<std::vector<int>> all_sequences(std::size_t max_len, int alphabet) {
  std::vector<std::vector<int>> out{{}};
  std::size_t begin = 0;
  for (std::size_t len = 1; len <= max_len; ++len) {
    const std::size_t end = out.size();
    for (std::size_t k = begin; k < end; ++k) {
      if (out[k].size() != len - 1) continue;
      for (int s = 0; s < alphabet; ++s) {
        auto v = out[k];
        v.push_back(s);
        out.push_back(std::move(v));
      }
    }
    begin = end;
  }
  return out;
}

inline std::vector<std::string> labels(const std::vector<int>& s) {
  static const char* names[] = {"AA", "B", "CH", "D", "EH", "F"};
  std::vector<std::string> out;
  for (int x : s) out.emplace_back(names[x]);
  return out;
}

struct ExhaustiveReport {
  std::size_t pairs_checked = 0;
  std::size_t oracle_runs = 0;
  std::size_t mismatches = 0;
  std::string first_mismatch;
};

// match_labels against the oracle on every (gt, gen) pair of sequences up
// to max_len over the alphabet.
inline ExhaustiveReport exhaustive_match_check(std::size_t max_len, int alphabet) {
  ExhaustiveReport r;
  const auto seqs = all_sequences(max_len, alphabet);
  std::map<std::pair<std::vector<int>, std::vector<int>>, Pairs> cache;
  for (const auto& a : seqs) {
    const auto la = labels(a);
    for (const auto& b : seqs) {
      const auto key = canonical(a, b);
      auto it = cache.find(key);
      if (it == cache.end()) {
        it = cache.emplace(key, best_script(key.first, key.second).pairs).first;
        ++r.oracle_runs;
      }
      const auto got = visatronic::match_labels(la, labels(b));
      ++r.pairs_checked;
      if (got != it->second) {
        if (r.mismatches++ == 0) {
          r.first_mismatch = "len " + std::to_string(a.size()) + "x" + std::to_string(b.size());
        }
      }
    }
  }
  return r;
}

// Minimum DTW cost by enumerating every monotone path (small inputs only).
inline double brute_force_dtw_cost(const visatronic::MelSpec& a, const visatronic::MelSpec& b) {
  const std::size_t n = a.n_frames(), m = b.n_frames();
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
    acc += visatronic::frame_distance(a, i, b, j);
    if (i == n - 1 && j == m - 1) {
      best = std::min(best, acc);
      return;
    }
    if (i + 1 < n && j + 1 < m) walk(i + 1, j + 1, acc);
    if (i + 1 < n) walk(i + 1, j, acc);
    if (j + 1 < m) walk(i, j + 1, acc);
  };
  walk(0, 0, 0.0);
  return best;
}

// Same minimum via memoized recursion from the far corner.
inline double recursive_dtw_cost(const visatronic::MelSpec& a, const visatronic::MelSpec& b) {
  const std::size_t n = a.n_frames(), m = b.n_frames();
  std::vector<double> memo(n * m, -1.0);
  std::function<double(std::size_t, std::size_t)> cost = [&](std::size_t i, std::size_t j) -> double {
    double& slot = memo[i * m + j];
    if (slot >= 0.0) return slot;
    const double d = visatronic::frame_distance(a, i, b, j);
    if (i == 0 && j == 0) return slot = d;
    double best = std::numeric_limits<double>::infinity();
    if (i > 0) best = std::min(best, cost(i - 1, j));
    if (j > 0) best = std::min(best, cost(i, j - 1));
    if (i > 0 && j > 0) best = std::min(best, cost(i - 1, j - 1));
    return slot = d + best;
  };
  return cost(n - 1, m - 1);
}

}  // namespace timesync_oracle

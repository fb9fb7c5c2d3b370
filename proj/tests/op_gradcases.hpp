#pragma once

// One finite-difference case per differentiable tensor op, shared by the
// unit suite and the acceptance run.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "visatronic/tensor.hpp"

namespace gradcheck {

struct Case {
  std::string name;
  std::function<Tensor<double>()> loss;
  std::vector<Tensor<double>> params;
};

inline visatronic::tc::AttentionMask causal_mask(std::size_t n) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) (*m)[i * n + j] = 1;
  }
  return m;
}

inline std::vector<Case> op_cases(std::uint64_t seed = 17) {
  using namespace visatronic::tc;
  std::mt19937_64 rng(seed);
  auto rt = [&](Shape s, double scale = 1.0) { return random_tensor(std::move(s), rng, scale); };
  std::vector<Case> cases;

  auto a = rt({3, 4}), b = rt({3, 4});
  cases.push_back({"add", [=] { return project(add(a, b)); }, {a, b}});
  cases.push_back({"sub", [=] { return project(sub(a, b)); }, {a, b}});
  cases.push_back({"mul", [=] { return project(mul(a, b)); }, {a, b}});
  cases.push_back({"scale", [=] { return project(scale(a, -1.7)); }, {a}});

  auto x3 = rt({2, 3, 4}), bias4 = rt({4});
  cases.push_back({"add_bias", [=] { return project(add_bias(x3, bias4)); }, {x3, bias4}});

  auto g = rt({5, 6}, 2.0);
  cases.push_back({"gelu", [=] { return project(gelu(g)); }, {g}});

  auto d = rt({4, 5});
  cases.push_back({"dropout", [=] {
                     std::mt19937_64 r(3);
                     return project(dropout(d, 0.3, r));
                   },
                   {d}});

  auto s = rt({3, 5});
  cases.push_back({"sum", [=] { return scale(sum(mul(s, s)), 0.3); }, {s}});
  cases.push_back({"mean", [=] { return mean(mul(s, s)); }, {s}});

  auto gr = rt({12, 3});
  cases.push_back({"group_reduce_sum", [=] { return project(group_reduce(gr, 4, Reduce::kSum)); }, {gr}});
  cases.push_back({"group_reduce_mean", [=] { return project(group_reduce(gr, 4, Reduce::kMean)); }, {gr}});
  cases.push_back({"group_reduce_max", [=] { return project(group_reduce(gr, 3, Reduce::kMax)); }, {gr}});

  auto m = rt({3, 4}), n = rt({3, 2}), r1 = rt({1, 4});
  cases.push_back({"reshape", [=] { return project(reshape(m, {2, 6})); }, {m}});
  cases.push_back({"transpose", [=] { return project(transpose(m)); }, {m}});
  cases.push_back({"concat_cols", [=] { return project(concat<double>({m, n}, 1)); }, {m, n}});
  cases.push_back({"concat_rows", [=] { return project(concat<double>({m, r1}, 0)); }, {m, r1}});
  cases.push_back({"slice_cols", [=] { return project(slice(m, 1, 1, 2)); }, {m}});
  cases.push_back({"slice_rows", [=] { return project(slice(m, 0, 2, 1)); }, {m}});

  auto table = rt({5, 3});
  cases.push_back({"embedding_lookup", [=] { return project(embedding_lookup(table, std::vector<int>{4, 0, 4, 2})); },
                   {table}});
  auto gx = rt({4, 6});
  cases.push_back({"gather", [=] { return project(gather(gx, std::vector<int>{5, 0, 3, 3})); }, {gx}});

  auto ma = rt({4, 5}), mb = rt({5, 3}), mbias = rt({3});
  cases.push_back({"matmul", [=] { return project(matmul(ma, mb)); }, {ma, mb}});
  cases.push_back({"linear", [=] { return project(linear(ma, mb, mbias)); }, {ma, mb, mbias}});

  auto sm = rt({4, 7}, 2.0);
  cases.push_back({"softmax", [=] { return project(softmax(sm)); }, {sm}});
  cases.push_back({"log_softmax", [=] { return project(log_softmax(sm)); }, {sm}});

  auto lx = rt({4, 8}, 1.5), lg = rt({8}), lb = rt({8});
  cases.push_back({"layer_norm", [=] { return project(layer_norm(lx, lg, lb)); }, {lx, lg, lb}});

  auto rx = rt({5, 8});
  cases.push_back({"rope", [=] {
                     const std::vector<std::int64_t> pos{0, 3, 7, 7, 120};
                     return project(rope(rx, pos, 2, 10000.0));
                   },
                   {rx}});

  auto q = rt({6, 8}), k = rt({6, 8}), v = rt({6, 8});
  const auto mask = causal_mask(6);
  cases.push_back({"attention", [=] { return project(attention(q, k, v, 2, mask)); }, {q, k, v}});

  auto x = rt({4, 6}), w1 = rt({6, 10}, 0.4), b1 = rt({10}), w2 = rt({10, 5}, 0.3), b2 = rt({5});
  cases.push_back({"composed_mlp", [=] {
                     const std::vector<int> targets{0, 4, 2, 2};
                     const auto h = gelu(linear(x, w1, b1));
                     return scale(sum(gather(log_softmax(linear(h, w2, b2)), targets)), -0.25);
                   },
                   {x, w1, b1, w2, b2}});
  return cases;
}

}  // namespace gradcheck

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mhelab/attention.hpp"
#include "mhelab/gradcheck.hpp"

using namespace mhelab;
using Td = Tensor<double>;
using AV = AttentionVariant;

namespace {

Td randn(std::vector<std::size_t> shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return Td::randn(std::move(shape), rng, sd);
}

double max_abs_diff(const Td& a, const Td& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("init_params scalar counts and determinism") {
  const auto mhe = init_attention_params<double>(AV::mhe_mul, 2, 3, std::uint64_t(1));
  CHECK(mhe.param_count() == 108);  // 3*(6*3) + 2*3*3 + 36

  const auto sha = init_attention_params<double>(AV::sha, 1, 2, std::uint64_t(1));
  CHECK(sha.param_count() == 16);  // 3*(2*2) + 4

  const auto p1 = init_attention_params<double>(AV::mha, 3, 4, std::uint64_t(9));
  const auto p2 = init_attention_params<double>(AV::mha, 3, 4, std::uint64_t(9));
  const auto n1 = p1.named_params();
  const auto n2 = p2.named_params();
  REQUIRE(n1.size() == n2.size());
  for (std::size_t i = 0; i < n1.size(); ++i)
    for (std::size_t j = 0; j < n1[i].second.numel(); ++j)
      CHECK(n1[i].second.at(j) == n2[i].second.at(j));

  CHECK_THROWS_AS(init_attention_params<double>(AV::mha, 0, 4, std::uint64_t(1)), ContractError);
}

TEST_CASE("scalar count always equals accounting plus output projection") {
  for (AV v : kAllVariants)
    for (std::size_t n = 1; n <= 8; ++n)
      for (std::size_t d = 1; d <= 8; ++d) {
        const auto p = init_attention_params<double>(v, n, d, std::uint64_t(3));
        const auto want = accounting::attention_params(v, std::int64_t(n), std::int64_t(d)) +
                          accounting::output_proj_params(std::int64_t(n), std::int64_t(d));
        CHECK(std::int64_t(p.param_count()) == want);
      }
}

TEST_CASE("scaled_dot_attention basics") {
  SUBCASE("single position returns V") {
    const Td q = randn({1, 4}, 1);
    const Td k = randn({1, 4}, 2);
    const Td v = randn({1, 4}, 3);
    const Td o = scaled_dot_attention(q, k, v, false);
    CHECK(max_abs_diff(o, v) < 1e-15);
  }

  SUBCASE("identical keys give uniform weights, causal keeps row 0 = V row 0") {
    const std::size_t L = 4, d = 3;
    Td k = Td::zeros({L, d});
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < d; ++j) k.mut(t, j) = 0.7;  // all rows identical
    const Td q = randn({L, d}, 5);
    const Td v = randn({L, d}, 6);
    const Td o = scaled_dot_attention(q, k, v, false);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0;
        for (std::size_t s = 0; s < L; ++s) mean += v.at(s, j);
        mean /= double(L);
        CHECK(o.at(t, j) == doctest::Approx(mean).epsilon(1e-12));
      }
    const Td oc = scaled_dot_attention(q, k, v, true);
    for (std::size_t j = 0; j < d; ++j) CHECK(oc.at(0, j) == doctest::Approx(v.at(0, j)));
  }

  SUBCASE("L=2 d=1 hand computation") {
    const Td q = Td::from({2, 1}, {1, 2});
    const Td k = Td::from({2, 1}, {1, 0});
    const Td v = Td::from({2, 1}, {3, 5});
    const Td o = scaled_dot_attention(q, k, v, false);
    // weights row 0 = softmax([1, 0]) = [e/(1+e), 1/(1+e)], so
    // output row 0 = (3e+5)/(1+e) = 3.53788...
    const double e = std::exp(1.0);
    CHECK(o.at(0, 0) == doctest::Approx((3 * e + 5) / (1 + e)).epsilon(1e-12));
    const double w1 = std::exp(2.0) / (std::exp(2.0) + 1.0);  // row 1: softmax([2, 0])
    CHECK(o.at(1, 0) == doctest::Approx(3 * w1 + 5 * (1 - w1)).epsilon(1e-12));
  }

  SUBCASE("output rows stay inside the componentwise hull of V") {
    for (std::uint64_t seed : {10u, 11u, 12u}) {
      const std::size_t L = 6, d = 4;
      const Td q = randn({L, d}, seed, 2.0);
      const Td k = randn({L, d}, seed + 100, 2.0);
      const Td v = randn({L, d}, seed + 200, 2.0);
      const Td o = scaled_dot_attention(q, k, v, false);
      for (std::size_t j = 0; j < d; ++j) {
        double lo = v.at(0, j), hi = v.at(0, j);
        for (std::size_t s = 1; s < L; ++s) {
          lo = std::min(lo, v.at(s, j));
          hi = std::max(hi, v.at(s, j));
        }
        for (std::size_t t = 0; t < L; ++t) {
          CHECK(o.at(t, j) >= lo - 1e-12);
          CHECK(o.at(t, j) <= hi + 1e-12);
        }
      }
    }
  }

  SUBCASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(scaled_dot_attention(randn({2, 3}, 1), randn({2, 4}, 2), randn({2, 3}, 3),
                                         false),
                    DimError);
  }
}

TEST_CASE("apply_head_embedding") {
  const Td m = Td::from({1, 2}, {1, 2});
  const Td zero = Td::zeros({2});
  CHECK(max_abs_diff(apply_head_embedding(AV::mhe_add, m, zero), m) == 0);
  CHECK(max_abs_diff(apply_head_embedding(AV::mhe_mul, m, zero), m) == 0);
  const Td e = Td::from({2}, {1, -0.5});
  const Td r = apply_head_embedding(AV::mhe_mul, m, e);
  CHECK(r.at(0, 0) == 2);
  CHECK(r.at(0, 1) == 1);
  CHECK_THROWS_AS(apply_head_embedding(AV::mha, m, e), ContractError);
  CHECK_THROWS_AS(apply_head_embedding(AV::mhe_add, m, Td::zeros({3})), DimError);
}

TEST_CASE("zero embeddings reduce both MHE variants to SHA") {
  const std::size_t n = 3, d = 2, L = 5;
  for (AV v : {AV::mhe_add, AV::mhe_mul}) {
    auto mhe = init_attention_params<double>(v, n, d, std::uint64_t(77));
    for (auto* vec : {&mhe.eq, &mhe.ek, &mhe.ev})
      for (auto& e : *vec)
        for (std::size_t i = 0; i < e.numel(); ++i) e.mut(i) = 0.0;

    auto sha = init_attention_params<double>(AV::sha, n, d, std::uint64_t(77));
    auto copy_into = [](Td& dst, const Td& src) {
      for (std::size_t i = 0; i < dst.numel(); ++i) dst.mut(i) = src.at(i);
    };
    copy_into(sha.wq[0], mhe.wq[0]);
    copy_into(sha.wk[0], mhe.wk[0]);
    copy_into(sha.wv[0], mhe.wv[0]);
    copy_into(sha.wo, mhe.wo);

    for (bool causal : {false, true})
      for (std::uint64_t seed : {1u, 2u, 3u}) {
        const Td x = randn({L, n * d}, seed);
        const Td a = attention_forward(mhe, x, causal);
        const Td b = attention_forward(sha, x, causal);
        CHECK(max_abs_diff(a, b) < 1e-12);
        // All head outputs are identical to the seed single-head output.
        const Td heads = attention_heads(mhe, x, causal);
        for (std::size_t h = 1; h < n; ++h)
          for (std::size_t t = 0; t < L; ++t)
            for (std::size_t j = 0; j < d; ++j)
              CHECK(std::abs(heads.at(t, h * d + j) - heads.at(t, j)) < 1e-15);
      }
  }
}

TEST_CASE("generic nonzero embeddings give diverse heads") {
  const std::size_t n = 4, d = 3, L = 5;
  for (AV v : {AV::mhe_add, AV::mhe_mul}) {
    const auto p = init_attention_params<double>(v, n, d, std::uint64_t(5));
    const Td x = randn({L, n * d}, 1312);
    const Td heads = attention_heads(p, x, false);
    double best = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t t = 0; t < L; ++t)
          for (std::size_t c = 0; c < d; ++c)
            best = std::max(best, std::abs(heads.at(t, i * d + c) - heads.at(t, j * d + c)));
    CHECK(best > 0);
  }
}

TEST_CASE("MHA n=2 d_h=1 L=2 matches a scalar brute-force oracle") {
  const std::size_t n = 2, d = 1, L = 2, dm = 2;
  auto p = init_attention_params<double>(AV::mha, n, d, std::uint64_t(3));
  const Td x = randn({L, dm}, 17);

  // Oracle: every projection and attention head via explicit scalar loops.
  auto proj = [&](const Td& w, std::size_t t) {
    double s = 0;
    for (std::size_t c = 0; c < dm; ++c) s += x.at(t, c) * w.at(c, 0);
    return s;
  };
  double concat[L][dm];
  for (std::size_t h = 0; h < n; ++h) {
    double q[L], k[L], v[L];
    for (std::size_t t = 0; t < L; ++t) {
      q[t] = proj(p.wq[h], t);
      k[t] = proj(p.wk[h], t);
      v[t] = proj(p.wv[h], t);
    }
    for (std::size_t t = 0; t < L; ++t) {
      double w0 = std::exp(q[t] * k[0]);  // d_h = 1 so sqrt(d_h) = 1
      double w1 = std::exp(q[t] * k[1]);
      concat[t][h] = (w0 * v[0] + w1 * v[1]) / (w0 + w1);
    }
  }
  double want[L][dm];
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < dm; ++c) {
      want[t][c] = 0;
      for (std::size_t h = 0; h < dm; ++h) want[t][c] += concat[t][h] * p.wo.at(h, c);
    }

  const Td got = attention_forward(p, x, false);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < dm; ++c)
      CHECK(got.at(t, c) == doctest::Approx(want[t][c]).epsilon(1e-12));
}

TEST_CASE("causal masking: position t ignores later rows (pre-output-projection)") {
  const std::size_t n = 2, d = 3, L = 5;
  for (AV v : kAllVariants) {
    const auto p = init_attention_params<double>(v, n, d, std::uint64_t(21));
    Td x = randn({L, n * d}, 500);
    const Td base = attention_heads(p, x, true);
    for (std::size_t t = 1; t < L; ++t) {
      Td xp = Td::from(x.shape(), {x.values().begin(), x.values().end()});
      for (std::size_t c = 0; c < n * d; ++c) xp.mut(t, c) += 0.5 + double(c);
      const Td pert = attention_heads(p, xp, true);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < n * d; ++c)
          CHECK(std::abs(pert.at(r, c) - base.at(r, c)) < 1e-12);
    }
  }
}

TEST_CASE("gradients flow into every learnable tensor of every variant") {
  const std::size_t n = 2, d = 3, L = 4;
  for (AV v : kAllVariants) {
    auto p = init_attention_params<double>(v, n, d, std::uint64_t(33), 0.5);
    Td x = randn({L, n * d}, 900);
    x.set_requires_grad(true);
    const Td cotangent = randn({L, n * d}, 901);
    auto loss = [&]() { return sum(mul(attention_forward(p, x, false), cotangent)); };
    gradcheck::NamedParams named;
    for (auto& [name, t] : p.named_params()) named.emplace_back(name, t);
    named.emplace_back("x", x);
    const auto res = gradcheck::check(loss, named);
    for (const auto& r : res) {
      INFO(std::string(variant_name(v)), "/", r.name, " ", r.worst_entry);
      CHECK(r.ok);
      CHECK(r.checked > 0);
    }
  }
}

TEST_CASE("batched attention equals per-sequence attention") {
  const std::size_t n = 2, d = 2, L = 3, B = 4;
  const auto p = init_attention_params<double>(AV::mqa, n, d, std::uint64_t(8));
  const Td xb = randn({B * L, n * d}, 41);
  const Td batched = attention_forward(p, xb, true, B);
  for (std::size_t b = 0; b < B; ++b) {
    Td x1 = Td::zeros({L, n * d});
    for (std::size_t i = 0; i < L * n * d; ++i) x1.mut(i) = xb.at(b * L * n * d + i);
    const Td single = attention_forward(p, x1, true);
    for (std::size_t i = 0; i < L * n * d; ++i)
      CHECK(std::abs(single.at(i) - batched.at(b * L * n * d + i)) < 1e-13);
  }
}

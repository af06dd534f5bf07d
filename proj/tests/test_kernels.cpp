#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mhelab/kernels.hpp"

using namespace mhelab;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

// Independent triple-loop oracle, deliberately naive.
template <typename T>
std::vector<T> gemm_oracle(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
                           const std::vector<T>& a, const std::vector<T>& b, T beta,
                           std::vector<T> c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta ? a[p * m + i] : a[i * k + p];
        const T bv = tb ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = beta * c[i * n + j] + alpha * acc;
    }
  return c;
}

}  // namespace

TEST_CASE("scalar gemm matches triple-loop oracle for all transpose modes") {
  std::mt19937_64 rng(7);
  for (bool ta : {false, true})
    for (bool tb : {false, true})
      for (auto [m, n, k] : {std::array<std::size_t, 3>{3, 4, 5},
                             std::array<std::size_t, 3>{1, 7, 2},
                             std::array<std::size_t, 3>{9, 1, 6},
                             std::array<std::size_t, 3>{17, 33, 12}}) {
        auto a = random_vec<double>(m * k, rng);
        auto b = random_vec<double>(k * n, rng);
        auto c = random_vec<double>(m * n, rng);
        auto want = gemm_oracle(ta, tb, m, n, k, 0.5, a, b, 0.25, c);
        auto got = c;
        kern::scalar::gemm(ta, tb, m, n, k, 0.5, a.data(), b.data(), 0.25, got.data());
        for (std::size_t i = 0; i < m * n; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      }
}

#if MHELAB_X86

TEST_CASE("avx2 kernels agree with scalar reference") {
  if (!kern::cpu_has_avx2()) return;
  std::mt19937_64 rng(11);

  SUBCASE("gemm fp32/fp64") {
    for (bool ta : {false, true})
      for (bool tb : {false, true})
        for (auto [m, n, k] :
             {std::array<std::size_t, 3>{8, 8, 8}, std::array<std::size_t, 3>{5, 37, 13},
              std::array<std::size_t, 3>{64, 33, 19}, std::array<std::size_t, 3>{2, 70, 40}}) {
          auto a64 = random_vec<double>(m * k, rng);
          auto b64 = random_vec<double>(k * n, rng);
          std::vector<double> cs(m * n, 0.0), cv(m * n, 0.0);
          kern::scalar::gemm(ta, tb, m, n, k, 1.0, a64.data(), b64.data(), 0.0, cs.data());
          kern::avx2::gemm(ta, tb, m, n, k, 1.0, a64.data(), b64.data(), 0.0, cv.data());
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(cv[i] == doctest::Approx(cs[i]).epsilon(1e-13));

          std::vector<float> a32(a64.begin(), a64.end()), b32(b64.begin(), b64.end());
          std::vector<float> cs32(m * n, 0.f), cv32(m * n, 0.f);
          kern::scalar::gemm(ta, tb, m, n, k, 1.f, a32.data(), b32.data(), 0.f, cs32.data());
          kern::avx2::gemm(ta, tb, m, n, k, 1.f, a32.data(), b32.data(), 0.f, cv32.data());
          for (std::size_t i = 0; i < m * n; ++i)
            CHECK(cv32[i] == doctest::Approx(cs32[i]).epsilon(1e-4));
        }
  }

  SUBCASE("softmax forward and backward") {
    const std::size_t rows = 9, cols = 37;
    auto x = random_vec<float>(rows * cols, rng, -5.f, 5.f);
    std::vector<float> ys(rows * cols), yv(rows * cols);
    kern::scalar::softmax_rows(x.data(), ys.data(), rows, cols);
    kern::avx2::softmax_rows(x.data(), yv.data(), rows, cols);
    for (std::size_t i = 0; i < ys.size(); ++i) CHECK(yv[i] == doctest::Approx(ys[i]).epsilon(1e-6));

    auto dy = random_vec<float>(rows * cols, rng);
    std::vector<float> dxs(rows * cols, 0.f), dxv(rows * cols, 0.f);
    kern::scalar::softmax_rows_grad(ys.data(), dy.data(), dxs.data(), rows, cols);
    kern::avx2::softmax_rows_grad(ys.data(), dy.data(), dxv.data(), rows, cols);
    for (std::size_t i = 0; i < dxs.size(); ++i)
      CHECK(dxv[i] == doctest::Approx(dxs[i]).epsilon(1e-4));
  }

  SUBCASE("elementwise, reductions, adamw") {
    const std::size_t n = 1003;  // not a multiple of the vector width
    auto a = random_vec<float>(n, rng);
    auto b = random_vec<float>(n, rng);
    std::vector<float> ys(n), yv(n);

    kern::scalar::add(a.data(), b.data(), ys.data(), n);
    kern::avx2::add(a.data(), b.data(), yv.data(), n);
    CHECK(ys == yv);
    kern::scalar::mul(a.data(), b.data(), ys.data(), n);
    kern::avx2::mul(a.data(), b.data(), yv.data(), n);
    CHECK(ys == yv);

    CHECK(kern::avx2::sum(a.data(), n) == doctest::Approx(kern::scalar::sum(a.data(), n)).epsilon(1e-4));
    CHECK(kern::avx2::dot(a.data(), b.data(), n) ==
          doctest::Approx(kern::scalar::dot(a.data(), b.data(), n)).epsilon(1e-4));
    CHECK(kern::avx2::sumsq(a.data(), n) ==
          doctest::Approx(kern::scalar::sumsq(a.data(), n)).epsilon(1e-4));

    const std::size_t rows = 13, cols = 77;
    auto m2 = random_vec<float>(rows * cols, rng);
    std::vector<float> cs(cols, 0.5f), cv(cols, 0.5f);
    kern::scalar::colsum_accum(m2.data(), cs.data(), rows, cols);
    kern::avx2::colsum_accum(m2.data(), cv.data(), rows, cols);
    for (std::size_t i = 0; i < cols; ++i) CHECK(cv[i] == doctest::Approx(cs[i]).epsilon(1e-5));

    auto v = random_vec<float>(cols, rng);
    std::vector<float> rs(rows * cols), rv(rows * cols);
    kern::scalar::add_rowvec(m2.data(), v.data(), rs.data(), rows, cols);
    kern::avx2::add_rowvec(m2.data(), v.data(), rv.data(), rows, cols);
    CHECK(rs == rv);
    kern::scalar::mul_rowvec(m2.data(), v.data(), rs.data(), rows, cols);
    kern::avx2::mul_rowvec(m2.data(), v.data(), rv.data(), rows, cols);
    CHECK(rs == rv);

    auto p0 = random_vec<float>(n, rng);
    auto g = random_vec<float>(n, rng);
    auto ms = random_vec<float>(n, rng, 0.f, 0.1f);
    auto vs = random_vec<float>(n, rng, 0.f, 0.1f);
    auto pv = p0;
    auto mv = ms;
    auto vv = vs;
    kern::scalar::adamw(p0.data(), g.data(), ms.data(), vs.data(), n, 1e-3f, 0.9f, 0.999f, 1e-8f,
                        0.01f, 1.f / (1.f - 0.9f), 1.f / (1.f - 0.999f));
    kern::avx2::adamw(pv.data(), g.data(), mv.data(), vv.data(), n, 1e-3f, 0.9f, 0.999f, 1e-8f,
                      0.01f, 1.f / (1.f - 0.9f), 1.f / (1.f - 0.999f));
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(pv[i] == doctest::Approx(p0[i]).epsilon(1e-5));
      CHECK(mv[i] == doctest::Approx(ms[i]).epsilon(1e-5));
      CHECK(vv[i] == doctest::Approx(vs[i]).epsilon(1e-5));
    }
  }
}

#endif  // MHELAB_X86

TEST_CASE("forced isa switches the dispatch table") {
  const auto before = kern::active_isa();
  kern::force_isa(kern::Isa::scalar);
  CHECK(kern::active_isa() == kern::Isa::scalar);
  std::vector<float> a{1.f, 2.f, 3.f}, b{4.f, 5.f, 6.f}, y(3);
  kern::add(a.data(), b.data(), y.data(), 3);
  CHECK(y == std::vector<float>{5.f, 7.f, 9.f});
  kern::force_isa(before);
  CHECK(kern::active_isa() == before);
}
